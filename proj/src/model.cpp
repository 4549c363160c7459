#include "flowact/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace flowact {

namespace {

std::vector<int> iota_positions(int start, int count) {
  std::vector<int> pos(count);
  for (int i = 0; i < count; ++i) pos[i] = start + i;
  return pos;
}

// Replicates a vector tensor into (rows, width); a constant w.r.t. the graph.
Tensor tile_rows(const Tensor& v, int rows) {
  const int width = static_cast<int>(v.numel());
  std::vector<double> data(static_cast<size_t>(rows) * width);
  for (int i = 0; i < rows; ++i) {
    std::memcpy(data.data() + static_cast<size_t>(i) * width, v.data(), sizeof(double) * width);
  }
  return Tensor::from_data({rows, width}, std::move(data));
}

Tensor geglu_mlp(const Tensor& x, const Tensor& gate_w, const Tensor& up_w,
                 const Tensor& down_w) {
  return matmul(mul(gelu(matmul(x, gate_w)), matmul(x, up_w)), down_w);
}

// x * (1 + scale) + shift with (1, w) modulation rows.
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_row,
                const Tensor& ones_row) {
  return add(mul(x, add(scale_row, ones_row)), shift);
}

}  // namespace

// ---- ModelConfig -----------------------------------------------------------

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("model config: " + what);
  };
  require(variant == "two-expert" || variant == "small",
          "variant must be 'two-expert' or 'small'");
  require(prefix_width > 0 && expert_width > 0 && depth > 0, "widths and depth must be positive");
  require(num_heads > 0 && num_kv_heads > 0 && head_dim > 0, "head geometry must be positive");
  require(num_heads % num_kv_heads == 0, "num_heads must be divisible by num_kv_heads");
  require(head_dim % 2 == 0, "head_dim must be even (rotary pairs)");
  require(expert_width % 2 == 0, "expert_width must be even (timestep encoding)");
  require(horizon >= 1, "horizon must be >= 1");
  require(action_dim >= 1, "action_dim must be >= 1");
  require(max_images >= 1 && max_images <= 3, "max_images must be in 1..3");
  require(image_size > 0 && patch_size > 0 && image_size % patch_size == 0,
          "image_size must be a multiple of patch_size");
  require(vocab_size > 0 && vocab_size <= 64, "vocab_size must be in 1..64");
  require(prefix_mlp_dim > 0 && expert_mlp_dim > 0, "mlp dims must be positive");
}

// ---- ParamStore ------------------------------------------------------------

Tensor ParamStore::create(const std::string& name, std::vector<int> shape, Rng& rng,
                          double stddev) {
  if (has(name)) throw std::invalid_argument("param store: duplicate name " + name);
  Tensor t = Tensor::randn(std::move(shape), rng, stddev, true);
  entries_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::create_full(const std::string& name, std::vector<int> shape, double value) {
  if (has(name)) throw std::invalid_argument("param store: duplicate name " + name);
  Tensor t = Tensor::constant(std::move(shape), value);
  t.set_requires_grad(true);
  entries_.emplace_back(name, t);
  return t;
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::invalid_argument("param store: unknown name " + name);
}

bool ParamStore::has(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return true;
  }
  return false;
}

int64_t ParamStore::total_params() const {
  int64_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

int64_t ParamStore::count_with_prefix(const std::string& name_prefix) const {
  int64_t n = 0;
  for (const auto& [name, t] : entries_) {
    if (name.rfind(name_prefix, 0) == 0) n += t.numel();
  }
  return n;
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& [name, t] : entries_) out.push_back(t);
  return out;
}

// ---- construction ----------------------------------------------------------

PolicyModel::PolicyModel(ModelConfig config, uint64_t seed) : cfg_(std::move(config)) {
  cfg_.validate();
  Rng rng(seed);
  if (cfg_.variant == "small") {
    build_small(rng);
  } else {
    build_two_expert(rng);
  }
}

namespace {

double fan_in_std(int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace

void PolicyModel::build_two_expert(Rng& rng) {
  const int pw = cfg_.prefix_width, w = cfg_.expert_width;
  const int ad = cfg_.attn_dim(), kv = cfg_.kv_dim();
  const int d = cfg_.action_dim, px = cfg_.patch_pixels();
  const double resid = 1.0 / std::sqrt(2.0 * cfg_.depth);

  params_.create("prefix.patch_proj.w", {px, pw}, rng, fan_in_std(px));
  params_.create_full("prefix.patch_proj.b", {pw}, 0.0);
  params_.create("prefix.tok_embed", {cfg_.vocab_size, pw}, rng, 0.02);

  params_.create("action.state_proj.w", {d, w}, rng, fan_in_std(d));
  params_.create_full("action.state_proj.b", {w}, 0.0);
  params_.create("action.embed.w1", {d, w}, rng, fan_in_std(d));
  params_.create("action.embed.w2", {2 * w, w}, rng, fan_in_std(2 * w));
  params_.create("action.embed.w3", {w, w}, rng, fan_in_std(w));

  struct ExpertDims {
    const char* name;
    int width;
    int mlp;
  };
  for (const ExpertDims e : {ExpertDims{"prefix", pw, cfg_.prefix_mlp_dim},
                             ExpertDims{"action", w, cfg_.expert_mlp_dim}}) {
    for (int l = 0; l < cfg_.depth; ++l) {
      const std::string base = std::string(e.name) + ".l" + std::to_string(l) + ".";
      params_.create_full(base + "attn_norm", {e.width}, 1.0);
      params_.create(base + "wq", {e.width, ad}, rng, fan_in_std(e.width));
      params_.create(base + "wk", {e.width, kv}, rng, fan_in_std(e.width));
      params_.create(base + "wv", {e.width, kv}, rng, fan_in_std(e.width));
      params_.create(base + "wo", {ad, e.width}, rng, fan_in_std(ad) * resid);
      params_.create_full(base + "mlp_norm", {e.width}, 1.0);
      params_.create(base + "mlp_gate", {e.width, e.mlp}, rng, fan_in_std(e.width));
      params_.create(base + "mlp_up", {e.width, e.mlp}, rng, fan_in_std(e.width));
      params_.create(base + "mlp_down", {e.mlp, e.width}, rng, fan_in_std(e.mlp) * resid);
    }
  }

  params_.create_full("action.final_norm", {w}, 1.0);
  params_.create("action.decode.w", {w, d}, rng, fan_in_std(w));
  params_.create_full("action.decode.b", {d}, 0.0);
}

void PolicyModel::build_small(Rng& rng) {
  const int pw = cfg_.prefix_width, w = cfg_.expert_width;
  const int ad = cfg_.attn_dim(), kv = cfg_.kv_dim();
  const int d = cfg_.action_dim, px = cfg_.patch_pixels();
  const double resid = 1.0 / std::sqrt(2.0 * cfg_.depth);

  // Image encoders do not share weights in this variant.
  for (int s = 0; s < cfg_.max_images; ++s) {
    const std::string base = "enc.patch_proj" + std::to_string(s) + ".";
    params_.create(base + "w", {px, pw}, rng, fan_in_std(px));
    params_.create_full(base + "b", {pw}, 0.0);
  }
  params_.create("enc.tok_embed", {cfg_.vocab_size, pw}, rng, 0.02);
  params_.create("enc.state_proj.w", {d, pw}, rng, fan_in_std(d));
  params_.create_full("enc.state_proj.b", {pw}, 0.0);

  for (int l = 0; l < cfg_.depth; ++l) {
    const std::string base = "enc.l" + std::to_string(l) + ".";
    params_.create_full(base + "attn_norm", {pw}, 1.0);
    params_.create(base + "wq", {pw, ad}, rng, fan_in_std(pw));
    params_.create(base + "wk", {pw, kv}, rng, fan_in_std(pw));
    params_.create(base + "wv", {pw, kv}, rng, fan_in_std(pw));
    params_.create(base + "wo", {ad, pw}, rng, fan_in_std(ad) * resid);
    params_.create_full(base + "mlp_norm", {pw}, 1.0);
    params_.create(base + "mlp_gate", {pw, cfg_.prefix_mlp_dim}, rng, fan_in_std(pw));
    params_.create(base + "mlp_up", {pw, cfg_.prefix_mlp_dim}, rng, fan_in_std(pw));
    params_.create(base + "mlp_down", {cfg_.prefix_mlp_dim, pw}, rng,
                   fan_in_std(cfg_.prefix_mlp_dim) * resid);
  }
  params_.create_full("enc.final_norm", {pw}, 1.0);

  params_.create("dec.embed.w", {d, w}, rng, fan_in_std(d));
  params_.create_full("dec.embed.b", {w}, 0.0);
  params_.create("dec.tau_mlp.w1", {w, w}, rng, fan_in_std(w));
  params_.create_full("dec.tau_mlp.b1", {w}, 0.0);
  params_.create("dec.tau_mlp.w2", {w, w}, rng, fan_in_std(w));
  params_.create_full("dec.tau_mlp.b2", {w}, 0.0);

  for (int l = 0; l < cfg_.depth; ++l) {
    const std::string base = "dec.l" + std::to_string(l) + ".";
    // AdaLN-Zero: the whole modulation projection starts at zero, so every
    // shift/scale/gate is zero and each block begins as the identity.
    params_.create_full(base + "mod.w", {w, 9 * w}, 0.0);
    params_.create_full(base + "mod.b", {9 * w}, 0.0);
    params_.create(base + "sa_wq", {w, ad}, rng, fan_in_std(w));
    params_.create(base + "sa_wk", {w, kv}, rng, fan_in_std(w));
    params_.create(base + "sa_wv", {w, kv}, rng, fan_in_std(w));
    params_.create(base + "sa_wo", {ad, w}, rng, fan_in_std(ad) * resid);
    params_.create(base + "ca_wq", {w, ad}, rng, fan_in_std(w));
    params_.create(base + "ca_wk", {pw, kv}, rng, fan_in_std(pw));
    params_.create(base + "ca_wv", {pw, kv}, rng, fan_in_std(pw));
    params_.create(base + "ca_wo", {ad, w}, rng, fan_in_std(ad) * resid);
    params_.create(base + "mlp_gate", {w, cfg_.expert_mlp_dim}, rng, fan_in_std(w));
    params_.create(base + "mlp_up", {w, cfg_.expert_mlp_dim}, rng, fan_in_std(w));
    params_.create(base + "mlp_down", {cfg_.expert_mlp_dim, w}, rng,
                   fan_in_std(cfg_.expert_mlp_dim) * resid);
  }
  params_.create_full("dec.final_norm", {w}, 1.0);
  params_.create("dec.decode.w", {w, d}, rng, fan_in_std(w));
  params_.create_full("dec.decode.b", {d}, 0.0);
}

// ---- block mask ------------------------------------------------------------

std::vector<std::vector<uint8_t>> PolicyModel::build_block_mask(int prefix_len, int state_len,
                                                                int action_len) {
  if (prefix_len < 0 || action_len < 0 || (state_len != 0 && state_len != 1)) {
    throw std::invalid_argument("build_block_mask: lengths must be >= 0 and state_len in {0,1}");
  }
  const int total = prefix_len + state_len + action_len;
  auto block_of = [&](int i) {
    if (i < prefix_len) return 0;
    if (i < prefix_len + state_len) return 1;
    return 2;
  };
  std::vector<std::vector<uint8_t>> mask(total, std::vector<uint8_t>(total, 0));
  for (int i = 0; i < total; ++i) {
    for (int j = 0; j < total; ++j) mask[i][j] = block_of(j) <= block_of(i) ? 1 : 0;
  }
  return mask;
}

// ---- embeddings ------------------------------------------------------------

Tensor PolicyModel::embed_prefix(const Observation& obs) const {
  validate_observation(obs, cfg_.max_images, cfg_.action_dim);
  const bool small = is_small_variant();
  const int grid = cfg_.image_size / cfg_.patch_size;
  const int px = cfg_.patch_pixels();
  std::vector<Tensor> parts;
  for (int s = 0; s < cfg_.max_images; ++s) {
    if (!obs.images[s].present) continue;
    const auto& pix = obs.images[s].pixels;
    if (static_cast<int>(pix.size()) != cfg_.image_size * cfg_.image_size) {
      throw std::invalid_argument("embed_prefix: image buffer has wrong size");
    }
    std::vector<double> patch_data(static_cast<size_t>(grid) * grid * px);
    size_t k = 0;
    for (int pr = 0; pr < grid; ++pr) {
      for (int pc = 0; pc < grid; ++pc) {
        for (int r = 0; r < cfg_.patch_size; ++r) {
          for (int c = 0; c < cfg_.patch_size; ++c) {
            patch_data[k++] =
                pix[static_cast<size_t>(pr * cfg_.patch_size + r) * cfg_.image_size +
                    pc * cfg_.patch_size + c];
          }
        }
      }
    }
    Tensor patches = Tensor::from_data({grid * grid, px}, std::move(patch_data));
    const std::string base = small ? "enc.patch_proj" + std::to_string(s) + "." : "prefix.patch_proj.";
    parts.push_back(add(matmul(patches, params_.get(base + "w")), params_.get(base + "b")));
  }
  if (!obs.language.empty()) {
    const Tensor& table = params_.get(small ? "enc.tok_embed" : "prefix.tok_embed");
    parts.push_back(embedding_gather(table, obs.language));
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

Tensor PolicyModel::embed_state(const std::vector<double>& q) const {
  if (static_cast<int>(q.size()) != cfg_.action_dim) {
    throw std::invalid_argument("embed_state: expected length " +
                                std::to_string(cfg_.action_dim));
  }
  const bool small = is_small_variant();
  Tensor qrow = Tensor::from_data({1, cfg_.action_dim}, q);
  const std::string base = small ? "enc.state_proj." : "action.state_proj.";
  return add(matmul(qrow, params_.get(base + "w")), params_.get(base + "b"));
}

Tensor PolicyModel::embed_action(const Tensor& noisy_actions, double tau) const {
  if (tau < 0.0 || tau >= 1.0) {
    throw std::invalid_argument("embed_action: tau must lie in [0, 1)");
  }
  if (noisy_actions.ndim() != 2 || noisy_actions.cols() != cfg_.action_dim) {
    throw std::invalid_argument("embed_action: expected (H, " +
                                std::to_string(cfg_.action_dim) + ") input, got " +
                                noisy_actions.shape_str());
  }
  const int w = cfg_.expert_width;
  Tensor projected = matmul(noisy_actions, params_.get("action.embed.w1"));
  Tensor phi = tile_rows(sinusoidal_encode(tau, w), noisy_actions.rows());
  Tensor hidden = swish(matmul(concat({projected, phi}, 1), params_.get("action.embed.w2")));
  return matmul(hidden, params_.get("action.embed.w3"));
}

Tensor PolicyModel::decode_actions(const Tensor& action_hidden) const {
  if (action_hidden.ndim() != 2 || action_hidden.rows() != cfg_.horizon ||
      action_hidden.cols() != cfg_.expert_width) {
    throw std::invalid_argument("decode_actions: expected exactly (" +
                                std::to_string(cfg_.horizon) + ", " +
                                std::to_string(cfg_.expert_width) + ") hidden states, got " +
                                action_hidden.shape_str());
  }
  const bool small = is_small_variant();
  const std::string base = small ? "dec.decode." : "action.decode.";
  return add(matmul(action_hidden, params_.get(base + "w")), params_.get(base + "b"));
}

// ---- attention core --------------------------------------------------------

namespace {

// Joint attention of q rows over the first `limit` rows of k/v. Multi-query:
// all query heads share the kv head(s).
Tensor attend(const ModelConfig& cfg, const Tensor& q, const Tensor& k, const Tensor& v,
              int limit) {
  Tensor k_vis = limit == k.rows() ? k : slice(k, 0, 0, limit);
  Tensor v_vis = limit == v.rows() ? v : slice(v, 0, 0, limit);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
  const int group = cfg.num_heads / cfg.num_kv_heads;
  std::vector<Tensor> heads;
  heads.reserve(cfg.num_heads);
  for (int h = 0; h < cfg.num_heads; ++h) {
    Tensor qh = cfg.num_heads == 1 ? q : slice(q, 1, h * cfg.head_dim, cfg.head_dim);
    Tensor kh = cfg.num_kv_heads == 1
                    ? k_vis
                    : slice(k_vis, 1, (h / group) * cfg.head_dim, cfg.head_dim);
    Tensor vh = cfg.num_kv_heads == 1
                    ? v_vis
                    : slice(v_vis, 1, (h / group) * cfg.head_dim, cfg.head_dim);
    Tensor probs = softmax(scale(matmul_nt(qh, kh), inv_sqrt));
    heads.push_back(matmul(probs, vh));
  }
  return cfg.num_heads == 1 ? heads[0] : concat(heads, 1);
}

}  // namespace

// ---- two-expert forward ------------------------------------------------------

PolicyModel::ForwardOut PolicyModel::two_expert_forward(const Tensor& prefix_tokens,
                                                        const Tensor& state_token,
                                                        const Tensor& action_tokens,
                                                        const PrefixCache* cache_in,
                                                        PrefixCache* cache_out) const {
  const auto& P = params_;
  auto p = [&](int l, const char* leaf) {
    return P.get("prefix.l" + std::to_string(l) + "." + leaf);
  };
  auto a = [&](int l, const char* leaf) {
    return P.get("action.l" + std::to_string(l) + "." + leaf);
  };

  ForwardOut out;
  if (cache_in != nullptr) {
    // Cached suffix pass over the action tokens only.
    if (static_cast<int>(cache_in->keys.size()) != cfg_.depth) {
      throw std::invalid_argument("forward: cache has " +
                                  std::to_string(cache_in->keys.size()) + " layers, model has " +
                                  std::to_string(cfg_.depth));
    }
    const int num_actions = action_tokens.rows();
    const std::vector<int> pos = iota_positions(cache_in->prefix_len, num_actions);
    Tensor h = action_tokens;
    for (int l = 0; l < cfg_.depth; ++l) {
      const Tensor& ck = cache_in->keys[l];
      const Tensor& cv = cache_in->values[l];
      if (ck.ndim() != 2 || ck.rows() != cache_in->prefix_len || ck.cols() != cfg_.kv_dim()) {
        throw std::invalid_argument("forward: cache tensor shape mismatch at layer " +
                                    std::to_string(l) + ": " + ck.shape_str());
      }
      Tensor n = rms_norm(h, a(l, "attn_norm"));
      Tensor q = rotary_apply(matmul(n, a(l, "wq")), pos, cfg_.head_dim);
      Tensor k = rotary_apply(matmul(n, a(l, "wk")), pos, cfg_.head_dim);
      Tensor v = matmul(n, a(l, "wv"));
      Tensor k_all = concat({ck, k}, 0);
      Tensor v_all = concat({cv, v}, 0);
      h = add(h, matmul(attend(cfg_, q, k_all, v_all, k_all.rows()), a(l, "wo")));
      Tensor m = rms_norm(h, a(l, "mlp_norm"));
      h = add(h, geglu_mlp(m, a(l, "mlp_gate"), a(l, "mlp_up"), a(l, "mlp_down")));
    }
    out.suffix_hidden = h;
    return out;
  }

  const int prefix_len = prefix_tokens.rows();
  const bool have_actions = action_tokens.defined();
  const int num_actions = have_actions ? action_tokens.rows() : 0;
  Tensor hp = prefix_tokens;
  Tensor hs = have_actions ? concat({state_token, action_tokens}, 0) : state_token;

  const std::vector<int> pos_prefix = iota_positions(0, prefix_len);
  const std::vector<int> pos_suffix = iota_positions(prefix_len, 1 + num_actions);
  if (cache_out != nullptr) {
    cache_out->keys.clear();
    cache_out->values.clear();
  }

  for (int l = 0; l < cfg_.depth; ++l) {
    Tensor np = rms_norm(hp, p(l, "attn_norm"));
    Tensor ns = rms_norm(hs, a(l, "attn_norm"));
    Tensor qp = rotary_apply(matmul(np, p(l, "wq")), pos_prefix, cfg_.head_dim);
    Tensor kp = rotary_apply(matmul(np, p(l, "wk")), pos_prefix, cfg_.head_dim);
    Tensor vp = matmul(np, p(l, "wv"));
    Tensor qs = rotary_apply(matmul(ns, a(l, "wq")), pos_suffix, cfg_.head_dim);
    Tensor ks = rotary_apply(matmul(ns, a(l, "wk")), pos_suffix, cfg_.head_dim);
    Tensor vs = matmul(ns, a(l, "wv"));
    Tensor k_all = concat({kp, ks}, 0);
    Tensor v_all = concat({vp, vs}, 0);
    if (cache_out != nullptr) {
      cache_out->keys.push_back(k_all);
      cache_out->values.push_back(v_all);
    }

    // Blockwise causal structure: prefix rows see the prefix block only, the
    // state row sees prefix+state, action rows see everything.
    Tensor attn_p = attend(cfg_, qp, k_all, v_all, prefix_len);
    Tensor attn_s;
    if (have_actions) {
      Tensor out_state = attend(cfg_, slice(qs, 0, 0, 1), k_all, v_all, prefix_len + 1);
      Tensor out_act = attend(cfg_, slice(qs, 0, 1, num_actions), k_all, v_all, k_all.rows());
      attn_s = concat({out_state, out_act}, 0);
    } else {
      attn_s = attend(cfg_, qs, k_all, v_all, prefix_len + 1);
    }
    hp = add(hp, matmul(attn_p, p(l, "wo")));
    hs = add(hs, matmul(attn_s, a(l, "wo")));

    Tensor mp = rms_norm(hp, p(l, "mlp_norm"));
    hp = add(hp, geglu_mlp(mp, p(l, "mlp_gate"), p(l, "mlp_up"), p(l, "mlp_down")));
    Tensor ms = rms_norm(hs, a(l, "mlp_norm"));
    hs = add(hs, geglu_mlp(ms, a(l, "mlp_gate"), a(l, "mlp_up"), a(l, "mlp_down")));
  }
  out.prefix_hidden = hp;
  out.suffix_hidden = hs;
  return out;
}

PolicyModel::ForwardOut PolicyModel::forward(const Tensor& prefix_tokens,
                                             const Tensor& state_token,
                                             const Tensor& action_tokens,
                                             const std::vector<std::vector<uint8_t>>& mask,
                                             const PrefixCache* cache) const {
  if (is_small_variant()) {
    throw std::invalid_argument("forward: two-expert entry point called on small variant");
  }
  const int num_actions = action_tokens.defined() ? action_tokens.rows() : 0;
  const int prefix_len =
      cache != nullptr ? cache->prefix_len - 1 : prefix_tokens.rows();
  const auto expected = build_block_mask(prefix_len, 1, num_actions);
  if (mask != expected) {
    throw std::invalid_argument("forward: mask is not the blockwise causal mask for lengths (" +
                                std::to_string(prefix_len) + ", 1, " +
                                std::to_string(num_actions) + ")");
  }
  return two_expert_forward(prefix_tokens, state_token, action_tokens, cache, nullptr);
}

// ---- small variant ---------------------------------------------------------

Tensor PolicyModel::encoder_forward(const Observation& obs) const {
  const auto& P = params_;
  auto e = [&](int l, const char* leaf) {
    return P.get("enc.l" + std::to_string(l) + "." + leaf);
  };
  Tensor h = concat({embed_prefix(obs), embed_state(obs.state)}, 0);
  const std::vector<int> pos = iota_positions(0, h.rows());
  for (int l = 0; l < cfg_.depth; ++l) {
    Tensor n = rms_norm(h, e(l, "attn_norm"));
    Tensor q = rotary_apply(matmul(n, e(l, "wq")), pos, cfg_.head_dim);
    Tensor k = rotary_apply(matmul(n, e(l, "wk")), pos, cfg_.head_dim);
    Tensor v = matmul(n, e(l, "wv"));
    h = add(h, matmul(attend(cfg_, q, k, v, k.rows()), e(l, "wo")));
    Tensor m = rms_norm(h, e(l, "mlp_norm"));
    h = add(h, geglu_mlp(m, e(l, "mlp_gate"), e(l, "mlp_up"), e(l, "mlp_down")));
  }
  return rms_norm(h, P.get("enc.final_norm"));
}

Tensor PolicyModel::decoder_forward(const Tensor& noisy_actions, double tau,
                                    const Tensor& encoder_out,
                                    const std::vector<Tensor>& cross_k,
                                    const std::vector<Tensor>& cross_v) const {
  if (tau < 0.0 || tau >= 1.0) {
    throw std::invalid_argument("decoder_forward: tau must lie in [0, 1)");
  }
  const auto& P = params_;
  auto d = [&](int l, const char* leaf) {
    return P.get("dec.l" + std::to_string(l) + "." + leaf);
  };
  const int w = cfg_.expert_width;
  const int horizon = noisy_actions.rows();

  // Timestep conditioning vector c = MLP(phi(tau)).
  Tensor phi = tile_rows(sinusoidal_encode(tau, w), 1);
  Tensor c = swish(add(matmul(phi, P.get("dec.tau_mlp.w1")), P.get("dec.tau_mlp.b1")));
  c = add(matmul(c, P.get("dec.tau_mlp.w2")), P.get("dec.tau_mlp.b2"));

  Tensor h = add(matmul(noisy_actions, P.get("dec.embed.w")), P.get("dec.embed.b"));
  const std::vector<int> pos = iota_positions(0, horizon);
  const Tensor unit_gain = Tensor::constant({w}, 1.0);
  const Tensor ones_row = Tensor::constant({1, w}, 1.0);

  for (int l = 0; l < cfg_.depth; ++l) {
    Tensor mod = add(matmul(c, d(l, "mod.w")), d(l, "mod.b"));  // (1, 9w)
    auto piece = [&](int idx) { return slice(mod, 1, idx * w, w); };
    // Self-attention over action tokens (bidirectional).
    {
      Tensor n = modulate(rms_norm(h, unit_gain), piece(0), piece(1), ones_row);
      Tensor q = rotary_apply(matmul(n, d(l, "sa_wq")), pos, cfg_.head_dim);
      Tensor k = rotary_apply(matmul(n, d(l, "sa_wk")), pos, cfg_.head_dim);
      Tensor v = matmul(n, d(l, "sa_wv"));
      Tensor attn = matmul(attend(cfg_, q, k, v, horizon), d(l, "sa_wo"));
      h = add(h, mul(attn, piece(2)));
    }
    // Cross-attention into the observation encoding.
    {
      Tensor n = modulate(rms_norm(h, unit_gain), piece(3), piece(4), ones_row);
      Tensor q = matmul(n, d(l, "ca_wq"));
      Tensor k = cross_k.empty() ? matmul(encoder_out, d(l, "ca_wk")) : cross_k[l];
      Tensor v = cross_v.empty() ? matmul(encoder_out, d(l, "ca_wv")) : cross_v[l];
      Tensor attn = matmul(attend(cfg_, q, k, v, k.rows()), d(l, "ca_wo"));
      h = add(h, mul(attn, piece(5)));
    }
    // MLP.
    {
      Tensor n = modulate(rms_norm(h, unit_gain), piece(6), piece(7), ones_row);
      Tensor m = geglu_mlp(n, d(l, "mlp_gate"), d(l, "mlp_up"), d(l, "mlp_down"));
      h = add(h, mul(m, piece(8)));
    }
  }
  h = rms_norm(h, P.get("dec.final_norm"));
  return add(matmul(h, P.get("dec.decode.w")), P.get("dec.decode.b"));
}

Tensor PolicyModel::forward_small(const Observation& obs, const Tensor& noisy_actions,
                                  double tau) const {
  if (!is_small_variant()) {
    throw std::invalid_argument("forward_small: model variant is not 'small'");
  }
  Tensor enc = encoder_forward(obs);
  return decoder_forward(noisy_actions, tau, enc, {}, {});
}

// ---- unified policy interface ------------------------------------------------

Tensor PolicyModel::velocity(const Observation& obs, const Tensor& noisy_actions,
                             double tau) const {
  if (is_small_variant()) return forward_small(obs, noisy_actions, tau);
  Tensor prefix = embed_prefix(obs);
  Tensor state = embed_state(obs.state);
  Tensor actions = embed_action(noisy_actions, tau);
  ForwardOut out = two_expert_forward(prefix, state, actions, nullptr, nullptr);
  Tensor action_hidden = slice(out.suffix_hidden, 0, 1, cfg_.horizon);
  return decode_actions(rms_norm(action_hidden, params_.get("action.final_norm")));
}

PrefixCache PolicyModel::begin_inference(const Observation& obs) const {
  PrefixCache cache;
  cache.fingerprint = observation_fingerprint(obs);
  if (is_small_variant()) {
    cache.encoder_out = encoder_forward(obs);
    cache.prefix_len = cache.encoder_out.rows();
    for (int l = 0; l < cfg_.depth; ++l) {
      const std::string base = "dec.l" + std::to_string(l) + ".";
      cache.keys.push_back(matmul(cache.encoder_out, params_.get(base + "ca_wk")));
      cache.values.push_back(matmul(cache.encoder_out, params_.get(base + "ca_wv")));
    }
    return cache;
  }
  Tensor prefix = embed_prefix(obs);
  Tensor state = embed_state(obs.state);
  two_expert_forward(prefix, state, Tensor(), nullptr, &cache);
  cache.prefix_len = prefix.rows() + 1;
  return cache;
}

Tensor PolicyModel::velocity_cached(const PrefixCache& cache, const Tensor& noisy_actions,
                                    double tau) const {
  if (is_small_variant()) {
    return decoder_forward(noisy_actions, tau, cache.encoder_out, cache.keys, cache.values);
  }
  Tensor actions = embed_action(noisy_actions, tau);
  ForwardOut out = two_expert_forward(Tensor(), Tensor(), actions, &cache, nullptr);
  return decode_actions(rms_norm(out.suffix_hidden, params_.get("action.final_norm")));
}

// ---- parameter accounting -----------------------------------------------------

int64_t PolicyModel::param_count_prefix_expert() const {
  return params_.count_with_prefix(is_small_variant() ? "enc." : "prefix.");
}

int64_t PolicyModel::param_count_action_expert() const {
  return params_.count_with_prefix(is_small_variant() ? "dec." : "action.");
}

// ---- checkpoint I/O ------------------------------------------------------------

namespace {

void write_config(std::ostream& os, const ModelConfig& c) {
  os << "variant " << c.variant << "\n";
  os << "prefix_width " << c.prefix_width << "\n";
  os << "expert_width " << c.expert_width << "\n";
  os << "depth " << c.depth << "\n";
  os << "num_heads " << c.num_heads << "\n";
  os << "num_kv_heads " << c.num_kv_heads << "\n";
  os << "head_dim " << c.head_dim << "\n";
  os << "prefix_mlp_dim " << c.prefix_mlp_dim << "\n";
  os << "expert_mlp_dim " << c.expert_mlp_dim << "\n";
  os << "action_dim " << c.action_dim << "\n";
  os << "horizon " << c.horizon << "\n";
  os << "max_images " << c.max_images << "\n";
  os << "image_size " << c.image_size << "\n";
  os << "patch_size " << c.patch_size << "\n";
  os << "vocab_size " << c.vocab_size << "\n";
}

void apply_config_line(ModelConfig& c, const std::string& key, const std::string& value) {
  if (key == "variant") {
    c.variant = value;
    return;
  }
  int* field = nullptr;
  if (key == "prefix_width") field = &c.prefix_width;
  else if (key == "expert_width") field = &c.expert_width;
  else if (key == "depth") field = &c.depth;
  else if (key == "num_heads") field = &c.num_heads;
  else if (key == "num_kv_heads") field = &c.num_kv_heads;
  else if (key == "head_dim") field = &c.head_dim;
  else if (key == "prefix_mlp_dim") field = &c.prefix_mlp_dim;
  else if (key == "expert_mlp_dim") field = &c.expert_mlp_dim;
  else if (key == "action_dim") field = &c.action_dim;
  else if (key == "horizon") field = &c.horizon;
  else if (key == "max_images") field = &c.max_images;
  else if (key == "image_size") field = &c.image_size;
  else if (key == "patch_size") field = &c.patch_size;
  else if (key == "vocab_size") field = &c.vocab_size;
  else throw std::runtime_error("checkpoint: unknown config key '" + key + "'");
  *field = std::stoi(value);
}

}  // namespace

void PolicyModel::save_checkpoint(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  os << "flowact_checkpoint v1\n";
  write_config(os, cfg_);
  for (const auto& [name, t] : params_.entries()) {
    os << "tensor " << name << " " << t.ndim();
    for (int i = 0; i < t.ndim(); ++i) os << " " << t.dim(i);
    os << "\n";
  }
  os << "end_header\n";
  for (const auto& [name, t] : params_.entries()) {
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

PolicyModel PolicyModel::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "flowact_checkpoint v1") {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  ModelConfig cfg;
  std::vector<std::pair<std::string, std::vector<int>>> manifest;
  while (std::getline(is, line)) {
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "tensor") {
      std::string name;
      int ndim = 0;
      ls >> name >> ndim;
      std::vector<int> shape(ndim);
      for (int& d : shape) ls >> d;
      manifest.emplace_back(name, shape);
    } else {
      std::string value;
      ls >> value;
      apply_config_line(cfg, key, value);
    }
  }
  PolicyModel model(cfg, 0);
  const auto& entries = model.params_.entries();
  if (entries.size() != manifest.size()) {
    throw std::runtime_error("checkpoint: tensor count mismatch (" +
                             std::to_string(manifest.size()) + " in file, " +
                             std::to_string(entries.size()) + " in model)");
  }
  for (size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != manifest[i].first || entries[i].second.shape() != manifest[i].second) {
      throw std::runtime_error("checkpoint: tensor mismatch at entry " + std::to_string(i) +
                               " ('" + manifest[i].first + "')");
    }
  }
  for (const auto& [name, t] : entries) {
    is.read(reinterpret_cast<char*>(const_cast<Tensor&>(t).data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated blob in " + path.string());
  }
  return model;
}

}  // namespace flowact
