#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "flowact/model.hpp"
#include "flowact/rng.hpp"
#include "flowact/tensor.hpp"
#include "flowact/types.hpp"

using namespace flowact;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.prefix_width = 32;
  cfg.expert_width = 16;
  cfg.depth = 2;
  cfg.num_heads = 2;
  cfg.num_kv_heads = 1;
  cfg.head_dim = 8;
  cfg.prefix_mlp_dim = 48;
  cfg.expert_mlp_dim = 32;
  cfg.action_dim = 8;
  cfg.horizon = 4;
  cfg.max_images = 3;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.vocab_size = 24;
  return cfg;
}

Observation make_observation(const ModelConfig& cfg, Rng& rng, int present_images = 2,
                             int lang_tokens = 3, int real_dims = 3) {
  Observation obs;
  obs.images.resize(cfg.max_images);
  for (int s = 0; s < cfg.max_images; ++s) {
    obs.images[s].present = s < present_images;
    obs.images[s].pixels.resize(static_cast<size_t>(cfg.image_size) * cfg.image_size);
    for (auto& p : obs.images[s].pixels) p = rng.uniform01();
  }
  for (int i = 0; i < lang_tokens; ++i) {
    obs.language.push_back(static_cast<int>(rng.below(cfg.vocab_size)));
  }
  obs.state.assign(cfg.action_dim, 0.0);
  obs.state_mask.assign(cfg.action_dim, 0);
  for (int j = 0; j < real_dims; ++j) {
    obs.state[j] = rng.normal();
    obs.state_mask[j] = 1;
  }
  return obs;
}

Tensor random_actions(const ModelConfig& cfg, Rng& rng) {
  return Tensor::randn({cfg.horizon, cfg.action_dim}, rng, 1.0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * a.numel()) == 0;
}

void randomize_params_with_prefix(PolicyModel& model, const std::string& name_prefix, Rng& rng) {
  for (const auto& [name, t] : model.params().entries()) {
    if (name.rfind(name_prefix, 0) != 0) continue;
    Tensor& tm = const_cast<Tensor&>(t);
    for (int64_t i = 0; i < tm.numel(); ++i) tm.data()[i] = rng.normal() * 0.1;
  }
}

}  // namespace

TEST_CASE("block mask: prefix tokens attend only the prefix block") {
  auto mask = PolicyModel::build_block_mask(2, 1, 3);
  REQUIRE(mask.size() == 6);
  for (int j = 0; j < 6; ++j) CHECK(mask[0][j] == (j < 2 ? 1 : 0));
  for (int j = 0; j < 6; ++j) CHECK(mask[1][j] == (j < 2 ? 1 : 0));
}

TEST_CASE("block mask: state token attends prefix and itself, not actions") {
  auto mask = PolicyModel::build_block_mask(2, 1, 3);
  for (int j = 0; j < 6; ++j) CHECK(mask[2][j] == (j < 3 ? 1 : 0));
}

TEST_CASE("block mask: action tokens attend the full sequence") {
  auto mask = PolicyModel::build_block_mask(2, 1, 3);
  for (int i = 3; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) CHECK(mask[i][j] == 1);
  }
}

TEST_CASE("block mask rows are unions of whole blocks at or below the row's block") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int lp = 1 + static_cast<int>(rng.below(6));
    const int ls = static_cast<int>(rng.below(2));
    const int la = static_cast<int>(rng.below(7));
    auto mask = PolicyModel::build_block_mask(lp, ls, la);
    auto block_of = [&](int i) { return i < lp ? 0 : (i < lp + ls ? 1 : 2); };
    const int total = lp + ls + la;
    for (int i = 0; i < total; ++i) {
      for (int j = 0; j < total; ++j) {
        CHECK(mask[i][j] == (block_of(j) <= block_of(i) ? 1 : 0));
      }
    }
  }
}

TEST_CASE("embed_prefix: a 16x16 image in 4x4 patches is 16 tokens") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 1);
  Rng rng(2);
  Observation obs = make_observation(cfg, rng, 1, 0);
  Tensor prefix = model.embed_prefix(obs);
  CHECK(prefix.rows() == 16);
  CHECK(prefix.cols() == cfg.prefix_width);
}

TEST_CASE("embed_prefix: two images plus three language tokens is 35 tokens") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 1);
  Rng rng(2);
  Observation obs = make_observation(cfg, rng, 2, 3);
  CHECK(model.embed_prefix(obs).rows() == 2 * 16 + 3);
}

TEST_CASE("embed_prefix: output is independent of a masked slot's pixel buffer") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 1);
  Rng rng(2);
  Observation obs = make_observation(cfg, rng, 2, 3);
  Tensor a = model.embed_prefix(obs);
  for (auto& p : obs.images[2].pixels) p = rng.uniform01();  // absent slot
  Tensor b = model.embed_prefix(obs);
  CHECK(bit_identical(a, b));
}

TEST_CASE("embed_prefix rejects out-of-vocab token ids") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 1);
  Rng rng(2);
  Observation obs = make_observation(cfg, rng, 1, 1);
  obs.language[0] = cfg.vocab_size;
  CHECK_THROWS_AS(model.embed_prefix(obs), std::invalid_argument);
}

TEST_CASE("embed_state: zero state maps to the projection bias") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 1);
  Tensor& bias = const_cast<Tensor&>(model.params().get("action.state_proj.b"));
  Rng rng(4);
  for (int64_t i = 0; i < bias.numel(); ++i) bias.data()[i] = rng.normal();
  Tensor tok = model.embed_state(std::vector<double>(cfg.action_dim, 0.0));
  CHECK(tok.rows() == 1);
  CHECK(tok.cols() == cfg.expert_width);
  for (int j = 0; j < cfg.expert_width; ++j) CHECK(tok.at(0, j) == bias.at(j));
}

TEST_CASE("embed_state is affine-linear in q") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 1);
  Rng rng(5);
  std::vector<double> q(cfg.action_dim);
  for (auto& v : q) v = rng.normal();
  std::vector<double> q2(q);
  for (auto& v : q2) v *= 2.0;
  Tensor e0 = model.embed_state(std::vector<double>(cfg.action_dim, 0.0));
  Tensor e1 = model.embed_state(q);
  Tensor e2 = model.embed_state(q2);
  for (int j = 0; j < cfg.expert_width; ++j) {
    CHECK(e2.at(0, j) - e0.at(0, j) ==
          doctest::Approx(2.0 * (e1.at(0, j) - e0.at(0, j))).epsilon(1e-12));
  }
}

TEST_CASE("embed_action: the timestep encoding separates tau values") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 1);
  Rng rng(6);
  Tensor a = random_actions(cfg, rng);
  Tensor t1 = model.embed_action(a, 0.1);
  Tensor t2 = model.embed_action(a, 0.9);
  CHECK(max_abs_diff(t1, t2) > 1e-6);
}

TEST_CASE("embed_action projection shapes map d -> w -> w") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 1);
  const int w = cfg.expert_width, d = cfg.action_dim;
  CHECK(model.params().get("action.embed.w1").shape() == std::vector<int>{d, w});
  CHECK(model.params().get("action.embed.w2").shape() == std::vector<int>{2 * w, w});
  CHECK(model.params().get("action.embed.w3").shape() == std::vector<int>{w, w});
}

TEST_CASE("embed_action output responds to every projection matrix") {
  ModelConfig cfg = tiny_config();
  Rng rng(7);
  Tensor a = random_actions(cfg, rng);
  for (const char* name : {"action.embed.w1", "action.embed.w2", "action.embed.w3"}) {
    PolicyModel model(cfg, 1);
    Tensor before = model.embed_action(a, 0.3);
    Tensor& wmat = const_cast<Tensor&>(model.params().get(name));
    wmat.data()[0] += 0.5;
    Tensor after = model.embed_action(a, 0.3);
    CHECK_MESSAGE(max_abs_diff(before, after) > 1e-9, name);
  }
}

TEST_CASE("embed_action rejects tau outside [0,1)") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 1);
  Rng rng(8);
  Tensor a = random_actions(cfg, rng);
  CHECK_THROWS_AS(model.embed_action(a, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(model.embed_action(a, -0.1), std::invalid_argument);
}

TEST_CASE("softmax over a single key is one, so attention returns the value row") {
  // The one-token case of the attention composition used in the model.
  Rng rng(9);
  Tensor q = Tensor::randn({1, 8}, rng, 1.0);
  Tensor k = Tensor::randn({1, 8}, rng, 1.0);
  Tensor v = Tensor::randn({1, 8}, rng, 1.0);
  Tensor probs = softmax(scale(matmul_nt(q, k), 1.0 / std::sqrt(8.0)));
  CHECK(probs.item() == 1.0);
  CHECK(bit_identical(matmul(probs, v), v));
}

TEST_CASE("prefix outputs are bit-identical under action-expert randomization") {
  ModelConfig cfg = tiny_config();
  Rng rng(10);
  for (int trial = 0; trial < 3; ++trial) {
    PolicyModel model(cfg, 100 + trial);
    Observation obs = make_observation(cfg, rng);
    Tensor prefix = model.embed_prefix(obs);
    Tensor state = model.embed_state(obs.state);
    Tensor actions = model.embed_action(random_actions(cfg, rng), 0.4);
    auto mask = PolicyModel::build_block_mask(prefix.rows(), 1, cfg.horizon);
    Tensor before = model.forward(prefix, state, actions, mask).prefix_hidden;

    randomize_params_with_prefix(model, "action.", rng);
    Tensor state2 = model.embed_state(obs.state);
    Tensor actions2 = model.embed_action(random_actions(cfg, rng), 0.7);
    Tensor after = model.forward(prefix, state2, actions2, mask).prefix_hidden;
    CHECK(bit_identical(before, after));
  }
}

TEST_CASE("forward rejects masks that are not the blockwise causal mask") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 1);
  Rng rng(11);
  Observation obs = make_observation(cfg, rng);
  Tensor prefix = model.embed_prefix(obs);
  Tensor state = model.embed_state(obs.state);
  Tensor actions = model.embed_action(random_actions(cfg, rng), 0.2);
  auto mask = PolicyModel::build_block_mask(prefix.rows(), 1, cfg.horizon);
  mask[0][mask.size() - 1] = 1;  // prefix row suddenly sees an action token
  CHECK_THROWS_AS(model.forward(prefix, state, actions, mask), std::invalid_argument);
}

TEST_CASE("cached and uncached suffix outputs agree") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 12);
  Rng rng(13);
  Observation obs = make_observation(cfg, rng);
  Tensor noisy = random_actions(cfg, rng);
  Tensor uncached = model.velocity(obs, noisy, 0.3);
  PrefixCache cache = model.begin_inference(obs);
  CHECK(cache.prefix_len == model.embed_prefix(obs).rows() + 1);
  Tensor cached = model.velocity_cached(cache, noisy, 0.3);
  CHECK(max_abs_diff(uncached, cached) < 1e-10);
}

TEST_CASE("forward rejects caches with mismatched shapes") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 12);
  Rng rng(14);
  Observation obs = make_observation(cfg, rng);
  PrefixCache cache = model.begin_inference(obs);
  cache.keys.pop_back();
  CHECK_THROWS_AS(model.velocity_cached(cache, random_actions(cfg, rng), 0.3),
                  std::invalid_argument);

  PrefixCache cache2 = model.begin_inference(obs);
  cache2.prefix_len += 1;
  CHECK_THROWS_AS(model.velocity_cached(cache2, random_actions(cfg, rng), 0.3),
                  std::invalid_argument);
}

TEST_CASE("decode_actions: zero hidden states give the bias row H times") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 1);
  Tensor& bias = const_cast<Tensor&>(model.params().get("action.decode.b"));
  Rng rng(15);
  for (int64_t i = 0; i < bias.numel(); ++i) bias.data()[i] = rng.normal();
  Tensor out = model.decode_actions(Tensor::zeros({cfg.horizon, cfg.expert_width}));
  CHECK(out.rows() == cfg.horizon);
  CHECK(out.cols() == cfg.action_dim);
  for (int t = 0; t < cfg.horizon; ++t) {
    for (int j = 0; j < cfg.action_dim; ++j) CHECK(out.at(t, j) == bias.at(j));
  }
}

TEST_CASE("decode_actions: horizon 50 yields a 50 x d_max output") {
  ModelConfig cfg = tiny_config();
  cfg.horizon = 50;
  PolicyModel model(cfg, 1);
  Tensor out = model.decode_actions(Tensor::zeros({50, cfg.expert_width}));
  CHECK(out.rows() == 50);
  CHECK(out.cols() == cfg.action_dim);
  CHECK_THROWS_AS(model.decode_actions(Tensor::zeros({49, cfg.expert_width})),
                  std::invalid_argument);
}

TEST_CASE("decode_actions is linear in the hidden states") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 16);
  Rng rng(17);
  Tensor h = Tensor::randn({cfg.horizon, cfg.expert_width}, rng, 1.0);
  Tensor h2 = scale(h, 2.0);
  Tensor d0 = model.decode_actions(Tensor::zeros({cfg.horizon, cfg.expert_width}));
  Tensor d1 = model.decode_actions(h);
  Tensor d2 = model.decode_actions(h2);
  for (int t = 0; t < cfg.horizon; ++t) {
    for (int j = 0; j < cfg.action_dim; ++j) {
      CHECK(d2.at(t, j) - d0.at(t, j) ==
            doctest::Approx(2.0 * (d1.at(t, j) - d0.at(t, j))).epsilon(1e-10));
    }
  }
}

TEST_CASE("permuting two padded state dimensions never changes outputs") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 18);
  Rng rng(19);
  Observation obs = make_observation(cfg, rng, 2, 2, 3);  // dims 3..7 padded
  Tensor noisy = random_actions(cfg, rng);
  Tensor before = model.velocity(obs, noisy, 0.25);
  std::swap(obs.state[4], obs.state[6]);
  std::swap(obs.state_mask[4], obs.state_mask[6]);
  Tensor after = model.velocity(obs, noisy, 0.25);
  CHECK(bit_identical(before, after));
}

TEST_CASE("action expert has fewer parameters than the prefix expert") {
  ModelConfig cfg;  // defaults: prefix_width 128 vs expert_width 64, equal depth
  PolicyModel model(cfg, 1);
  CHECK(model.param_count_action_expert() < model.param_count_prefix_expert());
  CHECK(model.param_count_action_expert() + model.param_count_prefix_expert() ==
        model.params().total_params());
}

TEST_CASE("checkpoint round trip is bit-exact") {
  ModelConfig cfg = tiny_config();
  PolicyModel model(cfg, 77);
  const auto dir = std::filesystem::temp_directory_path() / "flowact_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";
  model.save_checkpoint(path);
  PolicyModel loaded = PolicyModel::load_checkpoint(path);
  REQUIRE(loaded.params().entries().size() == model.params().entries().size());
  for (size_t i = 0; i < model.params().entries().size(); ++i) {
    const auto& [name, t] = model.params().entries()[i];
    const auto& [name2, t2] = loaded.params().entries()[i];
    CHECK(name == name2);
    CHECK(bit_identical(t, t2));
  }
  const auto path2 = dir / "model2.ckpt";
  loaded.save_checkpoint(path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  std::filesystem::remove_all(dir);
}

// ---- small variant ----------------------------------------------------------

namespace {

ModelConfig small_config() {
  ModelConfig cfg = tiny_config();
  cfg.variant = "small";
  return cfg;
}

}  // namespace

TEST_CASE("small variant: zero gates make decoder blocks the identity at init") {
  ModelConfig cfg = small_config();
  PolicyModel model(cfg, 21);
  Rng rng(22);
  Observation obs = make_observation(cfg, rng);
  Tensor noisy = random_actions(cfg, rng);
  Tensor v = model.forward_small(obs, noisy, 0.3);
  CHECK(v.rows() == cfg.horizon);
  CHECK(v.cols() == cfg.action_dim);

  // With every block an identity, the output must be exactly
  // decode(final_norm(embed(noisy))): the residual stream passes through.
  const auto& P = model.params();
  Tensor h = add(matmul(noisy, P.get("dec.embed.w")), P.get("dec.embed.b"));
  h = rms_norm(h, P.get("dec.final_norm"));
  Tensor expected = add(matmul(h, P.get("dec.decode.w")), P.get("dec.decode.b"));
  CHECK(max_abs_diff(v, expected) == 0.0);

  // And therefore independent of tau and of the observation at init.
  CHECK(bit_identical(v, model.forward_small(obs, noisy, 0.8)));
  Observation obs2 = make_observation(cfg, rng);
  CHECK(bit_identical(v, model.forward_small(obs2, noisy, 0.3)));
}

TEST_CASE("small variant: encoder outputs are independent of decoder weights") {
  ModelConfig cfg = small_config();
  PolicyModel model(cfg, 23);
  Rng rng(24);
  Observation obs = make_observation(cfg, rng);
  Tensor enc_before = model.begin_inference(obs).encoder_out;
  randomize_params_with_prefix(model, "dec.", rng);
  Tensor enc_after = model.begin_inference(obs).encoder_out;
  CHECK(bit_identical(enc_before, enc_after));
}

TEST_CASE("small variant: cached and uncached velocities agree after training-like edits") {
  ModelConfig cfg = small_config();
  PolicyModel model(cfg, 25);
  Rng rng(26);
  // Open the gates so the cross-attention path actually runs.
  randomize_params_with_prefix(model, "dec.l0.mod", rng);
  randomize_params_with_prefix(model, "dec.l1.mod", rng);
  Observation obs = make_observation(cfg, rng);
  Tensor noisy = random_actions(cfg, rng);
  Tensor uncached = model.forward_small(obs, noisy, 0.4);
  PrefixCache cache = model.begin_inference(obs);
  Tensor cached = model.velocity_cached(cache, noisy, 0.4);
  CHECK(max_abs_diff(uncached, cached) < 1e-10);
}

TEST_CASE("small variant: encoder has more parameters than the decoder in default shape") {
  ModelConfig cfg = small_config();
  PolicyModel model(cfg, 27);
  CHECK(model.param_count_action_expert() < model.param_count_prefix_expert());
}

TEST_CASE("small variant checkpoints round trip") {
  ModelConfig cfg = small_config();
  PolicyModel model(cfg, 31);
  const auto dir = std::filesystem::temp_directory_path() / "flowact_ckpt_small";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";
  model.save_checkpoint(path);
  PolicyModel loaded = PolicyModel::load_checkpoint(path);
  CHECK(loaded.config().variant == "small");
  Rng rng(32);
  Observation obs = make_observation(cfg, rng);
  Tensor noisy = random_actions(cfg, rng);
  CHECK(bit_identical(model.forward_small(obs, noisy, 0.1),
                      loaded.forward_small(obs, noisy, 0.1)));
  std::filesystem::remove_all(dir);
}
