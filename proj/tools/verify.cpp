#include "verify.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "flowact/config.hpp"
#include "flowact/data.hpp"
#include "flowact/flow.hpp"
#include "flowact/model.hpp"
#include "flowact/runtime.hpp"
#include "flowact/sim.hpp"
#include "flowact/train.hpp"
#include "flowact/vocab.hpp"

namespace flowact {
namespace tools {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::runtime_error(what);
}

ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.prefix_width = 32;
  cfg.expert_width = 16;
  cfg.depth = 1;
  cfg.num_heads = 2;
  cfg.num_kv_heads = 1;
  cfg.head_dim = 8;
  cfg.prefix_mlp_dim = 32;
  cfg.expert_mlp_dim = 24;
  cfg.action_dim = 4;
  cfg.horizon = 4;
  cfg.max_images = 1;
  cfg.image_size = 16;
  cfg.patch_size = 16;
  cfg.vocab_size = 16;
  return cfg;
}

Observation tiny_observation(const ModelConfig& cfg, Rng& rng) {
  Observation obs;
  obs.images.resize(cfg.max_images);
  obs.images[0].present = true;
  obs.images[0].pixels.resize(static_cast<size_t>(cfg.image_size) * cfg.image_size);
  for (auto& p : obs.images[0].pixels) p = rng.uniform01();
  obs.language = {1};
  obs.state.assign(cfg.action_dim, 0.0);
  obs.state_mask.assign(cfg.action_dim, 0);
  obs.state[0] = rng.normal();
  obs.state_mask[0] = 1;
  return obs;
}

ActionChunk random_chunk(const ModelConfig& cfg, Rng& rng, int real_dims) {
  ActionChunk c = ActionChunk::zeros(cfg.horizon, cfg.action_dim);
  c.dim_mask.assign(cfg.action_dim, 0);
  for (int j = 0; j < real_dims; ++j) c.dim_mask[j] = 1;
  for (int t = 0; t < cfg.horizon; ++t) {
    for (int j = 0; j < real_dims; ++j) c.at(t, j) = rng.normal();
  }
  return c;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal();
  return t;
}

std::filesystem::path scratch_dir() {
  const auto dir = std::filesystem::temp_directory_path() / "flowact_verify";
  std::filesystem::create_directories(dir);
  return dir;
}

// ---- individual checks -------------------------------------------------------

void check_kernel_gradients() {
  Rng rng(101);
  Tensor a = random_tensor({3, 5}, rng);
  Tensor b = random_tensor({5, 4}, rng);
  Tensor bias = random_tensor({4}, rng);
  Tensor gain = random_tensor({4}, rng);
  Tensor table = random_tensor({6, 4}, rng);
  std::vector<int> pos = {0, 2, 5};
  auto f = [&]() {
    Tensor h = add(matmul(a, b), bias);
    h = rms_norm(h, gain);
    h = rotary_apply(h, pos, 4);
    Tensor e = embedding_gather(table, {1, 4, 2});
    Tensor probs = softmax(matmul_nt(h, e));
    Tensor mixed = mul(gelu(matmul(probs, e)), bias);
    Tensor halves = concat({slice(mixed, 1, 0, 2), slice(mixed, 1, 2, 2)}, 1);
    return sum(swish(halves));
  };
  const double err = grad_check(f, {a, b, bias, gain, table}, 1e-5);
  require(err < 1e-4, "kernel gradient error " + std::to_string(err) + " >= 1e-4");
}

void check_softmax_rows() {
  Rng rng(102);
  Tensor x = random_tensor({8, 11}, rng);
  Tensor y = softmax(x);
  for (int i = 0; i < 8; ++i) {
    double s = 0.0;
    for (int j = 0; j < 11; ++j) s += y.at(i, j);
    require(std::fabs(s - 1.0) < 1e-12, "softmax row sum off by " + std::to_string(s - 1.0));
  }
}

void check_rms_norm_unit() {
  Rng rng(103);
  Tensor gain = Tensor::constant({16}, 1.0);
  Tensor x = random_tensor({5, 16}, rng);
  Tensor y = rms_norm(x, gain);
  for (int i = 0; i < 5; ++i) {
    double ms = 0.0;
    for (int j = 0; j < 16; ++j) ms += y.at(i, j) * y.at(i, j);
    require(std::fabs(std::sqrt(ms / 16.0) - 1.0) < 1e-6, "rms_norm output rms is not 1");
  }
}

void check_forward_determinism() {
  ModelConfig cfg = tiny_model_config();
  PolicyModel model(cfg, 7);
  Rng rng(104);
  Observation obs = tiny_observation(cfg, rng);
  Tensor noisy = Tensor::randn({cfg.horizon, cfg.action_dim}, rng, 1.0);
  Tensor v1 = model.velocity(obs, noisy, 0.3);
  Tensor v2 = model.velocity(obs, noisy, 0.3);
  require(std::memcmp(v1.data(), v2.data(), sizeof(double) * v1.numel()) == 0,
          "two identical forwards differ bitwise");
}

void check_block_mask() {
  auto mask = PolicyModel::build_block_mask(2, 1, 3);
  require(mask[0][0] == 1 && mask[0][1] == 1 && mask[0][2] == 0 && mask[0][5] == 0,
          "prefix row mask wrong");
  require(mask[2][2] == 1 && mask[2][3] == 0, "state row mask wrong");
  for (int j = 0; j < 6; ++j) require(mask[4][j] == 1, "action row mask wrong");
}

void check_expert_isolation() {
  ModelConfig cfg = tiny_model_config();
  Rng rng(105);
  for (int trial = 0; trial < 3; ++trial) {
    PolicyModel model(cfg, 300 + trial);
    Observation obs = tiny_observation(cfg, rng);
    Tensor prefix = model.embed_prefix(obs);
    Tensor state = model.embed_state(obs.state);
    Tensor actions = model.embed_action(Tensor::randn({cfg.horizon, cfg.action_dim}, rng, 1.0),
                                        0.4);
    auto mask = PolicyModel::build_block_mask(prefix.rows(), 1, cfg.horizon);
    Tensor before = model.forward(prefix, state, actions, mask).prefix_hidden;
    for (const auto& [name, t] : model.params().entries()) {
      if (name.rfind("action.", 0) != 0) continue;
      Tensor& tm = const_cast<Tensor&>(t);
      for (int64_t i = 0; i < tm.numel(); ++i) tm.data()[i] = rng.normal() * 0.2;
    }
    Tensor actions2 = model.embed_action(Tensor::randn({cfg.horizon, cfg.action_dim}, rng, 1.0),
                                         0.8);
    Tensor after =
        model.forward(prefix, model.embed_state(obs.state), actions2, mask).prefix_hidden;
    require(std::memcmp(before.data(), after.data(), sizeof(double) * before.numel()) == 0,
            "prefix outputs changed under action-expert randomization");
  }
}

void check_cache_soundness() {
  ModelConfig cfg = tiny_model_config();
  for (int trial = 0; trial < 3; ++trial) {
    PolicyModel model(cfg, 400 + trial);
    Rng rng(500 + trial);
    Observation obs = tiny_observation(cfg, rng);
    FlowConfig flow;
    std::vector<uint8_t> mask = {1, 1, 1, 0};
    Rng s1(600 + trial), s2(600 + trial);
    ActionChunk cached = integrate(model, obs, s1, flow, mask);
    ActionChunk uncached = integrate_uncached(model, obs, s2, flow, mask);
    for (size_t i = 0; i < cached.actions.size(); ++i) {
      require(std::fabs(cached.actions[i] - uncached.actions[i]) < 1e-10,
              "cached and uncached sampling diverged");
    }
  }
}

void check_flow_path_endpoints() {
  Rng rng(106);
  ModelConfig cfg = tiny_model_config();
  ActionChunk chunk = random_chunk(cfg, rng, 3);
  Rng r1(9), r2(9);
  FlowSample one = make_flow_sample(chunk, r1, 1.0);
  FlowSample zero = make_flow_sample(chunk, r2, 0.0);
  for (size_t i = 0; i < chunk.actions.size(); ++i) {
    require(one.noisy[i] == chunk.actions[i], "tau=1 endpoint is not the data");
    require(zero.noisy[i] == zero.eps[i], "tau=0 endpoint is not the noise");
  }
}

void check_tau_sampler() {
  FlowConfig flow;
  Rng rng(107);
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double tau = sample_tau(rng, flow);
    require(tau <= flow.cutoff && tau >= 0.0, "tau outside [0, s]");
    sum += tau;
  }
  require(std::fabs(sum / n - 0.3996) < 0.01, "tau sampler mean off the analytic value");
}

void check_mixture_weights() {
  auto spec = data::mixture_weights({{"a", "t", 100}, {"b", "t", 1000}}, 0.43);
  const double ratio = spec.entries[1].weight / spec.entries[0].weight;
  require(std::fabs(ratio - std::pow(10.0, 0.43)) < 1e-9, "mixture ratio wrong");
  require(std::fabs(spec.entries[0].weight + spec.entries[1].weight - 1.0) < 1e-12,
          "mixture weights do not sum to 1");
}

void check_pad_round_trip() {
  const std::vector<double> x = {0.25, -1.5, 3.25};
  auto [padded, mask] = data::pad_and_mask_vector(x, 8);
  for (int j = 3; j < 8; ++j) require(padded[j] == 0.0, "padding not zero");
  require(data::unpad_vector(padded, mask) == x, "unpad(pad(x)) != x");
}

void check_episode_round_trip() {
  Rng rng(108);
  auto episodes = data::gen_episodes("arm_lite", "reach", 1, rng);
  const auto dir = scratch_dir();
  const auto p1 = dir / "verify_ep1.fae";
  const auto p2 = dir / "verify_ep2.fae";
  data::save_episode(episodes[0], p1);
  data::save_episode(data::load_episode(p1), p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  require(b1 == b2 && !b1.empty(), "episode file round trip not bit-exact");
}

void check_checkpoint_round_trip() {
  ModelConfig cfg = tiny_model_config();
  PolicyModel model(cfg, 11);
  const auto dir = scratch_dir();
  model.save_checkpoint(dir / "verify_model.ckpt");
  PolicyModel loaded = PolicyModel::load_checkpoint(dir / "verify_model.ckpt");
  const auto& ea = model.params().entries();
  const auto& eb = loaded.params().entries();
  require(ea.size() == eb.size(), "checkpoint entry count changed");
  for (size_t i = 0; i < ea.size(); ++i) {
    require(std::memcmp(ea[i].second.data(), eb[i].second.data(),
                        sizeof(double) * ea[i].second.numel()) == 0,
            "checkpoint round trip not bit-exact");
  }
}

void check_forward_kinematics() {
  Rng rng(109);
  for (int i = 0; i < 20; ++i) {
    const double t1 = rng.uniform(-3.0, 3.0), t2 = rng.uniform(-3.0, 3.0);
    const auto ee = sim::ToyEnv::forward_kinematics(0.0, 0.0, t1, t2);
    const double ex = std::cos(t1) + 0.8 * std::cos(t1 + t2);
    const double ey = std::sin(t1) + 0.8 * std::sin(t1 + t2);
    require(std::fabs(ee[0] - ex) < 1e-12 && std::fabs(ee[1] - ey) < 1e-12,
            "forward kinematics mismatch");
  }
}

void check_rubric_monotonicity() {
  sim::ToyEnv env("arm", "sort2", 42);
  Rng rng(110);
  sim::ExpertResult res = sim::scripted_expert(env, rng);
  sim::ToyEnv replay("arm", "sort2", 42);
  double prev = 0.0;
  for (const auto& a : res.actions) {
    replay.step(a);
    const double s = replay.rubric_score();
    require(s >= prev && s >= 0.0 && s <= 1.0, "rubric score not monotone in [0,1]");
    prev = s;
  }
  require(prev == 1.0, "expert did not reach score 1.0");
}

void check_replay_determinism() {
  sim::ToyEnv env("dual", "pick-place", 43);
  Rng rng(111);
  sim::ExpertResult res = sim::scripted_expert(env, rng);
  sim::ToyEnv replay("dual", "pick-place", 43);
  for (const auto& a : res.actions) replay.step(a);
  require(replay.raw_state() == env.raw_state() && replay.world_vec() == env.world_vec(),
          "replay did not reproduce the final state");
}

void check_training_determinism() {
  ModelConfig cfg = tiny_model_config();
  Rng rng(112);
  Observation obs = tiny_observation(cfg, rng);
  ActionChunk chunk = random_chunk(cfg, rng, 3);
  data::BimodalChunkSource source(obs, chunk, chunk, FlowConfig{}, 9);
  train::TrainConfig tc;
  tc.steps = 8;
  tc.warmup_steps = 2;
  tc.batch_size = 2;
  tc.eval_every = 4;
  PolicyModel m1(cfg, 77);
  PolicyModel m2(cfg, 77);
  train::train_loop(m1, source, tc, "");
  train::train_loop(m2, source, tc, "");
  const auto& ea = m1.params().entries();
  const auto& eb = m2.params().entries();
  for (size_t i = 0; i < ea.size(); ++i) {
    require(std::memcmp(ea[i].second.data(), eb[i].second.data(),
                        sizeof(double) * ea[i].second.numel()) == 0,
            "same-seed training produced different weights");
  }
}

void check_small_variant_identity() {
  ModelConfig cfg = tiny_model_config();
  cfg.variant = "small";
  PolicyModel model(cfg, 13);
  Rng rng(113);
  Observation obs = tiny_observation(cfg, rng);
  Tensor noisy = Tensor::randn({cfg.horizon, cfg.action_dim}, rng, 1.0);
  Tensor v1 = model.forward_small(obs, noisy, 0.2);
  Tensor v2 = model.forward_small(obs, noisy, 0.9);  // zero gates: tau must not matter yet
  require(std::memcmp(v1.data(), v2.data(), sizeof(double) * v1.numel()) == 0,
          "AdaLN-Zero gates are not zero at init");
}

}  // namespace

const std::vector<Check>& verification_checks() {
  static const std::vector<Check> checks = {
      {"kernel-gradients", check_kernel_gradients},
      {"softmax-row-sums", check_softmax_rows},
      {"rms-norm-unit-rms", check_rms_norm_unit},
      {"forward-determinism", check_forward_determinism},
      {"block-mask-examples", check_block_mask},
      {"expert-isolation", check_expert_isolation},
      {"cache-soundness", check_cache_soundness},
      {"flow-path-endpoints", check_flow_path_endpoints},
      {"timestep-sampler", check_tau_sampler},
      {"mixture-weights", check_mixture_weights},
      {"padding-round-trip", check_pad_round_trip},
      {"episode-file-round-trip", check_episode_round_trip},
      {"checkpoint-round-trip", check_checkpoint_round_trip},
      {"forward-kinematics", check_forward_kinematics},
      {"rubric-monotonicity", check_rubric_monotonicity},
      {"replay-determinism", check_replay_determinism},
      {"training-determinism", check_training_determinism},
      {"small-variant-zero-gates", check_small_variant_identity},
  };
  return checks;
}

std::vector<GradReport> gradient_reports() {
  std::vector<GradReport> reports;
  Rng rng(201);

  auto add_kernel = [&](const std::string& name, const std::function<Tensor()>& f,
                        const std::vector<Tensor>& params) {
    reports.push_back({name, grad_check(f, params, 1e-5), 1e-4});
  };

  {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
    add_kernel("matmul", [&]() { return sum(gelu(matmul(a, b))); }, {a, b});
  }
  {
    Tensor a = random_tensor({3, 6}, rng);
    Tensor w = random_tensor({3, 6}, rng);
    w.set_requires_grad(false);
    add_kernel("softmax", [&]() { return sum(mul(softmax(a), w)); }, {a});
  }
  {
    Tensor a = random_tensor({4, 8}, rng), gain = random_tensor({8}, rng);
    add_kernel("rms_norm", [&]() { return sum(swish(rms_norm(a, gain))); }, {a, gain});
  }
  {
    Tensor a = random_tensor({9}, rng);
    add_kernel("swish", [&]() { return sum(swish(a)); }, {a});
    Tensor g = random_tensor({9}, rng);
    add_kernel("gelu", [&]() { return sum(gelu(g)); }, {g});
  }
  {
    Tensor table = random_tensor({5, 4}, rng);
    add_kernel("embedding_gather",
               [&]() { return sum(gelu(embedding_gather(table, {0, 3, 3}))); }, {table});
  }
  {
    Tensor a = random_tensor({4, 8}, rng);
    std::vector<int> pos = {0, 3, 4, 9};
    add_kernel("rotary_apply", [&]() { return sum(gelu(rotary_apply(a, pos, 4))); }, {a});
  }
  {
    Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng);
    add_kernel("concat_slice", [&]() {
      Tensor c = concat({a, b}, 0);
      return sum(swish(slice(c, 0, 1, 2)));
    }, {a, b});
  }

  // Full tiny-model flow-matching loss over every parameter.
  {
    ModelConfig cfg = tiny_model_config();
    PolicyModel model(cfg, 31);
    Rng data_rng(32);
    Batch batch;
    for (int i = 0; i < 2; ++i) {
      TrainExample ex;
      ex.obs = tiny_observation(cfg, data_rng);
      ex.chunk = random_chunk(cfg, data_rng, 3);
      ex.flow = make_flow_sample(ex.chunk, data_rng, 0.15 + 0.4 * i);
      batch.push_back(std::move(ex));
    }
    auto f = [&]() { return fm_loss(model, batch); };
    reports.push_back({"fm_loss-two-expert-all-params",
                       grad_check(f, model.params().tensors(), 1e-5), 1e-4});
  }
  return reports;
}

}  // namespace tools
}  // namespace flowact
