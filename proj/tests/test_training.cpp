#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "flowact/data.hpp"
#include "flowact/flow.hpp"
#include "flowact/train.hpp"

using namespace flowact;
using namespace flowact::train;

namespace {

const std::filesystem::path kTmp = std::filesystem::temp_directory_path() / "flowact_train_test";

ModelConfig tiny_config() {
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
  cfg.vocab_size = 24;
  return cfg;
}

Observation fixed_observation(const ModelConfig& cfg) {
  Observation obs;
  obs.images.resize(cfg.max_images);
  obs.images[0].present = true;
  obs.images[0].pixels.assign(static_cast<size_t>(cfg.image_size) * cfg.image_size, 0.25);
  obs.images[0].pixels[5] = 0.9;
  obs.language = {2};
  obs.state.assign(cfg.action_dim, 0.0);
  obs.state_mask.assign(cfg.action_dim, 0);
  obs.state[0] = 0.4;
  obs.state_mask[0] = 1;
  return obs;
}

// Single-chunk dataset: the target distribution is a point mass.
class PointMassSource : public data::BatchSource {
 public:
  PointMassSource(Observation obs, ActionChunk chunk, uint64_t seed)
      : obs_(std::move(obs)), chunk_(std::move(chunk)), seed_(seed) {}

  Batch sample(int64_t batch_index, int batch_size) const override {
    Rng rng = Rng::derived(seed_, static_cast<uint64_t>(batch_index));
    Batch batch;
    for (int i = 0; i < batch_size; ++i) {
      TrainExample ex;
      ex.obs = obs_;
      ex.chunk = chunk_;
      ex.flow = make_flow_sample(chunk_, rng, sample_tau(rng, FlowConfig{}));
      batch.push_back(std::move(ex));
    }
    return batch;
  }
  std::string describe() const override { return "point-mass"; }

 private:
  Observation obs_;
  ActionChunk chunk_;
  uint64_t seed_;
};

bool params_identical(const PolicyModel& a, const PolicyModel& b) {
  const auto& ea = a.params().entries();
  const auto& eb = b.params().entries();
  if (ea.size() != eb.size()) return false;
  for (size_t i = 0; i < ea.size(); ++i) {
    if (std::memcmp(ea[i].second.data(), eb[i].second.data(),
                    sizeof(double) * ea[i].second.numel()) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("zero gradient and zero weight decay leave parameters unchanged") {
  Tensor p = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
  std::vector<Tensor> params = {p};
  AdamState state;
  state.init(params);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  p.grad();  // allocate zeros
  adamw_step(params, state, cfg, 1, 0.1);
  CHECK(p.at(0) == 1.0);
  CHECK(p.at(1) == -2.0);
  CHECK(p.at(2) == 0.5);
}

TEST_CASE("first step moves by about lr in the gradient sign direction") {
  Tensor p = Tensor::from_data({2}, {1.0, 1.0}, true);
  std::vector<Tensor> params = {p};
  AdamState state;
  state.init(params);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  p.grad()[0] = 0.5;
  p.grad()[1] = -0.03;
  adamw_step(params, state, cfg, 1, 0.1);
  // Bias correction makes mhat = g and vhat = g^2, so the step is
  // lr * g / (|g| + eps) = lr * sign(g).
  CHECK(p.at(0) == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
  CHECK(p.at(1) == doctest::Approx(1.0 + 0.1).epsilon(1e-6));
}

TEST_CASE("adamw rejects non-finite gradients") {
  Tensor p = Tensor::from_data({1}, {1.0}, true);
  std::vector<Tensor> params = {p};
  AdamState state;
  state.init(params);
  TrainConfig cfg;
  p.grad()[0] = std::nan("");
  CHECK_THROWS_AS(adamw_step(params, state, cfg, 1, 0.1), std::runtime_error);
}

TEST_CASE("adamw minimizes a quadratic to 1e-3 within 2000 steps") {
  Tensor x = Tensor::from_data({1}, {0.0}, true);
  std::vector<Tensor> params = {x};
  AdamState state;
  state.init(params);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  const Tensor three = Tensor::scalar(3.0);
  for (int t = 1; t <= 2000; ++t) {
    {
      Graph g;
      Tensor d = sub(x, three);
      Tensor loss = mul(d, d);
      g.backward(loss);
    }
    adamw_step(params, state, cfg, t, 0.05);
    x.zero_grad();
  }
  CHECK(std::fabs(x.item() - 3.0) < 1e-3);
}

TEST_CASE("gradient clipping rescales to the max norm") {
  Tensor p = Tensor::from_data({2}, {0.0, 0.0}, true);
  p.grad()[0] = 3.0;
  p.grad()[1] = 4.0;
  const double norm = clip_global_norm({p}, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(p.grad()[0] == doctest::Approx(0.6));
  CHECK(p.grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("learning rate schedule: warmup then cosine to the floor") {
  TrainConfig cfg;
  cfg.steps = 1000;
  cfg.warmup_steps = 100;
  cfg.learning_rate = 3e-4;
  cfg.min_learning_rate = 1e-5;
  CHECK(lr_at(cfg, 0) == doctest::Approx(3e-4 / 100));
  CHECK(lr_at(cfg, 99) == doctest::Approx(3e-4));
  CHECK(lr_at(cfg, 999) == doctest::Approx(1e-5).epsilon(0.01));
  CHECK(lr_at(cfg, 550) < 3e-4);
  CHECK(lr_at(cfg, 550) > 1e-5);
}

TEST_CASE("divergence monitor aborts after three consecutive blowups") {
  DivergenceMonitor monitor;
  monitor.observe(1.0);
  monitor.observe(15.0);
  monitor.observe(2.0);  // resets the streak
  monitor.observe(15.0);
  monitor.observe(16.0);
  CHECK_THROWS_AS(monitor.observe(17.0), std::runtime_error);
}

TEST_CASE("training config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.warmup_steps = cfg.steps;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.phase = "warmstart";
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.objective = "l1";
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("pretrain requires a mixture over two embodiments and two tasks") {
  ModelConfig mc = tiny_config();
  mc.max_images = 3;
  mc.action_dim = 8;
  PolicyModel model(mc, 1);
  TrainConfig cfg;
  cfg.steps = 1;
  cfg.warmup_steps = 0;
  data::SamplerConfig sc;
  sc.horizon = mc.horizon;
  CHECK_THROWS_AS(pretrain(model, {}, cfg, sc, ""), std::invalid_argument);

  Rng rng(3);
  data::TaskDataset one;
  one.embodiment = "arm";
  one.task = "reach";
  one.episodes = data::gen_episodes("arm", "reach", 1, rng);
  CHECK_THROWS_AS(pretrain(model, {one}, cfg, sc, ""), std::invalid_argument);
}

TEST_CASE("same seed gives identical checkpoints and loss logs") {
  ModelConfig mc = tiny_config();
  ActionChunk target = ActionChunk::zeros(mc.horizon, mc.action_dim);
  for (int t = 0; t < mc.horizon; ++t) {
    for (int j = 0; j < mc.action_dim; ++j) target.at(t, j) = 0.3 * (j + 1);
  }
  PointMassSource source(fixed_observation(mc), target, 11);
  TrainConfig cfg;
  cfg.steps = 12;
  cfg.warmup_steps = 2;
  cfg.batch_size = 4;
  cfg.eval_every = 4;

  PolicyModel m1(mc, 42);
  PolicyModel m2(mc, 42);
  TrainResult r1 = train_loop(m1, source, cfg, "");
  TrainResult r2 = train_loop(m2, source, cfg, "");
  CHECK(params_identical(m1, m2));
  REQUIRE(r1.log.size() == r2.log.size());
  for (size_t i = 0; i < r1.log.size(); ++i) {
    CHECK(r1.log[i].loss == r2.log[i].loss);
    CHECK(r1.log[i].lr == r2.log[i].lr);
  }
}

TEST_CASE("zero-step fine-tune leaves the checkpoint unchanged") {
  ModelConfig mc = tiny_config();
  mc.action_dim = 8;
  mc.max_images = 3;
  PolicyModel model(mc, 7);
  PolicyModel before(mc, 7);
  Rng rng(8);
  data::TaskDataset ds;
  ds.embodiment = "arm";
  ds.task = "reach";
  ds.episodes = data::gen_episodes("arm", "reach", 1, rng);
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.warmup_steps = 0;
  data::SamplerConfig sc;
  sc.horizon = mc.horizon;
  finetune(model, ds, cfg, sc, "");
  CHECK(params_identical(model, before));
}

TEST_CASE("checkpoint round trip reproduces the loss to the last bit") {
  ModelConfig mc = tiny_config();
  ActionChunk target = ActionChunk::zeros(mc.horizon, mc.action_dim);
  PointMassSource source(fixed_observation(mc), target, 3);
  PolicyModel model(mc, 5);
  TrainConfig cfg;
  cfg.steps = 6;
  cfg.warmup_steps = 1;
  cfg.batch_size = 2;
  std::filesystem::create_directories(kTmp);
  train_loop(model, source, cfg, kTmp / "run");
  PolicyModel loaded = PolicyModel::load_checkpoint(kTmp / "run" / "checkpoint.ckpt");

  Batch batch = source.sample(99, 4);
  const double a = fm_loss(model, batch).item();
  const double b = fm_loss(loaded, batch).item();
  CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
}

TEST_CASE("training log file carries the (step, loss, lr, wall_ms) schema") {
  std::filesystem::create_directories(kTmp);
  write_log_csv({LogRow{0, 1.5, 3e-4, 12.0}, LogRow{50, 0.7, 2e-4, 400.0}}, kTmp / "log.csv");
  std::ifstream is(kTmp / "log.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header == "step,loss,lr,wall_ms");
  std::string row;
  std::getline(is, row);
  CHECK(row.rfind("0,1.5,", 0) == 0);
}

TEST_CASE("flow training on a point mass recovers the chunk via integration") {
  ModelConfig mc = tiny_config();
  ActionChunk target = ActionChunk::zeros(mc.horizon, mc.action_dim);
  for (int t = 0; t < mc.horizon; ++t) {
    for (int j = 0; j < mc.action_dim; ++j) target.at(t, j) = (j % 2 ? -0.6 : 0.8);
  }
  Observation obs = fixed_observation(mc);
  PointMassSource source(obs, target, 21);
  PolicyModel model(mc, 22);
  TrainConfig cfg;
  cfg.steps = 2500;
  cfg.warmup_steps = 20;
  cfg.batch_size = 8;
  cfg.learning_rate = 3e-3;
  cfg.eval_every = 250;
  TrainResult res = train_loop(model, source, cfg, "");
  CHECK(res.log.back().loss < res.log.front().loss);

  FlowConfig fc;
  Rng rng(23);
  double worst = 0.0;
  for (int draw = 0; draw < 5; ++draw) {
    ActionChunk sample = integrate(model, obs, rng, fc, target.dim_mask);
    for (int t = 0; t < mc.horizon; ++t) {
      for (int j = 0; j < mc.action_dim; ++j) {
        worst = std::max(worst, std::fabs(sample.at(t, j) - target.at(t, j)));
      }
    }
  }
  CHECK(worst < 0.05);
}
