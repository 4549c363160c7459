#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flowact/data.hpp"
#include "flowact/model.hpp"
#include "flowact/tensor.hpp"

namespace flowact {
namespace train {

struct TrainConfig {
  std::string phase = "pretrain";  // pretrain | finetune | scratch
  int steps = 2000;
  int batch_size = 32;
  double learning_rate = 3e-4;
  int warmup_steps = 100;
  double min_learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 1e-4;
  double grad_clip_norm = 1.0;
  uint64_t seed = 0;
  int eval_every = 50;
  std::string objective = "flow";  // flow | mse

  void validate() const;
};

// Linear warmup to learning_rate, then cosine decay to min_learning_rate.
double lr_at(const TrainConfig& cfg, int step);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  void init(const std::vector<Tensor>& params);
};

// Decoupled-weight-decay adaptive-moment update with bias correction;
// t is 1-based. Throws on non-finite gradients.
void adamw_step(std::vector<Tensor>& params, AdamState& state, const TrainConfig& cfg, int t,
                double lr);

// Scales all gradients so their global L2 norm is at most max_norm; returns
// the pre-clip norm.
double clip_global_norm(const std::vector<Tensor>& params, double max_norm);

// Aborts a run whose eval loss exceeds 10x the first observed loss for three
// consecutive evals.
class DivergenceMonitor {
 public:
  void observe(double loss);

 private:
  bool has_initial_ = false;
  double initial_ = 0.0;
  int consecutive_ = 0;
};

struct LogRow {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  std::vector<LogRow> log;
  double final_loss = 0.0;
  std::filesystem::path checkpoint_path;
};

// Core loop: per step, sample batch k, build the loss graph, backprop, clip,
// update. Writes train_log.csv (step, loss, lr, wall_ms) and checkpoint.ckpt
// into out_dir unless it is empty. Fully deterministic up to the wall_ms
// column.
TrainResult train_loop(PolicyModel& model, const data::BatchSource& source,
                       const TrainConfig& cfg, const std::filesystem::path& out_dir);

// Pre-training requires a mixture spanning at least two embodiments and two
// tasks.
TrainResult pretrain(PolicyModel& model, const std::vector<data::TaskDataset>& datasets,
                     const TrainConfig& cfg, const data::SamplerConfig& sampler_cfg,
                     const std::filesystem::path& out_dir);

// Fine-tuning continues from the model's current weights on one task.
TrainResult finetune(PolicyModel& model, const data::TaskDataset& dataset,
                     const TrainConfig& cfg, const data::SamplerConfig& sampler_cfg,
                     const std::filesystem::path& out_dir);

void write_log_csv(const std::vector<LogRow>& log, const std::filesystem::path& path);

}  // namespace train
}  // namespace flowact
