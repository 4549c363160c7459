#include "flowact/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "flowact/flow.hpp"

namespace flowact {
namespace train {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

void TrainConfig::validate() const {
  if (phase != "pretrain" && phase != "finetune" && phase != "scratch") {
    throw std::invalid_argument("train config: unknown phase '" + phase + "'");
  }
  if (steps < 0) throw std::invalid_argument("train config: steps must be >= 0");
  if (steps > 0 && warmup_steps >= steps) {
    throw std::invalid_argument("train config: warmup must be shorter than the run");
  }
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (learning_rate <= 0.0 || min_learning_rate < 0.0) {
    throw std::invalid_argument("train config: learning rates must be positive");
  }
  if (eval_every < 1) throw std::invalid_argument("train config: eval_every must be >= 1");
  if (objective != "flow" && objective != "mse") {
    throw std::invalid_argument("train config: unknown objective '" + objective + "'");
  }
}

double lr_at(const TrainConfig& cfg, int step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.learning_rate * (step + 1) / cfg.warmup_steps;
  }
  const int decay_span = std::max(1, cfg.steps - cfg.warmup_steps);
  const double progress =
      std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / decay_span);
  const double cosine = 0.5 * (1.0 + std::cos(kPi * progress));
  return cfg.min_learning_rate + (cfg.learning_rate - cfg.min_learning_rate) * cosine;
}

void AdamState::init(const std::vector<Tensor>& params) {
  m.clear();
  v.clear();
  for (const Tensor& p : params) {
    m.emplace_back(p.numel(), 0.0);
    v.emplace_back(p.numel(), 0.0);
  }
}

void adamw_step(std::vector<Tensor>& params, AdamState& state, const TrainConfig& cfg, int t,
                double lr) {
  if (t < 1) throw std::invalid_argument("adamw_step: t must be >= 1");
  if (state.m.size() != params.size()) throw std::invalid_argument("adamw_step: state mismatch");
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    const double* g = p.grad();
    double* pd = p.data();
    double* pm = state.m[i].data();
    double* pv = state.v[i].data();
    const int64_t n = p.numel();
    for (int64_t j = 0; j < n; ++j) {
      if (!std::isfinite(g[j])) {
        throw std::runtime_error("adamw_step: non-finite gradient in parameter " +
                                 std::to_string(i));
      }
      pm[j] = cfg.beta1 * pm[j] + (1.0 - cfg.beta1) * g[j];
      pv[j] = cfg.beta2 * pv[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = pm[j] / bc1;
      const double vhat = pv[j] / bc2;
      pd[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * pd[j]);
    }
  }
}

double clip_global_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const Tensor& p : params) {
    const double* g = p.grad();
    for (int64_t j = 0; j < p.numel(); ++j) sq += g[j] * g[j];
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const Tensor& p : params) {
      double* g = p.grad();
      for (int64_t j = 0; j < p.numel(); ++j) g[j] *= s;
    }
  }
  return norm;
}

void DivergenceMonitor::observe(double loss) {
  if (!has_initial_) {
    has_initial_ = true;
    initial_ = loss;
    return;
  }
  if (loss > 10.0 * initial_) {
    ++consecutive_;
    if (consecutive_ >= 3) {
      throw std::runtime_error("training diverged: loss " + std::to_string(loss) +
                               " exceeded 10x the initial loss " + std::to_string(initial_) +
                               " for 3 consecutive evals");
    }
  } else {
    consecutive_ = 0;
  }
}

void write_log_csv(const std::vector<LogRow>& log, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("train: cannot write " + path.string());
  os << "step,loss,lr,wall_ms\n";
  char buf[160];
  for (const LogRow& row : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.3f\n", row.step, row.loss, row.lr,
                  row.wall_ms);
    os << buf;
  }
}

TrainResult train_loop(PolicyModel& model, const data::BatchSource& source,
                       const TrainConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::vector<Tensor> params = model.params().tensors();
  AdamState adam;
  adam.init(params);
  DivergenceMonitor monitor;
  TrainResult result;
  const auto t_start = std::chrono::steady_clock::now();

  for (int step = 0; step < cfg.steps; ++step) {
    Batch batch = source.sample(step, cfg.batch_size);
    double loss_value = 0.0;
    {
      Graph graph;
      Tensor loss =
          cfg.objective == "mse" ? mse_loss(model, batch) : fm_loss(model, batch);
      loss_value = loss.item();
      graph.backward(loss);
    }
    clip_global_norm(params, cfg.grad_clip_norm);
    adamw_step(params, adam, cfg, step + 1, lr_at(cfg, step));
    for (Tensor& p : params) p.zero_grad();
    result.final_loss = loss_value;

    if (step % cfg.eval_every == 0 || step == cfg.steps - 1) {
      const double wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start)
              .count();
      result.log.push_back(LogRow{step, loss_value, lr_at(cfg, step), wall_ms});
      monitor.observe(loss_value);
    }
  }

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_log_csv(result.log, out_dir / "train_log.csv");
    result.checkpoint_path = out_dir / "checkpoint.ckpt";
    model.save_checkpoint(result.checkpoint_path);
  }
  return result;
}

TrainResult pretrain(PolicyModel& model, const std::vector<data::TaskDataset>& datasets,
                     const TrainConfig& cfg, const data::SamplerConfig& sampler_cfg,
                     const std::filesystem::path& out_dir) {
  if (datasets.empty()) throw std::invalid_argument("pretrain: empty mixture");
  std::set<std::string> embodiments, tasks;
  for (const auto& ds : datasets) {
    embodiments.insert(ds.embodiment);
    tasks.insert(ds.task);
  }
  if (embodiments.size() < 2 || tasks.size() < 2) {
    throw std::invalid_argument("pretrain: mixture must span >= 2 embodiments and >= 2 tasks, got " +
                                std::to_string(embodiments.size()) + " embodiment(s) and " +
                                std::to_string(tasks.size()) + " task(s)");
  }
  if (sampler_cfg.horizon != model.config().horizon) {
    throw std::invalid_argument("pretrain: sampler horizon does not match the model");
  }
  data::MixtureSampler sampler(datasets, sampler_cfg);
  return train_loop(model, sampler, cfg, out_dir);
}

TrainResult finetune(PolicyModel& model, const data::TaskDataset& dataset,
                     const TrainConfig& cfg, const data::SamplerConfig& sampler_cfg,
                     const std::filesystem::path& out_dir) {
  if (dataset.episodes.empty()) throw std::invalid_argument("finetune: empty dataset");
  if (sampler_cfg.horizon != model.config().horizon) {
    throw std::invalid_argument("finetune: sampler horizon does not match the model");
  }
  const int d = embodiment(dataset.embodiment).action_dim;
  if (d > model.config().action_dim) {
    throw std::invalid_argument("finetune: embodiment action dim " + std::to_string(d) +
                                " exceeds model d_max");
  }
  data::MixtureSampler sampler({dataset}, sampler_cfg);
  return train_loop(model, sampler, cfg, out_dir);
}

}  // namespace train
}  // namespace flowact
