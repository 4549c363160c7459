#include "flowact/flow.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace flowact {

void FlowConfig::validate() const {
  if (!(cutoff > 0.0 && cutoff <= 1.0)) {
    throw std::invalid_argument("flow config: cutoff s must lie in (0, 1]");
  }
  if (beta_alpha <= 0.0 || beta_beta != 1.0) {
    throw std::invalid_argument("flow config: timestep law must be Beta(alpha, 1), alpha > 0");
  }
  if (steps < 1) throw std::invalid_argument("flow config: steps must be >= 1");
  if (std::fabs(steps * step_size - 1.0) > 1e-9) {
    throw std::invalid_argument("flow config: steps * step_size must equal 1");
  }
  if (!(step_size > 1.0 - cutoff)) {
    throw std::invalid_argument("flow config: step_size must exceed 1 - cutoff");
  }
}

double sample_tau(Rng& rng, const FlowConfig& cfg) {
  cfg.validate();
  const double x = rng.beta_a1(cfg.beta_alpha);
  return cfg.cutoff * (1.0 - x);
}

FlowSample make_flow_sample(const ActionChunk& chunk, Rng& rng, double tau) {
  validate_chunk(chunk, chunk.horizon, chunk.dmax);
  if (tau < 0.0 || tau > 1.0) {
    throw std::invalid_argument("make_flow_sample: tau must lie in [0, 1]");
  }
  FlowSample s;
  s.tau = tau;
  s.horizon = chunk.horizon;
  s.dmax = chunk.dmax;
  const size_t n = chunk.actions.size();
  s.eps.resize(n);
  s.noisy.resize(n);
  s.target.resize(n);
  for (size_t i = 0; i < n; ++i) s.eps[i] = rng.normal();
  // Noise is zeroed on padded columns after drawing so padding never leaks
  // into the loss.
  for (int t = 0; t < chunk.horizon; ++t) {
    for (int j = 0; j < chunk.dmax; ++j) {
      const size_t i = static_cast<size_t>(t) * chunk.dmax + j;
      if (!chunk.dim_mask[j]) s.eps[i] = 0.0;
      s.noisy[i] = tau * chunk.actions[i] + (1.0 - tau) * s.eps[i];
      s.target[i] = chunk.actions[i] - s.eps[i];
    }
  }
  return s;
}

namespace {

Tensor masked_sq_error(const Tensor& prediction, const std::vector<double>& target,
                       const std::vector<uint8_t>& dim_mask, int horizon, int dmax) {
  Tensor target_t = Tensor::from_data({horizon, dmax}, target);
  std::vector<double> maskv(dim_mask.begin(), dim_mask.end());
  Tensor mask_t = Tensor::from_data({dmax}, maskv);
  Tensor diff = sub(prediction, target_t);
  return sum(mul(mul(diff, diff), mask_t));
}

int count_unmasked(const std::vector<uint8_t>& dim_mask) {
  int n = 0;
  for (uint8_t m : dim_mask) n += m ? 1 : 0;
  return n;
}

}  // namespace

Tensor fm_loss(const PolicyModel& model, const Batch& batch) {
  if (batch.empty()) throw std::invalid_argument("fm_loss: empty batch");
  const int horizon = model.config().horizon;
  const int dmax = model.config().action_dim;
  Tensor acc;
  int64_t count = 0;
  for (const TrainExample& ex : batch) {
    validate_chunk(ex.chunk, horizon, dmax);
    if (ex.flow.horizon != horizon || ex.flow.dmax != dmax) {
      throw std::invalid_argument("fm_loss: flow sample shape mismatch");
    }
    Tensor noisy = Tensor::from_data({horizon, dmax}, ex.flow.noisy);
    Tensor v = model.velocity(ex.obs, noisy, ex.flow.tau);
    Tensor term = masked_sq_error(v, ex.flow.target, ex.chunk.dim_mask, horizon, dmax);
    acc = acc.defined() ? add(acc, term) : term;
    count += static_cast<int64_t>(horizon) * count_unmasked(ex.chunk.dim_mask);
  }
  if (count == 0) throw std::invalid_argument("fm_loss: batch has no unmasked dims");
  Tensor loss = scale(acc, 1.0 / static_cast<double>(count));
  if (!std::isfinite(loss.item())) {
    throw std::runtime_error("fm_loss: non-finite loss over batch of " +
                             std::to_string(batch.size()));
  }
  return loss;
}

Tensor mse_loss(const PolicyModel& model, const Batch& batch) {
  if (batch.empty()) throw std::invalid_argument("mse_loss: empty batch");
  const int horizon = model.config().horizon;
  const int dmax = model.config().action_dim;
  Tensor acc;
  int64_t count = 0;
  for (const TrainExample& ex : batch) {
    validate_chunk(ex.chunk, horizon, dmax);
    Tensor zeros = Tensor::zeros({horizon, dmax});
    Tensor prediction = model.velocity(ex.obs, zeros, 0.0);
    Tensor term = masked_sq_error(prediction, ex.chunk.actions, ex.chunk.dim_mask, horizon, dmax);
    acc = acc.defined() ? add(acc, term) : term;
    count += static_cast<int64_t>(horizon) * count_unmasked(ex.chunk.dim_mask);
  }
  if (count == 0) throw std::invalid_argument("mse_loss: batch has no unmasked dims");
  Tensor loss = scale(acc, 1.0 / static_cast<double>(count));
  if (!std::isfinite(loss.item())) {
    throw std::runtime_error("mse_loss: non-finite loss over batch of " +
                             std::to_string(batch.size()));
  }
  return loss;
}

namespace {

ActionChunk run_euler(const PolicyModel& model, const Observation& obs, Rng& rng,
                      const FlowConfig& cfg, const std::vector<uint8_t>& dim_mask, bool cached,
                      IntegrateStats* stats) {
  cfg.validate();
  const int horizon = model.config().horizon;
  const int dmax = model.config().action_dim;
  if (static_cast<int>(dim_mask.size()) != dmax) {
    throw std::invalid_argument("integrate: dim_mask length must equal d_max");
  }
  std::vector<double> a(static_cast<size_t>(horizon) * dmax);
  for (int t = 0; t < horizon; ++t) {
    for (int j = 0; j < dmax; ++j) {
      const double draw = rng.normal();  // fixed draw order regardless of mask
      a[static_cast<size_t>(t) * dmax + j] = dim_mask[j] ? draw : 0.0;
    }
  }

  PrefixCache cache;
  if (cached) {
    cache = model.begin_inference(obs);
    if (stats != nullptr) stats->prefix_forwards += 1;
  }
  for (int k = 0; k < cfg.steps; ++k) {
    const double tau = k * cfg.step_size;
    Tensor noisy = Tensor::from_data({horizon, dmax}, a);
    Tensor v;
    try {
      v = cached ? model.velocity_cached(cache, noisy, tau) : model.velocity(obs, noisy, tau);
    } catch (const std::runtime_error& err) {
      throw std::runtime_error("integrate: failure at step " + std::to_string(k) + ": " +
                               err.what());
    }
    if (stats != nullptr) stats->suffix_forwards += 1;
    const double* pv = v.data();
    for (int t = 0; t < horizon; ++t) {
      for (int j = 0; j < dmax; ++j) {
        const size_t i = static_cast<size_t>(t) * dmax + j;
        if (dim_mask[j]) a[i] += cfg.step_size * pv[i];
        if (!std::isfinite(a[i])) {
          throw std::runtime_error("integrate: non-finite value at step " + std::to_string(k));
        }
      }
    }
  }
  ActionChunk out;
  out.horizon = horizon;
  out.dmax = dmax;
  out.actions = std::move(a);
  out.dim_mask = dim_mask;
  return out;
}

}  // namespace

ActionChunk integrate(const PolicyModel& model, const Observation& obs, Rng& rng,
                      const FlowConfig& cfg, const std::vector<uint8_t>& dim_mask,
                      IntegrateStats* stats) {
  return run_euler(model, obs, rng, cfg, dim_mask, true, stats);
}

ActionChunk integrate_uncached(const PolicyModel& model, const Observation& obs, Rng& rng,
                               const FlowConfig& cfg, const std::vector<uint8_t>& dim_mask) {
  return run_euler(model, obs, rng, cfg, dim_mask, false, nullptr);
}

}  // namespace flowact
