#pragma once

#include <vector>

#include "flowact/model.hpp"
#include "flowact/rng.hpp"
#include "flowact/tensor.hpp"
#include "flowact/types.hpp"

namespace flowact {

// Flow-matching hyperparameters. Training timesteps follow
// tau = s * (1 - X) with X ~ Beta(beta_alpha, beta_beta), which concentrates
// mass at low (noisy) timesteps and never samples above the cutoff s.
// Sampling integrates the learned field with `steps` forward Euler steps of
// size `step_size`.
struct FlowConfig {
  double cutoff = 0.999;  // s
  double beta_alpha = 1.5;
  double beta_beta = 1.0;  // only (alpha, 1) shapes are supported
  int steps = 10;
  double step_size = 0.1;  // delta

  void validate() const;
};

// One training draw on the linear path A^tau = tau*A + (1-tau)*eps. The
// regression target is the path derivative u = A - eps; padded action columns
// are exactly zero in every field.
struct FlowSample {
  double tau = 0.0;
  int horizon = 0;
  int dmax = 0;
  std::vector<double> eps;
  std::vector<double> noisy;
  std::vector<double> target;
};

struct TrainExample {
  Observation obs;
  ActionChunk chunk;
  FlowSample flow;
};
using Batch = std::vector<TrainExample>;

double sample_tau(Rng& rng, const FlowConfig& cfg);

FlowSample make_flow_sample(const ActionChunk& chunk, Rng& rng, double tau);

// Mean squared velocity error over batch, horizon and unmasked action dims;
// padded dims are excluded from numerator and denominator. Records on the
// active graph.
Tensor fm_loss(const PolicyModel& model, const Batch& batch);

// Regression baseline on the same trunk: the model is queried once at
// (A^tau = 0, tau = 0) and its output regressed onto the clean chunk.
Tensor mse_loss(const PolicyModel& model, const Batch& batch);

struct IntegrateStats {
  int prefix_forwards = 0;
  int suffix_forwards = 0;
};

// Forward Euler from A^0 ~ N(0, I) (zero on padded dims) to A^1. The prefix
// cache is built once; each step recomputes only the action tokens.
ActionChunk integrate(const PolicyModel& model, const Observation& obs, Rng& rng,
                      const FlowConfig& cfg, const std::vector<uint8_t>& dim_mask,
                      IntegrateStats* stats = nullptr);

// Reference path without the cache (full recompute every step); used to
// cross-check cache soundness.
ActionChunk integrate_uncached(const PolicyModel& model, const Observation& obs, Rng& rng,
                               const FlowConfig& cfg, const std::vector<uint8_t>& dim_mask);

}  // namespace flowact
