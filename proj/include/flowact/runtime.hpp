#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "flowact/flow.hpp"
#include "flowact/model.hpp"
#include "flowact/rng.hpp"
#include "flowact/sim.hpp"
#include "flowact/types.hpp"

namespace flowact {
namespace rt {

// Open-loop chunked execution: one inference produces H actions, execute_k of
// them run before the next inference. No aggregation across chunks by
// default; temporal ensembling exists behind a flag for the ablation but
// stays off.
struct ControllerConfig {
  int execute_k = 25;
  bool temporal_ensemble = false;
  double ensemble_decay = 0.5;
  int n_images = 3;
  int dmax = 8;
  int image_size = 16;

  void validate(int horizon) const;
};

// Velocity-field sampling with the prefix cache: one cache build plus `steps`
// suffix-only forwards. The returned chunk keeps the padded layout; its mask
// marks the embodiment dims it was clipped to.
ActionChunk sample_chunk(const PolicyModel& model, const Observation& obs, Rng& rng,
                         const FlowConfig& flow, const std::vector<uint8_t>& dim_mask,
                         IntegrateStats* stats = nullptr);

using ChunkPolicy = std::function<ActionChunk(const Observation& obs)>;
using LanguageProvider = std::function<std::vector<int>(const sim::ToyEnv& env, int chunk_index)>;

ChunkPolicy make_model_policy(const PolicyModel& model, const FlowConfig& flow,
                              const std::vector<uint8_t>& dim_mask, Rng& rng,
                              IntegrateStats* stats = nullptr);

// Language providers for the evaluation conditions.
LanguageProvider flat_language(const std::string& task);
LanguageProvider commander_language();
LanguageProvider scripted_language(std::vector<std::vector<int>> commands);  // human file

struct RolloutResult {
  sim::Trajectory trajectory;
  double score = 0.0;
  int inference_calls = 0;
  int env_steps = 0;
  bool aborted = false;  // env failure mid-rollout; trajectory holds the partial run
  std::string error;
};

RolloutResult run_controller(sim::ToyEnv& env, const ChunkPolicy& policy,
                             const LanguageProvider& language, const ControllerConfig& cfg,
                             int horizon, int max_steps);

void write_trace(const RolloutResult& rollout, const std::filesystem::path& path);

// ---- latency profiling ---------------------------------------------------------

struct ProfileRow {
  std::string part;
  double median_ms = 0.0;
};

struct ProfileReport {
  std::vector<ProfileRow> rows;  // encoders, observation forward, xN action forward, total
  double total_ms() const;
};

// Median wall times over `repeats` runs after a warmup call. With cached =
// false the action forwards recompute the whole sequence every step.
ProfileReport profile(const PolicyModel& model, const Observation& obs, const FlowConfig& flow,
                      int repeats, bool cached = true);

void write_profile_csv(const ProfileReport& report, const std::filesystem::path& path);

// ---- evaluation harness -----------------------------------------------------------

struct EvalSummary {
  double mean = 0.0;
  double stderr_of_mean = 0.0;
  std::vector<double> scores;
};

EvalSummary evaluate(const PolicyModel& model, const std::string& embodiment,
                     const std::string& task, int episodes, const LanguageProvider& language,
                     const ControllerConfig& cfg, const FlowConfig& flow, uint64_t base_seed);

}  // namespace rt
}  // namespace flowact
