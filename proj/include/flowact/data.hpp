#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <tuple>
#include <vector>

#include "flowact/flow.hpp"
#include "flowact/rng.hpp"
#include "flowact/sim.hpp"
#include "flowact/types.hpp"

namespace flowact {
namespace data {

// One demonstration. Steps store the raw (unpadded) embodiment state, the raw
// action, and the compact world encoding; images are re-rendered on demand
// from the world state, which the simulator guarantees is deterministic.
// All stored floats are rounded through 32-bit precision at generation time
// so in-memory data equals what the file round-trips.
struct EpisodeStep {
  std::vector<double> state;
  std::vector<double> action;
  std::vector<double> world;
};

struct Episode {
  std::string embodiment;
  std::string task;
  int state_dim = 0;
  int action_dim = 0;
  int world_floats = 0;
  std::vector<sim::Segment> segments;
  std::vector<EpisodeStep> steps;
};

// Scripted-expert demonstrations with coin-flip multimodality and segment
// annotations. Deterministic given the rng state.
std::vector<Episode> gen_episodes(const std::string& embodiment, const std::string& task,
                                  int count, Rng& rng);

// ---- episode files ---------------------------------------------------------
// Text manifest (embodiment, task, dims, segment table) followed by binary
// step records of little-endian 32-bit floats, row-major
// [state | action | world] per step. Layout: <root>/<embodiment>/<task>/ep_*.
void save_episode(const Episode& episode, const std::filesystem::path& path);
Episode load_episode(const std::filesystem::path& path);
void save_dataset(const std::vector<Episode>& episodes, const std::filesystem::path& root);

struct TaskDataset {
  std::string embodiment;
  std::string task;
  std::vector<Episode> episodes;
  int64_t total_steps() const;
};

TaskDataset load_task_dataset(const std::filesystem::path& root, const std::string& embodiment,
                              const std::string& task);
std::vector<TaskDataset> load_all_datasets(const std::filesystem::path& root);

// ---- cross-embodiment padding ------------------------------------------------

// Next-H actions starting at t, repeating the final action beyond the episode
// end, padded to d_max.
ActionChunk chunk_from_episode(const Episode& episode, int t, int horizon, int dmax);

std::pair<std::vector<double>, std::vector<uint8_t>> pad_and_mask_vector(
    const std::vector<double>& v, int dmax);
std::vector<double> unpad_vector(const std::vector<double>& padded,
                                 const std::vector<uint8_t>& mask);
ActionChunk pad_and_mask_chunk(const std::vector<std::vector<double>>& raw_rows, int dmax);
std::vector<uint8_t> image_slot_flags(int num_cameras, int n_images);

// ---- mixture weighting ---------------------------------------------------------

struct MixtureEntry {
  std::string embodiment;
  std::string task;
  int64_t count = 0;
  double weight = 0.0;
};

struct MixtureSpec {
  double alpha = 0.43;
  std::vector<MixtureEntry> entries;
};

// weight_i = n_i^alpha / sum_j n_j^alpha
MixtureSpec mixture_weights(const std::vector<std::tuple<std::string, std::string, int64_t>>& counts,
                            double alpha);

// ---- batch sources ----------------------------------------------------------

// Batch k is a pure function of (seed, k), independent of who assembles it.
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual Batch sample(int64_t batch_index, int batch_size) const = 0;
  virtual std::string describe() const = 0;
};

struct SamplerConfig {
  int horizon = 50;
  int dmax = 8;
  int n_images = 3;
  int image_size = 16;
  double alpha = 0.43;
  double annotation_prob = 0.5;  // segment annotation vs task name as language
  FlowConfig flow;
  uint64_t seed = 0;
};

class MixtureSampler : public BatchSource {
 public:
  MixtureSampler(std::vector<TaskDataset> datasets, SamplerConfig config);
  Batch sample(int64_t batch_index, int batch_size) const override;
  std::string describe() const override;
  const MixtureSpec& mixture() const { return mixture_; }

  // (dataset index, episode index, timestep) of one uniform draw; exposed for
  // the mixture-frequency oracle tests.
  std::tuple<int, int, int> draw_index(Rng& rng) const;

 private:
  TrainExample assemble(int dataset, int episode, int t, const std::vector<int>& language,
                        Rng& rng) const;

  std::vector<TaskDataset> datasets_;
  SamplerConfig cfg_;
  MixtureSpec mixture_;
};

// Equal mixture of two fixed chunks under one fixed observation; the
// multimodality probe dataset.
class BimodalChunkSource : public BatchSource {
 public:
  BimodalChunkSource(Observation obs, ActionChunk mode_a, ActionChunk mode_b,
                     FlowConfig flow, uint64_t seed);
  Batch sample(int64_t batch_index, int batch_size) const override;
  std::string describe() const override { return "bimodal-synthetic"; }
  const ActionChunk& mode_a() const { return mode_a_; }
  const ActionChunk& mode_b() const { return mode_b_; }

 private:
  Observation obs_;
  ActionChunk mode_a_;
  ActionChunk mode_b_;
  FlowConfig flow_;
  uint64_t seed_ = 0;
};

}  // namespace data
}  // namespace flowact
