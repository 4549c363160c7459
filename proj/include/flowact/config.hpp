#pragma once

#include <filesystem>
#include <string>

#include "flowact/data.hpp"
#include "flowact/flow.hpp"
#include "flowact/model.hpp"
#include "flowact/runtime.hpp"
#include "flowact/train.hpp"

namespace flowact {

// The full resolved configuration of one CLI run: every module config plus
// the global seed. Serialized into each output directory so a run can be
// reproduced from its artifacts alone.
struct RunConfig {
  uint64_t seed = 0;
  std::string arch = "two-expert";  // two-expert | small
  std::string task = "pick-place";
  std::string embodiment = "arm";

  ModelConfig model;
  FlowConfig flow;
  train::TrainConfig train;
  data::SamplerConfig sampler;
  rt::ControllerConfig controller;

  // key/value pairs, one per line; unknown keys are an error.
  void apply(const std::string& key, const std::string& value);
  void apply_file(const std::filesystem::path& path);
  std::string serialize() const;
  void write(const std::filesystem::path& path) const;
  static RunConfig from_file(const std::filesystem::path& path);

  // Propagates shared fields (seed, arch, horizon, observation geometry) into
  // the per-module configs and validates them.
  void resolve();
};

}  // namespace flowact
