#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowact {

// One camera slot. Absent slots keep an (ignored) pixel buffer so that slot
// indices stay stable.
struct Image {
  bool present = false;
  std::vector<double> pixels;  // image_size x image_size grayscale in [0, 1]
};

// o_t: camera images, a language token sequence and the proprioceptive state,
// already padded to the model-wide maximum dimensionality.
struct Observation {
  std::vector<Image> images;        // exactly max_images slots
  std::vector<int> language;        // token ids
  std::vector<double> state;        // length d_max, padded entries exactly 0
  std::vector<uint8_t> state_mask;  // length d_max, 1 = real dimension

  int num_present_images() const {
    int n = 0;
    for (const auto& im : images) n += im.present ? 1 : 0;
    return n;
  }
};

// H x d_max matrix of future actions plus the padding mask.
struct ActionChunk {
  int horizon = 0;
  int dmax = 0;
  std::vector<double> actions;    // row-major horizon x dmax
  std::vector<uint8_t> dim_mask;  // length dmax, 1 = real dimension

  static ActionChunk zeros(int horizon, int dmax) {
    ActionChunk c;
    c.horizon = horizon;
    c.dmax = dmax;
    c.actions.assign(static_cast<size_t>(horizon) * dmax, 0.0);
    c.dim_mask.assign(dmax, 1);
    return c;
  }

  double& at(int t, int j) { return actions[static_cast<size_t>(t) * dmax + j]; }
  double at(int t, int j) const { return actions[static_cast<size_t>(t) * dmax + j]; }

  std::vector<double> row(int t) const {
    return std::vector<double>(actions.begin() + static_cast<size_t>(t) * dmax,
                               actions.begin() + static_cast<size_t>(t + 1) * dmax);
  }
};

void validate_observation(const Observation& obs, int max_images, int dmax);
void validate_chunk(const ActionChunk& chunk, int horizon, int dmax);

// 64-bit FNV-1a over the observation contents; used to pin a prefix cache to
// the observation it was built from.
uint64_t observation_fingerprint(const Observation& obs);

}  // namespace flowact
