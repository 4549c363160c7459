#include "flowact/types.hpp"

#include <cmath>
#include <cstring>

namespace flowact {

void validate_observation(const Observation& obs, int max_images, int dmax) {
  if (static_cast<int>(obs.images.size()) != max_images) {
    throw std::invalid_argument("observation: expected " + std::to_string(max_images) +
                                " image slots, got " + std::to_string(obs.images.size()));
  }
  if (obs.num_present_images() < 1) {
    throw std::invalid_argument("observation: at least one image slot must be present");
  }
  if (static_cast<int>(obs.state.size()) != dmax ||
      static_cast<int>(obs.state_mask.size()) != dmax) {
    throw std::invalid_argument("observation: state and mask must have length " +
                                std::to_string(dmax));
  }
  for (int j = 0; j < dmax; ++j) {
    if (!obs.state_mask[j] && obs.state[j] != 0.0) {
      throw std::invalid_argument("observation: padded state entries must be exactly zero");
    }
  }
}

void validate_chunk(const ActionChunk& chunk, int horizon, int dmax) {
  if (chunk.horizon != horizon || chunk.dmax != dmax) {
    throw std::invalid_argument("action chunk: expected " + std::to_string(horizon) + "x" +
                                std::to_string(dmax) + ", got " + std::to_string(chunk.horizon) +
                                "x" + std::to_string(chunk.dmax));
  }
  if (chunk.actions.size() != static_cast<size_t>(horizon) * dmax ||
      static_cast<int>(chunk.dim_mask.size()) != dmax) {
    throw std::invalid_argument("action chunk: storage does not match declared shape");
  }
  for (int t = 0; t < horizon; ++t) {
    for (int j = 0; j < dmax; ++j) {
      if (!chunk.dim_mask[j] && chunk.at(t, j) != 0.0) {
        throw std::invalid_argument("action chunk: padded columns must be exactly zero");
      }
    }
  }
}

namespace {

void fnv_bytes(uint64_t& h, const void* data, size_t len) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
}

}  // namespace

uint64_t observation_fingerprint(const Observation& obs) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& im : obs.images) {
    const unsigned char present = im.present ? 1 : 0;
    fnv_bytes(h, &present, 1);
    if (im.present) fnv_bytes(h, im.pixels.data(), im.pixels.size() * sizeof(double));
  }
  fnv_bytes(h, obs.language.data(), obs.language.size() * sizeof(int));
  const size_t lang_len = obs.language.size();
  fnv_bytes(h, &lang_len, sizeof(lang_len));
  fnv_bytes(h, obs.state.data(), obs.state.size() * sizeof(double));
  fnv_bytes(h, obs.state_mask.data(), obs.state_mask.size());
  return h;
}

}  // namespace flowact
