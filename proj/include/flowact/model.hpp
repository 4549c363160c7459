#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "flowact/rng.hpp"
#include "flowact/tensor.hpp"
#include "flowact/types.hpp"

namespace flowact {

// Architecture hyperparameters shared by both variants. The attention space
// (num_heads x head_dim) is common to all experts; widths and MLP dims are
// per expert.
struct ModelConfig {
  std::string variant = "two-expert";  // "two-expert" | "small"
  int prefix_width = 128;              // VLM-side embedding width
  int expert_width = 64;               // action-expert width w
  int depth = 4;
  int num_heads = 4;
  int num_kv_heads = 1;  // 1 = multi-query attention
  int head_dim = 32;
  int prefix_mlp_dim = 256;
  int expert_mlp_dim = 128;
  int action_dim = 8;  // d_max
  int horizon = 50;    // H
  int max_images = 3;
  int image_size = 16;
  int patch_size = 4;
  int vocab_size = 64;

  void validate() const;
  int attn_dim() const { return num_heads * head_dim; }
  int kv_dim() const { return num_kv_heads * head_dim; }
  int patch_pixels() const { return patch_size * patch_size; }
  int tokens_per_image() const {
    const int g = image_size / patch_size;
    return g * g;
  }
};

// Named parameter registry. Registration order is the manifest order of the
// checkpoint format, so it must be deterministic given the config.
class ParamStore {
 public:
  Tensor create(const std::string& name, std::vector<int> shape, Rng& rng, double stddev);
  Tensor create_full(const std::string& name, std::vector<int> shape, double value);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  int64_t total_params() const;
  int64_t count_with_prefix(const std::string& name_prefix) const;
  std::vector<Tensor> tensors() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// Per-observation attention state reused across integration steps. For the
// two-expert model it holds post-rotary keys/values of the prefix and state
// blocks at every layer; for the small variant it holds encoder outputs and
// the per-layer cross-attention keys/values derived from them.
struct PrefixCache {
  int prefix_len = 0;  // prefix tokens + state token
  uint64_t fingerprint = 0;
  std::vector<Tensor> keys;    // per layer
  std::vector<Tensor> values;  // per layer
  Tensor encoder_out;          // small variant only
};

// The policy network. Two architectures live behind this interface:
//
//   "two-expert": one transformer, two weight sets sharing the self-attention
//   space. Image + language tokens route to the prefix expert, the state and
//   noisy-action tokens to the (smaller) action expert. A blockwise causal
//   mask orders the blocks [prefix][state][actions].
//
//   "small": an encoder-decoder. A plain self-attention encoder embeds the
//   observation; the action decoder self-attends over action tokens,
//   cross-attends to the encoder output, and receives the flow timestep
//   through zero-initialized adaptive-norm (AdaLN-Zero) modulation.
class PolicyModel {
 public:
  PolicyModel(ModelConfig config, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  bool is_small_variant() const { return cfg_.variant == "small"; }

  // allowed(i, j) iff block(j) <= block(i); bidirectional within a block.
  static std::vector<std::vector<uint8_t>> build_block_mask(int prefix_len, int state_len,
                                                            int action_len);

  // Observation -> (L_prefix, prefix_width) image-patch + language embeddings.
  Tensor embed_prefix(const Observation& obs) const;
  // q -> one width-w state token (1, w).
  Tensor embed_state(const std::vector<double>& q) const;
  // Noisy actions (H, d_max) + timestep -> (H, w) action tokens.
  Tensor embed_action(const Tensor& noisy_actions, double tau) const;
  // Final action-token hidden states (H, w) -> velocity (H, d_max).
  Tensor decode_actions(const Tensor& action_hidden) const;

  struct ForwardOut {
    Tensor prefix_hidden;  // (L_prefix, prefix_width); undefined in cached calls
    Tensor suffix_hidden;  // (state+actions, w) or (actions, w) when cached
  };

  // Joint forward over embedded tokens (two-expert variant). The mask must be
  // exactly build_block_mask for the given lengths. With a cache, only the
  // action tokens are computed and prefix/state keys/values come from it.
  ForwardOut forward(const Tensor& prefix_tokens, const Tensor& state_token,
                     const Tensor& action_tokens,
                     const std::vector<std::vector<uint8_t>>& mask,
                     const PrefixCache* cache = nullptr) const;

  // Small-variant forward: encoder over the observation, decoder over the
  // noisy actions with AdaLN-Zero timestep conditioning. Returns velocity.
  Tensor forward_small(const Observation& obs, const Tensor& noisy_actions, double tau) const;

  // --- unified policy interface -------------------------------------------
  // Velocity v_theta(A^tau, o). The uncached form records on the active graph
  // (training); the cached form is the inference path.
  Tensor velocity(const Observation& obs, const Tensor& noisy_actions, double tau) const;
  PrefixCache begin_inference(const Observation& obs) const;
  Tensor velocity_cached(const PrefixCache& cache, const Tensor& noisy_actions,
                         double tau) const;

  int64_t param_count_prefix_expert() const;
  int64_t param_count_action_expert() const;

  void save_checkpoint(const std::filesystem::path& path) const;
  static PolicyModel load_checkpoint(const std::filesystem::path& path);

 private:
  struct SuffixStream;

  void build_two_expert(Rng& rng);
  void build_small(Rng& rng);

  ForwardOut two_expert_forward(const Tensor& prefix_tokens, const Tensor& state_token,
                                const Tensor& action_tokens, const PrefixCache* cache_in,
                                PrefixCache* cache_out) const;
  Tensor encoder_forward(const Observation& obs) const;
  Tensor decoder_forward(const Tensor& noisy_actions, double tau, const Tensor& encoder_out,
                         const std::vector<Tensor>& cross_k,
                         const std::vector<Tensor>& cross_v) const;

  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace flowact
