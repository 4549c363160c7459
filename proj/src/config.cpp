#include "flowact/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace flowact {

namespace {

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: expected a boolean, got '" + v + "'");
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
  auto as_int = [&]() { return std::stoi(value); };
  auto as_u64 = [&]() { return static_cast<uint64_t>(std::stoull(value)); };
  auto as_double = [&]() { return std::stod(value); };

  if (key == "seed") seed = as_u64();
  else if (key == "arch") arch = value;
  else if (key == "task") task = value;
  else if (key == "embodiment") embodiment = value;
  else if (key == "model.prefix_width") model.prefix_width = as_int();
  else if (key == "model.expert_width") model.expert_width = as_int();
  else if (key == "model.depth") model.depth = as_int();
  else if (key == "model.num_heads") model.num_heads = as_int();
  else if (key == "model.num_kv_heads") model.num_kv_heads = as_int();
  else if (key == "model.head_dim") model.head_dim = as_int();
  else if (key == "model.prefix_mlp_dim") model.prefix_mlp_dim = as_int();
  else if (key == "model.expert_mlp_dim") model.expert_mlp_dim = as_int();
  else if (key == "model.action_dim") model.action_dim = as_int();
  else if (key == "model.horizon") model.horizon = as_int();
  else if (key == "model.max_images") model.max_images = as_int();
  else if (key == "model.image_size") model.image_size = as_int();
  else if (key == "model.patch_size") model.patch_size = as_int();
  else if (key == "model.vocab_size") model.vocab_size = as_int();
  else if (key == "flow.cutoff") flow.cutoff = as_double();
  else if (key == "flow.beta_alpha") flow.beta_alpha = as_double();
  else if (key == "flow.beta_beta") flow.beta_beta = as_double();
  else if (key == "flow.steps") flow.steps = as_int();
  else if (key == "flow.step_size") flow.step_size = as_double();
  else if (key == "train.phase") train.phase = value;
  else if (key == "train.steps") train.steps = as_int();
  else if (key == "train.batch_size") train.batch_size = as_int();
  else if (key == "train.learning_rate") train.learning_rate = as_double();
  else if (key == "train.warmup_steps") train.warmup_steps = as_int();
  else if (key == "train.min_learning_rate") train.min_learning_rate = as_double();
  else if (key == "train.beta1") train.beta1 = as_double();
  else if (key == "train.beta2") train.beta2 = as_double();
  else if (key == "train.adam_eps") train.adam_eps = as_double();
  else if (key == "train.weight_decay") train.weight_decay = as_double();
  else if (key == "train.grad_clip_norm") train.grad_clip_norm = as_double();
  else if (key == "train.eval_every") train.eval_every = as_int();
  else if (key == "train.objective") train.objective = value;
  else if (key == "sampler.alpha") sampler.alpha = as_double();
  else if (key == "sampler.annotation_prob") sampler.annotation_prob = as_double();
  else if (key == "controller.execute_k") controller.execute_k = as_int();
  else if (key == "controller.temporal_ensemble") controller.temporal_ensemble = parse_bool(value);
  else if (key == "controller.ensemble_decay") controller.ensemble_decay = as_double();
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path.string());
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key, value;
    ls >> key >> value;
    if (key.empty()) continue;
    if (value.empty()) throw std::invalid_argument("config: missing value for '" + key + "'");
    apply(key, value);
  }
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os.precision(17);
  os << "# flowact resolved run config\n";
  os << "seed " << seed << "\n";
  os << "arch " << arch << "\n";
  os << "task " << task << "\n";
  os << "embodiment " << embodiment << "\n";
  os << "model.prefix_width " << model.prefix_width << "\n";
  os << "model.expert_width " << model.expert_width << "\n";
  os << "model.depth " << model.depth << "\n";
  os << "model.num_heads " << model.num_heads << "\n";
  os << "model.num_kv_heads " << model.num_kv_heads << "\n";
  os << "model.head_dim " << model.head_dim << "\n";
  os << "model.prefix_mlp_dim " << model.prefix_mlp_dim << "\n";
  os << "model.expert_mlp_dim " << model.expert_mlp_dim << "\n";
  os << "model.action_dim " << model.action_dim << "\n";
  os << "model.horizon " << model.horizon << "\n";
  os << "model.max_images " << model.max_images << "\n";
  os << "model.image_size " << model.image_size << "\n";
  os << "model.patch_size " << model.patch_size << "\n";
  os << "model.vocab_size " << model.vocab_size << "\n";
  os << "flow.cutoff " << flow.cutoff << "\n";
  os << "flow.beta_alpha " << flow.beta_alpha << "\n";
  os << "flow.beta_beta " << flow.beta_beta << "\n";
  os << "flow.steps " << flow.steps << "\n";
  os << "flow.step_size " << flow.step_size << "\n";
  os << "train.phase " << train.phase << "\n";
  os << "train.steps " << train.steps << "\n";
  os << "train.batch_size " << train.batch_size << "\n";
  os << "train.learning_rate " << train.learning_rate << "\n";
  os << "train.warmup_steps " << train.warmup_steps << "\n";
  os << "train.min_learning_rate " << train.min_learning_rate << "\n";
  os << "train.beta1 " << train.beta1 << "\n";
  os << "train.beta2 " << train.beta2 << "\n";
  os << "train.adam_eps " << train.adam_eps << "\n";
  os << "train.weight_decay " << train.weight_decay << "\n";
  os << "train.grad_clip_norm " << train.grad_clip_norm << "\n";
  os << "train.eval_every " << train.eval_every << "\n";
  os << "train.objective " << train.objective << "\n";
  os << "sampler.alpha " << sampler.alpha << "\n";
  os << "sampler.annotation_prob " << sampler.annotation_prob << "\n";
  os << "controller.execute_k " << controller.execute_k << "\n";
  os << "controller.temporal_ensemble " << (controller.temporal_ensemble ? "true" : "false")
     << "\n";
  os << "controller.ensemble_decay " << controller.ensemble_decay << "\n";
  return os.str();
}

void RunConfig::write(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("config: cannot write " + path.string());
  os << serialize();
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  RunConfig cfg;
  cfg.apply_file(path);
  cfg.resolve();
  return cfg;
}

void RunConfig::resolve() {
  model.variant = arch;
  // Short runs clamp the warmup instead of failing validation.
  if (train.steps > 0 && train.warmup_steps >= train.steps) {
    train.warmup_steps = train.steps / 5;
  }
  train.seed = seed;
  sampler.seed = seed;
  sampler.horizon = model.horizon;
  sampler.dmax = model.action_dim;
  sampler.n_images = model.max_images;
  sampler.image_size = model.image_size;
  sampler.flow = flow;
  controller.n_images = model.max_images;
  controller.dmax = model.action_dim;
  controller.image_size = model.image_size;
  model.validate();
  flow.validate();
  train.validate();
  controller.validate(model.horizon);
}

}  // namespace flowact
