#include "flowact/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace flowact {
namespace data {

namespace {

double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void round_f32_inplace(std::vector<double>& v) {
  for (auto& x : v) x = round_f32(x);
}

}  // namespace

// ---- generation -------------------------------------------------------------

std::vector<Episode> gen_episodes(const std::string& embodiment_name, const std::string& task,
                                  int count, Rng& rng) {
  if (!sim::task_supported(task, embodiment_name)) {
    throw std::invalid_argument("gen_episodes: task '" + task + "' not supported on '" +
                                embodiment_name + "'");
  }
  const EmbodimentSpec& spec = embodiment(embodiment_name);
  std::vector<Episode> episodes;
  episodes.reserve(count);
  for (int i = 0; i < count; ++i) {
    const uint64_t env_seed = rng.next_u64();
    const uint64_t expert_seed = rng.next_u64();

    sim::ToyEnv env(embodiment_name, task, env_seed);
    Rng expert_rng(expert_seed);
    sim::ExpertResult expert = sim::scripted_expert(env, expert_rng);

    // Replay on a fresh env to record the pre-action state of every step.
    sim::ToyEnv replay(embodiment_name, task, env_seed);
    Episode ep;
    ep.embodiment = embodiment_name;
    ep.task = task;
    ep.state_dim = spec.state_dim;
    ep.action_dim = spec.action_dim;
    ep.world_floats = replay.world_floats();
    ep.segments = expert.segments;
    ep.steps.reserve(expert.actions.size());
    for (const auto& action : expert.actions) {
      EpisodeStep step;
      step.state = replay.raw_state();
      step.world = replay.world_vec();
      step.action = action;
      round_f32_inplace(step.state);
      round_f32_inplace(step.world);
      round_f32_inplace(step.action);
      ep.steps.push_back(std::move(step));
      replay.step(action);
    }
    episodes.push_back(std::move(ep));
  }
  return episodes;
}

// ---- files --------------------------------------------------------------------

void save_episode(const Episode& ep, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("episode: cannot open " + path.string() + " for writing");
  os << "flowact_episode v1\n";
  os << "embodiment " << ep.embodiment << "\n";
  os << "task " << ep.task << "\n";
  os << "steps " << ep.steps.size() << "\n";
  os << "state_dim " << ep.state_dim << "\n";
  os << "action_dim " << ep.action_dim << "\n";
  os << "world_floats " << ep.world_floats << "\n";
  for (const auto& seg : ep.segments) {
    os << "segment " << seg.start << " " << seg.end;
    for (int t : seg.tokens) os << " " << t;
    os << "\n";
  }
  os << "end_header\n";
  std::vector<float> row;
  for (const auto& step : ep.steps) {
    row.clear();
    for (double v : step.state) row.push_back(static_cast<float>(v));
    for (double v : step.action) row.push_back(static_cast<float>(v));
    for (double v : step.world) row.push_back(static_cast<float>(v));
    os.write(reinterpret_cast<const char*>(row.data()),
             static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("episode: write failed for " + path.string());
}

Episode load_episode(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("episode: cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "flowact_episode v1") {
    throw std::runtime_error("episode: bad magic in " + path.string());
  }
  Episode ep;
  size_t num_steps = 0;
  while (std::getline(is, line)) {
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "embodiment") ls >> ep.embodiment;
    else if (key == "task") ls >> ep.task;
    else if (key == "steps") ls >> num_steps;
    else if (key == "state_dim") ls >> ep.state_dim;
    else if (key == "action_dim") ls >> ep.action_dim;
    else if (key == "world_floats") ls >> ep.world_floats;
    else if (key == "segment") {
      sim::Segment seg;
      ls >> seg.start >> seg.end;
      int tok;
      while (ls >> tok) seg.tokens.push_back(tok);
      ep.segments.push_back(std::move(seg));
    } else {
      throw std::runtime_error("episode: unknown manifest key '" + key + "'");
    }
  }
  const int record = ep.state_dim + ep.action_dim + ep.world_floats;
  std::vector<float> row(record);
  ep.steps.reserve(num_steps);
  for (size_t i = 0; i < num_steps; ++i) {
    is.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!is) throw std::runtime_error("episode: truncated records in " + path.string());
    EpisodeStep step;
    step.state.assign(row.begin(), row.begin() + ep.state_dim);
    step.action.assign(row.begin() + ep.state_dim, row.begin() + ep.state_dim + ep.action_dim);
    step.world.assign(row.begin() + ep.state_dim + ep.action_dim, row.end());
    ep.steps.push_back(std::move(step));
  }
  // Segment table must tile [0, steps).
  int cursor = 0;
  for (const auto& seg : ep.segments) {
    if (seg.start != cursor || seg.end <= seg.start) {
      throw std::runtime_error("episode: segments do not tile " + path.string());
    }
    cursor = seg.end;
  }
  if (!ep.segments.empty() && cursor != static_cast<int>(ep.steps.size())) {
    throw std::runtime_error("episode: segments do not cover the episode in " + path.string());
  }
  return ep;
}

void save_dataset(const std::vector<Episode>& episodes, const std::filesystem::path& root) {
  for (size_t i = 0; i < episodes.size(); ++i) {
    const auto dir = root / episodes[i].embodiment / episodes[i].task;
    std::filesystem::create_directories(dir);
    // Number episodes per (embodiment, task) directory by arrival order.
    size_t index = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      (void)entry;
      ++index;
    }
    char name[32];
    std::snprintf(name, sizeof(name), "ep_%05zu.fae", index);
    save_episode(episodes[i], dir / name);
  }
}

TaskDataset load_task_dataset(const std::filesystem::path& root, const std::string& embodiment_name,
                              const std::string& task) {
  TaskDataset ds;
  ds.embodiment = embodiment_name;
  ds.task = task;
  const auto dir = root / embodiment_name / task;
  if (!std::filesystem::exists(dir)) {
    throw std::runtime_error("dataset: no directory " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".fae") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) ds.episodes.push_back(load_episode(f));
  if (ds.episodes.empty()) throw std::runtime_error("dataset: empty directory " + dir.string());
  return ds;
}

std::vector<TaskDataset> load_all_datasets(const std::filesystem::path& root) {
  std::vector<TaskDataset> out;
  if (!std::filesystem::exists(root)) {
    throw std::runtime_error("dataset: no directory " + root.string());
  }
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& emb_dir : std::filesystem::directory_iterator(root)) {
    if (!emb_dir.is_directory()) continue;
    for (const auto& task_dir : std::filesystem::directory_iterator(emb_dir.path())) {
      if (!task_dir.is_directory()) continue;
      pairs.emplace_back(emb_dir.path().filename().string(),
                         task_dir.path().filename().string());
    }
  }
  std::sort(pairs.begin(), pairs.end());
  for (const auto& [emb, task] : pairs) out.push_back(load_task_dataset(root, emb, task));
  return out;
}

int64_t TaskDataset::total_steps() const {
  int64_t n = 0;
  for (const auto& ep : episodes) n += static_cast<int64_t>(ep.steps.size());
  return n;
}

// ---- padding -------------------------------------------------------------------

std::pair<std::vector<double>, std::vector<uint8_t>> pad_and_mask_vector(
    const std::vector<double>& v, int dmax) {
  if (static_cast<int>(v.size()) > dmax) {
    throw std::invalid_argument("pad_and_mask: vector of length " + std::to_string(v.size()) +
                                " exceeds d_max " + std::to_string(dmax));
  }
  std::vector<double> padded(dmax, 0.0);
  std::vector<uint8_t> mask(dmax, 0);
  for (size_t j = 0; j < v.size(); ++j) {
    padded[j] = v[j];
    mask[j] = 1;
  }
  return {std::move(padded), std::move(mask)};
}

std::vector<double> unpad_vector(const std::vector<double>& padded,
                                 const std::vector<uint8_t>& mask) {
  std::vector<double> out;
  for (size_t j = 0; j < padded.size(); ++j) {
    if (mask[j]) out.push_back(padded[j]);
  }
  return out;
}

ActionChunk pad_and_mask_chunk(const std::vector<std::vector<double>>& raw_rows, int dmax) {
  if (raw_rows.empty()) throw std::invalid_argument("pad_and_mask: empty chunk");
  ActionChunk chunk = ActionChunk::zeros(static_cast<int>(raw_rows.size()), dmax);
  chunk.dim_mask.assign(dmax, 0);
  const int d = static_cast<int>(raw_rows[0].size());
  if (d > dmax) {
    throw std::invalid_argument("pad_and_mask: action dim " + std::to_string(d) +
                                " exceeds d_max " + std::to_string(dmax));
  }
  for (int j = 0; j < d; ++j) chunk.dim_mask[j] = 1;
  for (size_t t = 0; t < raw_rows.size(); ++t) {
    if (static_cast<int>(raw_rows[t].size()) != d) {
      throw std::invalid_argument("pad_and_mask: ragged chunk rows");
    }
    for (int j = 0; j < d; ++j) chunk.at(static_cast<int>(t), j) = raw_rows[t][j];
  }
  return chunk;
}

std::vector<uint8_t> image_slot_flags(int num_cameras, int n_images) {
  if (num_cameras > n_images) {
    throw std::invalid_argument("pad_and_mask: more cameras than image slots");
  }
  std::vector<uint8_t> flags(n_images, 0);
  for (int i = 0; i < num_cameras; ++i) flags[i] = 1;
  return flags;
}

// ---- mixture -------------------------------------------------------------------

MixtureSpec mixture_weights(
    const std::vector<std::tuple<std::string, std::string, int64_t>>& counts, double alpha) {
  if (counts.empty()) throw std::invalid_argument("mixture_weights: empty counts");
  MixtureSpec spec;
  spec.alpha = alpha;
  double total = 0.0;
  for (const auto& [emb, task, n] : counts) {
    if (n <= 0) throw std::invalid_argument("mixture_weights: counts must be positive");
    MixtureEntry e;
    e.embodiment = emb;
    e.task = task;
    e.count = n;
    e.weight = std::pow(static_cast<double>(n), alpha);
    total += e.weight;
    spec.entries.push_back(std::move(e));
  }
  for (auto& e : spec.entries) e.weight /= total;
  return spec;
}

// ---- mixture sampler -------------------------------------------------------------

MixtureSampler::MixtureSampler(std::vector<TaskDataset> datasets, SamplerConfig config)
    : datasets_(std::move(datasets)), cfg_(config) {
  if (datasets_.empty()) throw std::invalid_argument("mixture sampler: no datasets");
  std::vector<std::tuple<std::string, std::string, int64_t>> counts;
  for (const auto& ds : datasets_) {
    counts.emplace_back(ds.embodiment, ds.task, ds.total_steps());
  }
  mixture_ = mixture_weights(counts, cfg_.alpha);
}

std::string MixtureSampler::describe() const {
  std::ostringstream os;
  os << "mixture over " << datasets_.size() << " task-embodiment sets (alpha " << cfg_.alpha
     << "):";
  for (const auto& e : mixture_.entries) {
    os << " " << e.embodiment << "/" << e.task << "=" << e.weight;
  }
  return os.str();
}

std::tuple<int, int, int> MixtureSampler::draw_index(Rng& rng) const {
  const double u = rng.uniform01();
  double c = 0.0;
  int ds = static_cast<int>(mixture_.entries.size()) - 1;
  for (size_t i = 0; i < mixture_.entries.size(); ++i) {
    c += mixture_.entries[i].weight;
    if (u < c) {
      ds = static_cast<int>(i);
      break;
    }
  }
  const int64_t pick = rng.below(datasets_[ds].total_steps());
  int64_t cursor = pick;
  for (size_t e = 0; e < datasets_[ds].episodes.size(); ++e) {
    const int64_t len = static_cast<int64_t>(datasets_[ds].episodes[e].steps.size());
    if (cursor < len) return {ds, static_cast<int>(e), static_cast<int>(cursor)};
    cursor -= len;
  }
  throw std::logic_error("mixture sampler: index walk out of range");
}

ActionChunk chunk_from_episode(const Episode& episode, int t, int horizon, int dmax) {
  if (episode.steps.empty() || t < 0 || t >= static_cast<int>(episode.steps.size())) {
    throw std::invalid_argument("chunk_from_episode: timestep out of range");
  }
  std::vector<std::vector<double>> rows;
  rows.reserve(horizon);
  const int last = static_cast<int>(episode.steps.size()) - 1;
  for (int k = 0; k < horizon; ++k) {
    rows.push_back(episode.steps[std::min(t + k, last)].action);  // repeat last beyond the end
  }
  return pad_and_mask_chunk(rows, dmax);
}

TrainExample MixtureSampler::assemble(int dataset, int episode, int t,
                                      const std::vector<int>& language, Rng& rng) const {
  const TaskDataset& ds = datasets_[dataset];
  const Episode& ep = ds.episodes[episode];
  TrainExample ex;
  ex.chunk = chunk_from_episode(ep, t, cfg_.horizon, cfg_.dmax);

  sim::ToyEnv env(ep.embodiment, ep.task, 0);
  env.restore(ep.steps[t].state, ep.steps[t].world);
  ex.obs = env.observe(language, cfg_.n_images, cfg_.dmax, cfg_.image_size);

  const double tau = sample_tau(rng, cfg_.flow);
  ex.flow = make_flow_sample(ex.chunk, rng, tau);
  return ex;
}

Batch MixtureSampler::sample(int64_t batch_index, int batch_size) const {
  Rng rng = Rng::derived(cfg_.seed, static_cast<uint64_t>(batch_index));
  Batch batch;
  batch.reserve(batch_size);
  for (int i = 0; i < batch_size; ++i) {
    const auto [ds, e, t] = draw_index(rng);
    const Episode& ep = datasets_[ds].episodes[e];
    std::vector<int> language;
    if (!ep.segments.empty() && rng.coin(cfg_.annotation_prob)) {
      for (const auto& seg : ep.segments) {
        if (t >= seg.start && t < seg.end) {
          language = seg.tokens;
          break;
        }
      }
    }
    if (language.empty()) language = sim::task_tokens(ep.task);
    batch.push_back(assemble(ds, e, t, language, rng));
  }
  return batch;
}

// ---- bimodal synthetic source ------------------------------------------------------

BimodalChunkSource::BimodalChunkSource(Observation obs, ActionChunk mode_a, ActionChunk mode_b,
                                       FlowConfig flow, uint64_t seed)
    : obs_(std::move(obs)),
      mode_a_(std::move(mode_a)),
      mode_b_(std::move(mode_b)),
      flow_(flow),
      seed_(seed) {
  if (mode_a_.horizon != mode_b_.horizon || mode_a_.dmax != mode_b_.dmax) {
    throw std::invalid_argument("bimodal source: mode shapes differ");
  }
}

Batch BimodalChunkSource::sample(int64_t batch_index, int batch_size) const {
  Rng rng = Rng::derived(seed_, static_cast<uint64_t>(batch_index));
  Batch batch;
  batch.reserve(batch_size);
  for (int i = 0; i < batch_size; ++i) {
    TrainExample ex;
    ex.obs = obs_;
    ex.chunk = rng.coin() ? mode_a_ : mode_b_;
    const double tau = sample_tau(rng, flow_);
    ex.flow = make_flow_sample(ex.chunk, rng, tau);
    batch.push_back(std::move(ex));
  }
  return batch;
}

}  // namespace data
}  // namespace flowact
