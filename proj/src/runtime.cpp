#include "flowact/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "flowact/vocab.hpp"

namespace flowact {
namespace rt {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.empty() ? 0.0 : v[v.size() / 2];
}

}  // namespace

void ControllerConfig::validate(int horizon) const {
  if (execute_k < 1 || execute_k > horizon) {
    throw std::invalid_argument("controller: execute_k must lie in [1, H], got " +
                                std::to_string(execute_k) + " with H " + std::to_string(horizon));
  }
  if (n_images < 1 || dmax < 1 || image_size < 1) {
    throw std::invalid_argument("controller: invalid observation geometry");
  }
}

ActionChunk sample_chunk(const PolicyModel& model, const Observation& obs, Rng& rng,
                         const FlowConfig& flow, const std::vector<uint8_t>& dim_mask,
                         IntegrateStats* stats) {
  return integrate(model, obs, rng, flow, dim_mask, stats);
}

ChunkPolicy make_model_policy(const PolicyModel& model, const FlowConfig& flow,
                              const std::vector<uint8_t>& dim_mask, Rng& rng,
                              IntegrateStats* stats) {
  return [&model, flow, dim_mask, &rng, stats](const Observation& obs) {
    return sample_chunk(model, obs, rng, flow, dim_mask, stats);
  };
}

LanguageProvider flat_language(const std::string& task) {
  const std::vector<int> tokens = sim::task_tokens(task);
  return [tokens](const sim::ToyEnv&, int) { return tokens; };
}

LanguageProvider commander_language() {
  return [](const sim::ToyEnv& env, int) { return sim::high_level_command(env); };
}

LanguageProvider scripted_language(std::vector<std::vector<int>> commands) {
  if (commands.empty()) {
    throw std::invalid_argument("scripted language: empty command list");
  }
  return [commands = std::move(commands)](const sim::ToyEnv&, int chunk_index) {
    const size_t i = std::min(static_cast<size_t>(chunk_index), commands.size() - 1);
    return commands[i];
  };
}

RolloutResult run_controller(sim::ToyEnv& env, const ChunkPolicy& policy,
                             const LanguageProvider& language, const ControllerConfig& cfg,
                             int horizon, int max_steps) {
  cfg.validate(horizon);
  RolloutResult res;
  res.trajectory.embodiment = env.embodiment().name;
  res.trajectory.task = env.task();
  env.clear_events();

  const int action_dim = env.embodiment().action_dim;
  std::vector<std::pair<int, ActionChunk>> history;  // (start step, chunk)
  int chunk_index = 0;
  try {
    while (env.steps_taken() < max_steps && !env.success()) {
      const std::vector<int> lang = language(env, chunk_index);
      const Observation obs = env.observe(lang, cfg.n_images, cfg.dmax, cfg.image_size);
      ActionChunk chunk = policy(obs);
      res.inference_calls += 1;
      const int chunk_start = env.steps_taken();
      if (cfg.temporal_ensemble) {
        history.emplace_back(chunk_start, chunk);
        std::erase_if(history, [&](const auto& h) { return h.first + horizon <= chunk_start; });
      }
      for (int k = 0; k < cfg.execute_k; ++k) {
        if (env.steps_taken() >= max_steps || env.success()) break;
        std::vector<double> action(action_dim, 0.0);
        if (cfg.temporal_ensemble) {
          const int t = env.steps_taken();
          double total_w = 0.0;
          for (size_t h = 0; h < history.size(); ++h) {
            const int offset = t - history[h].first;
            if (offset < 0 || offset >= horizon) continue;
            const double w = std::pow(cfg.ensemble_decay, history.size() - 1 - h);
            for (int j = 0; j < action_dim; ++j) {
              action[j] += w * history[h].second.at(offset, j);
            }
            total_w += w;
          }
          for (double& a : action) a /= total_w;
        } else {
          for (int j = 0; j < action_dim; ++j) action[j] = chunk.at(k, j);
        }
        env.step(action);
        sim::TraceStep ts;
        ts.step = env.steps_taken() - 1;
        ts.action = action;
        ts.score = env.rubric_score();
        const auto ee = env.end_effector(0);
        ts.obs_summary = {ee[0], ee[1]};
        ts.events = env.pending_events();
        env.clear_events();
        res.trajectory.steps.push_back(std::move(ts));
      }
      ++chunk_index;
    }
  } catch (const std::exception& err) {
    res.aborted = true;
    res.error = err.what();
  }
  res.score = env.rubric_score();
  res.env_steps = env.steps_taken();
  res.trajectory.final_score = res.score;
  return res;
}

void write_trace(const RolloutResult& rollout, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("trace: cannot write " + path.string());
  nlohmann::json meta;
  meta["embodiment"] = rollout.trajectory.embodiment;
  meta["task"] = rollout.trajectory.task;
  meta["final_score"] = rollout.score;
  meta["inference_calls"] = rollout.inference_calls;
  meta["aborted"] = rollout.aborted;
  os << meta.dump() << "\n";
  for (const auto& step : rollout.trajectory.steps) {
    nlohmann::json row;
    row["step"] = step.step;
    row["obs"] = {{"ee", step.obs_summary}};
    row["action"] = step.action;
    row["score"] = step.score;
    row["events"] = step.events;
    os << row.dump() << "\n";
  }
}

double ProfileReport::total_ms() const {
  for (const auto& row : rows) {
    if (row.part == "total") return row.median_ms;
  }
  return 0.0;
}

ProfileReport profile(const PolicyModel& model, const Observation& obs, const FlowConfig& flow,
                      int repeats, bool cached) {
  flow.validate();
  const int horizon = model.config().horizon;
  const int dmax = model.config().action_dim;
  Rng rng(7);
  Tensor noisy = Tensor::randn({horizon, dmax}, rng, 1.0);

  // Warmup.
  {
    PrefixCache cache = model.begin_inference(obs);
    (void)model.velocity_cached(cache, noisy, 0.0);
  }

  std::vector<double> enc_ms, obs_ms, act_ms, total_ms;
  for (int r = 0; r < repeats; ++r) {
    auto t0 = Clock::now();
    (void)model.embed_prefix(obs);
    (void)model.embed_state(obs.state);
    enc_ms.push_back(ms_since(t0));

    t0 = Clock::now();
    PrefixCache cache = model.begin_inference(obs);
    obs_ms.push_back(ms_since(t0) - enc_ms.back());

    t0 = Clock::now();
    for (int k = 0; k < flow.steps; ++k) {
      const double tau = k * flow.step_size;
      if (cached) {
        (void)model.velocity_cached(cache, noisy, tau);
      } else {
        (void)model.velocity(obs, noisy, tau);
      }
    }
    act_ms.push_back(ms_since(t0));

    t0 = Clock::now();
    if (cached) {
      PrefixCache c2 = model.begin_inference(obs);
      for (int k = 0; k < flow.steps; ++k) {
        (void)model.velocity_cached(c2, noisy, k * flow.step_size);
      }
    } else {
      for (int k = 0; k < flow.steps; ++k) {
        (void)model.velocity(obs, noisy, k * flow.step_size);
      }
    }
    total_ms.push_back(ms_since(t0));
  }

  ProfileReport report;
  report.rows.push_back({"encoders", median(enc_ms)});
  report.rows.push_back({"observation_forward", std::max(0.0, median(obs_ms))});
  report.rows.push_back({"action_forward_x" + std::to_string(flow.steps), median(act_ms)});
  report.rows.push_back({"total", median(total_ms)});
  return report;
}

void write_profile_csv(const ProfileReport& report, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("profile: cannot write " + path.string());
  os << "part,median_ms\n";
  for (const auto& row : report.rows) {
    os << row.part << "," << row.median_ms << "\n";
  }
}

EvalSummary evaluate(const PolicyModel& model, const std::string& embodiment_name,
                     const std::string& task, int episodes, const LanguageProvider& language,
                     const ControllerConfig& cfg, const FlowConfig& flow, uint64_t base_seed) {
  const EmbodimentSpec& spec = embodiment(embodiment_name);
  std::vector<uint8_t> dim_mask(cfg.dmax, 0);
  for (int j = 0; j < spec.action_dim; ++j) dim_mask[j] = 1;

  EvalSummary summary;
  for (int e = 0; e < episodes; ++e) {
    sim::ToyEnv env(embodiment_name, task, base_seed + e);
    Rng rng = Rng::derived(base_seed, 7777 + static_cast<uint64_t>(e));
    const ChunkPolicy policy = make_model_policy(model, flow, dim_mask, rng);
    RolloutResult rollout =
        run_controller(env, policy, language, cfg, model.config().horizon, env.max_steps());
    summary.scores.push_back(rollout.score);
  }
  double sum = 0.0;
  for (double s : summary.scores) sum += s;
  summary.mean = sum / episodes;
  double var = 0.0;
  for (double s : summary.scores) var += (s - summary.mean) * (s - summary.mean);
  summary.stderr_of_mean = episodes > 1 ? std::sqrt(var / (episodes - 1) / episodes) : 0.0;
  return summary;
}

}  // namespace rt
}  // namespace flowact
