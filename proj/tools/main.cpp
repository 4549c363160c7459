#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowact/config.hpp"
#include "flowact/data.hpp"
#include "flowact/flow.hpp"
#include "flowact/model.hpp"
#include "flowact/runtime.hpp"
#include "flowact/sim.hpp"
#include "flowact/train.hpp"
#include "flowact/vocab.hpp"
#include "verify.hpp"

namespace fs = std::filesystem;
using namespace flowact;

namespace {

using Overrides = std::vector<std::pair<std::string, std::string>>;

struct CommandState {
  std::string config_path;
  Overrides overrides;
};

RunConfig resolve_config(const CommandState& state) {
  RunConfig rc;
  if (!state.config_path.empty()) rc.apply_file(state.config_path);
  for (const auto& [key, value] : state.overrides) rc.apply(key, value);
  rc.resolve();
  return rc;
}

// Registers --config plus flag-to-config-key overrides on a subcommand.
std::shared_ptr<CommandState> wire_config(CLI::App* cmd,
                                          const std::vector<std::pair<std::string, std::string>>&
                                              flag_keys) {
  auto state = std::make_shared<CommandState>();
  cmd->add_option("--config", state->config_path, "run config file (key value lines)");
  for (const auto& [flag, key] : flag_keys) {
    const std::string key_copy = key;
    cmd->add_option_function<std::string>(
        flag,
        [state, key_copy](const std::string& v) { state->overrides.emplace_back(key_copy, v); },
        "sets " + key);
  }
  return state;
}

void write_run_config(const RunConfig& rc, const fs::path& out) {
  fs::create_directories(out);
  rc.write(out / "config.txt");
}

std::vector<uint8_t> action_mask_for(const std::string& embodiment_name, int dmax) {
  std::vector<uint8_t> mask(dmax, 0);
  for (int j = 0; j < embodiment(embodiment_name).action_dim; ++j) mask[j] = 1;
  return mask;
}

int run_gen_data(const RunConfig& rc, const fs::path& out, int episodes, bool suite) {
  std::vector<std::pair<std::string, std::string>> combos;
  if (suite) {
    combos = {{"arm", "reach"},      {"arm", "pick-place"},  {"arm", "sort2"},
              {"arm_lite", "pick-place"}, {"dual", "reach"}, {"dual", "pick-place"},
              {"mobile", "reach"}};
  } else {
    combos = {{rc.embodiment, rc.task}};
  }
  Rng rng(rc.seed);
  for (const auto& [emb, task] : combos) {
    auto eps = data::gen_episodes(emb, task, episodes, rng);
    int64_t steps = 0;
    for (const auto& e : eps) steps += static_cast<int64_t>(e.steps.size());
    data::save_dataset(eps, out);
    std::printf("gen-data: %s/%s: %d episodes, %lld steps\n", emb.c_str(), task.c_str(),
                episodes, static_cast<long long>(steps));
  }
  write_run_config(rc, out);
  return 0;
}

int run_pretrain(const RunConfig& rc, const fs::path& data_dir, const fs::path& out) {
  auto datasets = data::load_all_datasets(data_dir);
  PolicyModel model(rc.model, rc.seed);
  std::printf("model: %s, %lld params (%lld prefix expert, %lld action expert)\n",
              rc.arch.c_str(), static_cast<long long>(model.params().total_params()),
              static_cast<long long>(model.param_count_prefix_expert()),
              static_cast<long long>(model.param_count_action_expert()));
  data::SamplerConfig sc = rc.sampler;
  auto result = train::pretrain(model, datasets, rc.train, sc, out);
  write_run_config(rc, out);
  std::printf("pretrain: %d steps, final loss %.6f, checkpoint %s\n", rc.train.steps,
              result.final_loss, (out / "checkpoint.ckpt").string().c_str());
  return 0;
}

int run_finetune(const RunConfig& rc_in, const fs::path& init_ckpt, const fs::path& data_dir,
                 const fs::path& out) {
  RunConfig rc = rc_in;
  std::unique_ptr<PolicyModel> model;
  if (rc.train.phase == "scratch" || init_ckpt.empty()) {
    rc.train.phase = "scratch";
    model = std::make_unique<PolicyModel>(rc.model, rc.seed);
  } else {
    model = std::make_unique<PolicyModel>(PolicyModel::load_checkpoint(init_ckpt));
    rc.model = model->config();
    rc.arch = model->config().variant;
    rc.resolve();
  }
  auto dataset = data::load_task_dataset(data_dir, rc.embodiment, rc.task);
  auto result = train::finetune(*model, dataset, rc.train, rc.sampler, out);
  write_run_config(rc, out);
  std::printf("finetune(%s): %d steps on %s/%s, final loss %.6f, checkpoint %s\n",
              rc.train.phase.c_str(), rc.train.steps, rc.embodiment.c_str(), rc.task.c_str(),
              result.final_loss, (out / "checkpoint.ckpt").string().c_str());
  return 0;
}

std::vector<std::vector<int>> load_command_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("eval: cannot open command file " + path.string());
  std::vector<std::vector<int>> commands;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    commands.push_back(vocab::tokenize(line));
  }
  if (commands.empty()) throw std::runtime_error("eval: command file is empty");
  return commands;
}

int run_eval(const RunConfig& rc, const fs::path& ckpt, int episodes,
             const std::string& conditions, const fs::path& commands_file, const fs::path& out) {
  PolicyModel model = PolicyModel::load_checkpoint(ckpt);
  if (model.config().horizon < rc.controller.execute_k) {
    throw std::runtime_error("eval: execute_k exceeds the model horizon");
  }
  rt::ControllerConfig cc = rc.controller;
  cc.n_images = model.config().max_images;
  cc.dmax = model.config().action_dim;
  cc.image_size = model.config().image_size;

  std::vector<std::pair<std::string, rt::LanguageProvider>> providers;
  std::istringstream cs(conditions);
  std::string cond;
  while (std::getline(cs, cond, ',')) {
    if (cond == "flat") {
      providers.emplace_back(cond, rt::flat_language(rc.task));
    } else if (cond == "commander") {
      providers.emplace_back(cond, rt::commander_language());
    } else if (cond == "human") {
      providers.emplace_back(cond, rt::scripted_language(load_command_file(commands_file)));
    } else {
      throw std::runtime_error("eval: unknown condition '" + cond + "'");
    }
  }
  if (!out.empty()) fs::create_directories(out);
  for (const auto& [name, provider] : providers) {
    rt::EvalSummary summary = rt::evaluate(model, rc.embodiment, rc.task, episodes, provider, cc,
                                           rc.flow, rc.seed);
    std::printf("eval %-10s mean score %.4f +/- %.4f over %d episodes\n", name.c_str(),
                summary.mean, summary.stderr_of_mean, episodes);
    if (!out.empty()) {
      std::ofstream scores(out / ("scores_" + name + ".csv"));
      scores << "episode,score\n";
      for (size_t i = 0; i < summary.scores.size(); ++i) {
        scores << i << "," << summary.scores[i] << "\n";
      }
      // One traced rollout per condition.
      sim::ToyEnv env(rc.embodiment, rc.task, rc.seed);
      Rng rng = Rng::derived(rc.seed, 424242);
      auto mask = action_mask_for(rc.embodiment, model.config().action_dim);
      auto policy = rt::make_model_policy(model, rc.flow, mask, rng);
      auto rollout = rt::run_controller(env, policy, provider, cc, model.config().horizon,
                                        env.max_steps());
      rt::write_trace(rollout, out / ("trace_" + name + ".jsonl"));
    }
  }
  if (!out.empty()) write_run_config(rc, out);
  return 0;
}

int run_sample(const RunConfig& rc, const fs::path& ckpt, int count, const fs::path& out_file) {
  PolicyModel model = PolicyModel::load_checkpoint(ckpt);
  sim::ToyEnv env(rc.embodiment, rc.task, rc.seed);
  Observation obs = env.observe(sim::task_tokens(rc.task), model.config().max_images,
                                model.config().action_dim, model.config().image_size);
  const auto mask = action_mask_for(rc.embodiment, model.config().action_dim);
  Rng rng = Rng::derived(rc.seed, 99);
  std::ofstream os(out_file);
  if (!os) throw std::runtime_error("sample: cannot write " + out_file.string());
  const int d = embodiment(rc.embodiment).action_dim;
  os << "chunk,t";
  for (int j = 0; j < d; ++j) os << ",a" << j;
  os << "\n";
  for (int c = 0; c < count; ++c) {
    ActionChunk chunk = rt::sample_chunk(model, obs, rng, rc.flow, mask);
    for (int t = 0; t < chunk.horizon; ++t) {
      os << c << "," << t;
      for (int j = 0; j < d; ++j) os << "," << chunk.at(t, j);
      os << "\n";
    }
  }
  std::printf("sample: wrote %d chunks to %s\n", count, out_file.string().c_str());
  return 0;
}

int run_bench(const RunConfig& rc, const fs::path& ckpt, int repeats, bool f32,
              const fs::path& out) {
  std::unique_ptr<PolicyModel> model;
  if (!ckpt.empty()) {
    model = std::make_unique<PolicyModel>(PolicyModel::load_checkpoint(ckpt));
  } else {
    model = std::make_unique<PolicyModel>(rc.model, rc.seed);
  }
  sim::ToyEnv env(rc.embodiment, rc.task, rc.seed);
  Observation obs = env.observe(sim::task_tokens(rc.task), model->config().max_images,
                                model->config().action_dim, model->config().image_size);
  std::unique_ptr<Float32Mode> f32_scope;
  if (f32) f32_scope = std::make_unique<Float32Mode>();
  rt::ProfileReport cached = rt::profile(*model, obs, rc.flow, repeats, true);
  rt::ProfileReport uncached = rt::profile(*model, obs, rc.flow, repeats, false);
  std::printf("bench (%s precision, %d repeats):\n", f32 ? "f32" : "f64", repeats);
  for (const auto& row : cached.rows) {
    std::printf("  cached   %-22s %10.3f ms\n", row.part.c_str(), row.median_ms);
  }
  for (const auto& row : uncached.rows) {
    std::printf("  uncached %-22s %10.3f ms\n", row.part.c_str(), row.median_ms);
  }
  if (!out.empty()) {
    fs::create_directories(out);
    rt::write_profile_csv(cached, out / "bench_cached.csv");
    rt::write_profile_csv(uncached, out / "bench_uncached.csv");
    write_run_config(rc, out);
  }
  return 0;
}

int run_gradcheck() {
  bool ok = true;
  for (const auto& report : tools::gradient_reports()) {
    const bool pass = report.max_rel_error < report.tolerance;
    ok = ok && pass;
    std::printf("gradcheck %-32s max rel err %.3e (tol %.0e) %s\n", report.name.c_str(),
                report.max_rel_error, report.tolerance, pass ? "PASS" : "FAIL");
  }
  return ok ? 0 : 1;
}

int run_verify() {
  std::vector<std::string> failures;
  for (const auto& check : tools::verification_checks()) {
    try {
      check.run();
      std::printf("PASS %s\n", check.name.c_str());
    } catch (const std::exception& err) {
      failures.push_back(check.name + ": " + err.what());
      std::printf("FAIL %s: %s\n", check.name.c_str(), err.what());
    }
  }
  if (!failures.empty()) {
    std::printf("verify: %zu failure(s)\n", failures.size());
    for (const auto& f : failures) std::printf("  %s\n", f.c_str());
    return 1;
  }
  std::printf("verify: all %zu checks passed\n", tools::verification_checks().size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowact: flow-matching action-chunk policies on toy manipulators"};
  app.require_subcommand(1);
  int exit_code = 0;

  const std::vector<std::pair<std::string, std::string>> shared_flags = {
      {"--seed", "seed"},           {"--arch", "arch"},
      {"--task", "task"},           {"--embodiment", "embodiment"},
      {"--steps", "train.steps"},   {"--execute-k", "controller.execute_k"},
      {"--flow-steps", "flow.steps"},
  };

  // gen-data
  {
    auto* cmd = app.add_subcommand("gen-data", "generate scripted-expert demonstrations");
    auto state = wire_config(cmd, shared_flags);
    auto out = std::make_shared<std::string>("runs/data");
    auto episodes = std::make_shared<int>(20);
    auto suite = std::make_shared<bool>(false);
    cmd->add_option("--out", *out, "output dataset root");
    cmd->add_option("--episodes", *episodes, "episodes per task-embodiment pair");
    cmd->add_flag("--suite", *suite, "generate the default pre-training mixture");
    cmd->callback([=, &exit_code]() {
      exit_code = run_gen_data(resolve_config(*state), *out, *episodes, *suite);
    });
  }
  // pretrain
  {
    auto* cmd = app.add_subcommand("pretrain", "train on a task-embodiment mixture");
    auto state = wire_config(cmd, shared_flags);
    auto data_dir = std::make_shared<std::string>("runs/data");
    auto out = std::make_shared<std::string>("runs/pretrain");
    cmd->add_option("--data", *data_dir, "dataset root");
    cmd->add_option("--out", *out, "output directory");
    cmd->callback([=, &exit_code]() {
      RunConfig rc = resolve_config(*state);
      rc.train.phase = "pretrain";
      exit_code = run_pretrain(rc, *data_dir, *out);
    });
  }
  // finetune
  {
    auto* cmd = app.add_subcommand("finetune", "specialize a checkpoint on one task");
    auto state = wire_config(cmd, shared_flags);
    auto init = std::make_shared<std::string>("");
    auto data_dir = std::make_shared<std::string>("runs/data");
    auto out = std::make_shared<std::string>("runs/finetune");
    auto scratch = std::make_shared<bool>(false);
    cmd->add_option("--init", *init, "checkpoint to start from");
    cmd->add_option("--data", *data_dir, "dataset root");
    cmd->add_option("--out", *out, "output directory");
    cmd->add_flag("--scratch", *scratch, "random init instead of a checkpoint");
    cmd->callback([=, &exit_code]() {
      RunConfig rc = resolve_config(*state);
      rc.train.phase = *scratch ? "scratch" : "finetune";
      exit_code = run_finetune(rc, *init, *data_dir, *out);
    });
  }
  // eval
  {
    auto* cmd = app.add_subcommand("eval", "closed-loop rollouts, one line per condition");
    auto state = wire_config(cmd, shared_flags);
    auto ckpt = std::make_shared<std::string>();
    auto episodes = std::make_shared<int>(10);
    auto conditions = std::make_shared<std::string>("flat,commander");
    auto commands = std::make_shared<std::string>("");
    auto out = std::make_shared<std::string>("");
    cmd->add_option("--ckpt", *ckpt, "policy checkpoint")->required();
    cmd->add_option("--episodes", *episodes, "rollouts per condition");
    cmd->add_option("--conditions", *conditions, "comma list: flat,commander,human");
    cmd->add_option("--commands", *commands, "subcommand file for the human condition");
    cmd->add_option("--out", *out, "write scores and traces here");
    cmd->callback([=, &exit_code]() {
      exit_code = run_eval(resolve_config(*state), *ckpt, *episodes, *conditions, *commands,
                           *out);
    });
  }
  // sample
  {
    auto* cmd = app.add_subcommand("sample", "emit action chunks as CSV");
    auto state = wire_config(cmd, shared_flags);
    auto ckpt = std::make_shared<std::string>();
    auto count = std::make_shared<int>(8);
    auto out_file = std::make_shared<std::string>("chunks.csv");
    cmd->add_option("--ckpt", *ckpt, "policy checkpoint")->required();
    cmd->add_option("--n", *count, "number of chunks");
    cmd->add_option("--out", *out_file, "output CSV file");
    cmd->callback([=, &exit_code]() {
      exit_code = run_sample(resolve_config(*state), *ckpt, *count, *out_file);
    });
  }
  // bench
  {
    auto* cmd = app.add_subcommand("bench", "inference latency profile (cached vs uncached)");
    auto state = wire_config(cmd, shared_flags);
    auto ckpt = std::make_shared<std::string>("");
    auto repeats = std::make_shared<int>(15);
    auto f32 = std::make_shared<bool>(false);
    auto out = std::make_shared<std::string>("");
    cmd->add_option("--ckpt", *ckpt, "checkpoint (default: random weights)");
    cmd->add_option("--repeats", *repeats, "repeats per timing row");
    cmd->add_flag("--f32", *f32, "32-bit inference mode");
    cmd->add_option("--out", *out, "write timing CSVs here");
    cmd->callback([=, &exit_code]() {
      exit_code = run_bench(resolve_config(*state), *ckpt, *repeats, *f32, *out);
    });
  }
  // gradcheck
  {
    auto* cmd = app.add_subcommand("gradcheck", "finite-difference gradient oracles");
    cmd->callback([&exit_code]() { exit_code = run_gradcheck(); });
  }
  // verify
  {
    auto* cmd = app.add_subcommand("verify", "fast invariant suite");
    cmd->callback([&exit_code]() { exit_code = run_verify(); });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cout << app.help() << "\n";
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return exit_code;
}
