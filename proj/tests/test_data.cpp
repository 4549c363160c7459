#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "flowact/data.hpp"
#include "flowact/sim.hpp"
#include "flowact/vocab.hpp"

using namespace flowact;
using namespace flowact::data;

namespace {

const std::filesystem::path kTmp = std::filesystem::temp_directory_path() / "flowact_data_test";

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// A synthetic episode with the given number of steps; only used where real
// world-state semantics do not matter.
Episode synthetic_episode(int steps, int d) {
  Episode ep;
  ep.embodiment = "arm";
  ep.task = "reach";
  ep.state_dim = d;
  ep.action_dim = d;
  ep.world_floats = 2;
  for (int t = 0; t < steps; ++t) {
    EpisodeStep s;
    s.state.assign(d, 0.1 * t);
    s.action.assign(d, 0.0);
    s.action[0] = t;  // identifies the row
    s.world = {0.5, 0.5};
    ep.steps.push_back(std::move(s));
  }
  ep.segments.push_back(sim::Segment{0, steps, vocab::tokenize("reach target")});
  return ep;
}

}  // namespace

TEST_CASE("pad_and_mask pads a d=4 action into d_max=8 with the right mask") {
  auto chunk = pad_and_mask_chunk({{1.0, 2.0, 3.0, 4.0}, {5.0, 6.0, 7.0, 8.0}}, 8);
  CHECK(chunk.horizon == 2);
  CHECK(chunk.dim_mask == std::vector<uint8_t>{1, 1, 1, 1, 0, 0, 0, 0});
  for (int t = 0; t < 2; ++t) {
    for (int j = 4; j < 8; ++j) CHECK(chunk.at(t, j) == 0.0);
  }
  CHECK(chunk.at(1, 2) == 7.0);
}

TEST_CASE("two cameras into three slots leaves the third flag false") {
  CHECK(image_slot_flags(2, 3) == std::vector<uint8_t>{1, 1, 0});
  CHECK_THROWS_AS(image_slot_flags(4, 3), std::invalid_argument);
}

TEST_CASE("unpad inverts pad") {
  const std::vector<double> x = {0.3, -1.2, 4.5};
  auto [padded, mask] = pad_and_mask_vector(x, 8);
  CHECK(padded.size() == 8);
  for (int j = 3; j < 8; ++j) CHECK(padded[j] == 0.0);
  CHECK(unpad_vector(padded, mask) == x);
}

TEST_CASE("padding rejects over-max dims") {
  CHECK_THROWS_AS(pad_and_mask_vector(std::vector<double>(9, 1.0), 8), std::invalid_argument);
  CHECK_THROWS_AS(pad_and_mask_chunk({std::vector<double>(9, 1.0)}, 8), std::invalid_argument);
}

TEST_CASE("mixture weights follow n^alpha") {
  MixtureSpec spec = mixture_weights({{"a", "t", 100}, {"b", "t", 1000}}, 0.43);
  const double ratio = spec.entries[1].weight / spec.entries[0].weight;
  CHECK(ratio == doctest::Approx(std::pow(10.0, 0.43)).epsilon(1e-12));
  CHECK(spec.entries[0].weight + spec.entries[1].weight == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("alpha 0 gives uniform weights, alpha 1 proportional") {
  MixtureSpec uniform = mixture_weights({{"a", "t", 7}, {"b", "t", 70}, {"c", "t", 700}}, 0.0);
  for (const auto& e : uniform.entries) CHECK(e.weight == doctest::Approx(1.0 / 3).epsilon(1e-12));
  MixtureSpec prop = mixture_weights({{"a", "t", 25}, {"b", "t", 75}}, 1.0);
  CHECK(prop.entries[0].weight == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(prop.entries[1].weight == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("mixture weights are permutation equivariant and reject bad input") {
  MixtureSpec ab = mixture_weights({{"a", "t", 123}, {"b", "t", 4567}}, 0.43);
  MixtureSpec ba = mixture_weights({{"b", "t", 4567}, {"a", "t", 123}}, 0.43);
  CHECK(ab.entries[0].weight == ba.entries[1].weight);
  CHECK(ab.entries[1].weight == ba.entries[0].weight);
  CHECK_THROWS_AS(mixture_weights({}, 0.43), std::invalid_argument);
  CHECK_THROWS_AS(mixture_weights({{"a", "t", 0}}, 0.43), std::invalid_argument);
}

TEST_CASE("sampled dataset frequencies match the weight oracle") {
  std::vector<TaskDataset> sets(2);
  sets[0].embodiment = "arm";
  sets[0].task = "reach";
  sets[0].episodes.push_back(synthetic_episode(100, 3));
  sets[1].embodiment = "arm";
  sets[1].task = "reach";
  sets[1].episodes.push_back(synthetic_episode(1000, 3));
  SamplerConfig cfg;
  cfg.horizon = 4;
  cfg.dmax = 8;
  cfg.seed = 5;
  MixtureSampler sampler(std::move(sets), cfg);

  Rng rng(17);
  int big = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto [ds, e, t] = sampler.draw_index(rng);
    (void)e;
    (void)t;
    big += ds == 1 ? 1 : 0;
  }
  const double expected = std::pow(10.0, 0.43) / (1.0 + std::pow(10.0, 0.43));  // 0.72911
  CHECK(std::fabs(big / static_cast<double>(n) - expected) < 0.01);
}

TEST_CASE("generated reach episodes end at the target (forward kinematics oracle)") {
  Rng rng(21);
  auto episodes = gen_episodes("arm", "reach", 3, rng);
  for (const auto& ep : episodes) {
    REQUIRE(!ep.steps.empty());
    // Replay the last recorded state + action to the final configuration.
    sim::ToyEnv env("arm", "reach", 0);
    env.restore(ep.steps.back().state, ep.steps.back().world);
    env.step(ep.steps.back().action);
    const auto ee = env.end_effector(0);
    const double tx = ep.steps.back().world[0];  // landmark 0
    const double ty = ep.steps.back().world[1];
    CHECK(std::hypot(ee[0] - tx, ee[1] - ty) < sim::ToyEnv::kReachTolerance + 1e-9);
  }
}

TEST_CASE("mobile (dual arm + base) episodes carry d=8 action rows before padding") {
  Rng rng(22);
  auto episodes = gen_episodes("mobile", "reach", 1, rng);
  CHECK(episodes[0].action_dim == 8);
  CHECK(episodes[0].steps[0].action.size() == 8);
}

TEST_CASE("gen_episodes rejects unsupported pairs") {
  Rng rng(23);
  CHECK_THROWS_AS(gen_episodes("mobile", "fold", 1, rng), std::invalid_argument);
}

TEST_CASE("fixed seed produces byte-identical episode files") {
  std::filesystem::remove_all(kTmp);
  std::filesystem::create_directories(kTmp);
  Rng rng1(31), rng2(31);
  auto a = gen_episodes("arm", "pick-place", 2, rng1);
  auto b = gen_episodes("arm", "pick-place", 2, rng2);
  save_episode(a[0], kTmp / "a0.fae");
  save_episode(b[0], kTmp / "b0.fae");
  save_episode(a[1], kTmp / "a1.fae");
  save_episode(b[1], kTmp / "b1.fae");
  CHECK(file_bytes(kTmp / "a0.fae") == file_bytes(kTmp / "b0.fae"));
  CHECK(file_bytes(kTmp / "a1.fae") == file_bytes(kTmp / "b1.fae"));
}

TEST_CASE("episode files round trip bit-exactly") {
  std::filesystem::create_directories(kTmp);
  Rng rng(33);
  auto episodes = gen_episodes("dual", "pick-place", 1, rng);
  const auto p1 = kTmp / "rt1.fae";
  const auto p2 = kTmp / "rt2.fae";
  save_episode(episodes[0], p1);
  Episode loaded = load_episode(p1);
  save_episode(loaded, p2);
  CHECK(file_bytes(p1) == file_bytes(p2));
  CHECK(loaded.embodiment == "dual");
  CHECK(loaded.steps.size() == episodes[0].steps.size());
  CHECK(loaded.segments.size() == episodes[0].segments.size());
  CHECK(loaded.steps[3].action == episodes[0].steps[3].action);
}

TEST_CASE("dataset directory layout is <root>/<embodiment>/<task>") {
  const auto root = kTmp / "ds";
  std::filesystem::remove_all(root);
  Rng rng(35);
  save_dataset(gen_episodes("arm", "reach", 2, rng), root);
  save_dataset(gen_episodes("arm_lite", "reach", 1, rng), root);
  CHECK(std::filesystem::exists(root / "arm" / "reach" / "ep_00000.fae"));
  CHECK(std::filesystem::exists(root / "arm" / "reach" / "ep_00001.fae"));
  CHECK(std::filesystem::exists(root / "arm_lite" / "reach" / "ep_00000.fae"));
  auto all = load_all_datasets(root);
  CHECK(all.size() == 2);
  CHECK(load_task_dataset(root, "arm", "reach").episodes.size() == 2);
  CHECK_THROWS_AS(load_task_dataset(root, "dual", "reach"), std::runtime_error);
}

TEST_CASE("chunk at the final timestep repeats the last action H times") {
  Episode ep = synthetic_episode(5, 3);
  ActionChunk chunk = chunk_from_episode(ep, 4, 6, 8);
  for (int t = 0; t < 6; ++t) {
    CHECK(chunk.at(t, 0) == 4.0);
    for (int j = 3; j < 8; ++j) CHECK(chunk.at(t, j) == 0.0);
  }
  ActionChunk mid = chunk_from_episode(ep, 2, 6, 8);
  CHECK(mid.at(0, 0) == 2.0);
  CHECK(mid.at(1, 0) == 3.0);
  CHECK(mid.at(2, 0) == 4.0);
  CHECK(mid.at(3, 0) == 4.0);  // repeat starts
}

TEST_CASE("a batch of one from a one-episode dataset reproduces that episode") {
  Rng rng(41);
  auto episodes = gen_episodes("arm_lite", "reach", 1, rng);
  const Episode ep = episodes[0];
  std::vector<TaskDataset> sets(1);
  sets[0].embodiment = "arm_lite";
  sets[0].task = "reach";
  sets[0].episodes = episodes;
  SamplerConfig cfg;
  cfg.horizon = 8;
  cfg.dmax = 8;
  cfg.seed = 99;
  MixtureSampler sampler(std::move(sets), cfg);
  Batch batch = sampler.sample(0, 1);
  REQUIRE(batch.size() == 1);
  const TrainExample& ex = batch[0];

  // The chunk must match some timestep of the episode.
  bool matched = false;
  for (int t = 0; t < static_cast<int>(ep.steps.size()) && !matched; ++t) {
    ActionChunk expected = chunk_from_episode(ep, t, 8, 8);
    matched = expected.actions == ex.chunk.actions;
    if (matched) {
      // And the observation state must be the normalized state at t.
      sim::ToyEnv env("arm_lite", "reach", 0);
      env.restore(ep.steps[t].state, ep.steps[t].world);
      Observation obs = env.observe(ex.obs.language, 3, 8, 16);
      CHECK(obs.state == ex.obs.state);
      CHECK(obs.images[0].pixels == ex.obs.images[0].pixels);
    }
  }
  CHECK(matched);
}

TEST_CASE("every padded field is exactly zero on masked coordinates in batches") {
  Rng rng(43);
  std::vector<TaskDataset> sets;
  TaskDataset a;
  a.embodiment = "arm";
  a.task = "reach";
  a.episodes = gen_episodes("arm", "reach", 2, rng);
  TaskDataset b;
  b.embodiment = "mobile";
  b.task = "reach";
  b.episodes = gen_episodes("mobile", "reach", 1, rng);
  sets.push_back(std::move(a));
  sets.push_back(std::move(b));
  SamplerConfig cfg;
  cfg.horizon = 6;
  cfg.dmax = 8;
  cfg.seed = 3;
  MixtureSampler sampler(std::move(sets), cfg);
  for (int64_t k = 0; k < 4; ++k) {
    Batch batch = sampler.sample(k, 8);
    for (const auto& ex : batch) {
      validate_chunk(ex.chunk, 6, 8);
      validate_observation(ex.obs, 3, 8);
      for (int t = 0; t < 6; ++t) {
        for (int j = 0; j < 8; ++j) {
          if (ex.chunk.dim_mask[j]) continue;
          const size_t i = static_cast<size_t>(t) * 8 + j;
          CHECK(ex.flow.eps[i] == 0.0);
          CHECK(ex.flow.noisy[i] == 0.0);
          CHECK(ex.flow.target[i] == 0.0);
        }
      }
    }
  }
}

TEST_CASE("batches are a pure function of (seed, batch index)") {
  Rng rng(47);
  std::vector<TaskDataset> sets(1);
  sets[0].embodiment = "arm";
  sets[0].task = "sort2";
  sets[0].episodes = gen_episodes("arm", "sort2", 2, rng);
  SamplerConfig cfg;
  cfg.horizon = 5;
  cfg.dmax = 8;
  cfg.seed = 1234;
  MixtureSampler s1(sets, cfg);
  MixtureSampler s2(std::move(sets), cfg);
  Batch b1 = s1.sample(7, 4);
  Batch b2 = s2.sample(7, 4);
  REQUIRE(b1.size() == b2.size());
  for (size_t i = 0; i < b1.size(); ++i) {
    CHECK(b1[i].chunk.actions == b2[i].chunk.actions);
    CHECK(b1[i].flow.noisy == b2[i].flow.noisy);
    CHECK(b1[i].obs.language == b2[i].obs.language);
    CHECK(b1[i].obs.state == b2[i].obs.state);
  }
}

TEST_CASE("annotation conditioning draws segment labels") {
  Rng rng(53);
  std::vector<TaskDataset> sets(1);
  sets[0].embodiment = "arm";
  sets[0].task = "sort2";
  sets[0].episodes = gen_episodes("arm", "sort2", 1, rng);
  const Episode& ep = sets[0].episodes[0];
  SamplerConfig cfg;
  cfg.horizon = 5;
  cfg.dmax = 8;
  cfg.seed = 8;
  cfg.annotation_prob = 1.0;
  MixtureSampler sampler(std::move(sets), cfg);
  Batch batch = sampler.sample(0, 12);
  for (const auto& ex : batch) {
    bool is_segment_label = false;
    for (const auto& seg : ep.segments) {
      is_segment_label = is_segment_label || seg.tokens == ex.obs.language;
    }
    CHECK(is_segment_label);
  }
}
