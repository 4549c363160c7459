#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "flowact/embodiment.hpp"
#include "flowact/rng.hpp"
#include "flowact/types.hpp"

namespace flowact {
namespace sim {

// Planar worlds with analytic two-link kinematics. No physics engine:
// contact is snap-attach within a radius, so every oracle stays closed form.

struct WorldObject {
  int type = 0;  // 0 red, 1 blue, 2 green, 3 yellow, 4 towel corner
  double x = 0.0;
  double y = 0.0;
  int held_by = -1;  // arm index or -1
};

struct Landmark {
  int kind = 0;  // 0 bin-left, 1 bin-right, 2 target, 3 waypoint
  double x = 0.0;
  double y = 0.0;
};

struct Segment {
  int start = 0;
  int end = 0;  // exclusive
  std::vector<int> tokens;
};

// Ordered scoring checkpoints; score = attained points / max points in [0,1],
// latched so it is monotone within an episode.
struct Checkpoint {
  std::string name;
  int points = 1;
  bool requires_previous = false;
};

struct Rubric {
  std::vector<Checkpoint> checkpoints;
  int max_points = 0;
};

struct TraceStep {
  int step = 0;
  std::vector<double> action;
  double score = 0.0;
  std::vector<double> obs_summary;  // end-effector position of arm 0
  std::vector<std::string> events;  // checkpoints newly attained at this step
};

struct Trajectory {
  std::string embodiment;
  std::string task;
  std::vector<TraceStep> steps;
  double final_score = 0.0;
};

double score(const Trajectory& trajectory, const Rubric& rubric);

const std::vector<std::string>& task_registry();
bool task_supported(const std::string& task, const std::string& embodiment);

class ToyEnv {
 public:
  ToyEnv(const std::string& embodiment_name, const std::string& task, uint64_t seed);

  void reset(uint64_t seed);

  // Applies one raw action (length = embodiment action_dim, clamped to
  // [-1, 1]) : joint-velocity integration, grip attach/detach, base motion.
  void step(const std::vector<double>& action);

  // Renders all cameras and assembles the padded observation with the given
  // language tokens.
  Observation observe(const std::vector<int>& language, int max_images, int dmax,
                      int image_size) const;

  double rubric_score() const;
  bool success() const { return rubric_score() >= 1.0; }
  bool attained(const std::string& checkpoint_name) const;
  const std::vector<std::string>& pending_events();  // drained via clear_events
  void clear_events();
  int steps_taken() const { return steps_taken_; }
  int max_steps() const;

  const EmbodimentSpec& embodiment() const { return spec_; }
  const std::string& task() const { return task_; }
  const Rubric& rubric() const { return rubric_; }

  std::vector<double> raw_state() const;        // embodiment state layout
  std::vector<double> world_vec() const;        // landmarks + objects, flat
  int world_floats() const;
  void restore(const std::vector<double>& raw_state, const std::vector<double>& world);

  std::array<double, 2> end_effector(int arm) const;
  std::array<double, 2> arm_base(int arm) const;
  static std::array<double, 2> forward_kinematics(double base_x, double base_y, double theta1,
                                                  double theta2);

  const std::vector<WorldObject>& objects() const { return objects_; }
  const std::vector<Landmark>& landmarks() const { return landmarks_; }

  static constexpr double kLink1 = 1.0;
  static constexpr double kLink2 = 0.8;
  static constexpr double kAttachRadius = 0.28;
  static constexpr double kBinRadius = 0.24;
  static constexpr double kReachTolerance = 0.15;
  static constexpr double kStackRadius = 0.18;
  static constexpr double kWaypointRadius = 0.20;

 private:
  friend class TaskLogic;
  void evaluate_rubric();

  EmbodimentSpec spec_;
  std::string task_;
  Rubric rubric_;
  std::vector<uint8_t> attained_;
  std::vector<std::string> new_events_;

  std::vector<double> thetas_;  // 2 per arm
  std::vector<double> grips_;   // last command per arm
  double base_x_ = 0.0;
  double base_y_ = 0.0;
  std::vector<WorldObject> objects_;
  std::vector<Landmark> landmarks_;
  int steps_taken_ = 0;
};

// Runs the rule-based commander + subcommand follower to completion,
// emitting the action sequence and the per-subcommand segment annotations.
// Approach sides (elbow branch per grasp) are chosen by coin flip.
struct ExpertResult {
  std::vector<std::vector<double>> actions;
  std::vector<Segment> segments;
  std::vector<int> approach_sides;  // +1 / -1 per inverse-kinematics solve
  double final_score = 0.0;
};

ExpertResult scripted_expert(ToyEnv& env, Rng& rng);

// Next subcommand for the env's task given the current world state; returns
// the "done" token once the rubric is satisfied.
std::vector<int> high_level_command(const ToyEnv& env);

// Executes one subcommand with the scripted controller (the expert is the
// commander plus this follower). Returns false if the subcommand could not
// finish within its step budget.
bool follow_subcommand(ToyEnv& env, const std::vector<int>& command, Rng& rng,
                       std::vector<std::vector<double>>* actions_out,
                       std::vector<int>* approach_sides_out);

std::vector<int> task_tokens(const std::string& task);

}  // namespace sim
}  // namespace flowact
