#include "flowact/sim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "flowact/vocab.hpp"

namespace flowact {
namespace sim {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kDt = 0.1;        // 1 / control_hz
constexpr double kBaseSpeed = 0.8;
constexpr double kExpertKp = 6.0;

double clamp1(double v) { return std::min(1.0, std::max(-1.0, v)); }

double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * kPi);
  return a;
}

enum class TaskId { reach, pick_place, sort2, sort4, fold, stack };

TaskId task_id(const std::string& task) {
  if (task == "reach") return TaskId::reach;
  if (task == "pick-place") return TaskId::pick_place;
  if (task == "sort2") return TaskId::sort2;
  if (task == "sort4") return TaskId::sort4;
  if (task == "fold") return TaskId::fold;
  if (task == "stack") return TaskId::stack;
  throw std::invalid_argument("sim: unknown task '" + task + "'");
}

const char* color_word(int type) {
  switch (type) {
    case 0: return "red";
    case 1: return "blue";
    case 2: return "green";
    case 3: return "yellow";
    default: return "towel";
  }
}

struct IkSolution {
  double theta1 = 0.0;
  double theta2 = 0.0;
  bool ok = false;
};

IkSolution inverse_kinematics(double bx, double by, double tx, double ty, int elbow_sign) {
  const double dx = tx - bx, dy = ty - by;
  const double r2 = dx * dx + dy * dy;
  const double l1 = ToyEnv::kLink1, l2 = ToyEnv::kLink2;
  IkSolution s;
  const double c2 = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
  if (c2 < -1.0 || c2 > 1.0) return s;
  s.theta2 = elbow_sign * std::acos(c2);
  s.theta1 = std::atan2(dy, dx) - std::atan2(l2 * std::sin(s.theta2), l1 + l2 * std::cos(s.theta2));
  s.theta1 = wrap_angle(s.theta1);
  s.ok = true;
  return s;
}

double dist2d(double ax, double ay, double bx, double by) {
  return std::hypot(ax - bx, ay - by);
}

}  // namespace

// ---- registry ----------------------------------------------------------------

const std::vector<std::string>& task_registry() {
  static const std::vector<std::string> tasks = {"reach", "pick-place", "sort2",
                                                 "sort4", "fold",       "stack"};
  return tasks;
}

bool task_supported(const std::string& task, const std::string& embodiment_name) {
  const TaskId id = task_id(task);
  if (embodiment_name == "arm" || embodiment_name == "arm_lite") return true;
  if (embodiment_name == "dual") return id == TaskId::reach || id == TaskId::pick_place;
  if (embodiment_name == "mobile") return id == TaskId::reach;
  return false;
}

std::vector<int> task_tokens(const std::string& task) {
  switch (task_id(task)) {
    case TaskId::reach: return vocab::tokenize("reach");
    case TaskId::pick_place: return vocab::tokenize("pick place");
    case TaskId::sort2:
    case TaskId::sort4: return vocab::tokenize("sort");
    case TaskId::fold: return vocab::tokenize("fold");
    case TaskId::stack: return vocab::tokenize("stack");
  }
  return {};
}

// ---- env ----------------------------------------------------------------------

ToyEnv::ToyEnv(const std::string& embodiment_name, const std::string& task, uint64_t seed)
    : spec_(flowact::embodiment(embodiment_name)), task_(task) {
  if (!task_supported(task, embodiment_name)) {
    throw std::invalid_argument("sim: task '" + task + "' not implemented for embodiment '" +
                                embodiment_name + "'");
  }
  reset(seed);
}

void ToyEnv::reset(uint64_t seed) {
  Rng rng(seed ^ 0x51f0ac7501u);
  steps_taken_ = 0;
  base_x_ = 0.0;
  base_y_ = 0.0;
  thetas_.assign(2 * spec_.num_arms, 0.0);
  grips_.assign(spec_.num_arms, 0.0);
  for (int a = 0; a < spec_.num_arms; ++a) {
    thetas_[2 * a] = kPi / 2.0 + rng.uniform(-0.2, 0.2);
    thetas_[2 * a + 1] = (a == 0 ? -0.5 : 0.5) + rng.uniform(-0.2, 0.2);
  }
  objects_.clear();
  landmarks_.clear();
  new_events_.clear();

  const TaskId id = task_id(task_);
  auto arm_anchor = [&](int arm) { return this->arm_base(arm); };

  // Samples a point in the front workspace annulus of one arm.
  auto sample_reachable = [&](int arm) {
    const auto b = arm_anchor(arm);
    const double r = rng.uniform(0.55, 1.5);
    const double ang = rng.uniform(0.35, kPi - 0.35);
    return std::array<double, 2>{b[0] + r * std::cos(ang), b[1] + r * std::sin(ang)};
  };
  auto place_object = [&](int type, double min_sep) {
    for (int tries = 0; tries < 400; ++tries) {
      const int arm = static_cast<int>(rng.below(spec_.num_arms));
      const auto p = sample_reachable(arm);
      bool ok = true;
      for (const auto& o : objects_) ok = ok && dist2d(p[0], p[1], o.x, o.y) >= min_sep;
      for (const auto& l : landmarks_) ok = ok && dist2d(p[0], p[1], l.x, l.y) >= 0.38;
      if (ok) {
        objects_.push_back(WorldObject{type, p[0], p[1], -1});
        return;
      }
    }
    throw std::runtime_error("sim: could not place object (scene too constrained)");
  };

  switch (id) {
    case TaskId::reach: {
      if (spec_.has_base) {
        landmarks_.push_back(Landmark{2, rng.uniform(-2.0, 2.0), rng.uniform(1.2, 2.2)});
      } else {
        const int arm = static_cast<int>(rng.below(spec_.num_arms));
        const auto p = sample_reachable(arm);
        landmarks_.push_back(Landmark{2, p[0], p[1]});
      }
      break;
    }
    case TaskId::pick_place: {
      // The bin must be reachable by whichever arm ends up holding the object.
      if (spec_.num_arms == 2) {
        landmarks_.push_back(Landmark{0, 0.0, 1.45});
      } else {
        landmarks_.push_back(Landmark{0, -1.0, 1.15});
      }
      place_object(0, 0.34);
      break;
    }
    case TaskId::sort2:
    case TaskId::sort4: {
      landmarks_.push_back(Landmark{0, -1.1, 1.05});
      landmarks_.push_back(Landmark{1, 1.1, 1.05});
      const int n = id == TaskId::sort2 ? 2 : 4;
      for (int k = 0; k < n; ++k) place_object(k % 2, 0.34);
      break;
    }
    case TaskId::fold: {
      const double cx = rng.uniform(-0.25, 0.25);
      const double cy = rng.uniform(0.55, 0.95);
      landmarks_.push_back(Landmark{3, cx - 0.15, cy + 0.40});
      landmarks_.push_back(Landmark{3, cx + 0.25, cy + 0.40});
      objects_.push_back(WorldObject{4, cx - 0.45, cy, -1});
      objects_.push_back(WorldObject{4, cx + 0.45, cy, -1});
      break;
    }
    case TaskId::stack: {
      place_object(2, 0.45);  // green base
      place_object(3, 0.45);  // yellow payload
      break;
    }
  }

  rubric_.checkpoints.clear();
  rubric_.max_points = 0;
  auto add_checkpoint = [&](const std::string& name, bool requires_previous = false) {
    rubric_.checkpoints.push_back(Checkpoint{name, 1, requires_previous});
    rubric_.max_points += 1;
  };
  switch (id) {
    case TaskId::reach: add_checkpoint("reached"); break;
    case TaskId::pick_place:
      add_checkpoint("grasped");
      add_checkpoint("placed");
      break;
    case TaskId::sort2:
    case TaskId::sort4:
      for (size_t k = 0; k < objects_.size(); ++k) {
        add_checkpoint("sorted_" + std::to_string(k));
      }
      break;
    case TaskId::fold:
      add_checkpoint("fold_first");
      add_checkpoint("fold_second", true);
      break;
    case TaskId::stack:
      add_checkpoint("grasped");
      add_checkpoint("stacked");
      break;
  }
  attained_.assign(rubric_.checkpoints.size(), 0);
}

std::array<double, 2> ToyEnv::forward_kinematics(double base_x, double base_y, double theta1,
                                                 double theta2) {
  const double ex = base_x + kLink1 * std::cos(theta1) + kLink2 * std::cos(theta1 + theta2);
  const double ey = base_y + kLink1 * std::sin(theta1) + kLink2 * std::sin(theta1 + theta2);
  return {ex, ey};
}

std::array<double, 2> ToyEnv::arm_base(int arm) const {
  if (spec_.num_arms == 1) return {base_x_, base_y_};
  const double off = arm == 0 ? -0.7 : 0.7;
  return {base_x_ + off, base_y_};
}

std::array<double, 2> ToyEnv::end_effector(int arm) const {
  const auto b = arm_base(arm);
  return forward_kinematics(b[0], b[1], thetas_[2 * arm], thetas_[2 * arm + 1]);
}

void ToyEnv::step(const std::vector<double>& action) {
  if (static_cast<int>(action.size()) != spec_.action_dim) {
    throw std::invalid_argument("sim step: expected action of length " +
                                std::to_string(spec_.action_dim));
  }
  for (int a = 0; a < spec_.num_arms; ++a) {
    thetas_[2 * a] = wrap_angle(thetas_[2 * a] + clamp1(action[3 * a]) * kDt);
    thetas_[2 * a + 1] = wrap_angle(thetas_[2 * a + 1] + clamp1(action[3 * a + 1]) * kDt);
  }
  if (spec_.has_base) {
    base_x_ += clamp1(action[spec_.action_dim - 2]) * kBaseSpeed * kDt;
    base_y_ += clamp1(action[spec_.action_dim - 1]) * kBaseSpeed * kDt;
  }
  for (int a = 0; a < spec_.num_arms; ++a) {
    const double g = clamp1(action[3 * a + 2]);
    const bool want_closed = g > 0.5;
    const bool was_closed = grips_[a] > 0.5;
    int held = -1;
    for (size_t k = 0; k < objects_.size(); ++k) {
      if (objects_[k].held_by == a) held = static_cast<int>(k);
    }
    const auto ee = end_effector(a);
    if (want_closed && !was_closed && held < 0) {
      // Snap-attach the nearest free object within the radius.
      int best = -1;
      double best_d = kAttachRadius;
      for (size_t k = 0; k < objects_.size(); ++k) {
        if (objects_[k].held_by >= 0) continue;
        const double d = dist2d(ee[0], ee[1], objects_[k].x, objects_[k].y);
        if (d <= best_d) {
          best_d = d;
          best = static_cast<int>(k);
        }
      }
      if (best >= 0) objects_[best].held_by = a;
    } else if (!want_closed && held >= 0) {
      objects_[held].held_by = -1;
    }
    grips_[a] = g;
  }
  for (auto& o : objects_) {
    if (o.held_by >= 0) {
      const auto ee = end_effector(o.held_by);
      o.x = ee[0];
      o.y = ee[1];
    }
  }
  ++steps_taken_;
  evaluate_rubric();
}

namespace {

bool object_in_landmark(const WorldObject& o, const Landmark& l, double radius) {
  return o.held_by < 0 && dist2d(o.x, o.y, l.x, l.y) < radius;
}

}  // namespace

void ToyEnv::evaluate_rubric() {
  const TaskId id = task_id(task_);
  auto predicate = [&](size_t k) -> bool {
    switch (id) {
      case TaskId::reach: {
        for (int a = 0; a < spec_.num_arms; ++a) {
          const auto ee = end_effector(a);
          if (dist2d(ee[0], ee[1], landmarks_[0].x, landmarks_[0].y) < kReachTolerance) {
            return true;
          }
        }
        return false;
      }
      case TaskId::pick_place:
        if (k == 0) return objects_[0].held_by >= 0;
        return object_in_landmark(objects_[0], landmarks_[0], kBinRadius);
      case TaskId::sort2:
      case TaskId::sort4: {
        const auto& o = objects_[k];
        return object_in_landmark(o, landmarks_[o.type == 0 ? 0 : 1], kBinRadius);
      }
      case TaskId::fold: {
        const auto& corner = objects_[k];
        const auto& wp = landmarks_[k];
        return corner.held_by < 0 && dist2d(corner.x, corner.y, wp.x, wp.y) < kWaypointRadius;
      }
      case TaskId::stack:
        if (k == 0) return objects_[1].held_by >= 0;
        return objects_[1].held_by < 0 &&
               dist2d(objects_[1].x, objects_[1].y, objects_[0].x, objects_[0].y) < kStackRadius;
    }
    return false;
  };
  for (size_t k = 0; k < rubric_.checkpoints.size(); ++k) {
    if (attained_[k]) continue;
    if (rubric_.checkpoints[k].requires_previous && k > 0 && !attained_[k - 1]) continue;
    if (predicate(k)) {
      attained_[k] = 1;
      new_events_.push_back(rubric_.checkpoints[k].name);
    }
  }
}

double ToyEnv::rubric_score() const {
  int points = 0;
  for (size_t k = 0; k < rubric_.checkpoints.size(); ++k) {
    if (attained_[k]) points += rubric_.checkpoints[k].points;
  }
  return rubric_.max_points == 0 ? 0.0 : static_cast<double>(points) / rubric_.max_points;
}

bool ToyEnv::attained(const std::string& name) const {
  for (size_t k = 0; k < rubric_.checkpoints.size(); ++k) {
    if (rubric_.checkpoints[k].name == name) return attained_[k] != 0;
  }
  return false;
}

const std::vector<std::string>& ToyEnv::pending_events() { return new_events_; }

void ToyEnv::clear_events() { new_events_.clear(); }

int ToyEnv::max_steps() const {
  int cap = 0;
  switch (task_id(task_)) {
    case TaskId::reach: cap = 90; break;
    case TaskId::pick_place: cap = 170; break;
    case TaskId::sort2: cap = 320; break;
    case TaskId::sort4: cap = 600; break;
    case TaskId::fold: cap = 360; break;
    case TaskId::stack: cap = 170; break;
  }
  if (spec_.has_base) cap += 90;
  return cap;
}

std::vector<double> ToyEnv::raw_state() const {
  std::vector<double> q;
  q.reserve(spec_.state_dim);
  for (int a = 0; a < spec_.num_arms; ++a) {
    q.push_back(thetas_[2 * a]);
    q.push_back(thetas_[2 * a + 1]);
    q.push_back(grips_[a]);
  }
  if (spec_.has_base) {
    q.push_back(base_x_);
    q.push_back(base_y_);
  }
  return q;
}

int ToyEnv::world_floats() const {
  return static_cast<int>(2 * landmarks_.size() + 4 * objects_.size());
}

std::vector<double> ToyEnv::world_vec() const {
  std::vector<double> w;
  w.reserve(world_floats());
  for (const auto& l : landmarks_) {
    w.push_back(l.x);
    w.push_back(l.y);
  }
  for (const auto& o : objects_) {
    w.push_back(static_cast<double>(o.type));
    w.push_back(o.x);
    w.push_back(o.y);
    w.push_back(static_cast<double>(o.held_by));
  }
  return w;
}

void ToyEnv::restore(const std::vector<double>& raw, const std::vector<double>& world) {
  if (static_cast<int>(raw.size()) != spec_.state_dim ||
      static_cast<int>(world.size()) != world_floats()) {
    throw std::invalid_argument("sim restore: state/world size mismatch");
  }
  for (int a = 0; a < spec_.num_arms; ++a) {
    thetas_[2 * a] = raw[3 * a];
    thetas_[2 * a + 1] = raw[3 * a + 1];
    grips_[a] = raw[3 * a + 2];
  }
  if (spec_.has_base) {
    base_x_ = raw[spec_.state_dim - 2];
    base_y_ = raw[spec_.state_dim - 1];
  }
  size_t i = 0;
  for (auto& l : landmarks_) {
    l.x = world[i++];
    l.y = world[i++];
  }
  for (auto& o : objects_) {
    o.type = static_cast<int>(world[i++]);
    o.x = world[i++];
    o.y = world[i++];
    o.held_by = static_cast<int>(world[i++]);
  }
}

// ---- renderer ------------------------------------------------------------------

namespace {

struct Viewport {
  double x0, y0, x1, y1;
};

std::vector<Viewport> camera_viewports(const EmbodimentSpec& spec, double bx, double by) {
  if (spec.name == "arm") {
    return {{-2.1, -0.6, 2.1, 2.1}, {-1.3, 0.0, 1.3, 1.8}};
  }
  if (spec.name == "arm_lite") {
    return {{-2.1, -0.6, 2.1, 2.1}};
  }
  if (spec.name == "dual") {
    return {{-2.9, -0.6, 2.9, 2.1}, {-2.6, -0.3, 0.2, 1.9}, {-0.2, -0.3, 2.6, 1.9}};
  }
  // mobile: one wide world view plus two base-mounted views.
  return {{-3.2, -0.8, 3.2, 2.8},
          {bx - 1.9, by - 0.5, bx + 1.9, by + 2.0},
          {bx - 1.0, by + 0.0, bx + 1.0, by + 1.6}};
}

void splat(std::vector<double>& img, int size, const Viewport& vp, double x, double y, double w) {
  const double fx = (x - vp.x0) / (vp.x1 - vp.x0) * (size - 1);
  const double fy = (y - vp.y0) / (vp.y1 - vp.y0) * (size - 1);
  const int ix = static_cast<int>(std::floor(fx));
  const int iy = static_cast<int>(std::floor(fy));
  const double ax = fx - ix, ay = fy - iy;
  const double ws[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
  const int xs[4] = {ix, ix + 1, ix, ix + 1};
  const int ys[4] = {iy, iy, iy + 1, iy + 1};
  for (int k = 0; k < 4; ++k) {
    if (xs[k] < 0 || xs[k] >= size || ys[k] < 0 || ys[k] >= size) continue;
    // Row 0 at the top of the raster, increasing y upward in the world.
    img[static_cast<size_t>(size - 1 - ys[k]) * size + xs[k]] += w * ws[k];
  }
}

double object_intensity(int type) {
  switch (type) {
    case 0: return 1.0;   // red
    case 1: return 0.85;  // blue
    case 2: return 0.70;  // green
    case 3: return 0.60;  // yellow
    default: return 0.92;  // towel corner
  }
}

}  // namespace

Observation ToyEnv::observe(const std::vector<int>& language, int max_images, int dmax,
                            int image_size) const {
  if (spec_.num_cameras > max_images) {
    throw std::invalid_argument("sim observe: embodiment has more cameras than image slots");
  }
  Observation obs;
  obs.images.resize(max_images);
  const auto viewports = camera_viewports(spec_, base_x_, base_y_);
  for (int cam = 0; cam < spec_.num_cameras; ++cam) {
    const Viewport& vp = viewports[cam];
    std::vector<double> img(static_cast<size_t>(image_size) * image_size, 0.0);
    for (const auto& l : landmarks_) {
      const double w = 0.22 + 0.04 * l.kind;
      splat(img, image_size, vp, l.x, l.y, w);
      splat(img, image_size, vp, l.x + 0.12, l.y, 0.5 * w);
      splat(img, image_size, vp, l.x - 0.12, l.y, 0.5 * w);
      splat(img, image_size, vp, l.x, l.y + 0.12, 0.5 * w);
      splat(img, image_size, vp, l.x, l.y - 0.12, 0.5 * w);
    }
    for (int a = 0; a < spec_.num_arms; ++a) {
      const auto b = arm_base(a);
      const double t1 = thetas_[2 * a], t2 = thetas_[2 * a + 1];
      const double ex1 = b[0] + kLink1 * std::cos(t1), ey1 = b[1] + kLink1 * std::sin(t1);
      const auto ee = end_effector(a);
      for (int s = 0; s <= 4; ++s) {
        const double f = s / 4.0;
        splat(img, image_size, vp, b[0] + f * (ex1 - b[0]), b[1] + f * (ey1 - b[1]), 0.30);
        splat(img, image_size, vp, ex1 + f * (ee[0] - ex1), ey1 + f * (ee[1] - ey1), 0.30);
      }
      splat(img, image_size, vp, ee[0], ee[1], grips_[a] > 0.5 ? 0.55 : 0.40);
    }
    for (const auto& o : objects_) {
      splat(img, image_size, vp, o.x, o.y, 1.3 * object_intensity(o.type));
    }
    for (auto& v : img) v = std::min(1.0, std::max(0.0, v));
    obs.images[cam].present = true;
    obs.images[cam].pixels = std::move(img);
  }
  obs.language = language;
  const std::vector<double> normalized = normalize_state(spec_, raw_state());
  obs.state.assign(dmax, 0.0);
  obs.state_mask.assign(dmax, 0);
  if (spec_.state_dim > dmax) {
    throw std::invalid_argument("sim observe: state dim exceeds d_max");
  }
  for (int j = 0; j < spec_.state_dim; ++j) {
    obs.state[j] = normalized[j];
    obs.state_mask[j] = 1;
  }
  return obs;
}

// ---- scoring -------------------------------------------------------------------

double score(const Trajectory& trajectory, const Rubric& rubric) {
  if (trajectory.steps.empty() || rubric.max_points == 0) return 0.0;
  std::unordered_set<std::string> attained;
  for (const auto& s : trajectory.steps) {
    for (const auto& e : s.events) attained.insert(e);
  }
  int points = 0;
  for (const auto& c : rubric.checkpoints) {
    if (attained.count(c.name)) points += c.points;
  }
  return static_cast<double>(points) / rubric.max_points;
}

// ---- commander -----------------------------------------------------------------

namespace {

bool object_sorted(const ToyEnv& env, size_t k) {
  const auto& o = env.objects()[k];
  const auto& l = env.landmarks()[o.type == 0 ? 0 : 1];
  return o.held_by < 0 && dist2d(o.x, o.y, l.x, l.y) < ToyEnv::kBinRadius;
}

}  // namespace

std::vector<int> high_level_command(const ToyEnv& env) {
  if (env.success()) return vocab::tokenize("done");
  switch (task_id(env.task())) {
    case TaskId::reach:
      return vocab::tokenize("reach target");
    case TaskId::pick_place: {
      if (env.objects()[0].held_by >= 0) return vocab::tokenize("place bin");
      return vocab::tokenize("pick red");
    }
    case TaskId::sort2:
    case TaskId::sort4: {
      // A held object is placed first; otherwise pick the first unsorted one.
      for (size_t k = 0; k < env.objects().size(); ++k) {
        const auto& o = env.objects()[k];
        if (o.held_by >= 0) {
          return vocab::tokenize(o.type == 0 ? "place left" : "place right");
        }
      }
      for (size_t k = 0; k < env.objects().size(); ++k) {
        if (!object_sorted(env, k)) {
          return vocab::tokenize(std::string("pick ") + color_word(env.objects()[k].type));
        }
      }
      return vocab::tokenize("done");
    }
    case TaskId::fold: {
      if (!env.attained("fold_first")) return vocab::tokenize("fold first");
      return vocab::tokenize("fold second");
    }
    case TaskId::stack: {
      if (env.objects()[1].held_by >= 0) return vocab::tokenize("stack green");
      return vocab::tokenize("pick yellow");
    }
  }
  return vocab::tokenize("done");
}

// ---- scripted follower ------------------------------------------------------------

namespace {

class Follower {
 public:
  Follower(ToyEnv& env, Rng& rng, std::vector<std::vector<double>>* actions_out,
           std::vector<int>* sides_out)
      : env_(env), rng_(rng), actions_out_(actions_out), sides_out_(sides_out) {}

  bool run(const std::vector<int>& command) {
    const std::string text = vocab::detokenize(command);
    if (text == "done") return true;
    if (text == "reach target") {
      const auto& l = env_.landmarks()[0];
      if (!drive_if_needed(l.x, l.y)) return false;
      const int arm = choose_arm(l.x, l.y);
      return arm >= 0 && move_arm(arm, l.x, l.y, -1.0, 0.10);
    }
    if (text.rfind("pick ", 0) == 0) {
      const int want_type = type_from_word(text.substr(5));
      const int obj = nearest_free_object(want_type);
      if (obj < 0) return false;
      const auto& o = env_.objects()[obj];
      if (!drive_if_needed(o.x, o.y)) return false;
      const int arm = choose_arm(o.x, o.y);
      if (arm < 0 || !move_arm(arm, o.x, o.y, -1.0, 0.12)) return false;
      return set_grip(arm, 1.0) && env_.objects()[obj].held_by == arm;
    }
    if (text == "place bin" || text == "place left" || text == "place right") {
      const int kind = text == "place right" ? 1 : 0;
      const Landmark* lm = find_landmark(kind);
      if (lm == nullptr) return false;
      const int arm = holding_arm();
      if (arm < 0 || !move_arm(arm, lm->x, lm->y, 1.0, 0.12)) return false;
      return set_grip(arm, -1.0);
    }
    if (text == "fold first" || text == "fold second") {
      const int k = text == "fold first" ? 0 : 1;
      const auto& corner = env_.objects()[k];
      const auto& wp = env_.landmarks()[k];
      const int arm = choose_arm(corner.x, corner.y);
      if (arm < 0 || !move_arm(arm, corner.x, corner.y, -1.0, 0.12)) return false;
      if (!set_grip(arm, 1.0) || env_.objects()[k].held_by != arm) return false;
      if (!move_arm(arm, wp.x, wp.y, 1.0, 0.11)) return false;
      return set_grip(arm, -1.0);
    }
    if (text == "stack green") {
      const auto& base = env_.objects()[0];
      const int arm = holding_arm();
      if (arm < 0 || !move_arm(arm, base.x, base.y + 0.08, 1.0, 0.11)) return false;
      return set_grip(arm, -1.0);
    }
    throw std::invalid_argument("follower: unknown subcommand '" + text + "'");
  }

 private:
  int type_from_word(const std::string& word) const {
    for (int t = 0; t < 5; ++t) {
      if (word == color_word(t)) return t;
    }
    throw std::invalid_argument("follower: unknown color '" + word + "'");
  }

  const Landmark* find_landmark(int kind) const {
    for (const auto& l : env_.landmarks()) {
      if (l.kind == kind) return &l;
    }
    return nullptr;
  }

  int holding_arm() const {
    for (const auto& o : env_.objects()) {
      if (o.held_by >= 0) return o.held_by;
    }
    return -1;
  }

  int nearest_free_object(int type) const {
    int best = -1;
    double best_d = 1e18;
    for (size_t k = 0; k < env_.objects().size(); ++k) {
      const auto& o = env_.objects()[k];
      if (o.type != type || o.held_by >= 0) continue;
      if (env_.task() != "reach" && sorted_away(k)) continue;
      double d = 1e17;
      for (int a = 0; a < env_.embodiment().num_arms; ++a) {
        const auto ee = env_.end_effector(a);
        d = std::min(d, dist2d(ee[0], ee[1], o.x, o.y));
      }
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    return best;
  }

  bool sorted_away(size_t k) const {
    const auto& o = env_.objects()[k];
    for (const auto& l : env_.landmarks()) {
      if (l.kind <= 1 && dist2d(o.x, o.y, l.x, l.y) < ToyEnv::kBinRadius) return true;
    }
    return false;
  }

  bool reachable(int arm, double tx, double ty) const {
    const auto b = env_.arm_base(arm);
    const double r = dist2d(b[0], b[1], tx, ty);
    return r > 0.25 && r < ToyEnv::kLink1 + ToyEnv::kLink2 - 0.03;
  }

  int choose_arm(double tx, double ty) {
    std::vector<int> candidates;
    for (int a = 0; a < env_.embodiment().num_arms; ++a) {
      if (reachable(a, tx, ty)) candidates.push_back(a);
    }
    if (candidates.empty()) return -1;
    if (candidates.size() == 1) return candidates[0];
    return candidates[rng_.coin() ? 0 : 1];
  }

  void emit(std::vector<double> action) {
    env_.step(action);
    if (actions_out_ != nullptr) actions_out_->push_back(std::move(action));
  }

  std::vector<double> idle_action() const {
    std::vector<double> a(env_.embodiment().action_dim, 0.0);
    // Keep the current grip command on every arm.
    const auto q = env_.raw_state();
    for (int arm = 0; arm < env_.embodiment().num_arms; ++arm) a[3 * arm + 2] = q[3 * arm + 2];
    return a;
  }

  bool drive_if_needed(double tx, double ty) {
    if (!env_.embodiment().has_base) return true;
    const auto q = env_.raw_state();
    const int sd = env_.embodiment().state_dim;
    for (int step = 0; step < 160; ++step) {
      const double bx = env_.raw_state()[sd - 2];
      const double by = env_.raw_state()[sd - 1];
      const double gx = tx, gy = ty - 1.1;  // stand below the target
      if (dist2d(bx, by, gx, gy) < 0.08) return true;
      std::vector<double> a = idle_action();
      a[env_.embodiment().action_dim - 2] = clamp1(kExpertKp * (gx - bx));
      a[env_.embodiment().action_dim - 1] = clamp1(kExpertKp * (gy - by));
      emit(a);
    }
    (void)q;
    return false;
  }

  bool move_arm(int arm, double tx, double ty, double grip_cmd, double tol) {
    const int side = rng_.coin() ? 1 : -1;
    const auto b = env_.arm_base(arm);
    IkSolution ik = inverse_kinematics(b[0], b[1], tx, ty, side);
    int used_side = side;
    if (!ik.ok) {
      ik = inverse_kinematics(b[0], b[1], tx, ty, -side);
      used_side = -side;
    }
    if (!ik.ok) {
      throw std::runtime_error("follower: unreachable target for arm " + std::to_string(arm));
    }
    if (sides_out_ != nullptr) sides_out_->push_back(used_side);
    for (int step = 0; step < 150; ++step) {
      const auto ee = env_.end_effector(arm);
      if (dist2d(ee[0], ee[1], tx, ty) < tol) return true;
      const auto q = env_.raw_state();
      const double e1 = std::remainder(ik.theta1 - q[3 * arm], 2.0 * kPi);
      const double e2 = std::remainder(ik.theta2 - q[3 * arm + 1], 2.0 * kPi);
      std::vector<double> a = idle_action();
      a[3 * arm] = clamp1(kExpertKp * e1);
      a[3 * arm + 1] = clamp1(kExpertKp * e2);
      a[3 * arm + 2] = grip_cmd;
      emit(a);
      if (std::fabs(e1) < 0.005 && std::fabs(e2) < 0.005 &&
          dist2d(ee[0], ee[1], tx, ty) >= tol) {
        return false;  // converged to the IK goal but still off target
      }
    }
    return false;
  }

  bool set_grip(int arm, double g) {
    for (int i = 0; i < 2; ++i) {
      std::vector<double> a = idle_action();
      a[3 * arm + 2] = g;
      emit(a);
    }
    return true;
  }

  ToyEnv& env_;
  Rng& rng_;
  std::vector<std::vector<double>>* actions_out_;
  std::vector<int>* sides_out_;
};

}  // namespace

bool follow_subcommand(ToyEnv& env, const std::vector<int>& command, Rng& rng,
                       std::vector<std::vector<double>>* actions_out,
                       std::vector<int>* approach_sides_out) {
  Follower follower(env, rng, actions_out, approach_sides_out);
  return follower.run(command);
}

ExpertResult scripted_expert(ToyEnv& env, Rng& rng) {
  ExpertResult res;
  const int max_cycles = 24;
  for (int cycle = 0; cycle < max_cycles && !env.success(); ++cycle) {
    const std::vector<int> cmd = high_level_command(env);
    if (vocab::detokenize(cmd) == "done") break;
    const int seg_start = static_cast<int>(res.actions.size());
    if (!follow_subcommand(env, cmd, rng, &res.actions, &res.approach_sides)) {
      throw std::runtime_error("expert: subcommand '" + vocab::detokenize(cmd) +
                               "' failed on task " + env.task());
    }
    res.segments.push_back(Segment{seg_start, static_cast<int>(res.actions.size()), cmd});
  }
  if (!env.success()) {
    throw std::runtime_error("expert: failed to complete task " + env.task());
  }
  res.final_score = env.rubric_score();
  return res;
}

}  // namespace sim
}  // namespace flowact
