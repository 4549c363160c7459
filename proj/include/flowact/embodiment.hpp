#pragma once

#include <string>
#include <vector>

namespace flowact {

// One robot morphology. Action and state layouts (raw, before padding):
//   single arm   (d=3): [dtheta1, dtheta2, grip]
//   dual arm     (d=6): [arm a..., arm b...]
//   dual + base  (d=8): [arm a..., arm b..., base vx, base vy]
// States mirror the layout with absolute angles, grip state and base position.
struct EmbodimentSpec {
  std::string name;
  int action_dim = 0;
  int state_dim = 0;
  int num_cameras = 1;
  int control_hz = 10;
  int num_arms = 1;
  bool has_base = false;
};

// The four toy embodiments: single-arm/dual-arm/mobile plus a one-camera
// single arm, mirroring a single/dual/mobile taxonomy at desk scale.
const std::vector<EmbodimentSpec>& embodiment_registry();
const EmbodimentSpec& embodiment(const std::string& name);
int registry_max_action_dim();

// Scales raw joint angles / base positions into roughly [-1, 1] for the
// policy. Length equals the embodiment's state_dim.
std::vector<double> normalize_state(const EmbodimentSpec& spec, const std::vector<double>& raw);

}  // namespace flowact
