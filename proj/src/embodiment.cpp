#include "flowact/embodiment.hpp"

#include <cmath>
#include <stdexcept>

namespace flowact {

const std::vector<EmbodimentSpec>& embodiment_registry() {
  static const std::vector<EmbodimentSpec> registry = {
      // name        action state cams hz arms base
      {"arm", 3, 3, 2, 10, 1, false},
      {"dual", 6, 6, 3, 10, 2, false},
      {"mobile", 8, 8, 3, 10, 2, true},
      {"arm_lite", 3, 3, 1, 10, 1, false},
  };
  return registry;
}

const EmbodimentSpec& embodiment(const std::string& name) {
  for (const auto& spec : embodiment_registry()) {
    if (spec.name == name) return spec;
  }
  throw std::invalid_argument("embodiment: unknown name '" + name + "'");
}

int registry_max_action_dim() {
  int d = 0;
  for (const auto& spec : embodiment_registry()) d = std::max(d, spec.action_dim);
  return d;
}

std::vector<double> normalize_state(const EmbodimentSpec& spec, const std::vector<double>& raw) {
  if (static_cast<int>(raw.size()) != spec.state_dim) {
    throw std::invalid_argument("normalize_state: expected length " +
                                std::to_string(spec.state_dim));
  }
  std::vector<double> out(raw.size());
  constexpr double pi = 3.14159265358979323846;
  // Per-arm [theta1, theta2, grip] triples, then base position for mobiles.
  for (int a = 0; a < spec.num_arms; ++a) {
    out[3 * a + 0] = raw[3 * a + 0] / pi;
    out[3 * a + 1] = raw[3 * a + 1] / pi;
    out[3 * a + 2] = raw[3 * a + 2];
  }
  if (spec.has_base) {
    out[spec.state_dim - 2] = raw[spec.state_dim - 2] / 2.5;
    out[spec.state_dim - 1] = raw[spec.state_dim - 1] / 2.5;
  }
  return out;
}

}  // namespace flowact
