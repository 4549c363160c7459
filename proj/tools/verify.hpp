#pragma once

#include <functional>
#include <string>
#include <vector>

namespace flowact {
namespace tools {

struct Check {
  std::string name;
  std::function<void()> run;  // throws std::exception on failure
};

// Fast invariant suite behind `flowact verify`.
const std::vector<Check>& verification_checks();

// Gradient oracle runs behind `flowact gradcheck`; returns (name, max
// relative error, tolerance) triples.
struct GradReport {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
};
std::vector<GradReport> gradient_reports();

}  // namespace tools
}  // namespace flowact
