#pragma once

#include <string>
#include <vector>

#include "stnreid/gradcheck.hpp"

namespace stnreid {

struct BatteryCase {
  std::string name;
  int instance = 0;
  double rel_tol = 1e-3;
  GradCheckReport report;
};

// Finite-difference checks for every differentiable primitive plus the full
// localization net and the theta -> grid -> sample path, several random
// instances each. Instances are redrawn until they sit away from relu/pool/
// interpolation kinks, so failures indicate real backward bugs.
std::vector<BatteryCase> run_gradient_battery(int instances_per_case = 5, bool verbose = false);

bool battery_all_pass(const std::vector<BatteryCase>& cases);

}  // namespace stnreid
