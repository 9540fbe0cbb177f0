#pragma once

// Finite-difference gradient checks covering every autodiff op kind, the GRU,
// the attention read-out and the policy-gradient / supervised / SIL losses.

#include <cstdint>
#include <string>
#include <vector>

#include "dtsil/params.hpp"

namespace dtsil {

struct NamedCheck {
  std::string name;
  ad::GradCheckReport report;
};

std::vector<NamedCheck> gradient_check_suite(double tolerance = 1e-4, std::uint64_t seed = 0);

}  // namespace dtsil
