#pragma once

#include <vector>

#include "hbfp/gradcheck.hpp"

namespace hbfp {

// Seeded gradient checks for every differentiable primitive in the library,
// plus layer-level composites (batch norm, the mask/correlation/transform
// chain). The full-model composite lives in model_composite_gradcheck.
std::vector<GradCheckCase> builtin_gradcheck_cases();

}  // namespace hbfp
