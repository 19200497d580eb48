#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "accent/gradcheck.h"

namespace accent {

/// Names accepted by run_gradcheck_suite: numerics, model, adapters, losses.
const std::vector<std::string>& gradcheck_modules();

/// Runs every finite-difference check of one module on `instances` seeded
/// random problems (all dimensions <= 8). One result per check and instance,
/// named "<check>#<instance>".
std::vector<GradCheckResult> run_gradcheck_suite(const std::string& module,
                                                 std::size_t instances = 20,
                                                 std::uint64_t seed = 1);

}  // namespace accent
