#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "brims/config.hpp"
#include "brims/gradcheck.hpp"

namespace brims {

struct NamedCheck {
    std::string name;
    GradCheckResult result;
    double tolerance = 1e-5;

    bool passed() const { return result.max_rel_err <= tolerance; }
};

/// Five-point central-difference checks of every differentiable primitive,
/// attention and both cell kinds on random shapes; one entry per primitive
/// holding the worst trial.
std::vector<NamedCheck> primitive_gradchecks(std::uint64_t seed, std::size_t trials = 3, double eps = 1e-4);

/// Two-layer BRIMs with n = (3, 2), m = (2, 1) and 8 units per module.
BrimsConfig reference_gradcheck_config(CellKind kind);

/// Checks a `steps`-step unroll of the architecture in `cfg`. The loss is a
/// fixed weighting of the head output plus every layer's final hidden state.
/// "unroll.inputs" compares every entry of the raw input sequence; each
/// "unroll.param.<name>" compares the derivative along one random direction of
/// that parameter tensor.
std::vector<NamedCheck> unroll_gradchecks(const BrimsConfig& cfg, std::uint64_t seed, std::size_t steps = 3,
                                          std::size_t batch = 2, double eps = 1e-6);

}  // namespace brims
