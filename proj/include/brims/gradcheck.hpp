#pragma once

#include <functional>
#include <vector>

#include "brims/tensor.hpp"

namespace brims {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t worst_tensor = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t entries = 0;
};

/// Central difference stencils: (f(x+h) - f(x-h)) / 2h with O(h^2) truncation,
/// or the five-point form with O(h^4) truncation.
enum class Stencil { Central2, Central4 };

/// Compares reverse-mode gradients of a scalar loss against central differences
/// for every entry of every tensor in `inputs` (perturbed in place, restored
/// bitwise). The error of one entry is |a - n| / max(|a|, |n|, 1e-12).
///
/// `loss` must be deterministic; two evaluations at the unperturbed point that
/// disagree raise DeterminismError.
GradCheckResult finite_diff_check(const std::function<Tensor()>& loss, std::vector<Tensor> inputs, double eps,
                                  Stencil stencil = Stencil::Central2);

/// Single-input form: `f` maps x to a scalar.
GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps,
                                  Stencil stencil = Stencil::Central2);

}  // namespace brims
