#include "brims/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace brims {

namespace {

double evaluate(const std::function<Tensor()>& loss) {
    NoGradScope no_grad;
    const Tensor value = loss();
    if (value.numel() != 1) throw GraphError("gradient check needs a scalar loss, got " + shape_str(value.shape()));
    return value.item();
}

}  // namespace

GradCheckResult finite_diff_check(const std::function<Tensor()>& loss, std::vector<Tensor> inputs, double eps,
                                  Stencil stencil) {
    if (!(eps > 0.0)) throw ValidationError("finite difference step must be positive");

    const double first = evaluate(loss);
    const double second = evaluate(loss);
    if (first != second) {
        throw DeterminismError("loss is not deterministic: " + std::to_string(first) + " vs " +
                               std::to_string(second));
    }

    std::vector<bool> previous_flags;
    for (auto& t : inputs) {
        previous_flags.push_back(t.requires_grad());
        t.set_requires_grad(true);
        t.clear_grad();
    }
    {
        Graph graph;
        GraphScope scope(graph);
        const Tensor value = loss();
        if (value.numel() != 1) throw GraphError("gradient check needs a scalar loss");
        if (value.requires_grad()) backward(value);
    }

    GradCheckResult result;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor& t = inputs[ti];
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        auto values = t.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double original = values[i];
            auto at = [&](double offset) {
                values[i] = original + offset;
                return evaluate(loss);
            };
            double numeric = 0.0;
            if (stencil == Stencil::Central2) {
                numeric = (at(eps) - at(-eps)) / (2.0 * eps);
            } else {
                const double near = at(eps) - at(-eps), far = at(2.0 * eps) - at(-2.0 * eps);
                numeric = (8.0 * near - far) / (12.0 * eps);
            }
            values[i] = original;
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
            const double err = std::abs(analytic[i] - numeric) / denom;
            ++result.entries;
            if (err > result.max_rel_err || result.entries == 1) {
                result.max_rel_err = err;
                result.worst_tensor = ti;
                result.worst_index = i;
                result.analytic = analytic[i];
                result.numeric = numeric;
            }
        }
        t.clear_grad();
        t.set_requires_grad(previous_flags[ti]);
    }
    return result;
}

GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps,
                                  Stencil stencil) {
    return finite_diff_check([&f, x]() { return f(x); }, {x}, eps, stencil);
}

}  // namespace brims
