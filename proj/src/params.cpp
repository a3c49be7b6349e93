#include "brims/params.hpp"

#include <cmath>

#include "brims/ops.hpp"

namespace brims {

Tensor uniform_param(Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = dist(rng);
    return Tensor::from(std::move(shape), std::move(values), true);
}

Tensor zero_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

std::size_t count_scalars(const ParameterList& params) {
    std::size_t total = 0;
    for (const auto& p : params) total += p.tensor.numel();
    return total;
}

Affine Affine::init(std::size_t d_in, std::size_t d_out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    Affine a;
    a.weight = uniform_param({d_in, d_out}, bound, rng);
    a.bias = uniform_param({d_out}, bound, rng);
    return a;
}

Affine Affine::zeros(std::size_t d_in, std::size_t d_out) { return {zero_param({d_in, d_out}), zero_param({d_out})}; }

Tensor Affine::operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }

void Affine::collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

GroupAffine GroupAffine::init(std::size_t groups, std::size_t d_in, std::size_t d_out, Rng& rng, bool with_bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    GroupAffine g;
    g.weight = uniform_param({groups, d_in, d_out}, bound, rng);
    if (with_bias) g.bias = uniform_param({groups, d_out}, bound, rng);
    return g;
}

GroupAffine GroupAffine::zeros(std::size_t groups, std::size_t d_in, std::size_t d_out, bool with_bias) {
    GroupAffine g;
    g.weight = zero_param({groups, d_in, d_out});
    if (with_bias) g.bias = zero_param({groups, d_out});
    return g;
}

Tensor GroupAffine::operator()(const Tensor& x) const { return ops::group_linear(x, weight, bias); }

void GroupAffine::collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

}  // namespace brims
