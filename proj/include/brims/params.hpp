#pragma once

#include <random>
#include <string>
#include <vector>

#include "brims/tensor.hpp"

namespace brims {

using Rng = std::mt19937_64;

/// Trainable leaf with entries drawn uniformly from [-bound, bound].
Tensor uniform_param(Shape shape, double bound, Rng& rng);
Tensor zero_param(Shape shape);

struct NamedParameter {
    std::string name;
    Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

std::size_t count_scalars(const ParameterList& params);

/// Fully connected map y = x W + b over the last axis.
struct Affine {
    Tensor weight;  // [d_in x d_out]
    Tensor bias;    // [d_out]

    static Affine init(std::size_t d_in, std::size_t d_out, Rng& rng);
    static Affine zeros(std::size_t d_in, std::size_t d_out);

    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }
    Tensor operator()(const Tensor& x) const;
    void collect(const std::string& prefix, ParameterList& out) const;
};

/// A bank of independent affine maps, one per module: module j reads only
/// weight[j] and bias[j].
struct GroupAffine {
    Tensor weight;  // [groups x d_in x d_out]
    Tensor bias;    // [groups x d_out], may be undefined

    static GroupAffine init(std::size_t groups, std::size_t d_in, std::size_t d_out, Rng& rng, bool with_bias = true);
    static GroupAffine zeros(std::size_t groups, std::size_t d_in, std::size_t d_out, bool with_bias = true);

    std::size_t groups() const { return weight.dim(0); }
    std::size_t in_features() const { return weight.dim(1); }
    std::size_t out_features() const { return weight.dim(2); }
    /// x: [batch x groups x d_in] -> [batch x groups x d_out]
    Tensor operator()(const Tensor& x) const;
    void collect(const std::string& prefix, ParameterList& out) const;
};

}  // namespace brims
