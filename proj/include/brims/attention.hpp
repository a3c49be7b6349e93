#pragma once

#include <vector>

#include "brims/params.hpp"
#include "brims/tensor.hpp"

namespace brims {

/// Scores and attention-weighted values. `scores` rows lie on the simplex.
struct AttentionOutput {
    Tensor scores;  // [q x k] or [g x q x k]
    Tensor result;  // [q x d_v] or [g x q x d_v]
};

/// Scaled dot-product attention, softmax(Q K^T / sqrt(d)) V.
///
/// Accepts either matrices (Q [q x d], K [k x d], V [k x d_v]) or batches of
/// them with a shared leading extent.
AttentionOutput attend(const Tensor& queries, const Tensor& keys, const Tensor& values);

/// Attention with the feature axis split into `heads` equal slices.
/// Q [b x q x h*d], K [b x k x h*d], V [b x k x h*d_v] ->
/// scores [b x h x q x k], result [b x q x h*d_v] (heads concatenated).
AttentionOutput attend_heads(const Tensor& queries, const Tensor& keys, const Tensor& values, std::size_t heads);

/// Query maps (one per module) plus shared key/value maps for each source.
///
/// When `null_key`/`null_value` are defined, the first key/value row is the
/// image of the zero vector, which for an affine map is its bias; only that
/// bias is stored.
struct ProjectionSet {
    struct SourceMaps {
        Affine key;
        Affine value;
    };

    GroupAffine query;
    Tensor null_key;    // [d_att], optional
    Tensor null_value;  // [d_v], optional
    std::vector<SourceMaps> sources;

    static ProjectionSet init(std::size_t modules, std::size_t module_width, const std::vector<std::size_t>& source_widths,
                              std::size_t d_att, std::size_t d_v, bool null_row, Rng& rng);

    std::size_t modules() const { return query.groups(); }
    std::size_t d_att() const { return query.out_features(); }
    std::size_t d_v() const;
    bool has_null() const { return null_key.defined(); }
    void collect(const std::string& prefix, ParameterList& out) const;
};

struct Projection {
    Tensor queries;  // [b x n x d_att]
    Tensor keys;     // [b x rows x d_att]
    Tensor values;   // [b x rows x d_v]
};

/// Module k's query comes from its own map applied to module_states[:, k].
/// Each source is [b x d_src] (one row) or [b x r x d_src] (r rows through the
/// same map). Rows are ordered null, then sources in order.
Projection project(const ProjectionSet& ps, const Tensor& module_states, const std::vector<Tensor>& sources);

}  // namespace brims
