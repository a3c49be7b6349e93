#include "brims/attention.hpp"

#include <cmath>

#include "brims/ops.hpp"

namespace brims {

AttentionOutput attend(const Tensor& queries, const Tensor& keys, const Tensor& values) {
    if (queries.rank() != keys.rank() || keys.rank() != values.rank() || (queries.rank() != 2 && queries.rank() != 3)) {
        throw DimensionError("attend expects matching rank-2 or rank-3 operands, got " + shape_str(queries.shape()) +
                             ", " + shape_str(keys.shape()) + ", " + shape_str(values.shape()));
    }
    if (queries.rank() == 2) {
        auto batched = attend(ops::reshape(queries, {1, queries.dim(0), queries.dim(1)}),
                              ops::reshape(keys, {1, keys.dim(0), keys.dim(1)}),
                              ops::reshape(values, {1, values.dim(0), values.dim(1)}));
        return {ops::reshape(batched.scores, {queries.dim(0), keys.dim(0)}),
                ops::reshape(batched.result, {queries.dim(0), values.dim(1)})};
    }
    const std::size_t width = queries.dim(2);
    if (keys.dim(2) != width) {
        throw DimensionError("query width " + std::to_string(width) + " differs from key width " +
                             std::to_string(keys.dim(2)));
    }
    if (keys.dim(1) != values.dim(1) || keys.dim(0) != queries.dim(0) || values.dim(0) != queries.dim(0)) {
        throw DimensionError("keys " + shape_str(keys.shape()) + " and values " + shape_str(values.shape()) +
                             " do not pair with queries " + shape_str(queries.shape()));
    }
    if (keys.dim(1) == 0) throw DimensionError("attend needs at least one key row");
    const Tensor logits = ops::scale(ops::bmm(queries, ops::transpose(keys)), 1.0 / std::sqrt(double(width)));
    Tensor scores = ops::softmax(logits);
    Tensor result = ops::bmm(scores, values);
    return {std::move(scores), std::move(result)};
}

AttentionOutput attend_heads(const Tensor& queries, const Tensor& keys, const Tensor& values, std::size_t heads) {
    if (queries.rank() != 3 || keys.rank() != 3 || values.rank() != 3) {
        throw DimensionError("attend_heads expects rank-3 operands");
    }
    if (heads == 0 || queries.dim(2) % heads != 0 || keys.dim(2) % heads != 0 || values.dim(2) % heads != 0) {
        throw DimensionError("feature widths are not divisible by head count " + std::to_string(heads));
    }
    const std::size_t batch = queries.dim(0), nq = queries.dim(1), nk = keys.dim(1);
    if (heads == 1) {
        auto out = attend(queries, keys, values);
        return {ops::reshape(out.scores, {batch, 1, nq, nk}), out.result};
    }
    auto split = [&](const Tensor& t) {
        const std::size_t rows = t.dim(1), width = t.dim(2) / heads;
        Tensor x = ops::reshape(t, {batch, rows, heads, width});
        x = ops::permute(x, {0, 2, 1, 3});
        return ops::reshape(x, {batch * heads, rows, width});
    };
    auto out = attend(split(queries), split(keys), split(values));
    const std::size_t dv = values.dim(2) / heads;
    Tensor result = ops::reshape(out.result, {batch, heads, nq, dv});
    result = ops::reshape(ops::permute(result, {0, 2, 1, 3}), {batch, nq, heads * dv});
    return {ops::reshape(out.scores, {batch, heads, nq, nk}), std::move(result)};
}

ProjectionSet ProjectionSet::init(std::size_t modules, std::size_t module_width,
                                  const std::vector<std::size_t>& source_widths, std::size_t d_att, std::size_t d_v,
                                  bool null_row, Rng& rng) {
    ProjectionSet ps;
    ps.query = GroupAffine::init(modules, module_width, d_att, rng);
    for (auto width : source_widths) ps.sources.push_back({Affine::init(width, d_att, rng), Affine::init(width, d_v, rng)});
    if (null_row) {
        // Bias of an affine map whose input is the zero vector; the map's
        // weights would never receive signal, so only the bias exists.
        const double bound = 1.0 / std::sqrt(static_cast<double>(module_width));
        ps.null_key = uniform_param({d_att}, bound, rng);
        ps.null_value = uniform_param({d_v}, bound, rng);
    }
    return ps;
}

std::size_t ProjectionSet::d_v() const {
    if (null_value.defined()) return null_value.numel();
    if (!sources.empty()) return sources.front().value.out_features();
    throw DimensionError("projection set has no value maps");
}

void ProjectionSet::collect(const std::string& prefix, ParameterList& out) const {
    query.collect(prefix + ".query", out);
    if (has_null()) {
        out.push_back({prefix + ".null_key", null_key});
        out.push_back({prefix + ".null_value", null_value});
    }
    for (std::size_t i = 0; i < sources.size(); ++i) {
        sources[i].key.collect(prefix + ".source" + std::to_string(i) + ".key", out);
        sources[i].value.collect(prefix + ".source" + std::to_string(i) + ".value", out);
    }
}

Projection project(const ProjectionSet& ps, const Tensor& module_states, const std::vector<Tensor>& sources) {
    if (module_states.rank() != 3) {
        throw DimensionError("module states must be [b x n x d], got " + shape_str(module_states.shape()));
    }
    if (module_states.dim(1) != ps.modules()) {
        throw DimensionError("got " + std::to_string(module_states.dim(1)) + " module states for " +
                             std::to_string(ps.modules()) + " query maps");
    }
    if (sources.size() != ps.sources.size()) {
        throw DimensionError("got " + std::to_string(sources.size()) + " sources for " +
                             std::to_string(ps.sources.size()) + " key/value maps");
    }
    const std::size_t batch = module_states.dim(0);
    Projection out;
    out.queries = ps.query(module_states);

    std::vector<Tensor> key_rows, value_rows;
    if (ps.has_null()) {
        key_rows.push_back(ops::reshape(ops::broadcast_leading(ps.null_key, batch), {batch, 1, ps.d_att()}));
        value_rows.push_back(ops::reshape(ops::broadcast_leading(ps.null_value, batch), {batch, 1, ps.d_v()}));
    }
    for (std::size_t i = 0; i < sources.size(); ++i) {
        const Tensor& src = sources[i];
        const auto& maps = ps.sources[i];
        if (src.dim(0) != batch || src.shape().back() != maps.key.in_features() || src.rank() < 2 || src.rank() > 3) {
            throw DimensionError("source " + std::to_string(i) + " of shape " + shape_str(src.shape()) +
                                 " does not match its key/value map input width " +
                                 std::to_string(maps.key.in_features()));
        }
        const std::size_t rows = src.rank() == 3 ? src.dim(1) : 1;
        key_rows.push_back(ops::reshape(maps.key(src), {batch, rows, maps.key.out_features()}));
        value_rows.push_back(ops::reshape(maps.value(src), {batch, rows, maps.value.out_features()}));
    }
    if (key_rows.empty()) throw DimensionError("attention needs at least one key row");
    out.keys = key_rows.size() == 1 ? key_rows.front() : ops::concat(key_rows, 1);
    out.values = value_rows.size() == 1 ? value_rows.front() : ops::concat(value_rows, 1);
    return out;
}

}  // namespace brims
