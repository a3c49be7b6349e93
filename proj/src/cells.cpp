#include "brims/cells.hpp"

#include <cmath>

#include "brims/ops.hpp"

namespace brims {

std::string to_string(CellKind kind) { return kind == CellKind::Gru ? "gru" : "lstm"; }

CellKind parse_cell_kind(const std::string& text) {
    if (text == "gru") return CellKind::Gru;
    if (text == "lstm") return CellKind::Lstm;
    throw ValidationError("unknown cell kind '" + text + "' (expected gru or lstm)");
}

CellParams CellParams::init(CellKind kind, std::size_t modules, std::size_t d_in, std::size_t d_h, Rng& rng) {
    CellParams p;
    p.kind = kind;
    const std::size_t width = p.gates() * d_h;
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_h));
    p.input.weight = uniform_param({modules, d_in, width}, bound, rng);
    p.input.bias = zero_param({modules, width});
    p.hidden.weight = uniform_param({modules, d_h, width}, bound, rng);
    if (kind == CellKind::Lstm) {
        auto bias = p.input.bias.mutable_data();
        for (std::size_t m = 0; m < modules; ++m) {
            for (std::size_t i = 0; i < d_h; ++i) bias[m * width + d_h + i] = 1.0;
        }
    }
    return p;
}

CellParams CellParams::zeros(CellKind kind, std::size_t modules, std::size_t d_in, std::size_t d_h) {
    CellParams p;
    p.kind = kind;
    const std::size_t width = p.gates() * d_h;
    p.input = GroupAffine::zeros(modules, d_in, width, true);
    p.hidden = GroupAffine::zeros(modules, d_h, width, false);
    return p;
}

void CellParams::collect(const std::string& prefix, ParameterList& out) const {
    input.collect(prefix + ".input", out);
    hidden.collect(prefix + ".hidden", out);
}

CellState cell_step(const CellParams& params, const Tensor& x, const CellState& state) {
    const std::size_t dh = params.d_h();
    if (x.rank() != 3 || x.dim(1) != params.modules() || x.dim(2) != params.d_in()) {
        throw DimensionError("cell input " + shape_str(x.shape()) + " does not match " +
                             std::to_string(params.modules()) + " modules of input width " +
                             std::to_string(params.d_in()));
    }
    if (!state.h.defined() || state.h.shape() != Shape{x.dim(0), params.modules(), dh}) {
        throw DimensionError("cell hidden state has wrong shape");
    }
    const bool lstm = params.kind == CellKind::Lstm;
    if (lstm && (!state.c.defined() || state.c.shape() != state.h.shape())) {
        throw DimensionError("LSTM step needs a cell state matching the hidden state");
    }

    const Tensor from_input = params.input(x);
    const Tensor from_hidden = params.hidden(state.h);
    if (!lstm) {
        const Tensor gates = ops::sigmoid(ops::add(ops::slice(from_input, 2, 0, 2 * dh),
                                                   ops::slice(from_hidden, 2, 0, 2 * dh)));
        const Tensor reset = ops::slice(gates, 2, 0, dh);
        const Tensor update = ops::slice(gates, 2, dh, 2 * dh);
        const Tensor candidate = ops::tanh(ops::add(ops::slice(from_input, 2, 2 * dh, 3 * dh),
                                                    ops::mul(reset, ops::slice(from_hidden, 2, 2 * dh, 3 * dh))));
        // (1 - z) * n + z * h
        return {ops::add(candidate, ops::mul(update, ops::sub(state.h, candidate))), {}};
    }
    const Tensor hc = ops::lstm_pointwise(ops::add(from_input, from_hidden), state.c);
    return {ops::slice(hc, 2, 0, dh), ops::slice(hc, 2, dh, 2 * dh)};
}

}  // namespace brims
