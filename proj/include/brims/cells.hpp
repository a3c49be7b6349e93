#pragma once

#include <string>

#include "brims/params.hpp"
#include "brims/tensor.hpp"

namespace brims {

enum class CellKind { Gru, Lstm };

std::string to_string(CellKind kind);
CellKind parse_cell_kind(const std::string& text);

/// Gate parameters for a bank of `modules` independent recurrent cells.
///
/// GRU gate order is (reset, update, candidate); LSTM is (input, forget,
/// cell, output). Module j only reads slice j of each tensor.
struct CellParams {
    CellKind kind = CellKind::Gru;
    GroupAffine input;   // [modules x d_in x gates*d_h] with bias
    GroupAffine hidden;  // [modules x d_h x gates*d_h] without bias

    /// Weights uniform in +-1/sqrt(d_h); biases zero except LSTM forget gate = 1.
    static CellParams init(CellKind kind, std::size_t modules, std::size_t d_in, std::size_t d_h, Rng& rng);
    static CellParams zeros(CellKind kind, std::size_t modules, std::size_t d_in, std::size_t d_h);

    std::size_t modules() const { return input.groups(); }
    std::size_t d_in() const { return input.in_features(); }
    std::size_t d_h() const { return hidden.in_features(); }
    std::size_t gates() const { return kind == CellKind::Gru ? 3 : 4; }
    void collect(const std::string& prefix, ParameterList& out) const;
};

struct CellState {
    Tensor h;  // [b x modules x d_h]
    Tensor c;  // same shape; LSTM only
};

/// One recurrence for every module of the bank: x [b x modules x d_in].
CellState cell_step(const CellParams& params, const Tensor& x, const CellState& state);

}  // namespace brims
