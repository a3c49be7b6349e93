#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "brims/tensor.hpp"

// Differentiable primitives. Every function allocates a fresh output, checks it
// for non-finite values, and records a backward closure when a Graph is active.
namespace brims::ops {

// ---- linear algebra -------------------------------------------------------

/// [r x s] . [s x c] -> [r x c]
Tensor matmul(const Tensor& a, const Tensor& b);

/// Batched product: [g x r x s] . [g x s x c] -> [g x r x c]
Tensor bmm(const Tensor& a, const Tensor& b);

/// Swaps the last two axes.
Tensor transpose(const Tensor& a);

/// General axis permutation; out.shape[i] = in.shape[axes[i]].
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);

/// Affine map over the last axis: [..., d_in] -> [..., d_out]. `bias` may be
/// undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Per-group affine map: x [b x n x d_in], weight [n x d_in x d_out],
/// bias [n x d_out] (optional) -> [b x n x d_out]. Group j only ever reads
/// weight[j] and bias[j].
Tensor group_linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// ---- elementwise ----------------------------------------------------------
// Binary ops accept equal shapes, or one operand with a single element.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
/// Fused LSTM update. `pre` holds gate pre-activations [..., 4d] in the order
/// input, forget, candidate, output; `c_prev` is [..., d]. Returns [..., 2d]
/// with the new hidden state in the first half and the new cell in the second.
Tensor lstm_pointwise(const Tensor& pre, const Tensor& c_prev);
Tensor relu(const Tensor& a);

/// Inverted dropout. Each entry is zeroed with probability p and survivors are
/// scaled by 1/(1-p); the mask is a pure function of `seed`. Identity when
/// `training` is false or p == 0.
Tensor dropout(const Tensor& a, double p, std::uint64_t seed, bool training);

/// out = mask ? a : b, copied bitwise. `mask` has one flag per contiguous block
/// of numel / mask.size() entries (e.g. one flag per module row).
Tensor where(std::span<const std::uint8_t> mask, const Tensor& a, const Tensor& b);

// ---- structure ------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Stacks along the leading axis.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
std::vector<Tensor> split(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& sizes);
/// Repeats `a` along a new leading axis: [...] -> [count x ...].
Tensor broadcast_leading(const Tensor& a, std::size_t count);

// ---- reductions and losses ------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Numerically stable softmax over the last axis.
Tensor softmax(const Tensor& a);
/// Softmax over the columns of a matrix.
Tensor softmax_rows(const Tensor& m);
/// Mean softmax cross-entropy of logits [b x c] against class indices.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);
/// Mean squared error; `target` is treated as a constant.
Tensor mse(const Tensor& prediction, const Tensor& target);

}  // namespace brims::ops
