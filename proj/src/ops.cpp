#include "brims/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>
#include <string>

#include <Eigen/Dense>

#include "tensor_impl.hpp"

namespace brims::ops {

using detail::grad_sink;
using detail::make_result;
using detail::TensorImpl;

namespace {

// Row-major kernels with explicit leading dimensions. All accumulate into c.

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Stride = Eigen::OuterStride<>;
using ConstView = Eigen::Map<const RowMajor, 0, Stride>;
using View = Eigen::Map<RowMajor, 0, Stride>;

// Below this many multiply-adds, plain loops beat Eigen's dispatch.
constexpr std::size_t kSmallGemm = 2048;

// c[r x n] += a[r x k] . b[k x n]
void gemm_nn(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
             std::size_t r, std::size_t k, std::size_t n) {
    if (r * k * n < kSmallGemm) {
        for (std::size_t i = 0; i < r; ++i) {
            double* ci = c + i * ldc;
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = a[i * lda + p];
                const double* bp = b + p * ldb;
                for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
            }
        }
        return;
    }
    const auto R = static_cast<Eigen::Index>(r), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    View(c, R, N, Stride(static_cast<Eigen::Index>(ldc))).noalias() +=
        ConstView(a, R, K, Stride(static_cast<Eigen::Index>(lda))) *
        ConstView(b, K, N, Stride(static_cast<Eigen::Index>(ldb)));
}

// c[r x n] += a[r x k] . b[n x k]^T
void gemm_nt(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
             std::size_t r, std::size_t k, std::size_t n) {
    if (r * k * n < kSmallGemm) {
        for (std::size_t i = 0; i < r; ++i) {
            const double* ai = a + i * lda;
            for (std::size_t j = 0; j < n; ++j) {
                const double* bj = b + j * ldb;
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
                c[i * ldc + j] += acc;
            }
        }
        return;
    }
    const auto R = static_cast<Eigen::Index>(r), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    View(c, R, N, Stride(static_cast<Eigen::Index>(ldc))).noalias() +=
        ConstView(a, R, K, Stride(static_cast<Eigen::Index>(lda))) *
        ConstView(b, N, K, Stride(static_cast<Eigen::Index>(ldb))).transpose();
}

// c[k x n] += a[r x k]^T . b[r x n]
void gemm_tn(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
             std::size_t r, std::size_t k, std::size_t n) {
    if (r * k * n < kSmallGemm) {
        for (std::size_t i = 0; i < r; ++i) {
            const double* ai = a + i * lda;
            const double* bi = b + i * ldb;
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = ai[p];
                double* cp = c + p * ldc;
                for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
            }
        }
        return;
    }
    const auto R = static_cast<Eigen::Index>(r), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    View(c, K, N, Stride(static_cast<Eigen::Index>(ldc))).noalias() +=
        ConstView(a, R, K, Stride(static_cast<Eigen::Index>(lda))).transpose() *
        ConstView(b, R, N, Stride(static_cast<Eigen::Index>(ldb)));
}

[[noreturn]] void fail(const std::string& message) { throw DimensionError(message); }

std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
    std::size_t n = 1;
    for (std::size_t i = begin; i < end; ++i) n *= s[i];
    return n;
}

enum class Broadcast { Same, ScalarA, ScalarB };

Broadcast binary_layout(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return Broadcast::Same;
    if (b.numel() == 1) return Broadcast::ScalarB;
    if (a.numel() == 1) return Broadcast::ScalarA;
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
}

// Accumulates a full-size gradient into an operand that may be a broadcast scalar.
void accumulate(std::vector<double>& sink, const std::vector<double>& g, bool scalar_operand) {
    if (scalar_operand) {
        sink[0] += std::accumulate(g.begin(), g.end(), 0.0);
    } else {
        for (std::size_t i = 0; i < g.size(); ++i) sink[i] += g[i];
    }
}

template <typename Fwd, typename Bwd>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Bwd dfdx) {
    const auto in = a.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
    return make_result(op, a.shape(), std::move(out), {a}, [a, dfdx](const TensorImpl& o) {
        auto* ga = grad_sink(a);
        if (!ga) return;
        const auto x = a.data();
        for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += o.grad[i] * dfdx(x[i], o.data[i]);
    });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (!(a.rank() == 2 && b.rank() == 2)) {
        fail("matmul expects matrices, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t r = a.dim(0), s = a.dim(1), c = b.dim(1);
    if (!(b.dim(0) == s)) fail("matmul inner extent mismatch: " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
    std::vector<double> out(r * c, 0.0);
    gemm_nn(a.data().data(), s, b.data().data(), c, out.data(), c, r, s, c);
    return make_result("matmul", {r, c}, std::move(out), {a, b}, [a, b, r, s, c](const TensorImpl& o) {
        if (auto* ga = grad_sink(a)) gemm_nt(o.grad.data(), c, b.data().data(), c, ga->data(), s, r, c, s);
        if (auto* gb = grad_sink(b)) gemm_tn(a.data().data(), s, o.grad.data(), c, gb->data(), c, r, s, c);
    });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (!(a.rank() == 3 && b.rank() == 3)) {
        fail("bmm expects rank-3 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t g = a.dim(0), r = a.dim(1), s = a.dim(2), c = b.dim(2);
    if (!(b.dim(0) == g && b.dim(1) == s)) {
        fail("bmm extent mismatch: " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
    }
    std::vector<double> out(g * r * c, 0.0);
    for (std::size_t i = 0; i < g; ++i) {
        gemm_nn(a.data().data() + i * r * s, s, b.data().data() + i * s * c, c, out.data() + i * r * c, c, r, s, c);
    }
    return make_result("bmm", {g, r, c}, std::move(out), {a, b}, [a, b, g, r, s, c](const TensorImpl& o) {
        auto* ga = grad_sink(a);
        auto* gb = grad_sink(b);
        for (std::size_t i = 0; i < g; ++i) {
            const double* go = o.grad.data() + i * r * c;
            if (ga) gemm_nt(go, c, b.data().data() + i * s * c, c, ga->data() + i * r * s, s, r, c, s);
            if (gb) gemm_tn(a.data().data() + i * r * s, s, go, c, gb->data() + i * s * c, c, r, s, c);
        }
    });
}

Tensor transpose(const Tensor& a) {
    if (!(a.rank() >= 2)) fail("transpose needs rank >= 2, got " + shape_str(a.shape()));
    std::vector<std::size_t> axes(a.rank());
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
    return permute(a, axes);
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    const auto& in_shape = a.shape();
    const std::size_t rank = in_shape.size();
    if (!(axes.size() == rank)) fail("permute axis count mismatch for " + shape_str(in_shape));
    std::vector<bool> seen(rank, false);
    for (auto ax : axes) {
        if (!(ax < rank && !seen[ax])) fail("permute axes are not a permutation");
        seen[ax] = true;
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[axes[i]];

    std::vector<std::size_t> in_strides(rank, 1);
    for (std::size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    // Stride in the input for each output axis.
    std::vector<std::size_t> src_strides(rank);
    for (std::size_t i = 0; i < rank; ++i) src_strides[i] = in_strides[axes[i]];

    const std::size_t n = a.numel();
    std::vector<std::size_t> index_map(n);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t src = 0;
    for (std::size_t dst = 0; dst < n; ++dst) {
        index_map[dst] = src;
        for (std::size_t ax = rank; ax-- > 0;) {
            ++counter[ax];
            src += src_strides[ax];
            if (counter[ax] < out_shape[ax]) break;
            src -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    const auto in = a.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = in[index_map[i]];
    return make_result("permute", std::move(out_shape), std::move(out), {a},
                       [a, map = std::move(index_map)](const TensorImpl& o) {
                           auto* ga = grad_sink(a);
                           if (!ga) return;
                           for (std::size_t i = 0; i < map.size(); ++i) (*ga)[map[i]] += o.grad[i];
                       });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (!(weight.rank() == 2)) fail("linear weight must be a matrix, got " + shape_str(weight.shape()));
    const std::size_t din = weight.dim(0), dout = weight.dim(1);
    if (!(x.rank() >= 1 && x.shape().back() == din)) {
        fail("linear input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
    }
    if (bias.defined()) {
        if (!(bias.numel() == dout)) fail("linear bias " + shape_str(bias.shape()) + " does not match output width");
    }
    const std::size_t rows = x.numel() / din;
    std::vector<double> out(rows * dout, 0.0);
    if (bias.defined()) {
        const auto bv = bias.data();
        for (std::size_t i = 0; i < rows; ++i) std::copy(bv.begin(), bv.end(), out.begin() + i * dout);
    }
    gemm_nn(x.data().data(), din, weight.data().data(), dout, out.data(), dout, rows, din, dout);
    Shape shape = x.shape();
    shape.back() = dout;
    std::vector<Tensor> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result("linear", std::move(shape), std::move(out), inputs,
                       [x, weight, bias, rows, din, dout](const TensorImpl& o) {
                           if (auto* gx = grad_sink(x)) {
                               gemm_nt(o.grad.data(), dout, weight.data().data(), dout, gx->data(), din, rows, dout,
                                       din);
                           }
                           if (auto* gw = grad_sink(weight)) {
                               gemm_tn(x.data().data(), din, o.grad.data(), dout, gw->data(), dout, rows, din, dout);
                           }
                           if (bias.defined()) {
                               if (auto* gb = grad_sink(bias)) {
                                   for (std::size_t i = 0; i < rows; ++i) {
                                       for (std::size_t j = 0; j < dout; ++j) (*gb)[j] += o.grad[i * dout + j];
                                   }
                               }
                           }
                       });
}

Tensor group_linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (!(x.rank() == 3)) fail("group_linear input must be [b x n x d], got " + shape_str(x.shape()));
    if (!(weight.rank() == 3)) fail("group_linear weight must be [n x d_in x d_out], got " + shape_str(weight.shape()));
    const std::size_t batch = x.dim(0), groups = x.dim(1), din = x.dim(2);
    const std::size_t dout = weight.dim(2);
    if (!(weight.dim(0) == groups && weight.dim(1) == din)) {
        fail("group_linear input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
    }
    if (bias.defined()) {
        if (!(bias.numel() == groups * dout)) fail("group_linear bias " + shape_str(bias.shape()) + " mismatch");
    }
    std::vector<double> out(batch * groups * dout, 0.0);
    const double* xd = x.data().data();
    const double* wd = weight.data().data();
    for (std::size_t j = 0; j < groups; ++j) {
        if (bias.defined()) {
            const double* bj = bias.data().data() + j * dout;
            for (std::size_t b = 0; b < batch; ++b) std::copy(bj, bj + dout, out.data() + (b * groups + j) * dout);
        }
        gemm_nn(xd + j * din, groups * din, wd + j * din * dout, dout, out.data() + j * dout, groups * dout, batch, din,
                dout);
    }
    std::vector<Tensor> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result(
        "group_linear", {batch, groups, dout}, std::move(out), inputs,
        [x, weight, bias, batch, groups, din, dout](const TensorImpl& o) {
            auto* gx = grad_sink(x);
            auto* gw = grad_sink(weight);
            std::vector<double>* gb = bias.defined() ? grad_sink(bias) : nullptr;
            for (std::size_t j = 0; j < groups; ++j) {
                const double* go = o.grad.data() + j * dout;
                if (gx) {
                    gemm_nt(go, groups * dout, weight.data().data() + j * din * dout, dout, gx->data() + j * din,
                            groups * din, batch, dout, din);
                }
                if (gw) {
                    gemm_tn(x.data().data() + j * din, groups * din, go, groups * dout, gw->data() + j * din * dout,
                            dout, batch, din, dout);
                }
                if (gb) {
                    for (std::size_t b = 0; b < batch; ++b) {
                        for (std::size_t k = 0; k < dout; ++k) (*gb)[j * dout + k] += go[b * groups * dout + k];
                    }
                }
            }
        });
}

Tensor add(const Tensor& a, const Tensor& b) {
    const auto layout = binary_layout("add", a, b);
    const auto av = a.data(), bv = b.data();
    const std::size_t n = std::max(av.size(), bv.size());
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = av[layout == Broadcast::ScalarA ? 0 : i] + bv[layout == Broadcast::ScalarB ? 0 : i];
    }
    Shape shape = layout == Broadcast::ScalarA ? b.shape() : a.shape();
    return make_result("add", std::move(shape), std::move(out), {a, b}, [a, b, layout](const TensorImpl& o) {
        if (auto* ga = grad_sink(a)) accumulate(*ga, o.grad, layout == Broadcast::ScalarA);
        if (auto* gb = grad_sink(b)) accumulate(*gb, o.grad, layout == Broadcast::ScalarB);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    const auto layout = binary_layout("sub", a, b);
    const auto av = a.data(), bv = b.data();
    const std::size_t n = std::max(av.size(), bv.size());
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = av[layout == Broadcast::ScalarA ? 0 : i] - bv[layout == Broadcast::ScalarB ? 0 : i];
    }
    Shape shape = layout == Broadcast::ScalarA ? b.shape() : a.shape();
    return make_result("sub", std::move(shape), std::move(out), {a, b}, [a, b, layout](const TensorImpl& o) {
        if (auto* ga = grad_sink(a)) accumulate(*ga, o.grad, layout == Broadcast::ScalarA);
        if (auto* gb = grad_sink(b)) {
            std::vector<double> neg(o.grad.size());
            for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -o.grad[i];
            accumulate(*gb, neg, layout == Broadcast::ScalarB);
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const auto layout = binary_layout("mul", a, b);
    const auto av = a.data(), bv = b.data();
    const std::size_t n = std::max(av.size(), bv.size());
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = av[layout == Broadcast::ScalarA ? 0 : i] * bv[layout == Broadcast::ScalarB ? 0 : i];
    }
    Shape shape = layout == Broadcast::ScalarA ? b.shape() : a.shape();
    return make_result("mul", std::move(shape), std::move(out), {a, b}, [a, b, layout, n](const TensorImpl& o) {
        const auto av = a.data(), bv = b.data();
        if (auto* ga = grad_sink(a)) {
            std::vector<double> g(n);
            for (std::size_t i = 0; i < n; ++i) g[i] = o.grad[i] * bv[layout == Broadcast::ScalarB ? 0 : i];
            accumulate(*ga, g, layout == Broadcast::ScalarA);
        }
        if (auto* gb = grad_sink(b)) {
            std::vector<double> g(n);
            for (std::size_t i = 0; i < n; ++i) g[i] = o.grad[i] * av[layout == Broadcast::ScalarA ? 0 : i];
            accumulate(*gb, g, layout == Broadcast::ScalarB);
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    return unary("scale", a, [factor](double x) { return x * factor; },
                 [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
    return unary("add_scalar", a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

namespace {

// exp(-|x|) never overflows, so both branches stay finite.
void sigmoid_into(const double* x, double* y, std::size_t count) {
    const auto n = static_cast<Eigen::Index>(count);
    const Eigen::Map<const Eigen::ArrayXd> in(x, n);
    const Eigen::ArrayXd e = (-in.abs()).exp();
    Eigen::Map<Eigen::ArrayXd>(y, n) = (in >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e));
}

void tanh_into(const double* x, double* y, std::size_t count) {
    const auto n = static_cast<Eigen::Index>(count);
    const Eigen::Map<const Eigen::ArrayXd> in(x, n);
    const Eigen::ArrayXd e = (-2.0 * in.abs()).exp();
    const Eigen::ArrayXd t = (1.0 - e) / (1.0 + e);
    Eigen::Map<Eigen::ArrayXd>(y, n) = (in >= 0.0).select(t, -t);
}

}  // namespace

Tensor sigmoid(const Tensor& a) {
    const auto in = a.data();
    std::vector<double> out(in.size());
    sigmoid_into(in.data(), out.data(), in.size());
    return make_result("sigmoid", a.shape(), std::move(out), {a}, [a](const TensorImpl& o) {
        auto* ga = grad_sink(a);
        if (!ga) return;
        for (std::size_t i = 0; i < o.data.size(); ++i) (*ga)[i] += o.grad[i] * o.data[i] * (1.0 - o.data[i]);
    });
}

Tensor tanh(const Tensor& a) {
    const auto in = a.data();
    std::vector<double> out(in.size());
    tanh_into(in.data(), out.data(), in.size());
    return make_result("tanh", a.shape(), std::move(out), {a}, [a](const TensorImpl& o) {
        auto* ga = grad_sink(a);
        if (!ga) return;
        for (std::size_t i = 0; i < o.data.size(); ++i) (*ga)[i] += o.grad[i] * (1.0 - o.data[i] * o.data[i]);
    });
}

Tensor lstm_pointwise(const Tensor& pre, const Tensor& c_prev) {
    if (!(pre.rank() >= 1 && c_prev.rank() == pre.rank())) {
        fail("lstm_pointwise: ranks of " + shape_str(pre.shape()) + " and " + shape_str(c_prev.shape()));
    }
    const std::size_t d = c_prev.shape().back();
    Shape expect = c_prev.shape();
    expect.back() = 4 * d;
    if (!(pre.shape() == expect)) {
        fail("lstm_pointwise: pre-activations " + shape_str(pre.shape()) + " do not match cell " +
             shape_str(c_prev.shape()));
    }
    const std::size_t rows = c_prev.numel() / std::max<std::size_t>(d, 1);
    const auto p = pre.data();
    const auto cp = c_prev.data();
    // act holds i, f, g, o per row followed by tanh(c) in a second block.
    auto act = std::make_shared<std::vector<double>>(p.size() + cp.size());
    sigmoid_into(p.data(), act->data(), p.size());
    for (std::size_t r = 0; r < rows; ++r) tanh_into(p.data() + r * 4 * d + 2 * d, act->data() + r * 4 * d + 2 * d, d);
    Shape out_shape = c_prev.shape();
    out_shape.back() = 2 * d;
    std::vector<double> out(2 * cp.size());
    std::vector<double> cell(cp.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* g = act->data() + r * 4 * d;
        for (std::size_t j = 0; j < d; ++j) cell[r * d + j] = g[d + j] * cp[r * d + j] + g[j] * g[2 * d + j];
    }
    double* tc = act->data() + p.size();
    tanh_into(cell.data(), tc, cell.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* g = act->data() + r * 4 * d;
        for (std::size_t j = 0; j < d; ++j) {
            out[r * 2 * d + j] = g[3 * d + j] * tc[r * d + j];
            out[r * 2 * d + d + j] = cell[r * d + j];
        }
    }
    return make_result("lstm_pointwise", out_shape, std::move(out), {pre, c_prev},
                       [pre, c_prev, act, rows, d](const TensorImpl& o) {
        auto* gp = grad_sink(pre);
        auto* gc = grad_sink(c_prev);
        if (!gp && !gc) return;
        const auto cp = c_prev.data();
        const double* tc = act->data() + rows * 4 * d;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* g = act->data() + r * 4 * d;
            const double* go = o.grad.data() + r * 2 * d;
            for (std::size_t j = 0; j < d; ++j) {
                const double i = g[j], f = g[d + j], z = g[2 * d + j], u = g[3 * d + j];
                const double t = tc[r * d + j];
                const double dc = go[d + j] + go[j] * u * (1.0 - t * t);
                if (gp) {
                    double* gr = gp->data() + r * 4 * d;
                    gr[j] += dc * z * i * (1.0 - i);
                    gr[d + j] += dc * cp[r * d + j] * f * (1.0 - f);
                    gr[2 * d + j] += dc * i * (1.0 - z * z);
                    gr[3 * d + j] += go[j] * t * u * (1.0 - u);
                }
                if (gc) (*gc)[r * d + j] += dc * f;
            }
        }
    });
}

Tensor relu(const Tensor& a) {
    return unary("relu", a, [](double x) { return x > 0 ? x : 0.0; },
                 [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor dropout(const Tensor& a, double p, std::uint64_t seed, bool training) {
    if (!(p >= 0.0 && p < 1.0)) throw ValidationError("dropout rate must lie in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) return a;
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution keep(1.0 - p);
    const double survivor = 1.0 / (1.0 - p);
    std::vector<double> factors(a.numel());
    for (auto& f : factors) f = keep(rng) ? survivor : 0.0;
    const auto in = a.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * factors[i];
    return make_result("dropout", a.shape(), std::move(out), {a},
                       [a, factors = std::move(factors)](const TensorImpl& o) {
                           auto* ga = grad_sink(a);
                           if (!ga) return;
                           for (std::size_t i = 0; i < factors.size(); ++i) (*ga)[i] += o.grad[i] * factors[i];
                       });
}

Tensor where(std::span<const std::uint8_t> mask, const Tensor& a, const Tensor& b) {
    if (!(a.shape() == b.shape())) {
        fail("where operands differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    if (!(!mask.empty() && a.numel() % mask.size() == 0)) {
        fail("where mask of length " + std::to_string(mask.size()) + " does not tile " + shape_str(a.shape()));
    }
    const std::size_t block = a.numel() / mask.size();
    const auto av = a.data(), bv = b.data();
    std::vector<double> out(av.size());
    for (std::size_t m = 0; m < mask.size(); ++m) {
        const auto& src = mask[m] ? av : bv;
        std::copy(src.begin() + m * block, src.begin() + (m + 1) * block, out.begin() + m * block);
    }
    std::vector<std::uint8_t> flags(mask.begin(), mask.end());
    return make_result("where", a.shape(), std::move(out), {a, b},
                       [a, b, block, flags = std::move(flags)](const TensorImpl& o) {
                           auto* ga = grad_sink(a);
                           auto* gb = grad_sink(b);
                           for (std::size_t m = 0; m < flags.size(); ++m) {
                               auto* sink = flags[m] ? ga : gb;
                               if (!sink) continue;
                               for (std::size_t i = m * block; i < (m + 1) * block; ++i) (*sink)[i] += o.grad[i];
                           }
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (!(shape_numel(shape) == a.numel())) fail("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result("reshape", std::move(shape), std::move(out), {a}, [a](const TensorImpl& o) {
        auto* ga = grad_sink(a);
        if (!ga) return;
        for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i];
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (!(!parts.empty())) fail("concat of zero parts");
    const Shape& first = parts.front().shape();
    if (!(axis < first.size())) fail("concat axis out of range for " + shape_str(first));
    std::size_t total = 0;
    std::vector<std::size_t> extents;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
        if (!(ok)) fail("concat extent mismatch: " + shape_str(first) + " vs " + shape_str(s));
        extents.push_back(s[axis]);
        total += s[axis];
    }
    const std::size_t outer = prod(first, 0, axis);
    const std::size_t inner = prod(first, axis + 1, first.size());
    std::vector<double> out(outer * total * inner);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto src = parts[k].data();
        const std::size_t chunk = extents[k] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy(src.begin() + o * chunk, src.begin() + (o + 1) * chunk,
                      out.begin() + o * total * inner + offset * inner);
        }
        offset += extents[k];
    }
    Shape shape = first;
    shape[axis] = total;
    return make_result("concat", std::move(shape), std::move(out), parts,
                       [parts, extents, outer, inner, total](const TensorImpl& o) {
                           std::size_t offset = 0;
                           for (std::size_t k = 0; k < parts.size(); ++k) {
                               const std::size_t chunk = extents[k] * inner;
                               if (auto* g = grad_sink(parts[k])) {
                                   for (std::size_t r = 0; r < outer; ++r) {
                                       const double* src = o.grad.data() + r * total * inner + offset * inner;
                                       double* dst = g->data() + r * chunk;
                                       for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                                   }
                               }
                               offset += extents[k];
                           }
                       });
}

Tensor concat_rows(const std::vector<Tensor>& parts) { return concat(parts, 0); }

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = a.shape();
    if (!(axis < s.size())) fail("slice axis out of range for " + shape_str(s));
    if (!(begin < end && end <= s[axis])) fail("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                                               ") out of range for " + shape_str(s));
    const std::size_t outer = prod(s, 0, axis);
    const std::size_t inner = prod(s, axis + 1, s.size());
    const std::size_t width = end - begin;
    const std::size_t full = s[axis];
    const auto src = a.data();
    std::vector<double> out(outer * width * inner);
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy(src.begin() + (o * full + begin) * inner, src.begin() + (o * full + end) * inner,
                  out.begin() + o * width * inner);
    }
    Shape shape = s;
    shape[axis] = width;
    return make_result("slice", std::move(shape), std::move(out), {a},
                       [a, outer, inner, width, full, begin](const TensorImpl& o) {
                           auto* ga = grad_sink(a);
                           if (!ga) return;
                           for (std::size_t r = 0; r < outer; ++r) {
                               const double* src = o.grad.data() + r * width * inner;
                               double* dst = ga->data() + (r * full + begin) * inner;
                               for (std::size_t i = 0; i < width * inner; ++i) dst[i] += src[i];
                           }
                       });
}

std::vector<Tensor> split(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& sizes) {
    if (!(axis < a.rank())) fail("split axis out of range for " + shape_str(a.shape()));
    const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
    if (!(total == a.dim(axis))) fail("split sizes do not cover axis of " + shape_str(a.shape()));
    std::vector<Tensor> parts;
    std::size_t offset = 0;
    for (auto size : sizes) {
        parts.push_back(slice(a, axis, offset, offset + size));
        offset += size;
    }
    return parts;
}

Tensor broadcast_leading(const Tensor& a, std::size_t count) {
    if (!(count > 0)) fail("broadcast count must be positive");
    const auto src = a.data();
    std::vector<double> out(count * src.size());
    for (std::size_t i = 0; i < count; ++i) std::copy(src.begin(), src.end(), out.begin() + i * src.size());
    Shape shape{count};
    shape.insert(shape.end(), a.shape().begin(), a.shape().end());
    return make_result("broadcast", std::move(shape), std::move(out), {a}, [a, count](const TensorImpl& o) {
        auto* ga = grad_sink(a);
        if (!ga) return;
        const std::size_t n = ga->size();
        for (std::size_t i = 0; i < count; ++i) {
            for (std::size_t j = 0; j < n; ++j) (*ga)[j] += o.grad[i * n + j];
        }
    });
}

Tensor sum(const Tensor& a) {
    const auto v = a.data();
    const double total = std::accumulate(v.begin(), v.end(), 0.0);
    return make_result("sum", {1}, {total}, {a}, [a](const TensorImpl& o) {
        auto* ga = grad_sink(a);
        if (!ga) return;
        for (auto& g : *ga) g += o.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    const auto v = a.data();
    const double n = static_cast<double>(v.size());
    const double total = std::accumulate(v.begin(), v.end(), 0.0);
    return make_result("mean", {1}, {total / n}, {a}, [a, n](const TensorImpl& o) {
        auto* ga = grad_sink(a);
        if (!ga) return;
        for (auto& g : *ga) g += o.grad[0] / n;
    });
}

Tensor softmax(const Tensor& a) {
    if (!(a.rank() >= 1)) fail("softmax of a rank-0 tensor");
    const std::size_t cols = a.shape().back();
    const std::size_t rows = a.numel() / cols;
    const auto in = a.data();
    std::vector<double> out(in.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = in.data() + r * cols;
        double* y = out.data() + r * cols;
        const double peak = *std::max_element(x, x + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - peak));
        for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
    }
    return make_result("softmax", a.shape(), std::move(out), {a}, [a, rows, cols](const TensorImpl& o) {
        auto* ga = grad_sink(a);
        if (!ga) return;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = o.data.data() + r * cols;
            const double* gy = o.grad.data() + r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
            for (std::size_t c = 0; c < cols; ++c) (*ga)[r * cols + c] += y[c] * (gy[c] - dot);
        }
    });
}

Tensor softmax_rows(const Tensor& m) {
    if (!(m.rank() == 2)) fail("softmax_rows expects a matrix, got " + shape_str(m.shape()));
    return softmax(m);
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
    if (!(logits.rank() == 2)) fail("cross_entropy expects [b x c] logits, got " + shape_str(logits.shape()));
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (!(labels.size() == batch)) fail("cross_entropy label count " + std::to_string(labels.size()) +
                                        " does not match batch " + std::to_string(batch));
    for (auto label : labels) {
        if (label >= classes) {
            throw ValidationError("label " + std::to_string(label) + " out of range for " + std::to_string(classes) +
                                  " classes");
        }
    }
    const auto x = logits.data();
    std::vector<double> probs(x.size());
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        const double* row = x.data() + b * classes;
        double* p = probs.data() + b * classes;
        const double peak = *std::max_element(row, row + classes);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += (p[c] = std::exp(row[c] - peak));
        for (std::size_t c = 0; c < classes; ++c) p[c] /= z;
        total += -(row[labels[b]] - peak - std::log(z));
    }
    std::vector<std::size_t> targets(labels.begin(), labels.end());
    return make_result("cross_entropy", {1}, {total / static_cast<double>(batch)}, {logits},
                       [logits, probs = std::move(probs), targets = std::move(targets), batch,
                        classes](const TensorImpl& o) {
                           auto* g = grad_sink(logits);
                           if (!g) return;
                           const double s = o.grad[0] / static_cast<double>(batch);
                           for (std::size_t b = 0; b < batch; ++b) {
                               for (std::size_t c = 0; c < classes; ++c) {
                                   const double onehot = c == targets[b] ? 1.0 : 0.0;
                                   (*g)[b * classes + c] += s * (probs[b * classes + c] - onehot);
                               }
                           }
                       });
}

Tensor mse(const Tensor& prediction, const Tensor& target) {
    if (!(prediction.numel() == target.numel())) {
        fail("mse shape mismatch: " + shape_str(prediction.shape()) + " vs " + shape_str(target.shape()));
    }
    const auto p = prediction.data(), t = target.data();
    const double n = static_cast<double>(p.size());
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] - t[i]) * (p[i] - t[i]);
    return make_result("mse", {1}, {total / n}, {prediction}, [prediction, target, n](const TensorImpl& o) {
        auto* g = grad_sink(prediction);
        if (!g) return;
        const auto p = prediction.data(), t = target.data();
        for (std::size_t i = 0; i < p.size(); ++i) (*g)[i] += o.grad[0] * 2.0 * (p[i] - t[i]) / n;
    });
}

}  // namespace brims::ops
