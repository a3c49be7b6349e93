#include <cmath>
#include <random>

#include "brims/cells.hpp"
#include "brims/gradcheck.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace brims;
using test::random_tensor;
using test::sigmoid;

namespace {

// Equation-by-equation recurrence for batch element b, module m.
struct ScalarCell {
    const CellParams& p;

    // Pre-activation of gate column j from x (with bias) or from h (no bias).
    double from_input(const Tensor& x, std::size_t b, std::size_t m, std::size_t j) const {
        const std::size_t din = p.d_in(), width = p.gates() * p.d_h(), n = p.modules();
        double acc = p.input.bias.data()[m * width + j];
        for (std::size_t i = 0; i < din; ++i)
            acc += x.data()[(b * n + m) * din + i] * p.input.weight.data()[(m * din + i) * width + j];
        return acc;
    }
    double from_hidden(const Tensor& h, std::size_t b, std::size_t m, std::size_t j) const {
        const std::size_t dh = p.d_h(), width = p.gates() * dh, n = p.modules();
        double acc = 0.0;
        for (std::size_t i = 0; i < dh; ++i)
            acc += h.data()[(b * n + m) * dh + i] * p.hidden.weight.data()[(m * dh + i) * width + j];
        return acc;
    }

    // Returns (h', c') for unit u.
    std::pair<double, double> unit(const Tensor& x, const CellState& s, std::size_t b, std::size_t m,
                                   std::size_t u) const {
        const std::size_t dh = p.d_h(), n = p.modules();
        const double h = s.h.data()[(b * n + m) * dh + u];
        if (p.kind == CellKind::Gru) {
            const double r = sigmoid(from_input(x, b, m, u) + from_hidden(s.h, b, m, u));
            const double z = sigmoid(from_input(x, b, m, dh + u) + from_hidden(s.h, b, m, dh + u));
            const double cand = std::tanh(from_input(x, b, m, 2 * dh + u) + r * from_hidden(s.h, b, m, 2 * dh + u));
            return {(1.0 - z) * cand + z * h, 0.0};
        }
        const double c = s.c.data()[(b * n + m) * dh + u];
        const double i = sigmoid(from_input(x, b, m, u) + from_hidden(s.h, b, m, u));
        const double f = sigmoid(from_input(x, b, m, dh + u) + from_hidden(s.h, b, m, dh + u));
        const double g = std::tanh(from_input(x, b, m, 2 * dh + u) + from_hidden(s.h, b, m, 2 * dh + u));
        const double o = sigmoid(from_input(x, b, m, 3 * dh + u) + from_hidden(s.h, b, m, 3 * dh + u));
        const double c_new = f * c + i * g;
        return {o * std::tanh(c_new), c_new};
    }
};

CellParams randomized(CellKind kind, std::size_t n, std::size_t din, std::size_t dh, std::uint64_t seed) {
    Rng rng(seed);
    CellParams p = CellParams::init(kind, n, din, dh, rng);
    // Non-trivial biases too.
    std::uniform_real_distribution<double> dist(-0.5, 0.5);
    for (double& v : p.input.bias.mutable_data()) v += dist(rng);
    return p;
}

CellState random_state(CellKind kind, std::size_t b, std::size_t n, std::size_t dh, std::mt19937_64& rng) {
    CellState s{random_tensor({b, n, dh}, rng), {}};
    if (kind == CellKind::Lstm) s.c = random_tensor({b, n, dh}, rng, -2, 2);
    return s;
}

}  // namespace

TEST_CASE("zero-parameter cells have the analytic fixed updates") {
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor({2, 3, 4}, rng);
    const Tensor h = random_tensor({2, 3, 5}, rng), c = random_tensor({2, 3, 5}, rng, -3, 3);

    const auto gru = cell_step(CellParams::zeros(CellKind::Gru, 3, 4, 5), x, {h, {}});
    for (std::size_t i = 0; i < h.numel(); ++i) CHECK(gru.h.data()[i] == 0.5 * h.data()[i]);

    const auto lstm = cell_step(CellParams::zeros(CellKind::Lstm, 3, 4, 5), x, {h, c});
    for (std::size_t i = 0; i < c.numel(); ++i) {
        CHECK(lstm.c.data()[i] == doctest::Approx(0.5 * c.data()[i]).epsilon(1e-15));
        CHECK(lstm.h.data()[i] == doctest::Approx(0.5 * std::tanh(0.5 * c.data()[i])).epsilon(1e-15));
    }
}

TEST_CASE("cell_step matches the scalar oracle on 20 random tiny configurations") {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<std::size_t> extent(1, 4);
    for (int trial = 0; trial < 20; ++trial) {
        const CellKind kind = trial % 2 ? CellKind::Lstm : CellKind::Gru;
        const std::size_t b = extent(rng), n = extent(rng), din = extent(rng), dh = extent(rng);
        const CellParams p = randomized(kind, n, din, dh, rng());
        const Tensor x = random_tensor({b, n, din}, rng, -2, 2);
        const CellState s = random_state(kind, b, n, dh, rng);
        const auto out = cell_step(p, x, s);
        const ScalarCell oracle{p};
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t m = 0; m < n; ++m)
                for (std::size_t u = 0; u < dh; ++u) {
                    const auto [h_ref, c_ref] = oracle.unit(x, s, bi, m, u);
                    const std::size_t at = (bi * n + m) * dh + u;
                    CHECK(std::abs(out.h.data()[at] - h_ref) <= 1e-12);
                    if (kind == CellKind::Lstm) CHECK(std::abs(out.c.data()[at] - c_ref) <= 1e-12);
                }
        CHECK(out.c.defined() == (kind == CellKind::Lstm));
    }
}

TEST_CASE("GRU keeps states inside (-1, 1)") {
    std::mt19937_64 rng(3);
    const CellParams p = randomized(CellKind::Gru, 3, 4, 6, 4);
    CellState s{random_tensor({5, 3, 6}, rng, -0.999, 0.999), {}};
    for (int t = 0; t < 50; ++t) {
        s = cell_step(p, random_tensor({5, 3, 4}, rng, -5, 5), s);
        for (double v : s.h.data()) {
            CHECK(v > -1.0);
            CHECK(v < 1.0);
        }
    }
}

TEST_CASE("cell_step passes the gradient check for both kinds") {
    std::mt19937_64 rng(5);
    for (CellKind kind : {CellKind::Gru, CellKind::Lstm}) {
        INFO(to_string(kind));
        CellParams p = randomized(kind, 2, 3, 4, 6);
        Tensor x = random_tensor({2, 2, 3}, rng);
        CellState s = random_state(kind, 2, 2, 4, rng);
        std::vector<Tensor> inputs{x, s.h, p.input.weight, p.input.bias, p.hidden.weight};
        if (kind == CellKind::Lstm) inputs.push_back(s.c);
        auto r = finite_diff_check(
            [&] {
                const auto out = cell_step(p, x, s);
                Tensor loss = test::weighted_sum(out.h, 7);
                if (out.c.defined()) loss = ops::add(loss, test::weighted_sum(out.c, 8));
                return loss;
            },
            inputs, 1e-6);
        CHECK(r.max_rel_err <= 1e-5);
    }
}

TEST_CASE("changing one module's parameters leaves the other modules' updates unchanged") {
    std::mt19937_64 rng(9);
    for (CellKind kind : {CellKind::Gru, CellKind::Lstm}) {
        CellParams p = randomized(kind, 3, 4, 5, 10);
        const Tensor x = random_tensor({2, 3, 4}, rng);
        const CellState s = random_state(kind, 2, 3, 5, rng);
        const auto before = cell_step(p, x, s);
        const std::size_t width = p.gates() * 5;
        // Perturb module 1 only.
        for (std::size_t i = 0; i < 4 * width; ++i) p.input.weight.mutable_data()[1 * 4 * width + i] += 0.3;
        for (std::size_t i = 0; i < 5 * width; ++i) p.hidden.weight.mutable_data()[1 * 5 * width + i] -= 0.2;
        for (std::size_t i = 0; i < width; ++i) p.input.bias.mutable_data()[width + i] += 0.1;
        const auto after = cell_step(p, x, s);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t m = 0; m < 3; ++m)
                for (std::size_t u = 0; u < 5; ++u) {
                    const std::size_t at = (b * 3 + m) * 5 + u;
                    if (m == 1) continue;
                    CHECK(after.h.data()[at] == before.h.data()[at]);
                }
        CHECK(test::max_abs_diff(ops::slice(after.h, 1, 1, 2).data(), ops::slice(before.h, 1, 1, 2).data()) > 0.0);
    }
}

TEST_CASE("initialization bounds and the forget-gate bias") {
    Rng rng(11);
    const std::size_t dh = 9;
    const auto p = CellParams::init(CellKind::Lstm, 2, 5, dh, rng);
    const double bound = 1.0 / 3.0;
    for (double w : p.input.weight.data()) CHECK(std::abs(w) <= bound);
    for (double w : p.hidden.weight.data()) CHECK(std::abs(w) <= bound);
    for (std::size_t m = 0; m < 2; ++m)
        for (std::size_t j = 0; j < 4 * dh; ++j)
            CHECK(p.input.bias.data()[m * 4 * dh + j] == ((j >= dh && j < 2 * dh) ? 1.0 : 0.0));
    const auto g = CellParams::init(CellKind::Gru, 2, 5, dh, rng);
    for (double v : g.input.bias.data()) CHECK(v == 0.0);
    CHECK(g.input.weight.shape() == Shape{2, 5, 3 * dh});
    CHECK(g.hidden.weight.shape() == Shape{2, dh, 3 * dh});
}

TEST_CASE("cell_step rejects width mismatches and a missing LSTM cell") {
    const auto gru = CellParams::zeros(CellKind::Gru, 2, 3, 4);
    CHECK_THROWS_AS(cell_step(gru, Tensor::zeros({1, 2, 5}), {Tensor::zeros({1, 2, 4}), {}}), DimensionError);
    CHECK_THROWS_AS(cell_step(gru, Tensor::zeros({1, 3, 3}), {Tensor::zeros({1, 2, 4}), {}}), DimensionError);
    CHECK_THROWS_AS(cell_step(gru, Tensor::zeros({1, 2, 3}), {Tensor::zeros({1, 2, 5}), {}}), DimensionError);
    const auto lstm = CellParams::zeros(CellKind::Lstm, 2, 3, 4);
    CHECK_THROWS_AS(cell_step(lstm, Tensor::zeros({1, 2, 3}), {Tensor::zeros({1, 2, 4}), {}}), DimensionError);
    CHECK_THROWS_AS(parse_cell_kind("rnn"), ValidationError);
}
