#include <array>
#include <cmath>
#include <random>

#include "brims/gradcheck.hpp"
#include "brims/ops.hpp"
#include "doctest.h"

using namespace brims;

namespace {

// Triple-loop oracle.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t r,
                                 std::size_t s, std::size_t c) {
    std::vector<double> out(r * c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            for (std::size_t k = 0; k < s; ++k) out[i * c + j] += a[i * s + k] * b[k * c + j];
    return out;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
}

// Values kept away from the ReLU kink so central differences stay one-sided-free.
Tensor random_away_from_zero(Shape shape, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = sign(rng) ? dist(rng) : -dist(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
}

// Fixed random weighting so each primitive's output reaches the loss non-trivially.
Tensor weighted_sum(const Tensor& t, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(0.5, 1.5);
    std::vector<double> w(t.numel());
    for (auto& x : w) x = dist(rng);
    return ops::sum(ops::mul(t, Tensor::from(t.shape(), w)));
}

}  // namespace

TEST_CASE("matmul matches identity, hand oracle and annihilation") {
    const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    const Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
    auto id = ops::matmul(eye, b);
    CHECK(std::vector<double>(id.data().begin(), id.data().end()) == std::vector<double>{3, 4, 5, 6});

    const std::vector<double> av{1, 2, 3, 4}, bv{5, 6, 7, 8};
    const auto expected = naive_matmul(av, bv, 2, 2, 2);
    CHECK(expected == std::vector<double>{19, 22, 43, 50});
    auto prod = ops::matmul(Tensor::from({2, 2}, av), Tensor::from({2, 2}, bv));
    CHECK(std::vector<double>(prod.data().begin(), prod.data().end()) == expected);

    auto zero = ops::matmul(Tensor::zeros({3, 2}), Tensor::from({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}));
    for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul and bmm agree with the loop oracle above the small-product cutoff") {
    std::mt19937_64 rng(31);
    for (auto [r, s, c] : {std::array<std::size_t, 3>{40, 30, 20}, {3, 64, 17}, {1, 200, 33}, {12, 12, 12}}) {
        Tensor a = random_tensor({r, s}, rng), b = random_tensor({s, c}, rng);
        const std::vector<double> av(a.data().begin(), a.data().end()), bv(b.data().begin(), b.data().end());
        const auto expected = naive_matmul(av, bv, r, s, c);
        const auto got = ops::matmul(a, b);
        for (std::size_t i = 0; i < expected.size(); ++i) CHECK(got.data()[i] == doctest::Approx(expected[i]).epsilon(1e-12));

        auto check = finite_diff_check([&] { return weighted_sum(ops::matmul(a, b), 5); }, {a, b}, 1e-6);
        CHECK(check.max_rel_err <= 1e-5);
        // Exact oracle for loss = sum(w * (A.B)): dA = w.B^T, dB = A^T.w per batch entry.
        Tensor ba = random_tensor({2, r, s}, rng), bb = random_tensor({2, s, c}, rng);
        const Tensor w = random_tensor({2, r, c}, rng);
        {
            Graph graph;
            GraphScope scope(graph);
            backward(ops::sum(ops::mul(ops::bmm(ba, bb), w)));
        }
        const auto A = ba.data(), B = bb.data(), W = w.data();
        for (std::size_t g = 0; g < 2; ++g) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t k = 0; k < s; ++k) {
                    double ref = 0.0;
                    for (std::size_t j = 0; j < c; ++j) ref += W[(g * r + i) * c + j] * B[(g * s + k) * c + j];
                    CHECK(ba.grad()[(g * r + i) * s + k] == doctest::Approx(ref).epsilon(1e-12));
                }
            for (std::size_t k = 0; k < s; ++k)
                for (std::size_t j = 0; j < c; ++j) {
                    double ref = 0.0;
                    for (std::size_t i = 0; i < r; ++i) ref += A[(g * r + i) * s + k] * W[(g * r + i) * c + j];
                    CHECK(bb.grad()[(g * s + k) * c + j] == doctest::Approx(ref).epsilon(1e-12));
                }
        }
    }
}

TEST_CASE("sigmoid and tanh track the scalar library functions") {
    std::vector<double> xs;
    for (double x = -40.0; x <= 40.0; x += 0.0137) xs.push_back(x);
    for (double x : {0.0, -0.0, 1e-300, -1e-12, 1e-8, 710.0, -710.0, 1e6, -1e6}) xs.push_back(x);
    const Tensor x = Tensor::from({xs.size()}, xs);
    const auto sg = ops::sigmoid(x);
    const auto th = ops::tanh(x);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        INFO("x = " << xs[i]);
        const double s_ref = 1.0 / (1.0 + std::exp(-xs[i]));
        CHECK(std::abs(sg.data()[i] - s_ref) <= 1e-15 * std::max(1.0, std::abs(s_ref)) + 1e-300);
        CHECK(std::abs(th.data()[i] - std::tanh(xs[i])) <= 1e-15);
        CHECK(sg.data()[i] >= 0.0);
        CHECK(sg.data()[i] <= 1.0);
    }
}

TEST_CASE("lstm_pointwise equals the composed gate arithmetic") {
    std::mt19937_64 rng(77);
    const std::size_t d = 5;
    Tensor pre = random_tensor({3, 2, 4 * d}, rng, -3.0, 3.0), c = random_tensor({3, 2, d}, rng);
    const auto fused = ops::lstm_pointwise(pre, c);
    const Tensor i = ops::sigmoid(ops::slice(pre, 2, 0, d)), f = ops::sigmoid(ops::slice(pre, 2, d, 2 * d));
    const Tensor z = ops::tanh(ops::slice(pre, 2, 2 * d, 3 * d)), o = ops::sigmoid(ops::slice(pre, 2, 3 * d, 4 * d));
    const Tensor c_new = ops::add(ops::mul(f, c), ops::mul(i, z));
    const Tensor h_new = ops::mul(o, ops::tanh(c_new));
    const Tensor composed = ops::concat({h_new, c_new}, 2);
    REQUIRE(fused.shape() == composed.shape());
    for (std::size_t k = 0; k < fused.numel(); ++k) CHECK(fused.data()[k] == doctest::Approx(composed.data()[k]).epsilon(1e-14));
    CHECK_THROWS_AS(ops::lstm_pointwise(Tensor::zeros({2, 7}), Tensor::zeros({2, 2})), DimensionError);
}

TEST_CASE("matmul rejects mismatched inner extents with both shapes") {
    try {
        ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("softmax rows are normalized and stable") {
    auto s = ops::softmax_rows(Tensor::from({1, 3}, {0, 0, 0}));
    for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
    auto one = ops::softmax_rows(Tensor::from({3, 1}, {5, -2, 800}));
    for (double v : one.data()) CHECK(v == 1.0);
    auto two = ops::softmax_rows(Tensor::from({1, 2}, {0, std::log(2.0)}));
    CHECK(std::abs(two.at(0) - 1.0 / 3) < 1e-15);
    CHECK(std::abs(two.at(1) - 2.0 / 3) < 1e-15);

    std::mt19937_64 rng(3);
    auto big = ops::softmax_rows(random_tensor({7, 5}, rng, -500, 500));
    for (std::size_t r = 0; r < 7; ++r) {
        double total = 0;
        for (std::size_t c = 0; c < 5; ++c) {
            const double v = big.at(r * 5 + c);
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            total += v;
        }
        CHECK(std::abs(total - 1.0) < 1e-9);
    }
}

TEST_CASE("elementwise analytic values and dropout degenerate rate") {
    CHECK(ops::sigmoid(Tensor::scalar(0)).item() == 0.5);
    CHECK(ops::tanh(Tensor::scalar(0)).item() == 0.0);
    std::mt19937_64 rng(1);
    auto x = random_tensor({4, 3}, rng);
    for (std::uint64_t seed : {0ull, 7ull, 99ull}) {
        auto y = ops::dropout(x, 0.0, seed, true);
        CHECK(std::equal(y.data().begin(), y.data().end(), x.data().begin()));
    }
    auto eval = ops::dropout(x, 0.5, 3, false);
    CHECK(std::equal(eval.data().begin(), eval.data().end(), x.data().begin()));
    CHECK_THROWS_AS(ops::dropout(x, 1.0, 3, true), ValidationError);
    CHECK_THROWS_AS(ops::dropout(x, -0.1, 3, true), ValidationError);
    CHECK_THROWS_AS(ops::add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("dropout zeroes about p of the entries and rescales survivors") {
    const Tensor ones = Tensor::full({100, 100}, 1.0);
    auto y = ops::dropout(ones, 0.25, 42, true);
    std::size_t zeros = 0;
    for (double v : y.data()) {
        if (v == 0.0) {
            ++zeros;
        } else {
            CHECK(v == doctest::Approx(1.0 / 0.75));
        }
    }
    CHECK(zeros > 2300);
    CHECK(zeros < 2700);
    auto again = ops::dropout(ones, 0.25, 42, true);
    CHECK(std::equal(y.data().begin(), y.data().end(), again.data().begin()));
}

TEST_CASE("concat_rows stacks, splits back, and rejects trailing mismatch") {
    auto two = ops::concat_rows({Tensor::from({1, 2}, {1, 2}), Tensor::from({1, 2}, {3, 4})});
    CHECK(two.shape() == Shape{2, 2});
    CHECK(std::vector<double>(two.data().begin(), two.data().end()) == std::vector<double>{1, 2, 3, 4});

    const Tensor single = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto same = ops::concat_rows({single});
    CHECK(std::equal(same.data().begin(), same.data().end(), single.data().begin()));

    std::mt19937_64 rng(5);
    std::vector<Tensor> parts{random_tensor({1, 2}, rng), random_tensor({1, 2}, rng), random_tensor({1, 2}, rng)};
    auto stacked = ops::concat_rows(parts);
    CHECK(stacked.shape() == Shape{3, 2});
    auto back = ops::split(stacked, 0, {1, 1, 1});
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(std::equal(back[i].data().begin(), back[i].data().end(), parts[i].data().begin()));
    }
    CHECK_THROWS_AS(ops::concat_rows({Tensor::zeros({1, 2}), Tensor::zeros({1, 3})}), DimensionError);
}

TEST_CASE("backward: analytic square, detached leaf, error paths") {
    Tensor x = Tensor::scalar(3.0, true);
    {
        Graph g;
        GraphScope scope(g);
        auto loss = ops::mul(x, x);
        backward(loss);
    }
    CHECK(x.grad()[0] == 6.0);

    Tensor fixed = Tensor::scalar(2.0);
    Tensor w = Tensor::scalar(1.5, true);
    {
        Graph g;
        GraphScope scope(g);
        backward(ops::mul(fixed, w));
    }
    CHECK_FALSE(fixed.has_grad());
    CHECK(w.grad()[0] == 2.0);

    Graph g;
    GraphScope scope(g);
    Tensor v = Tensor::from({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(ops::scale(v, 2.0)), GraphError);
    CHECK_THROWS_AS(backward(Tensor::scalar(1.0, true)), GraphError);
}

TEST_CASE("backward accumulates over repeated calls and over shared consumers") {
    Tensor x = Tensor::scalar(2.0, true);
    Graph g;
    GraphScope scope(g);
    // x feeds sigmoid and tanh; hand-summed derivative.
    auto loss = ops::add(ops::sigmoid(x), ops::mul(ops::tanh(x), Tensor::scalar(3.0)));
    backward(loss);
    const double s = 1.0 / (1.0 + std::exp(-2.0));
    const double expected = s * (1 - s) + 3.0 * (1 - std::tanh(2.0) * std::tanh(2.0));
    CHECK(x.grad()[0] == doctest::Approx(expected).epsilon(1e-14));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2 * expected).epsilon(1e-14));
    x.zero_grad();
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(expected).epsilon(1e-14));
    CHECK(g.topologically_ordered());
    CHECK(g.last_backward_visits() == g.size());
}

TEST_CASE("sum of sigmoid(Wx) gradients match finite differences") {
    std::mt19937_64 rng(11);
    Tensor w = random_tensor({3, 4}, rng, -0.5, 0.5);
    Tensor x = random_tensor({4, 2}, rng, -0.5, 0.5);
    auto result = finite_diff_check([&] { return ops::sum(ops::sigmoid(ops::matmul(w, x))); }, {w, x}, 1e-6);
    CHECK(result.max_rel_err < 1e-5);
}

TEST_CASE("finite_diff_check trivial cases and determinism guard") {
    auto quad = finite_diff_check([](const Tensor& x) { return ops::mul(x, x); }, Tensor::scalar(2.0, true), 1e-6);
    CHECK(quad.max_rel_err < 1e-6);
    auto constant = finite_diff_check([](const Tensor&) { return Tensor::scalar(4.0); }, Tensor::scalar(2.0), 1e-6);
    CHECK(constant.max_rel_err == 0.0);
    int calls = 0;
    CHECK_THROWS_AS(finite_diff_check([&](const Tensor& x) { return ops::add_scalar(x, double(++calls)); },
                                      Tensor::scalar(1.0), 1e-6),
                    DeterminismError);
    CHECK_THROWS_AS(finite_diff_check([](const Tensor& x) { return x; }, Tensor::scalar(1.0), 0.0), ValidationError);
}

TEST_CASE("every primitive passes the gradient check on random shapes") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<std::size_t> extent(1, 8);
    for (int trial = 0; trial < 6; ++trial) {
        const std::size_t r = extent(rng), s = extent(rng), c = extent(rng), g = extent(rng) % 3 + 1;
        const auto seed = rng();
        Tensor a = random_tensor({r, s}, rng), b = random_tensor({s, c}, rng);
        Tensor same = random_tensor({r, s}, rng);
        Tensor ba = random_tensor({g, r, s}, rng), bb = random_tensor({g, s, c}, rng);
        Tensor gx = random_tensor({c, g, s}, rng), gw = random_tensor({g, s, r}, rng), gbias = random_tensor({g, r}, rng);
        Tensor lw = random_tensor({s, c}, rng), lb = random_tensor({c}, rng);
        Tensor kinked = random_away_from_zero({r, s}, rng);
        Tensor scalar = random_tensor({1}, rng);
        std::vector<std::uint8_t> mask(r);
        for (auto& m : mask) m = static_cast<std::uint8_t>(rng() % 2);
        std::vector<std::size_t> labels(r);
        for (auto& l : labels) l = rng() % s;
        Tensor target = random_tensor({r, s}, rng);
        target.set_requires_grad(false);
        Tensor pre = random_tensor({g, r, 4 * s}, rng, -2.0, 2.0), cell = random_tensor({g, r, s}, rng);

        struct Case {
            const char* name;
            std::function<Tensor()> f;
            std::vector<Tensor> inputs;
        };
        const std::vector<Case> cases{
            {"matmul", [&] { return weighted_sum(ops::matmul(a, b), seed); }, {a, b}},
            {"bmm", [&] { return weighted_sum(ops::bmm(ba, bb), seed); }, {ba, bb}},
            {"transpose", [&] { return weighted_sum(ops::transpose(ba), seed); }, {ba}},
            {"permute", [&] { return weighted_sum(ops::permute(ba, {2, 0, 1}), seed); }, {ba}},
            {"linear", [&] { return weighted_sum(ops::linear(a, lw, lb), seed); }, {a, lw, lb}},
            {"group_linear", [&] { return weighted_sum(ops::group_linear(gx, gw, gbias), seed); }, {gx, gw, gbias}},
            {"add", [&] { return weighted_sum(ops::add(a, same), seed); }, {a, same}},
            {"add_scalar_bcast", [&] { return weighted_sum(ops::add(a, scalar), seed); }, {a, scalar}},
            {"sub", [&] { return weighted_sum(ops::sub(scalar, a), seed); }, {a, scalar}},
            {"mul", [&] { return weighted_sum(ops::mul(a, same), seed); }, {a, same}},
            {"mul_self", [&] { return weighted_sum(ops::mul(a, a), seed); }, {a}},
            {"scale", [&] { return weighted_sum(ops::scale(a, -1.7), seed); }, {a}},
            {"sigmoid", [&] { return weighted_sum(ops::sigmoid(a), seed); }, {a}},
            {"tanh", [&] { return weighted_sum(ops::tanh(a), seed); }, {a}},
            {"relu", [&] { return weighted_sum(ops::relu(kinked), seed); }, {kinked}},
            {"dropout", [&] { return weighted_sum(ops::dropout(a, 0.3, seed, true), seed); }, {a}},
            {"where", [&] { return weighted_sum(ops::where(mask, a, same), seed); }, {a, same}},
            {"reshape", [&] { return weighted_sum(ops::reshape(a, {s, r}), seed); }, {a}},
            {"concat", [&] { return weighted_sum(ops::concat({a, same, a}, 1), seed); }, {a, same}},
            {"slice", [&] { return weighted_sum(ops::slice(ba, 2, 0, (s + 1) / 2), seed); }, {ba}},
            {"broadcast", [&] { return weighted_sum(ops::broadcast_leading(lb, 3), seed); }, {lb}},
            {"sum", [&] { return ops::sum(ops::mul(a, a)); }, {a}},
            {"mean", [&] { return ops::mean(ops::mul(a, same)); }, {a, same}},
            {"softmax", [&] { return weighted_sum(ops::softmax(ba), seed); }, {ba}},
            {"cross_entropy", [&] { return ops::cross_entropy(a, labels); }, {a}},
            {"mse", [&] { return ops::mse(a, target); }, {a}},
            {"lstm_pointwise", [&] { return weighted_sum(ops::lstm_pointwise(pre, cell), seed); }, {pre, cell}},
        };
        for (const auto& cs : cases) {
            INFO("primitive " << cs.name << " trial " << trial);
            auto result = finite_diff_check(cs.f, cs.inputs, 1e-6);
            CHECK(result.max_rel_err <= 1e-5);
        }
    }
}

TEST_CASE("operations never mutate their inputs") {
    std::mt19937_64 rng(8);
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    const std::vector<double> before_a(a.data().begin(), a.data().end());
    const std::vector<double> before_b(b.data().begin(), b.data().end());
    Graph g;
    GraphScope scope(g);
    auto loss = ops::sum(ops::softmax(ops::tanh(ops::matmul(a, b))));
    backward(loss);
    CHECK(std::equal(before_a.begin(), before_a.end(), a.data().begin()));
    CHECK(std::equal(before_b.begin(), before_b.end(), b.data().begin()));
}

TEST_CASE("non-finite values are reported with the producing primitive") {
    try {
        ops::scale(Tensor::scalar(1e300), 1e300);
        FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
        CHECK(std::string(e.what()).find("scale") != std::string::npos);
    }
}
