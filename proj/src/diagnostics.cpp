#include "brims/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "brims/attention.hpp"
#include "brims/cells.hpp"
#include "brims/network.hpp"
#include "brims/ops.hpp"

namespace brims {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Magnitudes in [0.1, 1]: no relu kink and no vanishing product gradients.
Tensor away_from_zero(Shape shape, Rng& rng) {
    std::uniform_real_distribution<double> dist(0.1, 1.0);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = (rng() & 1) ? dist(rng) : -dist(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor weighted_sum(const Tensor& t, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> dist(0.5, 1.5);
    std::vector<double> w(t.numel());
    for (double& x : w) x = dist(rng);
    return ops::sum(ops::mul(t, Tensor::from(t.shape(), std::move(w))));
}

void keep_worst(std::vector<NamedCheck>& out, const std::string& name, const GradCheckResult& r) {
    auto it = std::find_if(out.begin(), out.end(), [&](const NamedCheck& c) { return c.name == name; });
    if (it == out.end()) {
        out.push_back({name, r});
    } else if (r.max_rel_err > it->result.max_rel_err) {
        it->result = r;
    }
}

Tensor unroll_loss(const Network& net, const Tensor& raw, std::uint64_t seed) {
    const std::size_t steps = raw.dim(0), batch = raw.dim(1), features = raw.dim(2);
    std::vector<Tensor> seq;
    for (std::size_t t = 0; t < steps; ++t)
        seq.push_back(net.embed(ops::reshape(ops::slice(raw, 0, t, t + 1), {batch, features}), false, 0));
    const auto final_state = net.unroll(seq, net.init_state(batch)).final_state;
    Tensor loss = weighted_sum(net.head(final_state), seed);
    for (std::size_t l = 0; l < final_state.layers.size(); ++l)
        loss = ops::add(loss, weighted_sum(final_state.layers[l].h, seed + 1 + l));
    return loss;
}

}  // namespace

std::vector<NamedCheck> primitive_gradchecks(std::uint64_t seed, std::size_t trials, double eps) {
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> extent(1, 6);
    std::vector<NamedCheck> out;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        const std::size_t r = extent(rng), s = extent(rng), c = extent(rng), g = extent(rng) % 3 + 1;
        const std::uint64_t w = rng();
        Tensor a = random_tensor({r, s}, rng), b = random_tensor({s, c}, rng), same = random_tensor({r, s}, rng);
        Tensor ba = random_tensor({g, r, s}, rng), bb = random_tensor({g, s, c}, rng);
        Tensor gx = random_tensor({c, g, s}, rng), gw = random_tensor({g, s, r}, rng), gb = random_tensor({g, r}, rng);
        Tensor lw = random_tensor({s, c}, rng), lb = random_tensor({c}, rng);
        Tensor kinked = away_from_zero({r, s}, rng), scalar = random_tensor({1}, rng);
        Tensor fa = away_from_zero({r, s}, rng), fb = away_from_zero({r, s}, rng);
        std::vector<std::uint8_t> mask(r);
        for (auto& m : mask) m = static_cast<std::uint8_t>(rng() % 2);
        std::vector<std::size_t> labels(r);
        for (auto& l : labels) l = rng() % s;
        Tensor target = random_tensor({r, s}, rng, -1, 1, false);
        Tensor pre = random_tensor({g, r, 4 * s}, rng, -2, 2), cell = random_tensor({g, r, s}, rng);
        const std::size_t heads = 1 + rng() % 2;
        Tensor q = random_tensor({g, r, heads * s}, rng), k = random_tensor({g, c, heads * s}, rng),
               v = random_tensor({g, c, heads * 2}, rng);
        Tensor q2 = random_tensor({r, s}, rng), k2 = random_tensor({c, s}, rng), v2 = random_tensor({c, 3}, rng);

        struct Case {
            const char* name;
            std::function<Tensor()> f;
            std::vector<Tensor> inputs;
        };
        const std::vector<Case> cases{
            {"matmul", [&] { return weighted_sum(ops::matmul(a, b), w); }, {a, b}},
            {"bmm", [&] { return weighted_sum(ops::bmm(ba, bb), w); }, {ba, bb}},
            {"transpose", [&] { return weighted_sum(ops::transpose(ba), w); }, {ba}},
            {"permute", [&] { return weighted_sum(ops::permute(ba, {2, 0, 1}), w); }, {ba}},
            {"linear", [&] { return weighted_sum(ops::linear(a, lw, lb), w); }, {a, lw, lb}},
            {"group_linear", [&] { return weighted_sum(ops::group_linear(gx, gw, gb), w); }, {gx, gw, gb}},
            {"add", [&] { return weighted_sum(ops::add(a, ops::add(same, scalar)), w); }, {a, same, scalar}},
            {"sub", [&] { return weighted_sum(ops::sub(scalar, a), w); }, {a, scalar}},
            {"mul", [&] { return weighted_sum(ops::mul(fa, fb), w); }, {fa, fb}},
            {"mul_self", [&] { return weighted_sum(ops::mul(fa, fa), w); }, {fa}},
            {"scale", [&] { return weighted_sum(ops::scale(a, -1.7), w); }, {a}},
            {"sigmoid", [&] { return weighted_sum(ops::sigmoid(a), w); }, {a}},
            {"tanh", [&] { return weighted_sum(ops::tanh(a), w); }, {a}},
            {"relu", [&] { return weighted_sum(ops::relu(kinked), w); }, {kinked}},
            {"dropout", [&] { return weighted_sum(ops::dropout(a, 0.3, w, true), w); }, {a}},
            {"where", [&] { return weighted_sum(ops::where(mask, a, same), w); }, {a, same}},
            {"reshape", [&] { return weighted_sum(ops::reshape(a, {s, r}), w); }, {a}},
            {"concat", [&] { return weighted_sum(ops::concat({a, same, a}, 1), w); }, {a, same}},
            {"slice", [&] { return weighted_sum(ops::slice(ba, 2, 0, (s + 1) / 2), w); }, {ba}},
            {"broadcast", [&] { return weighted_sum(ops::broadcast_leading(lb, 3), w); }, {lb}},
            {"sum", [&] { return ops::sum(ops::mul(a, a)); }, {a}},
            {"mean", [&] { return ops::mean(ops::mul(a, same)); }, {a, same}},
            {"softmax", [&] { return weighted_sum(ops::softmax(ba), w); }, {ba}},
            {"cross_entropy", [&] { return ops::cross_entropy(a, labels); }, {a}},
            {"mse", [&] { return ops::mse(a, target); }, {a}},
            {"lstm_pointwise", [&] { return weighted_sum(ops::lstm_pointwise(pre, cell), w); }, {pre, cell}},
            {"attend", [&] { return weighted_sum(attend(q2, k2, v2).result, w); }, {q2, k2, v2}},
            {"attend_heads",
             [&] {
                 const auto out = attend_heads(q, k, v, heads);
                 return ops::add(weighted_sum(out.result, w), weighted_sum(out.scores, w + 1));
             },
             {q, k, v}},
        };
        for (const auto& cs : cases)
            keep_worst(out, cs.name, finite_diff_check(cs.f, cs.inputs, eps, Stencil::Central4));

        for (CellKind kind : {CellKind::Gru, CellKind::Lstm}) {
            const std::size_t n = 1 + rng() % 3, din = extent(rng), dh = extent(rng);
            CellParams p = CellParams::init(kind, n, din, dh, rng);
            Tensor x = random_tensor({2, n, din}, rng), h = random_tensor({2, n, dh}, rng);
            CellState state{h, kind == CellKind::Lstm ? random_tensor({2, n, dh}, rng, -2, 2) : Tensor{}};
            std::vector<Tensor> inputs{x, h, p.input.weight, p.input.bias, p.hidden.weight};
            if (state.c.defined()) inputs.push_back(state.c);
            const auto r2 = finite_diff_check(
                [&] {
                    const auto next = cell_step(p, x, state);
                    Tensor loss = weighted_sum(next.h, w);
                    if (next.c.defined()) loss = ops::add(loss, weighted_sum(next.c, w + 1));
                    return loss;
                },
                inputs, eps, Stencil::Central4);
            keep_worst(out, "cell_step." + to_string(kind), r2);
        }
    }
    return out;
}

BrimsConfig reference_gradcheck_config(CellKind kind) {
    BrimsConfig cfg;
    cfg.variant = Variant::Brims;
    cfg.cell = kind;
    cfg.input_size = 2;
    cfg.embed_size = 4;
    cfg.modules = {3, 2};
    cfg.active = {2, 1};
    cfg.module_size = {8, 8};
    cfg.attention_size = cfg.value_size = cfg.comm_attention_size = 4;
    return cfg;
}

std::vector<NamedCheck> unroll_gradchecks(const BrimsConfig& cfg, std::uint64_t seed, std::size_t steps,
                                          std::size_t batch, double eps) {
    validate(cfg);
    if (steps == 0 || batch == 0) throw ValidationError("unroll check needs at least one step and one sample");
    const Network net = Network::make(cfg, seed);
    Rng rng(seed ^ 0x5bd1e995u);
    std::vector<NamedCheck> out;

    Tensor raw = random_tensor({steps, batch, cfg.input_size}, rng);
    out.push_back({"unroll.inputs",
                   finite_diff_check([&](const Tensor& x) { return unroll_loss(net, x, seed); }, raw, eps)});

    // One random direction per parameter tensor.
    raw.set_requires_grad(false);
    const auto params = net.parameters();
    for (auto p : params) p.tensor.clear_grad();
    {
        Graph graph;
        GraphScope scope(graph);
        backward(unroll_loss(net, raw, seed));
    }
    auto value = [&] {
        NoGradScope no_grad;
        return unroll_loss(net, raw, seed).item();
    };
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (auto p : params) {
        std::vector<double> dir(p.tensor.numel());
        for (double& d : dir) d = dist(rng);
        double analytic = 0.0;
        if (p.tensor.has_grad())
            for (std::size_t i = 0; i < dir.size(); ++i) analytic += p.tensor.grad()[i] * dir[i];
        const std::vector<double> original(p.tensor.data().begin(), p.tensor.data().end());
        auto data = p.tensor.mutable_data();
        for (std::size_t i = 0; i < dir.size(); ++i) data[i] = original[i] + eps * dir[i];
        const double up = value();
        for (std::size_t i = 0; i < dir.size(); ++i) data[i] = original[i] - eps * dir[i];
        const double down = value();
        std::copy(original.begin(), original.end(), data.begin());
        p.tensor.clear_grad();

        GradCheckResult r;
        r.analytic = analytic;
        r.numeric = (up - down) / (2 * eps);
        r.entries = 1;
        r.max_rel_err = std::abs(r.analytic - r.numeric) / std::max({std::abs(r.analytic), std::abs(r.numeric), 1e-12});
        out.push_back({"unroll.param." + p.name, r});
    }
    return out;
}

}  // namespace brims
