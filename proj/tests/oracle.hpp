#pragma once

// Independent scalar-loop reference implementations. They read parameters
// straight out of the tensors and share no code with the library's forward
// path beyond the parameter layout.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "brims/network.hpp"

namespace brims::oracle {

using Vec = std::vector<double>;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// y = b + x W for W stored [din x dout]; `b` may be null.
inline Vec affine(const double* x, std::size_t din, const double* w, const double* b, std::size_t dout) {
    Vec y(dout, 0.0);
    for (std::size_t j = 0; j < dout; ++j) {
        double acc = b ? b[j] : 0.0;
        for (std::size_t i = 0; i < din; ++i) acc += x[i] * w[i * dout + j];
        y[j] = acc;
    }
    return y;
}

inline Vec affine(const Vec& x, const Affine& a) {
    return affine(x.data(), a.in_features(), a.weight.data().data(), a.bias.data().data(), a.out_features());
}

// Module g of a bank.
inline Vec affine(const Vec& x, const GroupAffine& a, std::size_t g) {
    const std::size_t din = a.in_features(), dout = a.out_features();
    return affine(x.data(), din, a.weight.data().data() + g * din * dout,
                  a.bias.defined() ? a.bias.data().data() + g * dout : nullptr, dout);
}

struct Attention {
    Vec scores;  // [nq x nk]
    Vec result;  // [nq x dv]
};

// softmax(Q K^T / sqrt(d)) V with a max-shifted softmax.
inline Attention attend(const double* q, const double* k, const double* v, std::size_t nq, std::size_t nk,
                        std::size_t d, std::size_t dv, std::size_t q_stride = 0, std::size_t k_stride = 0,
                        std::size_t v_stride = 0) {
    if (!q_stride) q_stride = d;
    if (!k_stride) k_stride = d;
    if (!v_stride) v_stride = dv;
    Attention out{Vec(nq * nk), Vec(nq * dv, 0.0)};
    for (std::size_t i = 0; i < nq; ++i) {
        Vec logit(nk);
        for (std::size_t j = 0; j < nk; ++j) {
            double dot = 0.0;
            for (std::size_t p = 0; p < d; ++p) dot += q[i * q_stride + p] * k[j * k_stride + p];
            logit[j] = dot / std::sqrt(static_cast<double>(d));
        }
        const double top = *std::max_element(logit.begin(), logit.end());
        double z = 0.0;
        for (double l : logit) z += std::exp(l - top);
        for (std::size_t j = 0; j < nk; ++j) out.scores[i * nk + j] = std::exp(logit[j] - top) / z;
        for (std::size_t j = 0; j < nk; ++j)
            for (std::size_t p = 0; p < dv; ++p) out.result[i * dv + p] += out.scores[i * nk + j] * v[j * v_stride + p];
    }
    return out;
}

struct CellOut {
    Vec h, c;
};

// One module of a cell bank, unit by unit from the gate equations.
inline CellOut cell(const CellParams& p, std::size_t module, const Vec& x, const Vec& h, const Vec& c) {
    const std::size_t dh = p.d_h();
    const Vec ix = affine(x, p.input, module);
    const Vec hh = affine(h, p.hidden, module);
    CellOut out{Vec(dh), {}};
    if (p.kind == CellKind::Gru) {
        for (std::size_t u = 0; u < dh; ++u) {
            const double r = sigmoid(ix[u] + hh[u]);
            const double z = sigmoid(ix[dh + u] + hh[dh + u]);
            const double n = std::tanh(ix[2 * dh + u] + r * hh[2 * dh + u]);
            out.h[u] = (1.0 - z) * n + z * h[u];
        }
        return out;
    }
    out.c.resize(dh);
    for (std::size_t u = 0; u < dh; ++u) {
        const double i = sigmoid(ix[u] + hh[u]);
        const double f = sigmoid(ix[dh + u] + hh[dh + u]);
        const double g = std::tanh(ix[2 * dh + u] + hh[2 * dh + u]);
        const double o = sigmoid(ix[3 * dh + u] + hh[3 * dh + u]);
        out.c[u] = f * c[u] + i * g;
        out.h[u] = o * std::tanh(out.c[u]);
    }
    return out;
}

// Slice [begin, begin + len) of v.
inline Vec part(const Vec& v, std::size_t begin, std::size_t len) {
    return Vec(v.begin() + static_cast<std::ptrdiff_t>(begin), v.begin() + static_cast<std::ptrdiff_t>(begin + len));
}

struct LayerOut {
    Vec h, c;                         // [n x d], flattened module by module
    std::vector<std::size_t> active;  // sorted
    Vec shares;                       // [n x columns]
    std::size_t columns = 0;
    Vec read;                         // [n x heads*dv]
};

// One layer for one batch element. `lower` and `higher` are flattened layer
// vectors (or the embedded input); `higher` is null without a top-down source.
inline LayerOut layer(const Network& net, std::size_t l, const Vec& lower, const Vec* higher, const Vec& h_prev,
                      const Vec& c_prev, const std::vector<std::size_t>* copied = nullptr,
                      const std::vector<std::size_t>* forced = nullptr) {
    const BrimsConfig& cfg = net.config();
    const Network::Layer& L = net.layer(l);
    const std::size_t n = cfg.modules[l], d = cfg.module_size[l];
    const bool lstm = cfg.cell == CellKind::Lstm;
    LayerOut out;

    if (!L.attention) {
        Vec input = lower;
        if (higher) input.insert(input.end(), higher->begin(), higher->end());
        const CellOut u = cell(L.cell, 0, input, h_prev, c_prev);
        out.h = u.h;
        out.c = u.c;
        out.active = {0};
        return out;
    }

    // Key/value rows: null, bottom-up rows, top-down rows.
    const std::size_t H = cfg.heads, da = cfg.attention_size, dv = cfg.value_size;
    std::vector<Vec> keys, values;
    keys.emplace_back(L.read.null_key.data().begin(), L.read.null_key.data().end());
    values.emplace_back(L.read.null_value.data().begin(), L.read.null_value.data().end());
    auto add_rows = [&](const Vec& src, std::size_t rows, const ProjectionSet::SourceMaps& maps) {
        const std::size_t w = src.size() / rows;
        for (std::size_t r = 0; r < rows; ++r) {
            const Vec row = part(src, r * w, w);
            keys.push_back(affine(row, maps.key));
            values.push_back(affine(row, maps.value));
        }
    };
    const bool per_rows = cfg.per_module_rows;
    const std::size_t bottom_rows = (per_rows && l > 0) ? cfg.modules[l - 1] : 1;
    add_rows(lower, bottom_rows, L.read.sources[0]);
    std::size_t top_rows = 0;
    if (higher) {
        top_rows = per_rows ? cfg.modules[l + 1] : 1;
        add_rows(*higher, top_rows, L.read.sources[1]);
    }
    const std::size_t rows = keys.size();
    out.columns = higher ? 3 : 2;
    out.shares.assign(n * out.columns, 0.0);
    out.read.assign(n * H * dv, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        const Vec q = affine(part(h_prev, k * d, d), L.read.query, k);
        for (std::size_t h = 0; h < H; ++h) {
            Vec K, V;
            for (std::size_t r = 0; r < rows; ++r) {
                K.insert(K.end(), keys[r].begin() + h * da, keys[r].begin() + (h + 1) * da);
                V.insert(V.end(), values[r].begin() + h * dv, values[r].begin() + (h + 1) * dv);
            }
            const Attention a = attend(q.data() + h * da, K.data(), V.data(), 1, rows, da, dv);
            double* share = out.shares.data() + k * out.columns;
            share[0] += a.scores[0] / H;
            for (std::size_t r = 0; r < bottom_rows; ++r) share[1] += a.scores[1 + r] / H;
            for (std::size_t r = 0; r < top_rows; ++r) share[2] += a.scores[1 + bottom_rows + r] / H;
            std::copy(a.result.begin(), a.result.end(), out.read.begin() + k * H * dv + h * dv);
        }
    }

    // Selection: lowest null shares, ties to the lower index.
    if (forced) {
        out.active = *forced;
        std::sort(out.active.begin(), out.active.end());
    } else if (copied) {
        out.active = *copied;
    } else {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                const double a = out.shares[order[i] * out.columns], b = out.shares[order[j] * out.columns];
                if (b < a || (b == a && order[j] < order[i])) std::swap(order[i], order[j]);
            }
        out.active.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.active[l]));
        std::sort(out.active.begin(), out.active.end());
    }
    auto is_active = [&](std::size_t k) {
        return std::find(out.active.begin(), out.active.end(), k) != out.active.end();
    };

    Vec h_bar = h_prev;
    out.c = lstm ? c_prev : Vec{};
    for (std::size_t k : out.active) {
        const CellOut u = cell(L.cell, k, part(out.read, k * H * dv, H * dv), part(h_prev, k * d, d),
                               lstm ? part(c_prev, k * d, d) : Vec{});
        std::copy(u.h.begin(), u.h.end(), h_bar.begin() + k * d);
        if (lstm) std::copy(u.c.begin(), u.c.end(), out.c.begin() + k * d);
    }

    out.h = h_bar;
    if (L.communication) {
        const std::size_t dc = cfg.comm_attention_size;
        Vec Q, K, V;
        for (std::size_t k = 0; k < n; ++k) {
            const Vec hk = part(h_bar, k * d, d);
            const Vec q = affine(hk, L.comm_query, k), key = affine(hk, L.comm_key, k), val = affine(hk, L.comm_value, k);
            Q.insert(Q.end(), q.begin(), q.end());
            K.insert(K.end(), key.begin(), key.end());
            V.insert(V.end(), val.begin(), val.end());
        }
        for (std::size_t k = 0; k < n; ++k) {
            if (!is_active(k)) continue;
            const Attention a = attend(Q.data() + k * dc, K.data(), V.data(), 1, n, dc, d);
            for (std::size_t u = 0; u < d; ++u) out.h[k * d + u] = h_bar[k * d + u] + a.result[u];
        }
    }
    return out;
}

struct ElementState {
    std::vector<Vec> h, c;  // per layer, flattened
};

inline ElementState element(const NetworkState& s, std::size_t b) {
    ElementState e;
    for (const auto& layer : s.layers) {
        const std::size_t w = layer.h.numel() / layer.h.dim(0);
        e.h.push_back(part(Vec(layer.h.data().begin(), layer.h.data().end()), b * w, w));
        e.c.push_back(layer.c.defined() ? part(Vec(layer.c.data().begin(), layer.c.data().end()), b * w, w) : Vec{});
    }
    return e;
}

struct StepOut {
    ElementState state;
    std::vector<LayerOut> layers;
};

// One time step for one batch element, layers bottom to top: the bottom-up
// source is the lower layer's new state, the top-down source the higher
// layer's previous state.
inline StepOut step(const Network& net, const Vec& x, const ElementState& prev,
                    const std::vector<std::vector<std::size_t>>* forced = nullptr) {
    const BrimsConfig& cfg = net.config();
    StepOut out;
    out.state = prev;
    for (std::size_t l = 0; l < cfg.layers(); ++l) {
        const Vec& lower = l == 0 ? x : out.state.h[l - 1];
        const Vec* higher = net.has_top_down(l) ? &prev.h[l + 1] : nullptr;
        const std::vector<std::size_t>* copied =
            (cfg.variant == Variant::MldRims && l > 0) ? &out.layers[0].active : nullptr;
        const std::vector<std::size_t>* f = (forced && l < forced->size() && !(*forced)[l].empty()) ? &(*forced)[l] : nullptr;
        LayerOut lo = layer(net, l, lower, higher, prev.h[l], prev.c[l], copied, f);
        out.state.h[l] = lo.h;
        out.state.c[l] = lo.c;
        out.layers.push_back(std::move(lo));
    }
    return out;
}

inline Vec head(const Network& net, const Vec& top) {
    // The head's parameters are reached through the parameter list by name.
    const ParameterList params = net.parameters();
    auto find = [&](const std::string& name) -> const Tensor& {
        for (const auto& p : params)
            if (p.name == name) return p.tensor;
        throw std::runtime_error("missing parameter " + name);
    };
    const BrimsConfig& cfg = net.config();
    Vec z = top;
    if (cfg.head == HeadKind::Classification) {
        const Tensor &w = find("head.hidden.weight"), &b = find("head.hidden.bias");
        z = affine(z.data(), z.size(), w.data().data(), b.data().data(), w.dim(1));
        for (double& v : z) v = std::max(v, 0.0);
    }
    const Tensor &w = find("head.out.weight"), &b = find("head.out.bias");
    return affine(z.data(), z.size(), w.data().data(), b.data().data(), w.dim(1));
}

// Tiny random configuration of the given variant.
inline BrimsConfig random_config(Variant v, std::mt19937_64& rng, bool allow_rows = true) {
    auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    BrimsConfig cfg;
    cfg.variant = v;
    cfg.cell = pick(0, 1) ? CellKind::Lstm : CellKind::Gru;
    cfg.input_size = pick(1, 3);
    cfg.embed_size = pick(2, 5);
    const bool single_layer = v == Variant::Lstm || v == Variant::Rims;
    const bool single_module = v == Variant::Lstm || v == Variant::LstmH || v == Variant::LstmHB ||
                               v == Variant::LstmHA || v == Variant::LstmHAB;
    const std::size_t layers = single_layer ? 1 : pick(2, 3);
    cfg.modules.clear();
    cfg.active.clear();
    cfg.module_size.clear();
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t n = single_module ? 1 : pick(1, 4);
        cfg.modules.push_back(n);
        cfg.active.push_back(pick(1, n));
        cfg.module_size.push_back(pick(1, 5));
    }
    if (v == Variant::MldRims) {
        cfg.modules.assign(layers, cfg.modules[0]);
        cfg.active.assign(layers, cfg.active[0]);
    }
    cfg.attention_size = pick(1, 4);
    cfg.value_size = pick(1, 4);
    cfg.comm_attention_size = pick(1, 4);
    if (uses_attention(v)) {
        cfg.heads = pick(1, 2);
        cfg.per_module_rows = allow_rows && pick(0, 3) == 0;
    } else {
        cfg.heads = 1;
    }
    cfg.head = HeadKind::Regression;
    cfg.outputs = pick(1, 2);
    validate(cfg);
    return cfg;
}

}  // namespace brims::oracle
