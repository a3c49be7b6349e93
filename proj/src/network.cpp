#include "brims/network.hpp"

#include <algorithm>
#include <numeric>

#include "brims/ops.hpp"

namespace brims {

namespace {

template <typename F>
void visit_affine(const std::string& name, Affine& a, F& f) {
    f(name + ".weight", a.weight);
    f(name + ".bias", a.bias);
}

template <typename F>
void visit_group(const std::string& name, GroupAffine& g, F& f) {
    f(name + ".weight", g.weight);
    if (g.bias.defined()) f(name + ".bias", g.bias);
}

template <typename F>
void visit_layer(const std::string& name, Network::Layer& layer, F& f) {
    if (layer.attention) {
        visit_group(name + ".read.query", layer.read.query, f);
        f(name + ".read.null_key", layer.read.null_key);
        f(name + ".read.null_value", layer.read.null_value);
        for (std::size_t i = 0; i < layer.read.sources.size(); ++i) {
            const std::string src = name + (i == 0 ? ".read.bottom_up" : ".read.top_down");
            visit_affine(src + ".key", layer.read.sources[i].key, f);
            visit_affine(src + ".value", layer.read.sources[i].value, f);
        }
    }
    visit_group(name + ".cell.input", layer.cell.input, f);
    visit_group(name + ".cell.hidden", layer.cell.hidden, f);
    if (layer.communication) {
        visit_group(name + ".comm.query", layer.comm_query, f);
        visit_group(name + ".comm.key", layer.comm_key, f);
        visit_group(name + ".comm.value", layer.comm_value, f);
    }
}

Tensor flatten_modules(const Tensor& t) {
    if (t.rank() == 2) return t;
    return ops::reshape(t, {t.dim(0), t.numel() / t.dim(0)});
}

}  // namespace

std::vector<std::size_t> select_active(std::span<const double> null_scores, std::size_t active) {
    if (active > null_scores.size()) {
        throw ValidationError("cannot activate " + std::to_string(active) + " of " +
                              std::to_string(null_scores.size()) + " modules");
    }
    std::vector<std::size_t> order(null_scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return null_scores[a] < null_scores[b]; });
    order.resize(active);
    std::sort(order.begin(), order.end());
    return order;
}

Network Network::make(const BrimsConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    Network net;
    net.cfg_ = cfg;
    Rng rng(seed);
    net.encoder_ = Affine::init(cfg.input_size, cfg.embed_size, rng);
    const std::size_t layers = cfg.layers();
    net.layers_.resize(layers);
    const bool attention = uses_attention(cfg.variant);
    for (std::size_t l = 0; l < layers; ++l) {
        Layer& layer = net.layers_[l];
        const std::size_t n = cfg.modules[l], width = cfg.module_size[l];
        layer.attention = attention;
        if (attention) {
            std::vector<std::size_t> sources{net.lower_width(l)};
            if (net.has_top_down(l)) {
                sources.push_back(cfg.per_module_rows ? cfg.module_size[l + 1] : cfg.layer_width(l + 1));
            }
            layer.read = ProjectionSet::init(n, width, sources, cfg.heads * cfg.attention_size,
                                             cfg.heads * cfg.value_size, true, rng);
            layer.cell = CellParams::init(cfg.cell, n, cfg.heads * cfg.value_size, width, rng);
        } else {
            std::size_t d_in = net.lower_width(l);
            if (net.has_top_down(l)) d_in += cfg.layer_width(l + 1);
            layer.cell = CellParams::init(cfg.cell, n, d_in, width, rng);
        }
        layer.communication = uses_communication(cfg.variant);
        if (layer.communication) {
            layer.comm_query = GroupAffine::init(n, width, cfg.comm_attention_size, rng);
            layer.comm_key = GroupAffine::init(n, width, cfg.comm_attention_size, rng);
            layer.comm_value = GroupAffine::init(n, width, width, rng);
        }
    }
    const std::size_t top = cfg.layer_width(layers - 1);
    if (cfg.head == HeadKind::Classification) {
        net.head_hidden_ = Affine::init(top, cfg.head_hidden, rng);
        net.head_out_ = Affine::init(cfg.head_hidden, cfg.outputs, rng);
    } else {
        net.head_out_ = Affine::init(top, cfg.outputs, rng);
    }
    return net;
}

ParameterList Network::parameters() const {
    ParameterList out;
    auto collect = [&out](const std::string& name, Tensor& t) { out.push_back({name, t}); };
    auto& self = const_cast<Network&>(*this);
    visit_affine("encoder", self.encoder_, collect);
    for (std::size_t l = 0; l < layers_.size(); ++l) visit_layer("layer" + std::to_string(l), self.layers_[l], collect);
    if (head_hidden_.weight.defined()) visit_affine("head.hidden", self.head_hidden_, collect);
    visit_affine("head.out", self.head_out_, collect);
    return out;
}

std::size_t Network::parameter_count() const { return count_scalars(parameters()); }

Network Network::clone() const {
    Network copy = *this;
    auto deep = [](const std::string&, Tensor& t) {
        Tensor fresh = t.detach();
        fresh.set_requires_grad(true);
        t = fresh;
    };
    visit_affine("encoder", copy.encoder_, deep);
    for (auto& layer : copy.layers_) visit_layer("", layer, deep);
    if (copy.head_hidden_.weight.defined()) visit_affine("", copy.head_hidden_, deep);
    visit_affine("", copy.head_out_, deep);
    return copy;
}

void Network::zero_communication() {
    auto zero = [](const std::string&, Tensor& t) {
        for (auto& v : t.mutable_data()) v = 0.0;
    };
    for (auto& layer : layers_) {
        if (!layer.communication) continue;
        visit_group("", layer.comm_query, zero);
        visit_group("", layer.comm_key, zero);
        visit_group("", layer.comm_value, zero);
    }
}

Tensor Network::embed(const Tensor& x, bool training, std::uint64_t dropout_seed) const {
    if (x.rank() != 2 || x.dim(1) != cfg_.input_size) {
        throw DimensionError("raw input " + shape_str(x.shape()) + " does not have " +
                             std::to_string(cfg_.input_size) + " features per row");
    }
    return ops::dropout(encoder_(x), cfg_.dropout, dropout_seed, training);
}

NetworkState Network::init_state(std::size_t batch) const {
    NetworkState state;
    for (std::size_t l = 0; l < cfg_.layers(); ++l) {
        LayerState layer;
        layer.h = Tensor::zeros({batch, cfg_.modules[l], cfg_.module_size[l]});
        if (cfg_.cell == CellKind::Lstm) layer.c = Tensor::zeros({batch, cfg_.modules[l], cfg_.module_size[l]});
        std::vector<std::size_t> initial(cfg_.active[l]);
        std::iota(initial.begin(), initial.end(), 0);
        layer.active.assign(batch, initial);
        state.layers.push_back(std::move(layer));
    }
    return state;
}

std::size_t Network::lower_width(std::size_t l) const {
    if (l == 0) return cfg_.embed_size;
    if (layers_.at(l).attention && cfg_.per_module_rows) return cfg_.module_size[l - 1];
    return cfg_.layer_width(l - 1);
}

bool Network::has_top_down(std::size_t l) const { return uses_top_down(cfg_.variant) && l + 1 < cfg_.layers(); }

InterlayerRead Network::interlayer_read(std::size_t l, const Tensor& h_prev, const Tensor& lower,
                                        const Tensor* higher_prev) const {
    const Layer& layer = layers_.at(l);
    if (!layer.attention) throw ValidationError(to_string(cfg_.variant) + " layers have no inter-layer attention");
    if (has_top_down(l) && higher_prev == nullptr) {
        throw DimensionError("layer " + std::to_string(l) + " needs the higher layer's previous state");
    }
    if (!has_top_down(l) && higher_prev != nullptr) {
        throw DimensionError("layer " + std::to_string(l) + " has no top-down source but one was supplied");
    }
    const std::size_t batch = h_prev.dim(0);
    const std::size_t n = cfg_.modules[l];

    const bool rows = cfg_.per_module_rows;
    std::vector<Tensor> sources;
    std::size_t bottom_rows = 1, top_rows = 0;
    if (rows && l > 0) {
        if (lower.rank() != 3) throw DimensionError("per-module reads need the lower layer's module states");
        bottom_rows = lower.dim(1);
        sources.push_back(lower);
    } else {
        sources.push_back(flatten_modules(lower));
    }
    if (higher_prev) {
        if (rows) {
            if (higher_prev->rank() != 3) throw DimensionError("per-module reads need the higher layer's module states");
            top_rows = higher_prev->dim(1);
            sources.push_back(*higher_prev);
        } else {
            top_rows = 1;
            sources.push_back(flatten_modules(*higher_prev));
        }
    }

    const Projection proj = project(layer.read, h_prev, sources);
    AttentionOutput att = attend_heads(proj.queries, proj.keys, proj.values, cfg_.heads);

    InterlayerRead out;
    out.columns = higher_prev ? 3 : 2;
    const std::size_t heads = cfg_.heads;
    const std::size_t total_rows = 1 + bottom_rows + top_rows;
    out.shares.assign(batch * n * out.columns, 0.0);
    const auto s = att.scores.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t k = 0; k < n; ++k) {
                const double* row = s.data() + ((b * heads + h) * n + k) * total_rows;
                double* share = out.shares.data() + (b * n + k) * out.columns;
                share[0] += row[0];
                for (std::size_t r = 0; r < bottom_rows; ++r) share[1] += row[1 + r];
                for (std::size_t r = 0; r < top_rows; ++r) share[2] += row[1 + bottom_rows + r];
            }
        }
    }
    if (heads > 1) {
        for (auto& v : out.shares) v /= static_cast<double>(heads);
    }
    out.scores = std::move(att.scores);
    out.read = std::move(att.result);
    return out;
}

LayerState Network::layer_step(std::size_t l, const Tensor& lower, const Tensor* higher_prev,
                               const LayerState& state, const ActiveSets* copied_active,
                               const std::vector<std::size_t>* forced, LayerTrace* trace) const {
    const Layer& layer = layers_.at(l);
    const std::size_t n = cfg_.modules[l], m = cfg_.active[l], width = cfg_.module_size[l];
    const std::size_t batch = lower.dim(0);
    if (state.h.shape() != Shape{batch, n, width}) {
        throw DimensionError("layer " + std::to_string(l) + " state " + shape_str(state.h.shape()) +
                             " does not match the configuration");
    }
    const bool lstm = cfg_.cell == CellKind::Lstm;
    LayerState next;

    if (!layer.attention) {
        Tensor input = flatten_modules(lower);
        if (has_top_down(l)) {
            if (!higher_prev) throw DimensionError("layer " + std::to_string(l) + " needs top-down feedback");
            input = ops::concat({input, flatten_modules(*higher_prev)}, 1);
        } else if (higher_prev) {
            throw DimensionError("layer " + std::to_string(l) + " has no top-down source but one was supplied");
        }
        input = ops::reshape(input, {batch, 1, input.dim(1)});
        CellState updated = cell_step(layer.cell, input, {state.h, state.c});
        next.h = std::move(updated.h);
        next.c = std::move(updated.c);
        next.active.assign(batch, {0});
        if (trace) {
            *trace = LayerTrace{};
            trace->batch = batch;
            trace->modules = n;
            trace->active = next.active;
        }
        return next;
    }

    InterlayerRead read = interlayer_read(l, state.h, lower, higher_prev);

    if (forced) {
        std::vector<std::size_t> set = *forced;
        std::sort(set.begin(), set.end());
        if (set.size() != m || std::adjacent_find(set.begin(), set.end()) != set.end() || set.back() >= n) {
            throw ValidationError("forced selection for layer " + std::to_string(l) + " must hold " +
                                  std::to_string(m) + " distinct module indices");
        }
        next.active.assign(batch, set);
    } else if (copied_active) {
        next.active = *copied_active;
    } else {
        next.active.resize(batch);
        std::vector<double> null_scores(n);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t k = 0; k < n; ++k) null_scores[k] = read.shares[(b * n + k) * read.columns];
            next.active[b] = select_active(null_scores, m);
        }
    }
    std::vector<std::uint8_t> mask(batch * n, 0);
    for (std::size_t b = 0; b < batch; ++b) {
        for (auto k : next.active[b]) mask[b * n + k] = 1;
    }

    const CellState updated = cell_step(layer.cell, read.read, {state.h, state.c});
    const Tensor h_bar = ops::where(mask, updated.h, state.h);
    if (lstm) next.c = ops::where(mask, updated.c, state.c);

    std::vector<double> comm_scores;
    if (layer.communication) {
        const AttentionOutput comm =
            attend(layer.comm_query(h_bar), layer.comm_key(h_bar), layer.comm_value(h_bar));
        next.h = ops::where(mask, ops::add(h_bar, comm.result), state.h);
        if (trace) comm_scores.assign(comm.scores.data().begin(), comm.scores.data().end());
    } else {
        next.h = h_bar;
    }

    if (trace) {
        trace->batch = batch;
        trace->modules = n;
        trace->columns = read.columns;
        trace->scores = std::move(read.shares);
        trace->active = next.active;
        trace->comm_scores = std::move(comm_scores);
    }
    return next;
}

Network::StepResult Network::step(const Tensor& x, const NetworkState& state, bool record_trace,
                                  const ForcedSelection* forced) const {
    const std::size_t layers = cfg_.layers();
    if (state.layers.size() != layers) {
        throw DimensionError("state has " + std::to_string(state.layers.size()) + " layers, config has " +
                             std::to_string(layers));
    }
    if (x.rank() != 2 || x.dim(1) != cfg_.embed_size || x.dim(0) != state.batch()) {
        throw DimensionError("step input " + shape_str(x.shape()) + " must be [batch x " +
                             std::to_string(cfg_.embed_size) + "]");
    }
    StepResult result;
    result.state.layers.resize(layers);
    if (record_trace) result.trace.layers.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        const Tensor& lower = l == 0 ? x : result.state.layers[l - 1].h;
        const Tensor* higher = has_top_down(l) ? &state.layers[l + 1].h : nullptr;
        const ActiveSets* copied =
            (cfg_.variant == Variant::MldRims && l > 0) ? &result.state.layers[0].active : nullptr;
        const std::vector<std::size_t>* forced_l = nullptr;
        if (forced && l < forced->size() && !(*forced)[l].empty()) forced_l = &(*forced)[l];
        result.state.layers[l] = layer_step(l, lower, higher, state.layers[l], copied, forced_l,
                                            record_trace ? &result.trace.layers[l] : nullptr);
    }
    return result;
}

Network::UnrollResult Network::unroll(const std::vector<Tensor>& sequence, const NetworkState& init,
                                      bool record_trace, const std::vector<ForcedSelection>* forced) const {
    if (sequence.empty()) throw ValidationError("cannot unroll an empty sequence");
    if (forced && forced->size() != sequence.size()) {
        throw ValidationError("forced selections must cover every step");
    }
    UnrollResult out;
    NetworkState state = init;
    for (std::size_t t = 0; t < sequence.size(); ++t) {
        StepResult r = step(sequence[t], state, record_trace, forced ? &(*forced)[t] : nullptr);
        state = std::move(r.state);
        if (record_trace) out.traces.push_back(std::move(r.trace));
    }
    out.final_state = std::move(state);
    return out;
}

Tensor Network::top_state(const NetworkState& state) const { return flatten_modules(state.layers.back().h); }

Tensor Network::head(const NetworkState& state) const {
    const Tensor top = top_state(state);
    if (cfg_.head == HeadKind::Classification) return head_out_(ops::relu(head_hidden_(top)));
    return head_out_(top);
}

Network make_variant(const BrimsConfig& cfg, std::uint64_t seed) { return Network::make(cfg, seed); }

NetworkState init_state(const Network& net, std::size_t batch) { return net.init_state(batch); }

std::size_t parameter_count(const Network& net) { return net.parameter_count(); }

BrimsConfig matched_baseline(const BrimsConfig& reference, Variant baseline) {
    BrimsConfig cfg = reference;
    cfg.variant = baseline;
    cfg.heads = 1;
    cfg.per_module_rows = false;
    if (baseline == Variant::Lstm || baseline == Variant::LstmH || baseline == Variant::LstmHB ||
        baseline == Variant::LstmHA || baseline == Variant::LstmHAB) {
        cfg.cell = CellKind::Lstm;
    }
    std::size_t layers = reference.layers();
    if (baseline == Variant::Lstm || baseline == Variant::Rims) layers = 1;
    if (layers < 2 && baseline != Variant::Lstm && baseline != Variant::Rims && baseline != Variant::Brims) layers = 2;
    const bool single = baseline != Variant::Rims && baseline != Variant::HierRims &&
                        baseline != Variant::MldRims && baseline != Variant::Brims;
    if (single) {
        cfg.modules.assign(layers, 1);
        cfg.active.assign(layers, 1);
    } else {
        cfg.modules.resize(layers, reference.modules.back());
        cfg.active.resize(layers, reference.active.back());
    }
    cfg.module_size.assign(layers, 1);

    const std::size_t target = Network::make(reference, 0).parameter_count();
    auto count_for = [&](std::size_t width) {
        BrimsConfig c = cfg;
        c.module_size.assign(layers, width);
        return Network::make(c, 0).parameter_count();
    };
    std::size_t lo = 1, hi = 1;
    while (count_for(hi) < target) hi *= 2;
    while (lo < hi) {
        const std::size_t mid = (lo + hi) / 2;
        if (count_for(mid) < target) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    std::size_t best = lo;
    if (lo > 1) {
        const auto above = count_for(lo), below = count_for(lo - 1);
        if (target - below < above - target) best = lo - 1;
    }
    cfg.module_size.assign(layers, best);
    validate(cfg);
    return cfg;
}

}  // namespace brims
