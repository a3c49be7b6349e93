#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "brims/attention.hpp"
#include "brims/cells.hpp"
#include "brims/config.hpp"
#include "brims/params.hpp"

namespace brims {

/// Active module indices, one sorted set per batch element.
using ActiveSets = std::vector<std::vector<std::size_t>>;

/// One layer at one time step: all module states plus the active set S.
struct LayerState {
    Tensor h;  // [batch x modules x module_size]
    Tensor c;  // LSTM cells only
    ActiveSets active;
};

struct NetworkState {
    std::vector<LayerState> layers;
    std::size_t batch() const { return layers.front().h.dim(0); }
};

/// Attention telemetry for one layer at one step.
struct LayerTrace {
    std::size_t batch = 0;
    std::size_t modules = 0;
    // 3 with a top-down source, 2 without, 0 for layers without attention.
    std::size_t columns = 0;
    // [batch x modules x columns] source shares in order (null, bottom-up,
    // top-down), averaged over heads and summed over each source's rows.
    std::vector<double> scores;
    ActiveSets active;
    std::vector<double> comm_scores;  // [batch x modules x modules], may be empty

    double share(std::size_t b, std::size_t k, std::size_t column) const {
        return scores[(b * modules + k) * columns + column];
    }
};

struct StepTrace {
    std::vector<LayerTrace> layers;
};

/// Result of the inter-layer read of one layer.
struct InterlayerRead {
    Tensor scores;  // [batch x heads x modules x rows], differentiable
    Tensor read;    // [batch x modules x heads*value_size], module k's personalized input
    std::size_t columns = 0;
    std::vector<double> shares;  // [batch x modules x columns], see LayerTrace::scores
};

/// Indices of the `active` modules with the smallest null score; ties go to
/// the lower index. `null_scores` has one entry per module. Result is sorted.
std::vector<std::size_t> select_active(std::span<const double> null_scores, std::size_t active);

/// Forced active sets for one step: one entry per layer, each applied to every
/// batch element. An empty entry leaves that layer's selection to attention.
using ForcedSelection = std::vector<std::vector<std::size_t>>;

/// Parameters and step functions of one architecture from the variant family.
///
/// Immutable during evaluation; step functions are const and may run
/// concurrently on distinct states.
class Network {
public:
    struct Layer {
        bool attention = false;
        ProjectionSet read;  // attention variants
        CellParams cell;
        bool communication = false;
        GroupAffine comm_query, comm_key, comm_value;
    };

    struct StepResult {
        NetworkState state;
        StepTrace trace;
    };

    struct UnrollResult {
        NetworkState final_state;
        std::vector<StepTrace> traces;  // empty unless requested
    };

    /// Builds and initializes the architecture described by `cfg` (validated).
    static Network make(const BrimsConfig& cfg, std::uint64_t seed);

    const BrimsConfig& config() const { return cfg_; }
    const Layer& layer(std::size_t l) const { return layers_.at(l); }
    Layer& mutable_layer(std::size_t l) { return layers_.at(l); }
    const Affine& encoder() const { return encoder_; }

    ParameterList parameters() const;
    std::size_t parameter_count() const;
    /// Deep copy with fresh parameter storage.
    Network clone() const;
    /// Sets every within-layer communication parameter to zero.
    void zero_communication();

    /// Raw features [batch x input_size] -> embedding [batch x embed_size],
    /// with dropout applied in training mode only.
    Tensor embed(const Tensor& x, bool training, std::uint64_t dropout_seed) const;

    /// All-zero hidden (and cell) states; active sets {0..m_l-1}.
    NetworkState init_state(std::size_t batch) const;

    /// Width of the bottom-up source read by layer l.
    std::size_t lower_width(std::size_t l) const;
    bool has_top_down(std::size_t l) const;

    /// Per-module attention over (null, bottom-up[, top-down]) for layer l.
    /// `lower` is the embedded input (l = 0) or the current-step state of layer
    /// l-1; `higher_prev` is the previous-step state of layer l+1 and must be
    /// null when the layer has no top-down source.
    InterlayerRead interlayer_read(std::size_t l, const Tensor& h_prev, const Tensor& lower,
                                   const Tensor* higher_prev) const;

    /// Read, select, update the active modules, then communicate within the
    /// layer. Inactive modules are carried over bitwise.
    LayerState layer_step(std::size_t l, const Tensor& lower, const Tensor* higher_prev, const LayerState& state,
                          const ActiveSets* copied_active = nullptr, const std::vector<std::size_t>* forced = nullptr,
                          LayerTrace* trace = nullptr) const;

    /// One time step over all layers, bottom to top.
    StepResult step(const Tensor& x, const NetworkState& state, bool record_trace = false,
                    const ForcedSelection* forced = nullptr) const;

    /// Folds step over an embedded sequence. `forced`, when given, holds one
    /// ForcedSelection per step.
    UnrollResult unroll(const std::vector<Tensor>& sequence, const NetworkState& init, bool record_trace = false,
                        const std::vector<ForcedSelection>* forced = nullptr) const;

    /// Flattened top-layer hidden state [batch x width].
    Tensor top_state(const NetworkState& state) const;
    /// Output head on the final top-layer state: predictions [batch x outputs]
    /// (regression) or logits (classification).
    Tensor head(const NetworkState& state) const;

private:
    BrimsConfig cfg_;
    Affine encoder_;
    std::vector<Layer> layers_;
    Affine head_hidden_;
    Affine head_out_;
};

/// Architecture from a config; same as Network::make.
Network make_variant(const BrimsConfig& cfg, std::uint64_t seed);
NetworkState init_state(const Network& net, std::size_t batch);
std::size_t parameter_count(const Network& net);

/// Config of the given single-module baseline variant whose width is chosen so
/// that its parameter count is closest to `reference`'s.
BrimsConfig matched_baseline(const BrimsConfig& reference, Variant baseline);

}  // namespace brims
