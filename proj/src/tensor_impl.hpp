#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "brims/tensor.hpp"

namespace brims::detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool leaf = true;
    std::weak_ptr<Tape> tape;
    std::size_t tape_index = 0;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

struct TensorImpl;
// Receives the output (values and accumulated gradient) of its entry.
using BackwardFn = std::function<void(const TensorImpl& out)>;

struct Entry {
    const char* op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
};

struct Tape {
    std::vector<Entry> entries;
    std::size_t last_visits = 0;
};

std::shared_ptr<Tape>& current_tape();

/// Builds an operation result. Checks finiteness (naming `op` on failure) and,
/// when recording and any input needs a gradient, appends a graph entry.
Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   const std::vector<Tensor>& inputs, BackwardFn backward);

/// Gradient buffer of `t` if it participates in differentiation, else null.
inline std::vector<double>* grad_sink(const Tensor& t) {
    auto* impl = t.impl().get();
    if (!impl->requires_grad) return nullptr;
    return &impl->ensure_grad();
}

}  // namespace brims::detail
