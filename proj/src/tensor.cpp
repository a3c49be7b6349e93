#include "brims/tensor.hpp"

#include <cmath>
#include <sstream>

#include "tensor_impl.hpp"

namespace brims {

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto extent : shape) n *= extent;
    return n;
}

namespace {

void check_shape(const Shape& shape) {
    for (auto extent : shape) {
        if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
}

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape, std::vector<double> values, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor of shape " + shape_str(shape) + " given " + std::to_string(values.size()) +
                             " values");
    }
    for (double v : values) {
        if (!std::isfinite(v)) throw NonFiniteError("non-finite value in tensor construction");
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> values(shape_numel(shape), value);
    return Tensor(new_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    return Tensor(new_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(impl_->shape));
    }
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
    if (impl_->data.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(impl_->shape));
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { impl_->requires_grad = flag; }
bool Tensor::is_leaf() const { return impl_->leaf; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }
std::span<double> Tensor::mutable_grad() { return impl_->ensure_grad(); }

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::clear_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

namespace detail {

std::shared_ptr<Tape>& current_tape() {
    thread_local std::shared_ptr<Tape> tape;
    return tape;
}

Tensor make_result(const char* op, Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                   BackwardFn backward_fn) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NonFiniteError(std::string("non-finite value produced by ") + op);
        }
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);

    auto& tape = current_tape();
    bool needs_grad = false;
    if (tape) {
        for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
    }
    if (needs_grad) {
        impl->requires_grad = true;
        impl->leaf = false;
        impl->tape = tape;
        impl->tape_index = tape->entries.size();
        Entry entry{op, {}, impl, std::move(backward_fn)};
        entry.inputs.reserve(inputs.size());
        for (const auto& in : inputs) entry.inputs.push_back(in.impl());
        tape->entries.push_back(std::move(entry));
    }
    return Tensor::wrap(std::move(impl));
}

}  // namespace detail

Graph::Graph() : tape_(std::make_shared<detail::Tape>()) {}
Graph::~Graph() = default;
Graph::Graph(Graph&&) noexcept = default;
Graph& Graph::operator=(Graph&&) noexcept = default;

std::size_t Graph::size() const { return tape_->entries.size(); }
std::string Graph::op(std::size_t i) const { return tape_->entries.at(i).op; }
std::size_t Graph::last_backward_visits() const { return tape_->last_visits; }

bool Graph::topologically_ordered() const {
    for (std::size_t i = 0; i < tape_->entries.size(); ++i) {
        for (const auto& in : tape_->entries[i].inputs) {
            if (in->leaf) continue;
            if (in->tape.lock() != tape_ || in->tape_index >= i) return false;
        }
    }
    return true;
}

GraphScope::GraphScope(Graph& graph) : previous_(detail::current_tape()) { detail::current_tape() = graph.tape_; }
GraphScope::~GraphScope() { detail::current_tape() = previous_; }

NoGradScope::NoGradScope() : previous_(detail::current_tape()) { detail::current_tape() = nullptr; }
NoGradScope::~NoGradScope() { detail::current_tape() = previous_; }

bool recording() { return detail::current_tape() != nullptr; }

void backward(const Tensor& loss) {
    if (!loss.defined()) throw GraphError("backward on undefined tensor");
    if (loss.numel() != 1) throw GraphError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    auto* root = loss.impl().get();
    auto tape = root->tape.lock();
    if (root->leaf || !tape) throw GraphError("loss is not recorded on a live graph");

    auto& entries = tape->entries;
    const std::size_t last = root->tape_index;
    for (std::size_t i = 0; i <= last; ++i) entries[i].output->grad.clear();
    root->ensure_grad()[0] = 1.0;

    std::size_t visits = 0;
    for (std::size_t i = last + 1; i-- > 0;) {
        auto& entry = entries[i];
        if (entry.output->grad.empty()) continue;
        entry.backward(*entry.output);
        ++visits;
    }
    tape->last_visits = visits;
}

}  // namespace brims
