#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace brims {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Error taxonomy shared by every module. Validation-type errors (bad
// configuration, bad arguments) map to CLI exit code 1, the rest to 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

class GraphError : public Error {
public:
    using Error::Error;
};

class DeterminismError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

namespace detail {
struct Tape;
struct TensorImpl;
}  // namespace detail

/// Reference-counted handle to a dense row-major array of doubles.
///
/// Copies of a Tensor alias the same storage. Operations in ops.hpp never
/// write into their inputs; they allocate fresh outputs and, when a Graph is
/// active and some input requires a gradient, record a backward closure.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Direct write access. Intended for leaves (parameters, perturbation in
    // gradient checks); writing into a recorded intermediate invalidates it.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t flat_index) const { return data()[flat_index]; }

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool is_leaf() const;

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();  // allocates zeros on first use
    void zero_grad();
    void clear_grad();

    /// Same values, new storage, no gradient tracking.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl) { return Tensor(std::move(impl)); }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of primitive applications for one differentiable
/// computation (typically one unrolled sequence).
///
/// Entries are appended as operations run inside a GraphScope, so the order
/// is topological by construction.
class Graph {
public:
    Graph();
    ~Graph();
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) noexcept;
    Graph& operator=(Graph&&) noexcept;

    std::size_t size() const;
    /// Primitive name of entry i.
    std::string op(std::size_t i) const;
    /// True iff every input of entry i is a leaf or the output of an earlier entry.
    bool topologically_ordered() const;

    /// Number of entries visited by the most recent backward call.
    std::size_t last_backward_visits() const;

private:
    std::shared_ptr<detail::Tape> tape_;
    friend class GraphScope;
    friend void backward(const Tensor& loss);
};

/// Makes `graph` the recording target for operations on this thread until
/// destruction. Scopes nest; the previous target is restored.
class GraphScope {
public:
    explicit GraphScope(Graph& graph);
    ~GraphScope();
    GraphScope(const GraphScope&) = delete;
    GraphScope& operator=(const GraphScope&) = delete;

private:
    std::shared_ptr<detail::Tape> previous_;
};

/// Turns recording off on this thread for the scope's lifetime.
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    std::shared_ptr<detail::Tape> previous_;
};

bool recording();

/// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls;
/// intermediate gradients are reset at the start of each call.
void backward(const Tensor& loss);

}  // namespace brims
