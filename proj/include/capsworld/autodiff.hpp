#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "capsworld/tensor.hpp"

namespace capsworld::ad {

template <typename T>
class Graph;

/// Handle to a value recorded on a Graph. Cheap to copy; valid while the
/// owning Graph is alive.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::uint32_t id) : graph_(graph), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Shape& shape() const;
  std::span<const T> value() const;
  /// Gradient computed by the last backward pass (empty if unreachable).
  std::span<const T> grad() const;
  std::size_t size() const { return value().size(); }
  /// The single element of a one-element value.
  T item() const;

 private:
  Graph<T>* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Tape of executed operations. Nodes are appended in execution order, so
/// the tape is always topologically sorted; backward walks it in reverse.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::span<const T> out_grad)>;

  struct Options {
    /// Raise NumericDomainError on near-zero denominators in div.
    bool checked = false;
    /// Fold every branch decision (relu side, max winner) into a signature
    /// so finite-difference checks can detect crossed kinks.
    bool track_branches = false;
  };

  Graph() = default;
  explicit Graph(Options options) : options_(options) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> t);
  Var<T> constant(Shape shape, std::vector<T> values);
  Var<T> scalar(T v) { return constant(Shape{}, {v}); }

  /// Leaf bound to an external tensor. When the tensor requires a gradient,
  /// backward() adds dLoss/dTensor into tensor.grad().
  Var<T> param(Tensor<T>& t);

  /// Same value, no gradient flow.
  Var<T> detach(Var<T> v);

  /// Reverse pass from a one-element loss. Node gradients are recomputed
  /// from scratch on every call; leaf tensor gradients accumulate.
  void backward(Var<T> loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Options& options() const noexcept { return options_; }

  // Op-implementation interface.
  Var<T> record(Shape shape, std::vector<T> value, bool needs_grad, BackwardFn backward);
  const Shape& shape(std::uint32_t id) const { return nodes_[id].shape; }
  std::span<const T> value(std::uint32_t id) const { return nodes_[id].value; }
  std::span<const T> grad(std::uint32_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }
  /// Gradient accumulator of a node, zero-initialised on first access.
  std::span<T> grad_buffer(std::uint32_t id);

  void note_branch(std::uint64_t decision) {
    if (options_.track_branches) {
      signature_ = (signature_ ^ (decision + 0x9E3779B97F4A7C15ULL)) * 0x100000001B3ULL;
      ++branch_count_;
    }
  }
  std::uint64_t branch_signature() const noexcept { return signature_; }
  std::uint64_t branch_count() const noexcept { return branch_count_; }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    BackwardFn backward;
    Tensor<T>* leaf = nullptr;
  };

  // deque keeps node storage stable while the tape grows.
  std::deque<Node> nodes_;
  Options options_{};
  std::uint64_t signature_ = 0xCBF29CE484222325ULL;
  std::uint64_t branch_count_ = 0;
};

// Elementwise binary ops with trailing-dimension (numpy-style) broadcasting.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> div(Var<T> a, Var<T> b);
/// Elementwise max; gradient goes to the larger input, ties to `a`.
template <typename T> Var<T> max_binary(Var<T> a, Var<T> b);

template <typename T> Var<T> add_scalar(Var<T> a, T s);
template <typename T> Var<T> scale(Var<T> a, T s);

template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);
template <typename T> Var<T> tanh(Var<T> x);
template <typename T> Var<T> square(Var<T> x);
template <typename T> Var<T> log(Var<T> x);

/// [m x n] . [n x p] -> [m x p]
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// 2-D transpose.
template <typename T> Var<T> transpose(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);

/// Valid cross-correlation. x: [C_in x W], kernels: [C_out x C_in x K],
/// bias: [C_out] (pass an invalid Var for none).
template <typename T> Var<T> conv1d(Var<T> x, Var<T> kernels, Var<T> bias, std::size_t stride);
/// Adjoint of conv1d. x: [C_in x W], kernels: [C_in x C_out x K],
/// output width (W - 1) * stride + K.
template <typename T>
Var<T> conv_transpose1d(Var<T> x, Var<T> kernels, Var<T> bias, std::size_t stride);

enum class ReduceKind { sum, mean, max, logsumexp };
template <typename T> Var<T> reduce(Var<T> x, ReduceKind kind, std::size_t axis, bool keepdim = false);
template <typename T> Var<T> sum_all(Var<T> x);
template <typename T> Var<T> mean_all(Var<T> x);
template <typename T> Var<T> softmax(Var<T> x, std::size_t axis);

template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
/// Half-open range [begin, end) along `axis`.
template <typename T> Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end);

/// Output width of a valid convolution; throws DimensionError when K > W.
std::size_t conv_output_width(std::size_t width, std::size_t kernel, std::size_t stride);
std::size_t conv_transpose_output_width(std::size_t width, std::size_t kernel, std::size_t stride);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <typename T> Var<T> operator/(Var<T> a, Var<T> b) { return div(a, b); }

}  // namespace capsworld::ad
