#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ldnet {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Primitive kinds recorded on the tape.
enum class OpKind : std::uint8_t {
  kConv2d,
  kRelu,
  kSigmoid,
  kBatchNorm2d,
  kMaxPool2d,
  kUpsample2x,
  kConcatChannels,
  kSliceChannels,
  kAdd,
  kMul,
  kMulBroadcastChannels,
  kMaskMul,
  kScale,
  kSum,
  kWeightedSum,
  kSoftmaxCrossEntropy,
};

std::string_view op_name(OpKind kind);

template <typename T>
struct TensorNode;

/// One recorded forward operation. `backward` reads the output gradient and
/// accumulates into the gradient buffers of `inputs` that require gradients.
template <typename T>
struct OpRecord {
  using BackwardFn = std::function<void(OpRecord&, const TensorNode<T>&)>;

  OpKind kind;
  std::vector<std::shared_ptr<TensorNode<T>>> inputs;
  BackwardFn backward;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::shared_ptr<OpRecord<T>> producer;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T{0});
  }
};

std::uint64_t next_node_id();

// Gradient recording is on by default and thread-local.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor handle. Copies share the underlying node, which is
/// what lets a parameter appear in several graphs over its lifetime.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), T{0}, requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), T{1}, requires_grad);
  }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }
  static Tensor from_node(std::shared_ptr<TensorNode<T>> node);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->values.size(); }

  std::span<const T> values() const { return node_->values; }
  std::span<T> mutable_values() { return node_->values; }
  const std::vector<T>& vector() const { return node_->values; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  std::uint64_t id() const { return node_->id; }
  bool is_leaf() const { return !node_->producer; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

  T item() const;
  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return node_->values[offset(n, c, h, w)];
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return node_->values[offset(n, c, h, w)];
  }

  /// Fresh leaf holding a copy of the values.
  Tensor detach() const;

  /// Reverse-mode sweep from this scalar; gradients add into every reachable
  /// node that requires them.
  void backward() const;

 private:
  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const auto& s = node_->shape;
    return ((n * s[1] + c) * s[2] + h) * s[3] + w;
  }

  std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

/// Creates the output tensor of a primitive and, when any input requires
/// gradients and recording is on, attaches its OpRecord.
template <typename T>
Tensor<T> record(OpKind kind, Shape shape, std::vector<T> values,
                 std::initializer_list<Tensor<T>> inputs,
                 typename OpRecord<T>::BackwardFn backward) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->id = next_node_id();
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any && grad_enabled()) {
    auto rec = std::make_shared<OpRecord<T>>();
    rec->kind = kind;
    for (const auto& in : inputs) rec->inputs.push_back(in.node());
    rec->backward = std::move(backward);
    node->requires_grad = true;
    node->producer = std::move(rec);
  }
  return Tensor<T>::from_node(std::move(node));
}

}  // namespace detail

// Mutation hook for the gradient-check harness: the named op's backward rule
// receives a distorted upstream gradient.
namespace fault_injection {
void break_backward(std::optional<OpKind> kind);
std::optional<OpKind> broken_backward();
}  // namespace fault_injection

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ldnet
