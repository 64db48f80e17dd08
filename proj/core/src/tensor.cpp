#include "ldnet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace ldnet {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kBatchNorm2d: return "batchnorm2d";
    case OpKind::kMaxPool2d: return "maxpool2d";
    case OpKind::kUpsample2x: return "upsample2x";
    case OpKind::kConcatChannels: return "concat_channels";
    case OpKind::kSliceChannels: return "slice_channels";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kMulBroadcastChannels: return "mul_broadcast_channels";
    case OpKind::kMaskMul: return "mask_mul";
    case OpKind::kScale: return "scale";
    case OpKind::kSum: return "sum";
    case OpKind::kWeightedSum: return "weighted_sum";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
  }
  return "unknown";
}

std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

namespace {
thread_local bool g_grad_enabled = true;
std::atomic<int> g_broken_op{-1};
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace fault_injection {
void break_backward(std::optional<OpKind> kind) {
  g_broken_op.store(kind ? static_cast<int>(*kind) : -1);
}
std::optional<OpKind> broken_backward() {
  int v = g_broken_op.load();
  if (v < 0) return std::nullopt;
  return static_cast<OpKind>(v);
}
}  // namespace fault_injection

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad)
    : Tensor(shape, std::vector<T>(ldnet::numel(shape), fill), requires_grad) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one axis");
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0) {
      throw std::invalid_argument("tensor extent " + std::to_string(i) + " must be positive, shape " +
                                  to_string(shape));
    }
  }
  if (ldnet::numel(shape) != values.size()) {
    throw std::invalid_argument("tensor shape " + to_string(shape) + " holds " +
                                std::to_string(ldnet::numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  node_ = std::make_shared<TensorNode<T>>();
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
  node_->id = next_node_id();
}

template <typename T>
Tensor<T> Tensor<T>::from_node(std::shared_ptr<TensorNode<T>> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + to_string(shape()));
  return node_->values[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->values, false);
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw std::invalid_argument("backward() requires a scalar, got shape " + to_string(shape()));
  }
  // Iterative post-order DFS gives a topological order of the recorded DAG.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> visited;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* rec = node->producer.get();
    if (rec && next < rec->inputs.size()) {
      TensorNode<T>* child = rec->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += T{1};

  const auto broken = fault_injection::broken_backward();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* node = *it;
    auto* rec = node->producer.get();
    if (!rec || node->grad.empty()) continue;
    for (auto& in : rec->inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
    if (broken && *broken == rec->kind) {
      TensorNode<T> distorted = *node;
      for (auto& g : distorted.grad) g *= T{1.5};
      rec->backward(*rec, distorted);
    } else {
      rec->backward(*rec, *node);
    }
  }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace ldnet
