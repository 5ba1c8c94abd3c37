#include "sslab/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "sslab/errors.hpp"

namespace sslab {

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_next_order = 0;

std::shared_ptr<detail::Node> new_node(Shape shape, Buffer value, bool requires_grad) {
  if (numel(shape) != value.size()) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                     std::to_string(value.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->order = t_next_order++;
  return node;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (const auto d : shape) {
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    out << (i ? "x" : "") << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar{0}, requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  const auto n = sslab::numel(shape);
  return Tensor(new_node(std::move(shape), Buffer(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<Scalar> values, bool requires_grad) {
  return Tensor(new_node(std::move(shape), Buffer(values.begin(), values.end()), requires_grad));
}

Tensor Tensor::scalar(Scalar value) { return from({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!node_) {
    throw ContractError("use of undefined tensor");
  }
  return node_->shape;
}

std::size_t Tensor::dim(int axis) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return sslab::numel(shape()); }

std::span<const Scalar> Tensor::data() const {
  shape();
  return node_->value;
}

std::span<Scalar> Tensor::mutable_data() {
  shape();
  if (node_->backward) {
    throw ContractError("mutable_data() on a non-leaf tensor");
  }
  return node_->value;
}

Scalar Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const Scalar> Tensor::grad() const {
  if (!has_grad()) {
    throw ContractError("tensor has no gradient");
  }
  return node_->grad;
}

std::span<Scalar> Tensor::mutable_grad() {
  shape();
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) {
    node_->grad.clear();
  }
}

Tensor Tensor::detach() const {
  return Tensor(new_node(shape(), node_->value, false));
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

ComputationTape ComputationTape::record(const Tensor& root) {
  ComputationTape tape;
  if (!root.requires_grad()) {
    return tape;
  }
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.node()};
  tape.keep_alive_.push_back(root.node_ptr());
  seen.insert(root.node());
  while (!stack.empty()) {
    auto* node = stack.back();
    stack.pop_back();
    tape.nodes_.push_back(node);
    for (const auto& in : node->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) {
        tape.keep_alive_.push_back(in);
        stack.push_back(in.get());
      }
    }
  }
  // Creation order is a valid topological order: inputs always exist before
  // the ops that consume them.
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->order < b->order; });
  return tape;
}

void ComputationTape::replay_adjoints() {
  if (nodes_.empty()) {
    return;
  }
  for (auto* node : nodes_) {
    node->ensure_grad();
  }
  auto* root = nodes_.back();
  std::fill(root->grad.begin(), root->grad.end(), Scalar{1});
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto* node = *it;
    if (node->backward) {
      node->backward(*node);
    }
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward(): loss does not depend on any tensor that requires grad");
  }
  if (loss.node()->consumed) {
    throw ContractError("backward() called twice on the same loss; rebuild the graph first");
  }
  auto tape = ComputationTape::record(loss);
  tape.replay_adjoints();
  loss.node()->consumed = true;
  // Interior history is no longer needed; drop it so activations can be freed.
  for (auto* node : tape.nodes()) {
    if (node->backward) {
      node->backward = nullptr;
      node->inputs.clear();
    }
  }
}

namespace detail {

Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> inputs,
                   BackwardFn backward) {
  bool track = false;
  if (t_grad_enabled) {
    for (const auto& t : inputs) {
      track = track || t.requires_grad();
    }
  }
  auto node = new_node(std::move(shape), std::move(value), track);
  if (track) {
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) {
      node->inputs.push_back(t.node_ptr());
    }
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace sslab
