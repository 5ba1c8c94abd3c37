#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace sslab {

#ifdef SSLAB_USE_FLOAT32
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage. Vectorized kernels split loops by address, so a
// fixed alignment keeps results bit-reproducible from run to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

using Buffer = std::vector<Scalar, AlignedAllocator<Scalar>>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the autodiff graph. `backward` reads `grad` of this node and
// accumulates into the grads of `inputs`.
struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t order = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) {
      grad.assign(value.size(), Scalar{0});
    }
  }
};

}  // namespace detail

// Handle to a dense row-major array. Copies share storage; ops never mutate
// their inputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Scalar> values, bool requires_grad = false);
  static Tensor scalar(Scalar value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative indices count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const Scalar> data() const;
  // Writable view of a leaf. Throws ContractError on op results.
  std::span<Scalar> mutable_data();
  Scalar item() const;
  Scalar at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const Scalar> grad() const;
  std::span<Scalar> mutable_grad();
  void zero_grad();

  // New leaf holding a copy of the values with no history.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Whether newly created op results record history (thread local).
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

// Ordered record of the nodes reachable from a loss, in creation order.
// Replaying adjoints walks it back to front, visiting each node once.
class ComputationTape {
 public:
  static ComputationTape record(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<detail::Node*>& nodes() const { return nodes_; }

  // Seeds the root adjoint with 1 and replays every node in reverse order.
  void replay_adjoints();

 private:
  std::vector<detail::Node*> nodes_;
  std::vector<std::shared_ptr<detail::Node>> keep_alive_;
};

// Reverse-mode sweep from a scalar loss. Leaf grads accumulate across calls
// on different losses; a given loss can only be back-propagated once.
void backward(const Tensor& loss);

namespace detail {

using BackwardFn = std::function<void(Node&)>;

// Wraps a freshly computed value as an op result. History is recorded only
// when grad mode is on and some input requires grad.
Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> inputs,
                   BackwardFn backward);

}  // namespace detail

}  // namespace sslab
