#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "adapterlab/errors.hpp"

namespace adapterlab {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches the node
  bool requires_grad = false;
  bool tracked = false;  // leaf with requires_grad, or result of a recorded op

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major float64 array with an optional gradient buffer.
///
/// Copies share storage (handle semantics); use clone() for a deep copy.
/// Every op checks its output for NaN/Inf and throws NumericError.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Direct write access, intended for optimizers and initialisers. Not recorded.
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool tracked() const { return node_->tracked; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; all zeros when nothing has flowed into this tensor.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const;
  /// Same values and shape, no gradient tracking.
  Tensor detach() const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::TensorNode> node);

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// Ordered record of differentiable operations.
///
/// Ops executed while a tape is active (see TapeScope) and touching a tracked
/// input append one entry. Entries are appended after their inputs exist, so
/// the record is already in topological order.
class GradTape {
 public:
  /// Reads out.grad and accumulates into the grads of tracked inputs.
  using BackwardFn = std::function<void(const detail::TensorNode& out,
                                        std::vector<std::shared_ptr<detail::TensorNode>>& inputs)>;

  struct Entry {
    std::shared_ptr<detail::TensorNode> out;
    std::vector<std::shared_ptr<detail::TensorNode>> inputs;
    BackwardFn backward;
  };

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  std::size_t size() const { return entries_.size(); }
  void reset() { entries_.clear(); }

  /// Populates grad on every tracked tensor reachable from `loss`.
  void backward(const Tensor& loss);

 private:
  std::vector<Entry> entries_;
};

/// Makes `tape` the active tape on this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* previous_;
};

GradTape* active_tape();

/// Creates an op result and records it when any input is tracked under an active tape.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   GradTape::BackwardFn backward, const char* op_name);

/// Little-endian: u32 rank, u32 extents, f64 payload.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

}  // namespace adapterlab
