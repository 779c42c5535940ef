#include "adapterlab/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace adapterlab {

namespace {
thread_local GradTape* g_active_tape = nullptr;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor() : node_(std::make_shared<detail::TensorNode>()) {}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<detail::TensorNode>()) {
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : node_(std::make_shared<detail::TensorNode>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_string(shape));
  }
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError("tensor constructed with non-finite value");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape()));
  }
  return node_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  node_->tracked = on;
  if (!on) node_->grad.clear();
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return node_->grad;
}

Tensor Tensor::clone() const {
  Tensor t(shape(), node_->data);
  t.set_requires_grad(requires_grad());
  return t;
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data); }

TapeScope::TapeScope(GradTape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

GradTape* active_tape() { return g_active_tape; }

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   GradTape::BackwardFn backward, const char* op_name) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op_name) + " produced a non-finite value");
    }
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);

  GradTape* tape = g_active_tape;
  if (tape != nullptr) {
    bool any_tracked = false;
    for (const auto& in : inputs) any_tracked = any_tracked || in.tracked();
    if (any_tracked) {
      node->tracked = true;
      GradTape::Entry entry;
      entry.out = node;
      entry.inputs.reserve(inputs.size());
      for (auto& in : inputs) entry.inputs.push_back(in.node());
      entry.backward = std::move(backward);
      tape->record(std::move(entry));
    }
  }
  return Tensor::wrap(std::move(node));
}

void GradTape::backward(const Tensor& loss) {
  if (loss.numel() != 1 || loss.rank() != 0) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        shape_string(loss.shape()));
  }
  if (!loss.tracked()) {
    throw ContractError("backward() on a loss that was not produced under an active tape");
  }
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->out->grad.empty()) continue;
    it->backward(*it->out, it->inputs);
  }
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor serialization assumes a little-endian host");

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw DataError("truncated tensor header");
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) write_u32(out, static_cast<std::uint32_t>(e));
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

Tensor read_tensor(std::istream& in) {
  const std::uint32_t rank = read_u32(in);
  if (rank > 8) throw DataError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = read_u32(in);
  std::vector<double> data(shape_numel(shape));
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw DataError("truncated tensor payload");
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace adapterlab
