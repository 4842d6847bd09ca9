#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace eve {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline std::size_t dtype_size(DType d) {
  return d == DType::F32 ? sizeof(float) : sizeof(double);
}
const char* dtype_name(DType d);
DType dtype_from_name(const std::string& name);

// Live-byte accounting across all tensor storages; the bench report uses the
// high-water mark as its peak-memory estimate.
namespace memstat {
std::int64_t current_bytes();
std::int64_t peak_bytes();
void reset_peak();
}  // namespace memstat

struct Storage {
  std::variant<std::vector<float>, std::vector<double>> buf;

  static std::shared_ptr<Storage> make(DType dt, std::size_t n);
  ~Storage();
  Storage() = default;
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;

  template <typename T>
  std::vector<T>& as() { return std::get<std::vector<T>>(buf); }
  template <typename T>
  const std::vector<T>& as() const { return std::get<std::vector<T>>(buf); }

  std::size_t numel() const;
  std::size_t bytes() const;
};

class Tensor;

struct Node {
  std::vector<int> shape;
  DType dtype = DType::F32;
  std::shared_ptr<Storage> data;
  bool requires_grad = false;
  std::shared_ptr<Storage> grad;  // allocated lazily, same shape as data
  std::vector<Tensor> parents;
  std::function<void(Node&)> backprop;  // adds into parents' grads
  const char* op = "leaf";
};

// Value-semantic handle to a node in the computation graph. Copies share the
// underlying node. Tensors are immutable after forward construction except
// for grad buffers and explicit leaf mutation (parameter updates, init).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, DType dt = DType::F32,
                      bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value,
                     DType dt = DType::F32, bool requires_grad = false);
  static Tensor from_vec(std::vector<int> shape, std::span<const double> vals,
                         DType dt = DType::F32, bool requires_grad = false);
  static Tensor from_floats(std::vector<int> shape, std::span<const float> vals,
                            DType dt = DType::F32, bool requires_grad = false);
  static Tensor scalar(double value, DType dt = DType::F32,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const;
  DType dtype() const { return node_->dtype; }
  bool requires_grad() const { return node_->requires_grad; }

  // Element access as double regardless of dtype (host logic and tests).
  // Mutators are const because they act on the shared node, not the handle.
  double flat(std::int64_t i) const;
  void set_flat(std::int64_t i, double v) const;  // leaf mutation only
  double item() const;                            // scalar tensors
  std::vector<double> to_vec() const;

  template <typename T>
  T* data() { return node_->data->as<T>().data(); }
  template <typename T>
  const T* data() const { return node_->data->as<T>().data(); }

  bool has_grad() const { return node_->grad != nullptr; }
  Tensor grad() const;  // shares the grad storage; no grad-of-grad
  void ensure_grad() const;
  void zero_grad() const;
  double grad_flat(std::int64_t i) const;

  Tensor detach() const;       // shares data, drops graph and grad flags
  Tensor clone_data() const;   // deep copy of data, leaf
  Tensor to(DType dt) const;   // converting deep copy, leaf

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

// Reverse-mode sweep from a scalar loss. Topologically orders the recorded
// graph, traverses it exactly once in reverse, and accumulates gradients into
// every reachable requires_grad tensor. Repeated calls accumulate additively.
void backward(const Tensor& loss);

std::string shape_str(const std::vector<int>& shape);

}  // namespace eve
