#include "eve/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace eve {

namespace memstat {
namespace {
std::atomic<std::int64_t> g_current{0};
std::atomic<std::int64_t> g_peak{0};
}  // namespace

std::int64_t current_bytes() { return g_current.load(); }
std::int64_t peak_bytes() { return g_peak.load(); }
void reset_peak() { g_peak.store(g_current.load()); }

namespace detail {
void add(std::int64_t bytes) {
  std::int64_t cur = g_current.fetch_add(bytes) + bytes;
  std::int64_t peak = g_peak.load();
  while (cur > peak && !g_peak.compare_exchange_weak(peak, cur)) {
  }
}
void sub(std::int64_t bytes) { g_current.fetch_sub(bytes); }
}  // namespace detail
}  // namespace memstat

const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }

DType dtype_from_name(const std::string& name) {
  if (name == "f32") return DType::F32;
  if (name == "f64") return DType::F64;
  throw std::invalid_argument("unknown dtype: " + name);
}

std::shared_ptr<Storage> Storage::make(DType dt, std::size_t n) {
  auto s = std::make_shared<Storage>();
  if (dt == DType::F32) {
    s->buf = std::vector<float>(n, 0.0f);
  } else {
    s->buf = std::vector<double>(n, 0.0);
  }
  memstat::detail::add(static_cast<std::int64_t>(n * dtype_size(dt)));
  return s;
}

Storage::~Storage() {
  memstat::detail::sub(static_cast<std::int64_t>(bytes()));
}

std::size_t Storage::numel() const {
  return std::visit([](const auto& v) { return v.size(); }, buf);
}

std::size_t Storage::bytes() const {
  return std::visit(
      [](const auto& v) { return v.size() * sizeof(typename std::decay_t<decltype(v)>::value_type); },
      buf);
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

namespace {

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor shape has non-positive dimension " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::shared_ptr<Node> make_leaf(std::vector<int> shape, DType dt, bool rg) {
  auto n = std::make_shared<Node>();
  n->dtype = dt;
  n->requires_grad = rg;
  n->data = Storage::make(dt, static_cast<std::size_t>(shape_numel(shape)));
  n->shape = std::move(shape);
  return n;
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, DType dt, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), dt, requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, double value, DType dt, bool requires_grad) {
  Tensor t = zeros(std::move(shape), dt, requires_grad);
  std::int64_t n = t.numel();
  for (std::int64_t i = 0; i < n; ++i) t.set_flat(i, value);
  return t;
}

Tensor Tensor::from_vec(std::vector<int> shape, std::span<const double> vals,
                        DType dt, bool requires_grad) {
  Tensor t = zeros(std::move(shape), dt, requires_grad);
  if (static_cast<std::int64_t>(vals.size()) != t.numel()) {
    throw std::invalid_argument("from_vec: " + std::to_string(vals.size()) +
                                " values for shape " + shape_str(t.shape()));
  }
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set_flat(i, vals[static_cast<std::size_t>(i)]);
  return t;
}

Tensor Tensor::from_floats(std::vector<int> shape, std::span<const float> vals,
                           DType dt, bool requires_grad) {
  Tensor t = zeros(std::move(shape), dt, requires_grad);
  if (static_cast<std::int64_t>(vals.size()) != t.numel()) {
    throw std::invalid_argument("from_floats: " + std::to_string(vals.size()) +
                                " values for shape " + shape_str(t.shape()));
  }
  if (dt == DType::F32) {
    std::copy(vals.begin(), vals.end(), t.data<float>());
  } else {
    double* d = t.data<double>();
    for (std::size_t i = 0; i < vals.size(); ++i) d[i] = static_cast<double>(vals[i]);
  }
  return t;
}

Tensor Tensor::scalar(double value, DType dt, bool requires_grad) {
  return full({1}, value, dt, requires_grad);
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(node_->data->numel()); }

double Tensor::flat(std::int64_t i) const {
  return std::visit([&](const auto& v) { return static_cast<double>(v[static_cast<std::size_t>(i)]); },
                    node_->data->buf);
}

void Tensor::set_flat(std::int64_t i, double v) const {
  std::visit([&](auto& vec) {
    using T = typename std::decay_t<decltype(vec)>::value_type;
    vec[static_cast<std::size_t>(i)] = static_cast<T>(v);
  }, node_->data->buf);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item: tensor has " + std::to_string(numel()) + " elements");
  }
  return flat(0);
}

std::vector<double> Tensor::to_vec() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  for (std::int64_t i = 0; i < numel(); ++i) out[static_cast<std::size_t>(i)] = flat(i);
  return out;
}

void Tensor::ensure_grad() const {
  if (!node_->grad) node_->grad = Storage::make(node_->dtype, node_->data->numel());
}

void Tensor::zero_grad() const {
  if (!node_->grad) return;
  std::visit([](auto& v) { std::fill(v.begin(), v.end(), typename std::decay_t<decltype(v)>::value_type(0)); },
             node_->grad->buf);
}

Tensor Tensor::grad() const {
  if (!node_->grad) throw std::runtime_error("grad: no gradient populated");
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->dtype = node_->dtype;
  n->data = node_->grad;
  n->op = "grad-view";
  return Tensor(std::move(n));
}

double Tensor::grad_flat(std::int64_t i) const {
  if (!node_->grad) return 0.0;
  return std::visit([&](const auto& v) { return static_cast<double>(v[static_cast<std::size_t>(i)]); },
                    node_->grad->buf);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->dtype = node_->dtype;
  n->data = node_->data;
  n->op = "detach";
  return Tensor(std::move(n));
}

Tensor Tensor::clone_data() const {
  Tensor t = zeros(node_->shape, node_->dtype, false);
  std::visit([&](const auto& src) {
    using T = typename std::decay_t<decltype(src)>::value_type;
    auto& dst = t.node()->data->as<T>();
    dst = src;
  }, node_->data->buf);
  return t;
}

Tensor Tensor::to(DType dt) const {
  Tensor t = zeros(node_->shape, dt, false);
  for (std::int64_t i = 0; i < numel(); ++i) t.set_flat(i, flat(i));
  return t;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a defined scalar tensor");
  }
  if (!loss.requires_grad()) return;

  // Post-order DFS; constant subgraphs are never visited.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame { Node* n; std::size_t next; };
  std::vector<Frame> stack;
  stack.push_back({loss.node(), 0});
  seen.insert(loss.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].node();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->grad) {
      n->grad = Storage::make(n->dtype, n->data->numel());
    } else if (n->backprop) {
      // Intermediate grads are per-sweep temporaries; only leaf grads
      // accumulate across repeated backward calls.
      std::visit([](auto& v) {
        std::fill(v.begin(), v.end(), typename std::decay_t<decltype(v)>::value_type(0));
      }, n->grad->buf);
    }
  }
  // Seed d(loss)/d(loss) = 1, accumulating.
  std::visit([](auto& v) { v[0] += typename std::decay_t<decltype(v)>::value_type(1); },
             loss.node()->grad->buf);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

}  // namespace eve
