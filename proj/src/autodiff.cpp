// spikeseg/autodiff.cpp

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "spikeseg/errors.hpp"
#include "spikeseg/tensor.hpp"

namespace spikeseg::ad {

namespace {

thread_local bool g_grad_enabled = true;

// Gradient buffer of parent k, or nullptr when that parent takes no gradient.
double* parent_grad(Node& self, std::size_t k) {
  Node& p = *self.parents[k];
  if (!p.requires_grad) return nullptr;
  return p.grad_buffer().data();
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_2d(const char* op, const Tensor& t) {
  if (t.dim() != 2) throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

template <class F>
Tensor unary(const char* op, const Tensor& a, F&& fwd_bwd) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  std::vector<double> deriv(n);
  const auto x = a.values();
  for (std::size_t i = 0; i < n; ++i) fwd_bwd(x[i], out[i], deriv[i]);
  return make_op(op, a.shape(), std::move(out), {a}, [deriv = std::move(deriv)](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < deriv.size(); ++i) g[i] += self.grad[i] * deriv[i];
  });
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream ss;
  ss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) ss << (i ? " x " : "") << shape[i];
  ss << ']';
  return ss.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " cannot hold " +
                         std::to_string(values.size()) + " values");
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape) {
  const std::size_t count = numel(shape);
  return constant(std::move(shape), std::vector<double>(count, 0.0));
}

Tensor Tensor::scalar(double x) { return constant({}, {x}); }

Tensor Tensor::from_matrix(const Matrix& m) { return constant({m.rows, m.cols}, m.data); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

std::size_t Tensor::rows() const {
  if (dim() == 2) return shape()[0];
  return 1;
}

std::size_t Tensor::cols() const {
  if (dim() == 2) return shape()[1];
  if (dim() == 1) return shape()[0];
  return 1;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on a tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

std::vector<double> Tensor::grad() const {
  if (has_grad()) return node_->grad;
  return std::vector<double>(size(), 0.0);
}

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor Tensor::detach() const { return constant(shape(), node_->value); }

Matrix Tensor::to_matrix() const {
  Matrix m;
  m.rows = rows();
  m.cols = cols();
  m.data = node_->value;
  return m;
}

void Tensor::backward() const {
  if (size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Interior gradients are consumed; leaves keep accumulating.
  for (Node* n : order) {
    if (n->backward) std::vector<double>().swap(n->grad);
  }
}

Tensor make_op(const char* op, Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
               std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (auto& t : inputs) n->parents.push_back(t.node_ptr());
      n->backward = std::move(backward);
    }
  }
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_mismatch("add", a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_mismatch("sub", a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor add(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return make_op("add_scalar", a.shape(), std::move(out), {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a[i];
  return make_op("mul_scalar", a.shape(), std::move(out), {a}, [s](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  if (bias.size() != c || x.dim() > 2) shape_mismatch("add_row", x.shape(), bias.shape());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + bias[j];
  }
  return make_op("add_row", x.shape(), std::move(out), {x, bias}, [r, c](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
      }
    }
  });
}

Tensor scale(const Tensor& s, const Tensor& x) {
  if (s.size() != 1) shape_mismatch("scale", s.shape(), x.shape());
  const double sv = s[0];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * x[i];
  return make_op("scale", x.shape(), std::move(out), {s, x}, [](Node& self) {
    const double sv = self.parents[0]->value[0];
    const auto& xv = self.parents[1]->value;
    if (double* g = parent_grad(self, 0)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xv[i];
      g[0] += acc;
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += sv * self.grad[i];
    }
  });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator+(const Tensor& a, double s) { return add(a, s); }
Tensor operator+(double s, const Tensor& a) { return add(a, s); }
Tensor operator-(const Tensor& a, double s) { return add(a, -s); }
Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
Tensor operator-(const Tensor& a) { return mul(a, -1.0); }

// ---------------------------------------------------------------------------
// Linear algebra and layout

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) shape_mismatch("matmul", a.shape(), b.shape());
  std::vector<double> out(m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return make_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* av = self.parents[0]->value.data();
    const double* bv = self.parents[1]->value.data();
    const double* go = self.grad.data();
    if (double* ga = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = bv + p * n;
          const double* grow = go + i * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (double* gb = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = go + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          double* gbrow = gb + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_2d("transpose", a);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  }
  return make_op("transpose", {c, r}, std::move(out), {a}, [r, c](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
      }
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) shape_mismatch("reshape", a.shape(), shape);
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_op("reshape", std::move(shape), std::move(out), {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_2d("slice_rows", a);
  const std::size_t c = a.shape()[1];
  if (begin > end || end > a.shape()[0]) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_str(a.shape()));
  }
  std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          a.values().begin() + static_cast<std::ptrdiff_t>(end * c));
  return make_op("slice_rows", {end - begin, c}, std::move(out), {a}, [begin, c](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * c + i] += self.grad[i];
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_2d("slice_cols", a);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (begin > end || end > c) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_str(a.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a[i * c + begin + j];
  }
  return make_op("slice_cols", {r, w}, std::move(out), {a}, [r, c, w, begin](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
      }
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c || p.dim() > 2) shape_mismatch("concat_rows", parts[0].shape(), p.shape());
    r += p.rows();
  }
  std::vector<double> out;
  out.reserve(r * c);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return make_op("concat_rows", {r, c}, std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t len = self.parents[k]->value.size();
      if (double* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_2d("concat_cols", p);
    if (p.rows() != r) shape_mismatch("concat_cols", parts[0].shape(), p.shape());
    widths.push_back(p.cols());
    c += p.cols();
  }
  std::vector<double> out(r * c);
  std::size_t col0 = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = widths[k];
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < w; ++j) out[i * c + col0 + j] = parts[k][i * w + j];
    }
    col0 += w;
  }
  return make_op("concat_cols", {r, c}, std::move(out), parts, [r, c, widths](Node& self) {
    std::size_t col0 = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t w = widths[k];
      if (double* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * c + col0 + j];
        }
      }
      col0 += w;
    }
  });
}

Tensor row(const Tensor& a, std::size_t r) {
  require_2d("row", a);
  const std::size_t c = a.shape()[1];
  if (r >= a.shape()[0]) throw DimensionError("row " + std::to_string(r) + " outside " + shape_str(a.shape()));
  std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(r * c),
                          a.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
  return make_op("row", {c}, std::move(out), {a}, [r, c](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += self.grad[j];
    }
  });
}

Tensor element(const Tensor& a, std::size_t i) {
  if (i >= a.size()) throw DimensionError("element " + std::to_string(i) + " outside " + shape_str(a.shape()));
  return make_op("element", {}, {a[i]}, {a}, [i](Node& self) {
    if (double* g = parent_grad(self, 0)) g[i] += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, [](double x, double& y, double& d) {
    y = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    d = y * (1.0 - y);
  });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x, double& y, double& d) {
    y = std::tanh(x);
    d = 1.0 - y * y;
  });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x, double& y, double& d) {
    y = x > 0.0 ? x : 0.0;
    d = x > 0.0 ? 1.0 : 0.0;
  });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x, double& y, double& d) {
    y = std::exp(x);
    d = y;
  });
}

Tensor log(const Tensor& a) {
  return unary("log", a, [](double x, double& y, double& d) {
    y = std::log(x);
    d = 1.0 / x;
  });
}

Tensor abs(const Tensor& a) {
  return unary("abs", a, [](double x, double& y, double& d) {
    y = std::fabs(x);
    d = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
  });
}

Tensor reciprocal(const Tensor& a) {
  return unary("reciprocal", a, [](double x, double& y, double& d) {
    y = 1.0 / x;
    d = -y * y;
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary("clamp", a, [lo, hi](double x, double& y, double& d) {
    y = std::clamp(x, lo, hi);
    d = (x > lo && x < hi) ? 1.0 : 0.0;
  });
}

Tensor spike_fn(const Tensor& v, double v_th, double half_width) {
  return unary("spike", v, [v_th, half_width](double x, double& y, double& d) {
    y = x > v_th ? 1.0 : 0.0;
    d = std::fabs(x - v_th) <= half_width ? 1.0 : 0.0;
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return make_op("sum", {}, {s}, {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw DimensionError("mean of an empty tensor");
  return mul(sum(a), 1.0 / static_cast<double>(a.size()));
}

namespace {

// Shared forward pass of softmax / log-softmax; fills probabilities.
void softmax_forward(const Tensor& a, std::span<const double> mask, std::vector<double>& probs,
                     std::vector<double>* log_probs) {
  const std::size_t r = a.rows(), c = a.cols();
  if (!mask.empty() && mask.size() != a.size()) {
    throw DimensionError("softmax mask has " + std::to_string(mask.size()) + " values for " +
                         shape_str(a.shape()));
  }
  probs.resize(a.size());
  if (log_probs) log_probs->resize(a.size());
  std::vector<double> z(c);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      z[j] = a[i * c + j] + (mask.empty() ? 0.0 : mask[i * c + j]);
      mx = std::max(mx, z[j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      const double lp = z[j] - lse;
      probs[i * c + j] = std::exp(lp);
      if (log_probs) (*log_probs)[i * c + j] = lp;
    }
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& a, std::span<const double> additive_mask) {
  std::vector<double> p;
  softmax_forward(a, additive_mask, p, nullptr);
  const std::size_t r = a.rows(), c = a.cols();
  return make_op("softmax", a.shape(), std::move(p), {a}, [r, c](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    const auto& y = self.value;
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[i * c + j] * (self.grad[i * c + j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& a, std::span<const double> additive_mask) {
  std::vector<double> p, lp;
  softmax_forward(a, additive_mask, p, &lp);
  const std::size_t r = a.rows(), c = a.cols();
  return make_op("log_softmax", a.shape(), std::move(lp), {a}, [r, c, p = std::move(p)](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j] - p[i * c + j] * gs;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.size() != c || beta.size() != c) shape_mismatch("layer_norm", x.shape(), gamma.shape());
  std::vector<double> xhat(x.size()), inv_std(r), out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += x[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x[i * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (x[i * c + j] - mu) * inv_std[i];
      out[i * c + j] = gamma[j] * xhat[i * c + j] + beta[j];
    }
  }
  return make_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                 [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   const auto& gam = self.parents[1]->value;
                   const double* dy = self.grad.data();
                   if (double* gx = parent_grad(self, 0)) {
                     std::vector<double> dxhat(c);
                     for (std::size_t i = 0; i < r; ++i) {
                       double m1 = 0.0, m2 = 0.0;
                       for (std::size_t j = 0; j < c; ++j) {
                         dxhat[j] = dy[i * c + j] * gam[j];
                         m1 += dxhat[j];
                         m2 += dxhat[j] * xhat[i * c + j];
                       }
                       m1 /= static_cast<double>(c);
                       m2 /= static_cast<double>(c);
                       for (std::size_t j = 0; j < c; ++j) {
                         gx[i * c + j] += inv_std[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
                       }
                     }
                   }
                   if (double* gg = parent_grad(self, 1)) {
                     for (std::size_t i = 0; i < r; ++i) {
                       for (std::size_t j = 0; j < c; ++j) gg[j] += dy[i * c + j] * xhat[i * c + j];
                     }
                   }
                   if (double* gb = parent_grad(self, 2)) {
                     for (std::size_t i = 0; i < r; ++i) {
                       for (std::size_t j = 0; j < c; ++j) gb[j] += dy[i * c + j];
                     }
                   }
                 });
}

Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be below 1");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = unif(rng) >= rate ? keep_scale : 0.0;
    out[i] = x[i] * mask[i];
  }
  return make_op("dropout", x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

std::size_t conv_out_len(std::size_t len, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ContractError("conv stride must be positive");
  if (len + 2 * pad < kernel) return 0;
  return (len + 2 * pad - kernel) / stride + 1;
}

Tensor unfold(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  require_2d("unfold", x);
  const std::size_t t_in = x.shape()[0], ch = x.shape()[1];
  const std::size_t t_out = conv_out_len(t_in, kernel, stride, pad);
  if (t_out == 0) throw DimensionError("unfold: input " + shape_str(x.shape()) + " shorter than kernel");
  const std::size_t w = kernel * ch;
  std::vector<double> out(t_out * w, 0.0);
  for (std::size_t t = 0; t < t_out; ++t) {
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) - static_cast<std::ptrdiff_t>(pad);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_in)) continue;
      for (std::size_t c = 0; c < ch; ++c) out[t * w + k * ch + c] = x[static_cast<std::size_t>(src) * ch + c];
    }
  }
  return make_op("unfold", {t_out, w}, std::move(out), {x}, [=](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t t = 0; t < t_out; ++t) {
      for (std::size_t k = 0; k < kernel; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) - static_cast<std::ptrdiff_t>(pad);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_in)) continue;
        for (std::size_t c = 0; c < ch; ++c) g[static_cast<std::size_t>(src) * ch + c] += self.grad[t * w + k * ch + c];
      }
    }
  });
}

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t kernel,
              std::size_t stride, std::size_t pad) {
  require_2d("conv1d", x);
  require_2d("conv1d", weight);
  if (weight.shape()[0] != kernel * x.shape()[1]) shape_mismatch("conv1d", x.shape(), weight.shape());
  return add_row(matmul(unfold(x, kernel, stride, pad), weight), bias);
}

Tensor glu(const Tensor& x) {
  const std::size_t c = x.cols();
  if (c % 2 != 0) throw DimensionError("glu: last dimension of " + shape_str(x.shape()) + " is odd");
  const std::size_t r = x.rows(), h = c / 2;
  std::vector<double> out(r * h), gate(r * h);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < h; ++j) {
      const double b = x[i * c + h + j];
      gate[i * h + j] = b >= 0.0 ? 1.0 / (1.0 + std::exp(-b)) : std::exp(b) / (1.0 + std::exp(b));
      out[i * h + j] = x[i * c + j] * gate[i * h + j];
    }
  }
  Shape shape = x.shape();
  shape.back() = h;
  return make_op("glu", std::move(shape), std::move(out), {x}, [r, c, h, gate = std::move(gate)](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < h; ++j) {
        const double s = gate[i * h + j];
        const double dy = self.grad[i * h + j];
        g[i * c + j] += dy * s;
        g[i * c + h + j] += dy * xv[i * c + j] * s * (1.0 - s);
      }
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_2d("embedding", table);
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  std::vector<double> out(ids.size() * d);
  std::vector<std::size_t> idx(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw DimensionError("embedding id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(v));
    }
    idx[i] = static_cast<std::size_t>(ids[i]);
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return make_op("embedding", {ids.size(), d}, std::move(out), {table}, [d, idx = std::move(idx)](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
      }
    }
  });
}

Tensor nll_loss(const Tensor& log_probs, std::span<const int> targets, int ignore_index) {
  const std::size_t r = log_probs.rows(), c = log_probs.cols();
  if (targets.size() != r) {
    throw ContractError("nll_loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(r) + " rows");
  }
  std::vector<std::size_t> picked;
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] == ignore_index) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
      throw DimensionError("nll_loss: target " + std::to_string(targets[i]) + " outside " + std::to_string(c) + " classes");
    }
    const std::size_t k = i * c + static_cast<std::size_t>(targets[i]);
    picked.push_back(k);
    total -= log_probs[k];
  }
  const double count = static_cast<double>(picked.size());
  const double value = picked.empty() ? 0.0 : total / count;
  return make_op("nll", {}, {value}, {log_probs}, [picked = std::move(picked), count](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t k : picked) g[k] -= self.grad[0] / count;
    }
  });
}

Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  return nll_loss(log_softmax_rows(logits), targets, ignore_index);
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           const std::vector<Tensor>& inputs, double h, double floor) {
  std::vector<Tensor> params;
  params.reserve(inputs.size());
  for (const auto& x : inputs) {
    params.push_back(Tensor::parameter(x.shape(), std::vector<double>(x.values().begin(), x.values().end())));
  }
  {
    Tensor y = f(params);
    y.backward();
  }

  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::vector<double> analytic = params[k].grad();
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      auto eval_at = [&](double delta) {
        NoGradGuard guard;
        std::vector<Tensor> shifted;
        for (std::size_t q = 0; q < params.size(); ++q) {
          std::vector<double> v(params[q].values().begin(), params[q].values().end());
          if (q == k) v[i] += delta;
          shifted.push_back(Tensor::constant(params[q].shape(), std::move(v)));
        }
        return f(shifted).item();
      };
      const double numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
      const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), floor});
      const double rel = std::fabs(analytic[i] - numeric) / denom;
      if (rel > result.max_rel_error || !std::isfinite(rel)) {
        result.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        result.worst_input = k;
        result.worst_index = i;
        result.analytic = analytic[i];
        result.numeric = numeric;
      }
    }
  }
  return result;
}

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h, double floor) {
  return grad_check([&](const std::vector<Tensor>& xs) { return f(xs[0]); }, std::vector<Tensor>{x}, h, floor);
}

std::vector<double> xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::size_t count, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> unif(-bound, bound);
  std::vector<double> w(count);
  for (double& x : w) x = unif(rng);
  return w;
}

}  // namespace spikeseg::ad
