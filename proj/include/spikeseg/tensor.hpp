// spikeseg/tensor.hpp
//
// Small reverse-mode differentiation engine over dense row-major tensors of
// doubles. Every op returns a new Tensor; when grad mode is on and any input
// requires a gradient, the result keeps references to its inputs together
// with a backward rule. Tensor::backward() walks that graph once in reverse
// topological order.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "spikeseg/io.hpp"

namespace spikeseg::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into self.parents[*]->grad.
  std::function<void(Node& self)> backward;
  const char* op = "leaf";

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape);
  static Tensor scalar(double x);
  static Tensor from_matrix(const Matrix& m);
  // Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  // 2-D helpers; a 1-D tensor of length n reads as 1 x n.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  // Zeros when nothing has been accumulated yet.
  std::vector<double> grad() const;
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  Tensor detach() const;
  Matrix to_matrix() const;

  // Seeds d(this)/d(this) = 1 and propagates. Throws ContractError unless
  // the tensor holds exactly one value.
  void backward() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Grad mode is per thread. While a NoGradGuard is alive, ops record nothing.
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

// Building block for ops defined outside this header (e.g. the CTC loss).
Tensor make_op(const char* op, Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
               std::function<void(Node&)> backward);

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor mul(const Tensor& a, double s);
// x [r x c] plus a row vector bias [c] on every row.
Tensor add_row(const Tensor& x, const Tensor& bias);
// scalar tensor times any tensor.
Tensor scale(const Tensor& s, const Tensor& x);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, double s);
Tensor operator+(double s, const Tensor& a);
Tensor operator-(const Tensor& a, double s);
Tensor operator*(const Tensor& a, double s);
Tensor operator*(double s, const Tensor& a);
Tensor operator-(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
// Inputs may be 2-D or 1-D (a 1-D input contributes one row).
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Row r of a 2-D tensor as a 1-D tensor.
Tensor row(const Tensor& a, std::size_t r);
// Element i (flat index) as a scalar.
Tensor element(const Tensor& a, std::size_t i);

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor reciprocal(const Tensor& a);
// Gradient passes where lo < x < hi.
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Row-wise softmax over a 2-D tensor. `additive_mask`, when non-empty, is a
// constant of the same size added to the logits first.
Tensor softmax_rows(const Tensor& a, std::span<const double> additive_mask = {});
Tensor log_softmax_rows(const Tensor& a, std::span<const double> additive_mask = {});

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-10);

// Identity unless training with rate > 0; then an inverted-dropout mask
// scaled by 1 / (1 - rate).
Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng);

// x [T x C] -> [T_out x (kernel * C)], zero padding, row t_out gathering
// frames t_out * stride - pad + k.
Tensor unfold(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad);
std::size_t conv_out_len(std::size_t len, std::size_t kernel, std::size_t stride, std::size_t pad);
// x [T x C_in], weight [(kernel * C_in) x C_out], bias [C_out].
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t kernel,
              std::size_t stride, std::size_t pad);

// Splits the last dimension into halves (a, b) and returns a * sigmoid(b).
Tensor glu(const Tensor& x);

Tensor embedding(const Tensor& table, std::span<const int> ids);

// Mean negative log-likelihood over positions whose target != ignore_index.
Tensor nll_loss(const Tensor& log_probs, std::span<const int> targets, int ignore_index = -1);
Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets, int ignore_index = -1);

// Heaviside spike with a rectangular surrogate gradient: forward 1 where
// v > v_th, backward passes the gradient unchanged where |v - v_th| <= half_width.
Tensor spike_fn(const Tensor& v, double v_th, double half_width = 0.5);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central differences on every coordinate of every input. Relative error is
// |analytic - numeric| / max(|analytic|, |numeric|, floor).
GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           const std::vector<Tensor>& inputs, double h = 1e-5, double floor = 1e-6);
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double h = 1e-5, double floor = 1e-6);

// Fan-based uniform init, bound sqrt(6 / (fan_in + fan_out)).
std::vector<double> xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::size_t count,
                                   std::mt19937_64& rng);

}  // namespace spikeseg::ad
