#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "merlot/error.hpp"

namespace merlot {

using Shape = std::vector<std::size_t>;

class Tape;

// Dense row-major tensor of 64-bit reals. A tensor is an immutable value;
// when produced by an operation on tape-attached inputs it additionally
// carries a handle into that tape so gradients can be pulled after backward().
// Tensors without a tape attachment are plain values, safe to share across
// threads.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor row(std::vector<double> values);          // shape [n]
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_ ? values_->size() : 0; }
  std::size_t rows() const;   // rank-2 only
  std::size_t cols() const;   // rank-2 only

  const std::vector<double>& values() const;
  const double* data() const { return values().data(); }
  double value() const;                       // scalar tensors
  double at(std::size_t i) const;             // flat index
  double at(std::size_t r, std::size_t c) const;

  bool on_tape() const { return node_ >= 0; }
  int node() const { return node_; }
  Tape* tape() const { return tape_; }
  // The same values detached from any tape.
  Tensor detached() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> values_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

// Recorded computation graph. Nodes are appended in execution order, so the
// record is topologically sorted by construction; one backward sweep walks it
// once in reverse. Single-writer: one forward/backward pass at a time.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers `value` as a leaf (trainable input) of this tape.
  Tensor leaf(const Tensor& value);

  // Computes d(loss)/d(node) for every node. `loss` must be a scalar on this
  // tape. May be called repeatedly; each sweep starts from scratch.
  void backward(const Tensor& loss);

  // Gradient of the last backward() w.r.t. `t`. Zero tensor if `t` did not
  // participate in the loss.
  Tensor grad(const Tensor& t) const;

  std::size_t num_nodes() const { return nodes_.size(); }

  // --- used by operation implementations ---
  using BackwardFn = std::function<void(Tape&, const std::vector<double>&)>;
  Tensor record(Shape shape, std::vector<double> values, BackwardFn backward);
  void accumulate(int node, const double* g, std::size_t n);
  const std::vector<double>& grad_values(int node) const { return grads_[node]; }

 private:
  struct Node {
    Shape shape;
    BackwardFn backward;  // empty for leaves
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

// ---- differentiable operations ----
// Broadcasting is deliberately limited to the documented cases:
//   add_rowvec : [r x c] + [c]  (bias over rows)
//   mul_scalar / add_scalar : elementwise against a compile-time constant
// Everything else requires exact shape agreement.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& m, const Tensor& v);
// Scales row i of m by v[i].
Tensor mul_colvec(const Tensor& m, const Tensor& v);
Tensor add_scalar(const Tensor& t, double c);
Tensor mul_scalar(const Tensor& t, double c);
Tensor neg(const Tensor& t);
Tensor abs_of(const Tensor& t);
Tensor relu(const Tensor& t);
Tensor softplus(const Tensor& t);
Tensor log_of(const Tensor& t);
Tensor exp_of(const Tensor& t);
Tensor square(const Tensor& t);

Tensor matmul(const Tensor& a, const Tensor& b);
// a [r x k] times b-transposed, b given as [c x k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// relu(x [r x k] @ w [k x c] + b [c]) as one recorded node (linear when
// relu_after is false). Values and gradients are identical to the unfused
// composition; fusing removes the intermediate tensors from the tape.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b, bool relu_after);
Tensor transpose(const Tensor& t);

Tensor softmax_lastaxis(const Tensor& t);
Tensor logsumexp_lastaxis(const Tensor& t);
Tensor sum_lastaxis(const Tensor& t);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor sum_all(const Tensor& t);
Tensor mean_all(const Tensor& t);

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& t, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& t, std::size_t start, std::size_t count);
Tensor select_rows(const Tensor& t, const std::vector<std::size_t>& indices);
// Whole-block vertical repetition: [r x c] -> [times*r x c].
Tensor tile_rows(const Tensor& t, std::size_t times);
// Per-row repetition: row i appears `times` consecutive times.
Tensor repeat_rows(const Tensor& t, std::size_t times);
Tensor reshape(const Tensor& t, Shape shape);

namespace detail {
// C[r x c] (+)= A (op) B. Row-major. Deterministic accumulation order.
void gemm_nn(const double* a, const double* b, double* c,
             std::size_t r, std::size_t k, std::size_t n, bool accumulate);
void gemm_nt(const double* a, const double* b, double* c,
             std::size_t r, std::size_t k, std::size_t n, bool accumulate);
void gemm_tn(const double* a, const double* b, double* c,
             std::size_t r, std::size_t k, std::size_t n, bool accumulate);
}  // namespace detail

// Named parameter arrays, ordered by name so every iteration is deterministic.
using ParamStore = std::map<std::string, Tensor>;
using GradMap = std::map<std::string, Tensor>;

// Binds parameters to a tape, deduplicating so that a parameter used twice in
// a forward pass maps to a single leaf (and therefore a single gradient).
class Binder {
 public:
  Binder(Tape& tape, const ParamStore& params) : tape_(tape), params_(params) {}
  Tensor operator()(const std::string& name);
  Tape& tape() { return tape_; }

  // d(loss)/d(p) for every parameter in the store; zeros for parameters the
  // loss does not depend on. Call after tape().backward(loss).
  GradMap gradients() const;

 private:
  Tape& tape_;
  const ParamStore& params_;
  std::map<std::string, Tensor> bound_;
};

}  // namespace merlot
