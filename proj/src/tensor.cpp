#include "merlot/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#if defined(__AVX512F__) && defined(__FMA__)
#include <immintrin.h>
#endif

#ifdef MERLOT_USE_OPENBLAS
#include <cblas.h>
namespace {
// Worker threads each issue their own calls; BLAS-internal threading would
// oversubscribe the cores and make per-call blocking depend on load.
const int kOpenblasSingleThread = [] {
  openblas_set_num_threads(1);
  return 0;
}();
}  // namespace
#endif

namespace merlot {

std::string shape_str(const Shape& s) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "x" : "") << s[i];
  out << ']';
  return out.str();
}

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

std::size_t last_axis(const Shape& s) {
  if (s.empty()) throw ShapeError("operation requires rank >= 1, got scalar");
  return s.back();
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_size(shape_) != values.size())
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape_));
  values_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> v(shape_size(shape), 0.0);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> v(shape_size(shape), value);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::row(std::vector<double> values) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows(): tensor is not rank 2, shape " + shape_str(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols(): tensor is not rank 2, shape " + shape_str(shape_));
  return shape_[1];
}

const std::vector<double>& Tensor::values() const {
  if (!values_) throw ContractError("use of default-constructed tensor");
  return *values_;
}

double Tensor::value() const {
  if (size() != 1) throw ContractError("value(): tensor has " + std::to_string(size()) + " elements");
  return values()[0];
}

double Tensor::at(std::size_t i) const { return values().at(i); }

double Tensor::at(std::size_t r, std::size_t c) const {
  return values().at(r * cols() + c);
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape_ = shape_;
  t.values_ = values_;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : values())
    if (!std::isfinite(v)) return false;
  return true;
}

// ---- Tape ----

Tensor Tape::leaf(const Tensor& value) {
  Tensor t = value.detached();
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{t.shape_, BackwardFn{}});
  return t;
}

Tensor Tape::record(Shape shape, std::vector<double> values, BackwardFn backward) {
  Tensor t(std::move(shape), std::move(values));
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{t.shape_, std::move(backward)});
  return t;
}

void Tape::accumulate(int node, const double* g, std::size_t n) {
  auto& dst = grads_[node];
  if (dst.empty()) {
    dst.assign(g, g + n);
    return;
  }
  for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape_ != this || loss.node_ < 0)
    throw ContractError("backward: loss is not recorded on this tape");
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  // Gradient buffers stay empty until the first contribution arrives; a node
  // whose buffer is still empty when the sweep reaches it received no gradient
  // and is skipped outright.
  grads_.assign(nodes_.size(), {});
  grads_[loss.node_].assign(1, 1.0);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (!grads_[i].empty() && nodes_[i].backward) nodes_[i].backward(*this, grads_[i]);
  }
}

Tensor Tape::grad(const Tensor& t) const {
  if (t.tape_ != this || t.node_ < 0)
    throw ContractError("grad: tensor is not recorded on this tape");
  if (grads_.empty()) throw ContractError("grad: backward() has not run");
  if (grads_[t.node_].empty()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), grads_[t.node_]);
}

// ---- op helpers ----

namespace {

Tape* tape_of(const Tensor& a) { return a.on_tape() ? a.tape() : nullptr; }

Tape* common_tape(const Tensor& a, const Tensor& b) {
  Tape* ta = tape_of(a);
  Tape* tb = tape_of(b);
  if (ta && tb && ta != tb) throw ContractError("operands recorded on different tapes");
  return ta ? ta : tb;
}

Tape* common_tape(const std::vector<Tensor>& ts) {
  Tape* t = nullptr;
  for (const auto& x : ts) {
    Tape* tx = tape_of(x);
    if (!tx) continue;
    if (t && tx != t) throw ContractError("operands recorded on different tapes");
    t = tx;
  }
  return t;
}

// Captures a tensor's node id, or -1 if it is not on the tape.
int nid(const Tensor& t) { return t.on_tape() ? t.node() : -1; }

}  // namespace

// ---- elementwise ----

namespace {

template <class Fwd, class Bwd>
Tensor binary_same_shape(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  require(a.same_shape(b), std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                               " vs " + shape_str(b.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
  Tape* tape = common_tape(a, b);
  if (!tape) return Tensor(a.shape(), std::move(out));
  const int na = nid(a), nb = nid(b);
  auto sa = a.detached(), sb = b.detached();
  return tape->record(a.shape(), std::move(out),
                      [na, nb, sa, sb, bwd](Tape& t, const std::vector<double>& g) {
                        const std::size_t n = g.size();
                        std::vector<double> buf(n);
                        if (na >= 0) {
                          for (std::size_t i = 0; i < n; ++i)
                            buf[i] = bwd(g[i], sa.values()[i], sb.values()[i], true);
                          t.accumulate(na, buf.data(), n);
                        }
                        if (nb >= 0) {
                          for (std::size_t i = 0; i < n; ++i)
                            buf[i] = bwd(g[i], sa.values()[i], sb.values()[i], false);
                          t.accumulate(nb, buf.data(), n);
                        }
                      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, bool) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, bool first) { return first ? g : -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, bool first) { return first ? g * y : g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double x, double y, bool first) {
        return first ? g / y : -g * x / (y * y);
      });
}

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd_from_in_out) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  Tape* tape = tape_of(a);
  if (!tape) return Tensor(a.shape(), std::move(out));
  const int na = nid(a);
  auto sa = a.detached();
  auto saved_out = std::make_shared<std::vector<double>>(out);
  return tape->record(a.shape(), std::move(out),
                      [na, sa, saved_out, bwd_from_in_out](Tape& t, const std::vector<double>& g) {
                        if (na < 0) return;
                        const std::size_t n = g.size();
                        std::vector<double> buf(n);
                        for (std::size_t i = 0; i < n; ++i)
                          buf[i] = g[i] * bwd_from_in_out(sa.values()[i], (*saved_out)[i]);
                        t.accumulate(na, buf.data(), n);
                      });
}

}  // namespace

Tensor add_scalar(const Tensor& t, double c) {
  return unary_op(t, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& t, double c) {
  return unary_op(t, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& t) {
  return unary_op(t, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor abs_of(const Tensor& t) {
  return unary_op(t, [](double x) { return std::fabs(x); },
                  [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& t) {
  return unary_op(t, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& t) {
  // log(1+exp(x)) with the overflow-safe branch x + log(1+exp(-x)) for x > 0.
  return unary_op(t,
                  [](double x) {
                    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
                  },
                  [](double x, double) {
                    return x > 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                  });
}

Tensor log_of(const Tensor& t) {
  return unary_op(t, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor exp_of(const Tensor& t) {
  return unary_op(t, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor square(const Tensor& t) {
  return unary_op(t, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  require(m.rank() == 2 && v.rank() == 1 && m.cols() == v.shape()[0],
          "add_rowvec: shape mismatch " + shape_str(m.shape()) + " vs " + shape_str(v.shape()));
  const std::size_t r = m.rows(), c = m.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.values()[i * c + j] + v.values()[j];
  Tape* tape = common_tape(m, v);
  if (!tape) return Tensor(m.shape(), std::move(out));
  const int nm = nid(m), nv = nid(v);
  return tape->record(m.shape(), std::move(out),
                      [nm, nv, r, c](Tape& t, const std::vector<double>& g) {
                        if (nm >= 0) t.accumulate(nm, g.data(), g.size());
                        if (nv >= 0) {
                          std::vector<double> gv(c, 0.0);
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
                          t.accumulate(nv, gv.data(), c);
                        }
                      });
}

Tensor mul_colvec(const Tensor& m, const Tensor& v) {
  require(m.rank() == 2 && v.rank() == 1 && m.rows() == v.shape()[0],
          "mul_colvec: shape mismatch " + shape_str(m.shape()) + " vs " + shape_str(v.shape()));
  const std::size_t r = m.rows(), c = m.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.values()[i * c + j] * v.values()[i];
  Tape* tape = common_tape(m, v);
  if (!tape) return Tensor(m.shape(), std::move(out));
  const int nm = nid(m), nv = nid(v);
  auto sm = m.detached(), sv = v.detached();
  return tape->record(m.shape(), std::move(out),
                      [nm, nv, sm, sv, r, c](Tape& t, const std::vector<double>& g) {
                        if (nm >= 0) {
                          std::vector<double> gm(r * c);
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j)
                              gm[i * c + j] = g[i * c + j] * sv.values()[i];
                          t.accumulate(nm, gm.data(), gm.size());
                        }
                        if (nv >= 0) {
                          std::vector<double> gv(r, 0.0);
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j)
                              gv[i] += g[i * c + j] * sm.values()[i * c + j];
                          t.accumulate(nv, gv.data(), r);
                        }
                      });
}

// ---- matmul ----

namespace detail {

#ifdef MERLOT_USE_OPENBLAS

void gemm_nn(const double* a, const double* b, double* c,
             std::size_t r, std::size_t k, std::size_t n, bool accumulate) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(r),
              static_cast<int>(n), static_cast<int>(k), 1.0, a, static_cast<int>(k), b,
              static_cast<int>(n), accumulate ? 1.0 : 0.0, c, static_cast<int>(n));
}

void gemm_nt(const double* a, const double* b, double* c,
             std::size_t r, std::size_t k, std::size_t n, bool accumulate) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(r),
              static_cast<int>(n), static_cast<int>(k), 1.0, a, static_cast<int>(k), b,
              static_cast<int>(k), accumulate ? 1.0 : 0.0, c, static_cast<int>(n));
}

void gemm_tn(const double* a, const double* b, double* c,
             std::size_t r, std::size_t k, std::size_t n, bool accumulate) {
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(r),
              static_cast<int>(n), static_cast<int>(k), 1.0, a, static_cast<int>(r), b,
              static_cast<int>(n), accumulate ? 1.0 : 0.0, c, static_cast<int>(n));
}

#else

namespace {

// Register-tiled core: accumulates a 4-row x 16-col block of C in registers
// across the whole p loop, so C is touched once per tile instead of once per
// p. Every C element still sums its products in ascending p order, keeping
// results bitwise identical row by row regardless of batch shape.
#if defined(__AVX512F__) && defined(__FMA__)

inline void gemm_tile4(const double* a0, const double* a1, const double* a2, const double* a3,
                       const double* b, std::size_t k, std::size_t n, double* c0, double* c1,
                       double* c2, double* c3) {
  __m512d t00 = _mm512_setzero_pd(), t01 = _mm512_setzero_pd();
  __m512d t10 = _mm512_setzero_pd(), t11 = _mm512_setzero_pd();
  __m512d t20 = _mm512_setzero_pd(), t21 = _mm512_setzero_pd();
  __m512d t30 = _mm512_setzero_pd(), t31 = _mm512_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * n;
    const __m512d b0 = _mm512_loadu_pd(brow);
    const __m512d b1 = _mm512_loadu_pd(brow + 8);
    const __m512d v0 = _mm512_set1_pd(a0[p]);
    const __m512d v1 = _mm512_set1_pd(a1[p]);
    const __m512d v2 = _mm512_set1_pd(a2[p]);
    const __m512d v3 = _mm512_set1_pd(a3[p]);
    t00 = _mm512_fmadd_pd(v0, b0, t00);
    t01 = _mm512_fmadd_pd(v0, b1, t01);
    t10 = _mm512_fmadd_pd(v1, b0, t10);
    t11 = _mm512_fmadd_pd(v1, b1, t11);
    t20 = _mm512_fmadd_pd(v2, b0, t20);
    t21 = _mm512_fmadd_pd(v2, b1, t21);
    t30 = _mm512_fmadd_pd(v3, b0, t30);
    t31 = _mm512_fmadd_pd(v3, b1, t31);
  }
  _mm512_storeu_pd(c0, _mm512_add_pd(_mm512_loadu_pd(c0), t00));
  _mm512_storeu_pd(c0 + 8, _mm512_add_pd(_mm512_loadu_pd(c0 + 8), t01));
  _mm512_storeu_pd(c1, _mm512_add_pd(_mm512_loadu_pd(c1), t10));
  _mm512_storeu_pd(c1 + 8, _mm512_add_pd(_mm512_loadu_pd(c1 + 8), t11));
  _mm512_storeu_pd(c2, _mm512_add_pd(_mm512_loadu_pd(c2), t20));
  _mm512_storeu_pd(c2 + 8, _mm512_add_pd(_mm512_loadu_pd(c2 + 8), t21));
  _mm512_storeu_pd(c3, _mm512_add_pd(_mm512_loadu_pd(c3), t30));
  _mm512_storeu_pd(c3 + 8, _mm512_add_pd(_mm512_loadu_pd(c3 + 8), t31));
}

constexpr std::size_t kGemmTile = 16;

#else

template <int Tile>
inline void gemm_tile4_generic(const double* a0, const double* a1, const double* a2,
                               const double* a3, const double* b, std::size_t k, std::size_t n,
                               double* c0, double* c1, double* c2, double* c3) {
  double t0[Tile] = {0}, t1[Tile] = {0}, t2[Tile] = {0}, t3[Tile] = {0};
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * n;
    const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
    for (int j = 0; j < Tile; ++j) {
      const double bj = brow[j];
      t0[j] += v0 * bj;
      t1[j] += v1 * bj;
      t2[j] += v2 * bj;
      t3[j] += v3 * bj;
    }
  }
  for (int j = 0; j < Tile; ++j) {
    c0[j] += t0[j];
    c1[j] += t1[j];
    c2[j] += t2[j];
    c3[j] += t3[j];
  }
}

inline void gemm_tile4(const double* a0, const double* a1, const double* a2, const double* a3,
                       const double* b, std::size_t k, std::size_t n, double* c0, double* c1,
                       double* c2, double* c3) {
  gemm_tile4_generic<16>(a0, a1, a2, a3, b, k, n, c0, c1, c2, c3);
}

constexpr std::size_t kGemmTile = 16;

#endif

}  // namespace

void gemm_nn(const double* a, const double* b, double* c,
             std::size_t r, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::memset(c, 0, r * n * sizeof(double));
  constexpr std::size_t kTile = kGemmTile;
  std::size_t i = 0;
  for (; i + 4 <= r; i += 4) {
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    std::size_t j0 = 0;
    for (; j0 + kTile <= n; j0 += kTile)
      gemm_tile4(a0, a1, a2, a3, b + j0, k, n, c0 + j0, c1 + j0, c2 + j0, c3 + j0);
    if (j0 < n) {
      // Column tail: same accumulation order, scalar tile.
      for (std::size_t p = 0; p < k; ++p) {
        const double* brow = b + p * n;
        const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
        for (std::size_t j = j0; j < n; ++j) {
          const double bj = brow[j];
          c0[j] += v0 * bj;
          c1[j] += v1 * bj;
          c2[j] += v2 * bj;
          c3[j] += v3 * bj;
        }
      }
    }
  }
  for (; i < r; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c,
             std::size_t r, std::size_t k, std::size_t n, bool accumulate) {
  // c[i][j] (+)= dot(a_row_i, b_row_j); b is [n x k]. Transposing b first
  // turns the inner loop into the same streaming update as gemm_nn, which
  // vectorizes; the row-by-row dot form stalls on its serial reduction.
  thread_local std::vector<double> scratch;
  scratch.resize(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) scratch[p * n + j] = b[j * k + p];
  gemm_nn(a, scratch.data(), c, r, k, n, accumulate);
}

void gemm_tn(const double* a, const double* b, double* c,
             std::size_t r, std::size_t k, std::size_t n, bool accumulate) {
  // c[i][j] (+)= sum_p a[p][i] * b[p][j]; a is [k x r]. Same transpose trick
  // as gemm_nt: c row i accumulates over ascending p either way.
  thread_local std::vector<double> scratch;
  scratch.resize(r * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < r; ++i) scratch[i * k + p] = a[p * r + i];
  gemm_nn(scratch.data(), b, c, r, k, n, accumulate);
}

#endif  // MERLOT_USE_OPENBLAS

}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(),
          "matmul: inner dimensions disagree, " + shape_str(a.shape()) + " times " +
              shape_str(b.shape()));
  const std::size_t r = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(r * n);
  detail::gemm_nn(a.data(), b.data(), out.data(), r, k, n, false);
  Tape* tape = common_tape(a, b);
  if (!tape) return Tensor({r, n}, std::move(out));
  const int na = nid(a), nb = nid(b);
  auto sa = a.detached(), sb = b.detached();
  return tape->record({r, n}, std::move(out),
                      [na, nb, sa, sb, r, k, n](Tape& t, const std::vector<double>& g) {
                        if (na >= 0) {
                          std::vector<double> ga(r * k);
                          detail::gemm_nt(g.data(), sb.data(), ga.data(), r, n, k, false);
                          t.accumulate(na, ga.data(), ga.size());
                        }
                        if (nb >= 0) {
                          std::vector<double> gb(k * n);
                          detail::gemm_tn(sa.data(), g.data(), gb.data(), k, r, n, false);
                          t.accumulate(nb, gb.data(), gb.size());
                        }
                      });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.cols(),
          "matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " times transpose of " +
              shape_str(b.shape()));
  const std::size_t r = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(r * n);
  detail::gemm_nt(a.data(), b.data(), out.data(), r, k, n, false);
  Tape* tape = common_tape(a, b);
  if (!tape) return Tensor({r, n}, std::move(out));
  const int na = nid(a), nb = nid(b);
  auto sa = a.detached(), sb = b.detached();
  return tape->record({r, n}, std::move(out),
                      [na, nb, sa, sb, r, k, n](Tape& t, const std::vector<double>& g) {
                        if (na >= 0) {
                          std::vector<double> ga(r * k);
                          detail::gemm_nn(g.data(), sb.data(), ga.data(), r, n, k, false);
                          t.accumulate(na, ga.data(), ga.size());
                        }
                        if (nb >= 0) {
                          std::vector<double> gb(n * k);
                          detail::gemm_tn(g.data(), sa.data(), gb.data(), n, r, k, false);
                          t.accumulate(nb, gb.data(), gb.size());
                        }
                      });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b, bool relu_after) {
  require(x.rank() == 2 && w.rank() == 2 && x.cols() == w.rows(),
          "affine: inner dimensions disagree, " + shape_str(x.shape()) + " times " +
              shape_str(w.shape()));
  require(b.rank() == 1 && b.shape()[0] == w.cols(),
          "affine: bias " + shape_str(b.shape()) + " does not match " + shape_str(w.shape()));
  const std::size_t r = x.rows(), k = x.cols(), n = w.cols();
  std::vector<double> out(r * n);
  detail::gemm_nn(x.data(), w.data(), out.data(), r, k, n, false);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b.values()[j];
  if (relu_after)
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
  Tape* tape = common_tape({x, w, b});
  if (!tape) return Tensor({r, n}, std::move(out));
  const int nx = nid(x), nw = nid(w), nb = nid(b);
  auto sx = x.detached(), sw = w.detached();
  auto saved_out = relu_after ? std::make_shared<std::vector<double>>(out) : nullptr;
  return tape->record(
      {r, n}, std::move(out),
      [nx, nw, nb, sx, sw, saved_out, r, k, n, relu_after](Tape& t,
                                                           const std::vector<double>& g) {
        const std::vector<double>* gp = &g;
        std::vector<double> masked;
        if (relu_after) {
          masked.resize(g.size());
          for (std::size_t i = 0; i < g.size(); ++i)
            masked[i] = (*saved_out)[i] > 0.0 ? g[i] : 0.0;
          gp = &masked;
        }
        if (nb >= 0) {
          std::vector<double> gb(n, 0.0);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += (*gp)[i * n + j];
          t.accumulate(nb, gb.data(), n);
        }
        if (nx >= 0) {
          std::vector<double> gx(r * k);
          detail::gemm_nt(gp->data(), sw.data(), gx.data(), r, n, k, false);
          t.accumulate(nx, gx.data(), gx.size());
        }
        if (nw >= 0) {
          std::vector<double> gw(k * n);
          detail::gemm_tn(sx.data(), gp->data(), gw.data(), k, r, n, false);
          t.accumulate(nw, gw.data(), gw.size());
        }
      });
}

Tensor transpose(const Tensor& t) {
  require(t.rank() == 2, "transpose: rank-2 required, got " + shape_str(t.shape()));
  const std::size_t r = t.rows(), c = t.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t.values()[i * c + j];
  Tape* tape = tape_of(t);
  if (!tape) return Tensor({c, r}, std::move(out));
  const int nt = nid(t);
  return tape->record({c, r}, std::move(out),
                      [nt, r, c](Tape& tp, const std::vector<double>& g) {
                        if (nt < 0) return;
                        std::vector<double> gt(r * c);
                        for (std::size_t j = 0; j < c; ++j)
                          for (std::size_t i = 0; i < r; ++i) gt[i * c + j] = g[j * r + i];
                        tp.accumulate(nt, gt.data(), gt.size());
                      });
}

// ---- reductions over the last axis ----

Tensor softmax_lastaxis(const Tensor& t) {
  const std::size_t n = last_axis(t.shape());
  const std::size_t slices = t.size() / n;
  std::vector<double> out(t.size());
  const auto& v = t.values();
  for (std::size_t s = 0; s < slices; ++s) {
    const double* x = v.data() + s * n;
    double* y = out.data() + s * n;
    double mx = x[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    for (std::size_t i = 0; i < n; ++i) y[i] /= sum;
  }
  Tape* tape = tape_of(t);
  if (!tape) return Tensor(t.shape(), std::move(out));
  const int nt = nid(t);
  auto saved = std::make_shared<std::vector<double>>(out);
  return tape->record(t.shape(), std::move(out),
                      [nt, saved, n](Tape& tp, const std::vector<double>& g) {
                        if (nt < 0) return;
                        const std::size_t slices = g.size() / n;
                        std::vector<double> gx(g.size());
                        for (std::size_t s = 0; s < slices; ++s) {
                          const double* y = saved->data() + s * n;
                          const double* go = g.data() + s * n;
                          double dot = 0.0;
                          for (std::size_t i = 0; i < n; ++i) dot += go[i] * y[i];
                          for (std::size_t i = 0; i < n; ++i)
                            gx[s * n + i] = y[i] * (go[i] - dot);
                        }
                        tp.accumulate(nt, gx.data(), gx.size());
                      });
}

Tensor logsumexp_lastaxis(const Tensor& t) {
  const std::size_t n = last_axis(t.shape());
  const std::size_t slices = t.size() / n;
  Shape out_shape(t.shape().begin(), t.shape().end() - 1);
  std::vector<double> out(slices);
  std::vector<double> soft(t.size());
  const auto& v = t.values();
  for (std::size_t s = 0; s < slices; ++s) {
    const double* x = v.data() + s * n;
    double mx = x[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      soft[s * n + i] = std::exp(x[i] - mx);
      sum += soft[s * n + i];
    }
    for (std::size_t i = 0; i < n; ++i) soft[s * n + i] /= sum;
    out[s] = mx + std::log(sum);
  }
  Tape* tape = tape_of(t);
  if (!tape) return Tensor(std::move(out_shape), std::move(out));
  const int nt = nid(t);
  auto saved = std::make_shared<std::vector<double>>(std::move(soft));
  return tape->record(std::move(out_shape), std::move(out),
                      [nt, saved, n](Tape& tp, const std::vector<double>& g) {
                        if (nt < 0) return;
                        std::vector<double> gx(saved->size());
                        for (std::size_t s = 0; s < g.size(); ++s)
                          for (std::size_t i = 0; i < n; ++i)
                            gx[s * n + i] = g[s] * (*saved)[s * n + i];
                        tp.accumulate(nt, gx.data(), gx.size());
                      });
}

Tensor sum_lastaxis(const Tensor& t) {
  const std::size_t n = last_axis(t.shape());
  const std::size_t slices = t.size() / n;
  Shape out_shape(t.shape().begin(), t.shape().end() - 1);
  std::vector<double> out(slices, 0.0);
  for (std::size_t s = 0; s < slices; ++s)
    for (std::size_t i = 0; i < n; ++i) out[s] += t.values()[s * n + i];
  Tape* tape = tape_of(t);
  if (!tape) return Tensor(std::move(out_shape), std::move(out));
  const int nt = nid(t);
  return tape->record(std::move(out_shape), std::move(out),
                      [nt, n](Tape& tp, const std::vector<double>& g) {
                        if (nt < 0) return;
                        std::vector<double> gx(g.size() * n);
                        for (std::size_t s = 0; s < g.size(); ++s)
                          for (std::size_t i = 0; i < n; ++i) gx[s * n + i] = g[s];
                        tp.accumulate(nt, gx.data(), gx.size());
                      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t d = last_axis(x.shape());
  require(d >= 2, "layer_norm: last axis must have extent >= 2, got " + shape_str(x.shape()));
  require(gain.rank() == 1 && gain.shape()[0] == d && bias.rank() == 1 && bias.shape()[0] == d,
          "layer_norm: affine shapes " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
              " do not match last axis of " + shape_str(x.shape()));
  constexpr double kEps = 1e-5;
  const std::size_t slices = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> norm(x.size());    // pre-affine standardized values
  std::vector<double> inv_std(slices);
  const auto& xv = x.values();
  for (std::size_t s = 0; s < slices; ++s) {
    const double* row = xv.data() + s * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += row[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kEps);
    inv_std[s] = is;
    for (std::size_t i = 0; i < d; ++i) {
      norm[s * d + i] = (row[i] - mean) * is;
      out[s * d + i] = norm[s * d + i] * gain.values()[i] + bias.values()[i];
    }
  }
  Tape* tape = common_tape({x, gain, bias});
  if (!tape) return Tensor(x.shape(), std::move(out));
  const int nx = nid(x), ng = nid(gain), nb = nid(bias);
  auto sg = gain.detached();
  auto snorm = std::make_shared<std::vector<double>>(std::move(norm));
  auto sis = std::make_shared<std::vector<double>>(std::move(inv_std));
  return tape->record(
      x.shape(), std::move(out),
      [nx, ng, nb, sg, snorm, sis, d](Tape& tp, const std::vector<double>& g) {
        const std::size_t slices = g.size() / d;
        if (nb >= 0) {
          std::vector<double> gb(d, 0.0);
          for (std::size_t s = 0; s < slices; ++s)
            for (std::size_t i = 0; i < d; ++i) gb[i] += g[s * d + i];
          tp.accumulate(nb, gb.data(), d);
        }
        if (ng >= 0) {
          std::vector<double> gg(d, 0.0);
          for (std::size_t s = 0; s < slices; ++s)
            for (std::size_t i = 0; i < d; ++i) gg[i] += g[s * d + i] * (*snorm)[s * d + i];
          tp.accumulate(ng, gg.data(), d);
        }
        if (nx >= 0) {
          std::vector<double> gx(g.size());
          for (std::size_t s = 0; s < slices; ++s) {
            // dy = g * gain; dx = inv_std * (dy - mean(dy) - norm * mean(dy*norm))
            double mean_dy = 0.0, mean_dyn = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
              const double dy = g[s * d + i] * sg.values()[i];
              mean_dy += dy;
              mean_dyn += dy * (*snorm)[s * d + i];
            }
            mean_dy /= static_cast<double>(d);
            mean_dyn /= static_cast<double>(d);
            for (std::size_t i = 0; i < d; ++i) {
              const double dy = g[s * d + i] * sg.values()[i];
              gx[s * d + i] = (*sis)[s] * (dy - mean_dy - (*snorm)[s * d + i] * mean_dyn);
            }
          }
          tp.accumulate(nx, gx.data(), gx.size());
        }
      });
}

Tensor sum_all(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  Tape* tape = tape_of(t);
  if (!tape) return Tensor::scalar(acc);
  const int nt = nid(t);
  const std::size_t n = t.size();
  return tape->record({}, {acc}, [nt, n](Tape& tp, const std::vector<double>& g) {
    if (nt < 0) return;
    std::vector<double> gx(n, g[0]);
    tp.accumulate(nt, gx.data(), n);
  });
}

Tensor mean_all(const Tensor& t) {
  if (t.size() == 0) throw ContractError("mean_all: empty tensor");
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  const double inv = 1.0 / static_cast<double>(t.size());
  Tape* tape = tape_of(t);
  if (!tape) return Tensor::scalar(acc * inv);
  const int nt = nid(t);
  const std::size_t n = t.size();
  return tape->record({}, {acc * inv}, [nt, n, inv](Tape& tp, const std::vector<double>& g) {
    if (nt < 0) return;
    std::vector<double> gx(n, g[0] * inv);
    tp.accumulate(nt, gx.data(), n);
  });
}

// ---- structural ops ----

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.rows() == r, "concat_cols: row counts disagree");
    total += p.cols();
  }
  std::vector<double> out(r * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::memcpy(out.data() + i * total + off, p.data() + i * c, c * sizeof(double));
    off += c;
  }
  Tape* tape = common_tape(parts);
  if (!tape) return Tensor({r, total}, std::move(out));
  std::vector<int> ids;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    ids.push_back(nid(p));
    widths.push_back(p.cols());
  }
  return tape->record({r, total}, std::move(out),
                      [ids, widths, r, total](Tape& tp, const std::vector<double>& g) {
                        std::size_t off = 0;
                        for (std::size_t k = 0; k < ids.size(); ++k) {
                          const std::size_t c = widths[k];
                          if (ids[k] >= 0) {
                            std::vector<double> gp(r * c);
                            for (std::size_t i = 0; i < r; ++i)
                              std::memcpy(gp.data() + i * c, g.data() + i * total + off,
                                          c * sizeof(double));
                            tp.accumulate(ids[k], gp.data(), gp.size());
                          }
                          off += c;
                        }
                      });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.cols() == c, "concat_rows: column counts disagree");
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * c);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  Tape* tape = common_tape(parts);
  if (!tape) return Tensor({total, c}, std::move(out));
  std::vector<int> ids;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    ids.push_back(nid(p));
    sizes.push_back(p.size());
  }
  return tape->record({total, c}, std::move(out),
                      [ids, sizes](Tape& tp, const std::vector<double>& g) {
                        std::size_t off = 0;
                        for (std::size_t k = 0; k < ids.size(); ++k) {
                          if (ids[k] >= 0) tp.accumulate(ids[k], g.data() + off, sizes[k]);
                          off += sizes[k];
                        }
                      });
}

Tensor slice_rows(const Tensor& t, std::size_t start, std::size_t count) {
  require(t.rank() == 2 && start + count <= t.rows(),
          "slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
              ") exceeds " + shape_str(t.shape()));
  const std::size_t c = t.cols();
  std::vector<double> out(t.values().begin() + start * c, t.values().begin() + (start + count) * c);
  Tape* tape = tape_of(t);
  if (!tape) return Tensor({count, c}, std::move(out));
  const int nt = nid(t);
  const std::size_t rows = t.rows();
  return tape->record({count, c}, std::move(out),
                      [nt, start, count, rows, c](Tape& tp, const std::vector<double>& g) {
                        if (nt < 0) return;
                        std::vector<double> gx(rows * c, 0.0);
                        std::copy(g.begin(), g.end(), gx.begin() + start * c);
                        tp.accumulate(nt, gx.data(), gx.size());
                      });
}

Tensor slice_cols(const Tensor& t, std::size_t start, std::size_t count) {
  require(t.rank() == 2 && start + count <= t.cols(),
          "slice_cols: range exceeds " + shape_str(t.shape()));
  const std::size_t r = t.rows(), c = t.cols();
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    std::memcpy(out.data() + i * count, t.data() + i * c + start, count * sizeof(double));
  Tape* tape = tape_of(t);
  if (!tape) return Tensor({r, count}, std::move(out));
  const int nt = nid(t);
  return tape->record({r, count}, std::move(out),
                      [nt, start, count, r, c](Tape& tp, const std::vector<double>& g) {
                        if (nt < 0) return;
                        std::vector<double> gx(r * c, 0.0);
                        for (std::size_t i = 0; i < r; ++i)
                          std::memcpy(gx.data() + i * c + start, g.data() + i * count,
                                      count * sizeof(double));
                        tp.accumulate(nt, gx.data(), gx.size());
                      });
}

Tensor select_rows(const Tensor& t, const std::vector<std::size_t>& indices) {
  require(t.rank() == 2, "select_rows: rank-2 required");
  const std::size_t c = t.cols(), rows = t.rows();
  for (auto i : indices)
    require(i < rows, "select_rows: index " + std::to_string(i) + " out of range for " +
                          shape_str(t.shape()));
  std::vector<double> out(indices.size() * c);
  for (std::size_t k = 0; k < indices.size(); ++k)
    std::memcpy(out.data() + k * c, t.data() + indices[k] * c, c * sizeof(double));
  Tape* tape = tape_of(t);
  if (!tape) return Tensor({indices.size(), c}, std::move(out));
  const int nt = nid(t);
  auto idx = indices;
  return tape->record({indices.size(), c}, std::move(out),
                      [nt, idx, rows, c](Tape& tp, const std::vector<double>& g) {
                        if (nt < 0) return;
                        std::vector<double> gx(rows * c, 0.0);
                        for (std::size_t k = 0; k < idx.size(); ++k)
                          for (std::size_t j = 0; j < c; ++j)
                            gx[idx[k] * c + j] += g[k * c + j];
                        tp.accumulate(nt, gx.data(), gx.size());
                      });
}

Tensor tile_rows(const Tensor& t, std::size_t times) {
  require(t.rank() == 2, "tile_rows: rank-2 required");
  const std::size_t r = t.rows(), c = t.cols();
  std::vector<double> out;
  out.reserve(times * r * c);
  for (std::size_t k = 0; k < times; ++k)
    out.insert(out.end(), t.values().begin(), t.values().end());
  Tape* tape = tape_of(t);
  if (!tape) return Tensor({times * r, c}, std::move(out));
  const int nt = nid(t);
  return tape->record({times * r, c}, std::move(out),
                      [nt, times, r, c](Tape& tp, const std::vector<double>& g) {
                        if (nt < 0) return;
                        std::vector<double> gx(r * c, 0.0);
                        for (std::size_t k = 0; k < times; ++k)
                          for (std::size_t i = 0; i < r * c; ++i) gx[i] += g[k * r * c + i];
                        tp.accumulate(nt, gx.data(), gx.size());
                      });
}

Tensor repeat_rows(const Tensor& t, std::size_t times) {
  require(t.rank() == 2, "repeat_rows: rank-2 required");
  const std::size_t r = t.rows(), c = t.cols();
  std::vector<double> out(times * r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t k = 0; k < times; ++k)
      std::memcpy(out.data() + (i * times + k) * c, t.data() + i * c, c * sizeof(double));
  Tape* tape = tape_of(t);
  if (!tape) return Tensor({times * r, c}, std::move(out));
  const int nt = nid(t);
  return tape->record({times * r, c}, std::move(out),
                      [nt, times, r, c](Tape& tp, const std::vector<double>& g) {
                        if (nt < 0) return;
                        std::vector<double> gx(r * c, 0.0);
                        for (std::size_t i = 0; i < r; ++i)
                          for (std::size_t k = 0; k < times; ++k)
                            for (std::size_t j = 0; j < c; ++j)
                              gx[i * c + j] += g[(i * times + k) * c + j];
                        tp.accumulate(nt, gx.data(), gx.size());
                      });
}

Tensor reshape(const Tensor& t, Shape shape) {
  require(shape_size(shape) == t.size(),
          "reshape: element count mismatch, " + shape_str(t.shape()) + " to " + shape_str(shape));
  Tape* tape = tape_of(t);
  if (!tape) return Tensor(std::move(shape), t.values());
  const int nt = nid(t);
  return tape->record(std::move(shape), t.values(),
                      [nt](Tape& tp, const std::vector<double>& g) {
                        if (nt >= 0) tp.accumulate(nt, g.data(), g.size());
                      });
}

// ---- Binder ----

Tensor Binder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  auto pit = params_.find(name);
  if (pit == params_.end()) throw ContractError("unknown parameter: " + name);
  Tensor b = tape_.leaf(pit->second);
  bound_.emplace(name, b);
  return b;
}

GradMap Binder::gradients() const {
  GradMap out;
  for (const auto& [name, value] : params_) {
    auto it = bound_.find(name);
    if (it != bound_.end())
      out.emplace(name, tape_.grad(it->second));
    else
      out.emplace(name, Tensor::zeros(value.shape()));
  }
  return out;
}

}  // namespace merlot
