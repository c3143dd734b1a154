#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "grad_check.hpp"
#include "merlot/rng.hpp"
#include "merlot/tensor.hpp"
#include "test_util.hpp"

using namespace merlot;
using namespace merlot::test;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("matmul basics") {
  const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  CHECK(bitwise_equal(matmul(eye, a), a));

  const Tensor proj = Tensor::matrix(2, 2, {1, 0, 0, 0});
  const Tensor b = Tensor::matrix(2, 2, {5, 6, 7, 8});
  CHECK(allclose(matmul(proj, b), Tensor::matrix(2, 2, {5, 6, 0, 0}), 0.0));

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    CHECK(false);
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul against triple-loop oracle") {
  Rng rng(7);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({4, 2}, rng);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < 4; ++p) acc += a.at(i, p) * b.at(p, j);
      CHECK(close(c.at(i, j), acc, 1e-12));
    }
}

TEST_CASE("matmul_nt matches explicit transpose") {
  Rng rng(8);
  const Tensor a = random_tensor({3, 5}, rng);
  const Tensor b = random_tensor({4, 5}, rng);
  CHECK(allclose(matmul_nt(a, b), matmul(a, transpose(b)), 1e-14));
}

TEST_CASE("softmax slices") {
  CHECK(allclose(softmax_lastaxis(Tensor::row({0, 0})), Tensor::row({0.5, 0.5}), 1e-15));
  CHECK(allclose(softmax_lastaxis(Tensor::row({1000, 1000})), Tensor::row({0.5, 0.5}), 1e-15));

  const Tensor x = Tensor::row({1, 2, 3});
  const Tensor s = softmax_lastaxis(x);
  long double denom = 0.0L;
  for (double v : x.values()) denom += std::exp(static_cast<long double>(v) - 3.0L);
  for (std::size_t i = 0; i < 3; ++i) {
    const long double expect = std::exp(static_cast<long double>(x.at(i)) - 3.0L) / denom;
    CHECK(close(s.at(i), static_cast<double>(expect), 1e-12));
  }

  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor t = random_tensor({4, 6}, rng, -30.0, 30.0);
    const Tensor sm = softmax_lastaxis(t);
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        sum += sm.at(r, c);
        CHECK(sm.at(r, c) > 0.0);
        CHECK(sm.at(r, c) <= 1.0);
      }
      CHECK(close(sum, 1.0, 1e-9));
    }
    std::vector<double> shifted = t.values();
    for (auto& v : shifted) v += 17.25;
    CHECK(allclose(softmax_lastaxis(Tensor({4, 6}, shifted)), sm, 1e-12));
  }
}

TEST_CASE("softplus values") {
  CHECK(close(softplus(Tensor::scalar(0.0)).value(), std::log(2.0), 1e-15));
  CHECK(close(softplus(Tensor::scalar(100.0)).value(), 100.0, 1e-12));
  CHECK(close(softplus(Tensor::scalar(-3.0)).value(), std::log(1.0 + std::exp(-3.0)), 1e-12));
  CHECK(std::isfinite(softplus(Tensor::scalar(750.0)).value()));
}

TEST_CASE("layer_norm values") {
  const Tensor gain = Tensor::full({4}, 1.0);
  const Tensor bias = Tensor::zeros({4});
  CHECK(allclose(layer_norm(Tensor::row({1, 1, 1, 1}), gain, bias), Tensor::zeros({4}), 1e-9));

  const Tensor two = layer_norm(Tensor::row({-1, 1}), Tensor::full({2}, 1.0), Tensor::zeros({2}));
  CHECK(close(two.at(0), -1.0, 1e-4));
  CHECK(close(two.at(1), 1.0, 1e-4));

  Rng rng(5);
  const Tensor x = random_tensor({3, 16}, rng);
  const Tensor out = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}));
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 16; ++c) mean += out.at(r, c);
    mean /= 16.0;
    for (std::size_t c = 0; c < 16; ++c) var += (out.at(r, c) - mean) * (out.at(r, c) - mean);
    var /= 16.0;
    CHECK(std::fabs(mean) < 1e-9);
    CHECK(close(var, 1.0, 1e-4));
  }
}

TEST_CASE("backward on linear and dead branches") {
  Tape tape;
  Tensor p = tape.leaf(Tensor::row({1.0, 2.0, 3.0}));
  Tensor loss = sum_all(p);
  tape.backward(loss);
  CHECK(allclose(tape.grad(p), Tensor::full({3}, 1.0), 0.0));

  Tape tape2;
  Tensor q = tape2.leaf(Tensor::row({1.0, -2.0, 0.5}));
  Tensor dead = mul_scalar(sum_all(relu(q)), 0.0);
  tape2.backward(dead);
  CHECK(allclose(tape2.grad(q), Tensor::zeros({3}), 0.0));

  CHECK_THROWS_AS(tape2.backward(q), ContractError);
}

TEST_CASE("non-participating leaves get zero gradients") {
  ParamStore params;
  params.emplace("used", Tensor::row({2.0, 3.0}));
  params.emplace("unused", Tensor::row({5.0}));
  Tape tape;
  Binder bind(tape, params);
  Tensor loss = sum_all(square(bind("used")));
  tape.backward(loss);
  const GradMap grads = bind.gradients();
  CHECK(allclose(grads.at("used"), Tensor::row({4.0, 6.0}), 1e-14));
  CHECK(allclose(grads.at("unused"), Tensor::zeros({1}), 0.0));
}

TEST_CASE("backward is deterministic across sweeps") {
  Rng rng(3);
  Tape tape;
  Tensor a = tape.leaf(random_tensor({4, 4}, rng));
  Tensor b = tape.leaf(random_tensor({4, 4}, rng));
  Tensor loss = mean_all(square(sub(softmax_lastaxis(matmul(a, b)), relu(b))));
  tape.backward(loss);
  const Tensor ga = tape.grad(a);
  const Tensor gb = tape.grad(b);
  tape.backward(loss);
  CHECK(bitwise_equal(tape.grad(a), ga));
  CHECK(bitwise_equal(tape.grad(b), gb));
}

namespace {

// One expression per primitive, built on whatever tape the binder carries.
Tensor build_expr(const std::string& op, Binder& bind) {
  Tensor a = bind("a");
  Tensor b = bind("b");
  if (op == "matmul") return matmul(a, b);
  if (op == "matmul_nt") return matmul_nt(a, b);
  if (op == "add") return add(a, b);
  if (op == "sub") return sub(a, b);
  if (op == "mul") return mul(a, b);
  if (op == "div") return div(a, add_scalar(square(b), 0.5));
  if (op == "add_rowvec") return add_rowvec(a, bind("gain"));
  if (op == "mul_colvec") return mul_colvec(a, bind("gain"));
  if (op == "relu") return relu(mul(a, b));
  if (op == "softplus") return softplus(mul(a, b));
  if (op == "abs") return abs_of(mul(a, b));
  if (op == "exp") return exp_of(mul_scalar(a, 0.3));
  if (op == "log") return log_of(add_scalar(square(a), 0.7));
  if (op == "softmax") return softmax_lastaxis(matmul(a, b));
  if (op == "logsumexp") return logsumexp_lastaxis(matmul(a, b));
  if (op == "sum_lastaxis") return sum_lastaxis(mul(a, b));
  if (op == "transpose") return matmul(transpose(a), b);
  if (op == "layer_norm") return layer_norm(a, bind("gain"), bind("bias"));
  if (op == "structural") {
    Tensor stacked = concat_rows({a, tile_rows(b, 1), repeat_rows(a, 2)});
    Tensor picked = select_rows(stacked, {0, 3, 2, 5, 1});
    return mul_colvec(slice_cols(concat_cols({picked, picked}), 1, 3),
                      reshape(slice_cols(picked, 0, 1), {5}));
  }
  throw ContractError("unknown op " + op);
}

double eval_expr(const std::string& op, const ParamStore& params) {
  Tape tape;
  Binder bind(tape, params);
  Tensor out = build_expr(op, bind);
  std::vector<double> w(out.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.25 + 0.1 * static_cast<double>(i % 7);
  return sum_all(mul(out, Tensor(out.shape(), std::move(w)))).value();
}

}  // namespace

TEST_CASE("finite-difference gradients per primitive") {
  const std::vector<std::string> ops = {
      "matmul", "matmul_nt", "add",       "sub",        "mul",          "div",
      "add_rowvec", "mul_colvec", "relu", "softplus",   "abs",          "exp",
      "log",    "softmax",   "logsumexp", "sum_lastaxis", "transpose",  "layer_norm",
      "structural"};
  Rng rng(21);
  for (const auto& op : ops) {
    CAPTURE(op);
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
      ParamStore params;
      params.emplace("a", random_tensor({4, 4}, rng, -1.5, 1.5));
      params.emplace("b", random_tensor({4, 4}, rng, -1.5, 1.5));
      params.emplace("gain", random_tensor({4}, rng, 0.5, 1.5));
      params.emplace("bias", random_tensor({4}, rng, -0.5, 0.5));
      if (op == "relu" || op == "abs") {
        // Keep the kinked ops away from their kink so central differences are
        // trustworthy.
        for (;;) {
          const Tensor prod = mul(params.at("a"), params.at("b"));
          bool ok = true;
          for (double v : prod.values()) ok = ok && std::fabs(v) > 1e-2;
          if (ok) break;
          params.insert_or_assign("a", random_tensor({4, 4}, rng, -1.5, 1.5));
          params.insert_or_assign("b", random_tensor({4, 4}, rng, -1.5, 1.5));
        }
      }
      Tape tape;
      Binder bind(tape, params);
      Tensor out = build_expr(op, bind);
      std::vector<double> w(out.size());
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.25 + 0.1 * static_cast<double>(i % 7);
      Tensor scalar = sum_all(mul(out, Tensor(out.shape(), std::move(w))));
      tape.backward(scalar);
      const GradMap analytic = bind.gradients();
      const GradCheck check =
          finite_diff_check(params, [&](const ParamStore& p) { return eval_expr(op, p); },
                            analytic);
      worst = std::max(worst, check.max_rel_err);
    }
    CHECK_MESSAGE(worst < 1e-4, op, " max rel err ", worst);
  }
}

TEST_CASE("finite outputs under random finite inputs") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor a = random_tensor({3, 5}, rng, -40.0, 40.0);
    const Tensor b = random_tensor({5, 3}, rng, -40.0, 40.0);
    CHECK(matmul(a, b).all_finite());
    CHECK(softmax_lastaxis(a).all_finite());
    CHECK(softplus(a).all_finite());
    CHECK(logsumexp_lastaxis(a).all_finite());
    CHECK(layer_norm(a, Tensor::full({5}, 1.0), Tensor::zeros({5})).all_finite());
  }
}

TEST_CASE("broadcast ops") {
  const Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(allclose(add_rowvec(m, Tensor::row({10, 20, 30})),
                 Tensor::matrix(2, 3, {11, 22, 33, 14, 25, 36}), 0.0));
  CHECK(allclose(mul_colvec(m, Tensor::row({2, -1})),
                 Tensor::matrix(2, 3, {2, 4, 6, -4, -5, -6}), 0.0));
  CHECK_THROWS_AS(add_rowvec(m, Tensor::row({1, 2})), ShapeError);
}

TEST_CASE("rng determinism and ranges") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng r(9);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform(-3.0, 5.0);
    CHECK(u >= -3.0);
    CHECK(u < 5.0);
    const auto n = r.uniform_int(2, 7);
    CHECK(n >= 2);
    CHECK(n <= 7);
  }
  CHECK(derive_seed(1, 2, 3) != derive_seed(1, 3, 2));
  CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
}
