#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "grad_check.hpp"
#include "merlot/model.hpp"
#include "test_util.hpp"

using namespace merlot;
using namespace merlot::test;
namespace md = merlot::model;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.5, double hi = 1.5) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

md::Config tiny_config(std::size_t d_r = 4, std::size_t steps = 2) {
  md::Config cfg;
  cfg.d_r = d_r;
  cfg.heads = 2;
  cfg.steps = steps;
  return cfg;
}

md::Task random_task(std::size_t m, std::size_t n, const md::Config& cfg, Rng& rng) {
  md::Task task;
  task.ctx_x = random_tensor({m, cfg.d_x}, rng, -3.0, 3.0);
  task.ctx_y = random_tensor({m, cfg.d_y}, rng, -2.0, 2.0);
  task.query_x = random_tensor({n, cfg.d_x}, rng, -3.0, 3.0);
  task.query_y = random_tensor({n, cfg.d_y}, rng, -2.0, 2.0);
  return task;
}

void zero_prefix(ParamStore& params, const std::string& prefix) {
  for (auto& [name, value] : params)
    if (name.rfind(prefix, 0) == 0) value = Tensor::zeros(value.shape());
}

}  // namespace

TEST_CASE("config flag combinations") {
  CHECK(md::preset("merlot").use_seed_generator);
  CHECK_FALSE(md::preset("merlot_no_psi").use_seed_generator);
  CHECK(md::preset("metafun_sa").use_self_attention);
  CHECK_FALSE(md::preset("metafun").use_self_attention);
  CHECK_THROWS_AS(md::preset("anp"), ConfigError);

  md::Config bad = md::preset("metafun");
  bad.use_seed_generator = true;  // seeds without local functions
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = md::preset("merlot");
  bad.use_self_attention = false;  // local functions without the stack
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("seed field: zero generator, locality, unrolled oracle") {
  Rng rng(1);
  md::Config cfg = tiny_config();
  md::Model model = md::build_model(cfg, 3);
  const md::Task task = random_task(3, 2, cfg, rng);
  const Tensor eval_x = concat_rows({task.ctx_x, task.query_x});

  {
    md::Model zeroed = model;
    zero_prefix(zeroed.params, "psi.");
    Tape tape;
    Binder bind(tape, zeroed.params);
    const Tensor field = md::seed_field(bind, cfg, task.ctx_x, task.ctx_y, eval_x);
    CHECK(field.rows() == 3 * 5);
    CHECK(allclose(field, Tensor::zeros({15, cfg.d_r}), 0.0));
  }

  // Local function i depends only on c_i (and the evaluation points).
  {
    Tape tape;
    Binder bind(tape, model.params);
    const Tensor field = md::seed_field(bind, cfg, task.ctx_x, task.ctx_y, eval_x);
    md::Task bumped = task;
    std::vector<double> y = task.ctx_y.values();
    y[2] += 1.0;  // perturb c_2 only
    bumped.ctx_y = Tensor(task.ctx_y.shape(), y);
    Tape tape2;
    Binder bind2(tape2, model.params);
    const Tensor field2 = md::seed_field(bind2, cfg, bumped.ctx_x, bumped.ctx_y, eval_x);
    // Blocks for locals 0 and 1 are untouched; block 2 changes.
    CHECK(bitwise_equal(slice_rows(field, 0, 10), slice_rows(field2, 0, 10)));
    bool changed = false;
    for (std::size_t r = 10; r < 15 && !changed; ++r)
      for (std::size_t c = 0; c < cfg.d_r && !changed; ++c)
        changed = field.at(r, c) != field2.at(r, c);
    CHECK(changed);
  }

  // Tiny instance against hand-unrolled MLP arithmetic (d_r = 2, m = 2).
  {
    md::Config small = tiny_config(2);
    small.heads = 1;
    md::Model sm = md::build_model(small, 9);
    md::Task st = random_task(2, 1, small, rng);
    Tape tape;
    Binder bind(tape, sm.params);
    const Tensor ev = concat_rows({st.ctx_x, st.query_x});
    const Tensor field = md::seed_field(bind, small, st.ctx_x, st.ctx_y, ev);
    auto mlp_row = [&](const std::string& prefix, std::vector<double> h) {
      for (std::size_t layer = 0; layer <= 2; ++layer) {
        const Tensor& w = sm.params.at(prefix + ".w" + std::to_string(layer));
        const Tensor& b = sm.params.at(prefix + ".b" + std::to_string(layer));
        std::vector<double> next(w.cols(), 0.0);
        for (std::size_t j = 0; j < w.cols(); ++j) {
          for (std::size_t i = 0; i < w.rows(); ++i) next[j] += h[i] * w.at(i, j);
          next[j] += b.at(j);
          if (layer < 2) next[j] = std::max(next[j], 0.0);
        }
        h = next;
      }
      return h;
    };
    for (std::size_t i = 0; i < 2; ++i) {
      const auto emb = mlp_row("psi.emb", {st.ctx_x.at(i, 0), st.ctx_y.at(i, 0)});
      for (std::size_t e = 0; e < 3; ++e) {
        std::vector<double> in{ev.at(e, 0)};
        in.insert(in.end(), emb.begin(), emb.end());
        const auto expect = mlp_row("psi.seed", in);
        for (std::size_t d = 0; d < 2; ++d)
          CHECK(close(field.at(i * 3 + e, d), expect[d], 1e-12));
      }
    }
  }
}

TEST_CASE("similarity matrix rows are probability vectors") {
  Rng rng(2);
  md::Config cfg = tiny_config();
  md::Model model = md::build_model(cfg, 5);

  {
    const md::Task task = random_task(1, 3, cfg, rng);
    Tape tape;
    Binder bind(tape, model.params);
    const Tensor k = md::similarity_matrix(bind, cfg, task.ctx_x, task.ctx_y,
                                           concat_rows({task.ctx_x, task.query_x}));
    CHECK(k.rows() == 4);
    CHECK(k.cols() == 1);
    for (std::size_t r = 0; r < 4; ++r) CHECK(k.at(r, 0) == 1.0);
  }

  {
    const md::Task task = random_task(6, 4, cfg, rng);
    Tape tape;
    Binder bind(tape, model.params);
    const Tensor k = md::similarity_matrix(bind, cfg, task.ctx_x, task.ctx_y,
                                           concat_rows({task.ctx_x, task.query_x}));
    for (std::size_t r = 0; r < 10; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 6; ++c) sum += k.at(r, c);
      CHECK(close(sum, 1.0, 1e-9));
    }
  }

  // Duplicated context point splits its weight equally.
  {
    md::Task task = random_task(3, 2, cfg, rng);
    std::vector<double> xs = task.ctx_x.values();
    std::vector<double> ys = task.ctx_y.values();
    xs.push_back(xs[1]);
    ys.push_back(ys[1]);
    task.ctx_x = Tensor({4, 1}, xs);
    task.ctx_y = Tensor({4, 1}, ys);
    Tape tape;
    Binder bind(tape, model.params);
    const Tensor k = md::similarity_matrix(bind, cfg, task.ctx_x, task.ctx_y,
                                           concat_rows({task.ctx_x, task.query_x}));
    for (std::size_t r = 0; r < k.rows(); ++r) CHECK(close(k.at(r, 1), k.at(r, 3), 1e-9));
  }

  CHECK_THROWS_AS(
      [&] {
        Tape tape;
        Binder bind(tape, model.params);
        md::similarity_matrix(bind, cfg, Tensor::zeros({0, 1}), Tensor::zeros({0, 1}),
                              Tensor::zeros({2, 1}));
      }(),
      ContractError);
}

TEST_CASE("functional update step: no-op cases and brute-force oracle") {
  Rng rng(3);
  md::Config cfg = tiny_config();
  md::Model model = md::build_model(cfg, 7);
  const md::Task task = random_task(4, 3, cfg, rng);
  const Tensor eval_x = concat_rows({task.ctx_x, task.query_x});

  // alpha = 0 leaves the field bitwise unchanged.
  {
    md::Config frozen = cfg;
    frozen.alpha = 0.0;
    Tape tape;
    Binder bind(tape, model.params);
    const Tensor k = md::similarity_matrix(bind, frozen, task.ctx_x, task.ctx_y, eval_x);
    const Tensor field = md::seed_field(bind, frozen, task.ctx_x, task.ctx_y, eval_x);
    const Tensor next = md::functional_update_step(bind, frozen, field, task.ctx_x, task.ctx_y, k);
    CHECK(bitwise_equal(field, next));
  }

  // Zeroed updater leaves the field bitwise unchanged.
  {
    md::Model zeroed = model;
    zero_prefix(zeroed.params, "upd.");
    Tape tape;
    Binder bind(tape, zeroed.params);
    const Tensor k = md::similarity_matrix(bind, cfg, task.ctx_x, task.ctx_y, eval_x);
    const Tensor field = md::seed_field(bind, cfg, task.ctx_x, task.ctx_y, eval_x);
    const Tensor next = md::functional_update_step(bind, cfg, field, task.ctx_x, task.ctx_y, k);
    CHECK(bitwise_equal(field, next));
  }

  // Tiny instance against a brute-force sum-of-updates oracle.
  {
    md::Config small = tiny_config(2, 1);
    small.heads = 1;
    md::Model sm = md::build_model(small, 11);
    const md::Task st = random_task(2, 1, small, rng);
    const Tensor ev = concat_rows({st.ctx_x, st.query_x});
    Tape tape;
    Binder bind(tape, sm.params);
    const Tensor k = md::similarity_matrix(bind, small, st.ctx_x, st.ctx_y, ev);
    const Tensor field = md::seed_field(bind, small, st.ctx_x, st.ctx_y, ev);
    const Tensor next = md::functional_update_step(bind, small, field, st.ctx_x, st.ctx_y, k);

    // u_i^j from a fresh evaluation, then delta r^j_x = sum_i k(x_i, x) u_i^j.
    Tape otape;
    Binder obind(otape, sm.params);
    for (std::size_t j = 0; j < 2; ++j) {
      std::vector<Tensor> updates;
      for (std::size_t i = 0; i < 2; ++i) {
        const Tensor in = concat_cols(
            {slice_rows(st.ctx_x, i, 1), slice_rows(st.ctx_y, i, 1),
             slice_rows(field.detached(), j * 3 + i, 1)});
        updates.push_back(
            nn::mlp_forward(obind, "upd", nn::MlpSpec{4, 2, 2, 2}, in));
      }
      for (std::size_t e = 0; e < 3; ++e) {
        for (std::size_t d = 0; d < 2; ++d) {
          double delta = 0.0;
          for (std::size_t i = 0; i < 2; ++i) delta += k.at(e, i) * updates[i].at(0, d);
          const double expect = field.at(j * 3 + e, d) - small.alpha * delta;
          CHECK(close(next.at(j * 3 + e, d), expect, 1e-12));
        }
      }
    }
  }
}

TEST_CASE("decode sigma parameterization") {
  md::Config cfg = tiny_config();
  md::Model model = md::build_model(cfg, 13);
  zero_prefix(model.params, "dec.");
  Tape tape;
  Binder bind(tape, model.params);
  Rng rng(4);
  const Tensor reps = random_tensor({3, cfg.d_r}, rng);
  const Tensor xs = random_tensor({3, 1}, rng);
  const auto dec = md::decode(bind, cfg, reps, xs);
  // Zeroed decoder: mu = 0 and sigma = 0.1 + 0.9 * softplus(0) everywhere.
  const double sigma0 = 0.1 + 0.9 * std::log(2.0);
  CHECK(close(sigma0, 0.7238324625039508, 1e-12));
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(dec.mu.at(r, 0) == 0.0);
    CHECK(close(dec.sigma.at(r, 0), sigma0, 1e-12));
  }

  // Strongly negative raw scale approaches the 0.1 floor.
  md::Model biased = md::build_model(cfg, 13);
  zero_prefix(biased.params, "dec.");
  std::vector<double> bias = biased.params.at("dec.b2").values();
  bias[1] = -40.0;
  biased.params.insert_or_assign("dec.b2", Tensor({2}, bias));
  Tape tape2;
  Binder bind2(tape2, biased.params);
  const auto dec2 = md::decode(bind2, cfg, reps, xs);
  CHECK(close(dec2.sigma.at(0, 0), 0.1, 1e-12));

  // Point-estimate configuration returns mu only.
  md::Config point = cfg;
  point.gaussian_output = false;
  Tape tape3;
  Binder bind3(tape3, model.params);
  const auto dec3 = md::decode(bind3, point, reps, xs);
  CHECK(dec3.sigma.size() == 0);
}

TEST_CASE("predict: single-context mixture, permutation invariance, field sizes") {
  Rng rng(5);
  md::Config cfg = tiny_config();
  md::Model model = md::build_model(cfg, 17);

  {
    const md::Task task = random_task(1, 4, cfg, rng);
    const auto mixtures = md::predict(model, task);
    CHECK(mixtures.size() == 4);
    for (const auto& mix : mixtures) {
      CHECK(mix.weights.size() == 1);
      CHECK(mix.weights[0] == 1.0);
      CHECK(mix.sigma[0][0] > 0.0);
    }
  }

  // Context permutation: NLL invariant, components permute.
  {
    const md::Task task = random_task(5, 3, cfg, rng);
    const auto base = md::predict(model, task);
    const std::vector<std::size_t> perm{3, 1, 4, 0, 2};
    md::Task shuffled = task;
    shuffled.ctx_x = select_rows(task.ctx_x, perm);
    shuffled.ctx_y = select_rows(task.ctx_y, perm);
    const auto permuted = md::predict(model, shuffled);
    for (std::size_t j = 0; j < 3; ++j) {
      const std::vector<double> y{task.query_y.at(j, 0)};
      CHECK(close(md::nll_value(base[j], y), md::nll_value(permuted[j], y), 1e-9));
      for (std::size_t i = 0; i < 5; ++i) {
        CHECK(close(permuted[j].weights[i], base[j].weights[perm[i]], 1e-9));
        CHECK(close(permuted[j].mu[i][0], base[j].mu[perm[i]][0], 1e-9));
      }
    }
  }

  // The number of local functions equals m with no cap.
  for (std::size_t m : {std::size_t(1), std::size_t(10), std::size_t(100)}) {
    const md::Task task = random_task(m, 2, cfg, rng);
    const auto mixtures = md::predict(model, task);
    CHECK(mixtures[0].weights.size() == m);
    Tape tape;
    Binder bind(tape, model.params);
    const Tensor field = md::seed_field(bind, cfg, task.ctx_x, task.ctx_y,
                                        concat_rows({task.ctx_x, task.query_x}));
    CHECK(field.rows() == m * (m + 2));
  }
}

TEST_CASE("predict with T = 0 is exactly decode after seeding") {
  Rng rng(6);
  md::Config cfg = tiny_config(4, 0);
  md::Model model = md::build_model(cfg, 19);
  const md::Task task = random_task(4, 3, cfg, rng);
  const auto via_predict = md::predict(model, task);

  Tape tape;
  Binder bind(tape, model.params);
  const Tensor eval_x = concat_rows({task.ctx_x, task.query_x});
  const Tensor field = md::seed_field(bind, cfg, task.ctx_x, task.ctx_y, eval_x);
  const Tensor k = md::similarity_matrix(bind, cfg, task.ctx_x, task.ctx_y, eval_x);
  std::vector<std::size_t> query_rows;
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t e = 4; e < 7; ++e) query_rows.push_back(j * 7 + e);
  const auto dec =
      md::decode(bind, cfg, select_rows(field, query_rows), tile_rows(task.query_x, 4));
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(via_predict[j].mu[i][0] == dec.mu.at(i * 3 + j, 0));
      CHECK(via_predict[j].sigma[i][0] == dec.sigma.at(i * 3 + j, 0));
      CHECK(via_predict[j].weights[i] == k.at(4 + j, i));
    }
}

TEST_CASE("similarity matrix is constant across update steps") {
  Rng rng(7);
  md::Config cfg = tiny_config();
  md::Model model = md::build_model(cfg, 23);
  const md::Task task = random_task(4, 2, cfg, rng);
  const Tensor eval_x = concat_rows({task.ctx_x, task.query_x});
  Tape tape;
  Binder bind(tape, model.params);
  const Tensor k0 = md::similarity_matrix(bind, cfg, task.ctx_x, task.ctx_y, eval_x);
  Tensor field = md::seed_field(bind, cfg, task.ctx_x, task.ctx_y, eval_x);
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    field = md::functional_update_step(bind, cfg, field, task.ctx_x, task.ctx_y, k0);
    Tape fresh;
    Binder fresh_bind(fresh, model.params);
    const Tensor kt = md::similarity_matrix(fresh_bind, cfg, task.ctx_x, task.ctx_y, eval_x);
    CHECK(bitwise_equal(k0, kt));
  }
}

TEST_CASE("update locality: with a zeroed updater, local functions ignore other context") {
  Rng rng(8);
  md::Config cfg = tiny_config();
  md::Model model = md::build_model(cfg, 29);
  zero_prefix(model.params, "upd.");
  md::Task task = random_task(3, 2, cfg, rng);
  const auto base = md::predict(model, task);
  std::vector<double> y = task.ctx_y.values();
  y[1] += 2.0;
  task.ctx_y = Tensor(task.ctx_y.shape(), y);
  const auto bumped = md::predict(model, task);
  // Component 0 (local function around c_0) keeps its mean and scale; only
  // the weights (which read the whole context) may move.
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(base[j].mu[0][0] == bumped[j].mu[0][0]);
    CHECK(base[j].sigma[0][0] == bumped[j].sigma[0][0]);
    CHECK(base[j].mu[2][0] == bumped[j].mu[2][0]);
  }
}

TEST_CASE("nll_loss values") {
  // Single component at the mode with unit scale: 0.5 * ln(2 pi) per dim.
  md::MixturePrediction single;
  single.weights = {1.0};
  single.mu = {{0.7}};
  single.sigma = {{1.0}};
  CHECK(close(md::nll_value(single, {0.7}), 0.9189385332046727, 1e-12));

  // Two identical components collapse to one.
  md::MixturePrediction twin;
  twin.weights = {0.5, 0.5};
  twin.mu = {{0.7}, {0.7}};
  twin.sigma = {{1.0}, {1.0}};
  CHECK(close(md::nll_value(twin, {0.7}), md::nll_value(single, {0.7}), 1e-12));

  // Random mixtures against a direct extended-precision density evaluation.
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    md::MixturePrediction mix;
    double wsum = 0.0;
    for (int i = 0; i < 3; ++i) {
      mix.weights.push_back(rng.uniform(0.1, 1.0));
      wsum += mix.weights.back();
      mix.mu.push_back({rng.uniform(-2.0, 2.0)});
      mix.sigma.push_back({rng.uniform(0.2, 2.0)});
    }
    for (auto& w : mix.weights) w /= wsum;
    const double y = rng.uniform(-3.0, 3.0);
    long double density = 0.0L;
    for (int i = 0; i < 3; ++i) {
      const long double s = mix.sigma[static_cast<std::size_t>(i)][0];
      const long double z = (static_cast<long double>(y) - mix.mu[static_cast<std::size_t>(i)][0]) / s;
      density += static_cast<long double>(mix.weights[static_cast<std::size_t>(i)]) *
                 std::exp(-0.5L * z * z) /
                 (s * std::sqrt(2.0L * 3.141592653589793238L));
    }
    CHECK(close(md::nll_value(mix, {y}), static_cast<double>(-std::log(density)), 1e-10));
  }
}

TEST_CASE("tape nll matches the value-level recomputation") {
  Rng rng(10);
  md::Config cfg = tiny_config();
  md::Model model = md::build_model(cfg, 31);
  const md::Task task = random_task(5, 4, cfg, rng);
  Tape tape;
  Binder bind(tape, model.params);
  const auto fwd = md::predict_tape(bind, cfg, task);
  const double tape_loss = md::nll_loss(fwd, task.query_y).value();
  const auto mixtures = md::to_mixtures(fwd);
  double recomputed = 0.0;
  for (std::size_t j = 0; j < 4; ++j)
    recomputed += md::nll_value(mixtures[j], {task.query_y.at(j, 0)});
  recomputed /= 4.0;
  CHECK(close(tape_loss, recomputed, 1e-12));
}

TEST_CASE("mixture density integrates to one") {
  Rng rng(11);
  md::Config cfg = tiny_config();
  md::Model model = md::build_model(cfg, 37);
  const md::Task task = random_task(6, 2, cfg, rng);
  const auto mixtures = md::predict(model, task);
  for (const auto& mix : mixtures) {
    double lo = mix.mu[0][0], hi = mix.mu[0][0];
    for (std::size_t i = 0; i < mix.weights.size(); ++i) {
      lo = std::min(lo, mix.mu[i][0] - 8.0 * mix.sigma[i][0]);
      hi = std::max(hi, mix.mu[i][0] + 8.0 * mix.sigma[i][0]);
    }
    const std::size_t steps = 4000;
    const double h = (hi - lo) / static_cast<double>(steps);
    double integral = 0.5 * (md::density_value(mix, lo) + md::density_value(mix, hi));
    for (std::size_t i = 1; i < steps; ++i)
      integral += md::density_value(mix, lo + h * static_cast<double>(i));
    integral *= h;
    CHECK(close(integral, 1.0, 1e-3));
    // density_value agrees with exp(-nll)
    const double mid = 0.5 * (lo + hi);
    CHECK(close(md::density_value(mix, mid), std::exp(-md::nll_value(mix, {mid})), 1e-10));
  }
}

TEST_CASE("point prediction sampling") {
  md::MixturePrediction mix;
  mix.weights = {0.25, 0.75};
  mix.mu = {{-1.0}, {2.0}};
  mix.sigma = {{0.3}, {0.5}};

  Rng a(123), b(123);
  const auto p1 = md::point_prediction(mix, 30, a);
  const auto p2 = md::point_prediction(mix, 30, b);
  CHECK(p1[0] == p2[0]);

  // Empirical mean over many draws approaches the analytic mixture mean.
  const double analytic = 0.25 * -1.0 + 0.75 * 2.0;
  Rng rng(77);
  double acc = 0.0;
  const int trials = 20000;
  for (int t = 0; t < trials; ++t) acc += md::point_prediction(mix, 30, rng)[0];
  acc /= trials;
  // Per-call variance: mixture variance / 30.
  const double mix_var = 0.25 * (0.09 + 1.0) + 0.75 * (0.25 + 4.0) - analytic * analytic;
  const double se = std::sqrt(mix_var / 30.0 / trials);
  CHECK(std::fabs(acc - analytic) < 3.0 * se + 1e-9);

  // Point-estimate mixtures return the exact mixture mean.
  md::MixturePrediction point;
  point.weights = {0.5, 0.5};
  point.mu = {{1.0}, {3.0}};
  Rng c(1);
  CHECK(md::point_prediction(point, 30, c)[0] == 2.0);
}

TEST_CASE("end-to-end gradient check on the tiny configuration") {
  Rng rng(13);
  md::Config cfg = tiny_config(4, 2);
  md::Model model = md::build_model(cfg, 41);
  const md::Task task = random_task(3, 2, cfg, rng);

  auto loss_fn = [&](const ParamStore& params) {
    Tape tape;
    Binder bind(tape, params);
    const auto fwd = md::predict_tape(bind, cfg, task);
    return md::nll_loss(fwd, task.query_y).value();
  };
  Tape tape;
  Binder bind(tape, model.params);
  const auto fwd = md::predict_tape(bind, cfg, task);
  Tensor loss = md::nll_loss(fwd, task.query_y);
  tape.backward(loss);
  const GradCheck check = finite_diff_check(model.params, loss_fn, bind.gradients());
  CHECK_MESSAGE(check.max_rel_err < 1e-4, check.worst_param, " err ", check.max_rel_err);
}

TEST_CASE("adapted-context prediction is bitwise the full pipeline") {
  Rng rng(14);
  for (const char* name : {"merlot", "merlot_no_psi", "metafun_sa", "metafun"}) {
    CAPTURE(name);
    md::Config cfg = md::preset(name);
    cfg.d_r = 8;
    cfg.heads = 2;
    md::Model model = md::build_model(cfg, 43);
    const md::Task task = random_task(5, 3, cfg, rng);
    const auto full = md::predict(model, task);
    const auto adapted = md::adapt_context(model, task.ctx_x, task.ctx_y);
    const auto fast = md::predict_adapted(model, adapted, task.query_x);
    REQUIRE(fast.size() == full.size());
    for (std::size_t j = 0; j < full.size(); ++j) {
      CHECK(bitwise_equal(full[j].weights, fast[j].weights));
      for (std::size_t i = 0; i < full[j].weights.size(); ++i) {
        CHECK(bitwise_equal(full[j].mu[i], fast[j].mu[i]));
        if (!full[j].sigma.empty()) CHECK(bitwise_equal(full[j].sigma[i], fast[j].sigma[i]));
      }
    }
  }
}

TEST_CASE("point-estimate losses") {
  Rng rng(15);
  md::Config cfg = tiny_config();
  cfg.gaussian_output = false;
  md::Model model = md::build_model(cfg, 47);
  const md::Task task = random_task(4, 3, cfg, rng);
  Tape tape;
  Binder bind(tape, model.params);
  const auto fwd = md::predict_tape(bind, cfg, task);
  CHECK(fwd.sigma.size() == 0);
  CHECK_THROWS_AS(md::nll_loss(fwd, task.query_y), ContractError);
  const double loss = md::l2_loss(fwd, task.query_y).value();
  // Direct recomputation from the mixtures.
  const auto mixtures = md::to_mixtures(fwd);
  double expect = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    const auto mean = md::mixture_mean(mixtures[j]);
    const double d = mean[0] - task.query_y.at(j, 0);
    expect += d * d;
  }
  expect /= 3.0;
  CHECK(close(loss, expect, 1e-12));
}
