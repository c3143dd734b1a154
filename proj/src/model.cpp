#include "merlot/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace merlot::model {

namespace {

constexpr double kLogTwoPi = 1.8378770664093453;

nn::MlpSpec psi_emb_spec(const Config& c) {
  return {c.use_seed_generator ? c.d_x + c.d_y : c.d_x, c.d_r, c.d_r, c.depth};
}
nn::MlpSpec psi_seed_spec(const Config& c) { return {c.d_x + c.d_r, c.d_r, c.d_r, c.depth}; }
nn::MlpSpec updater_spec(const Config& c) { return {c.d_x + c.d_y + c.d_r, c.d_r, c.d_r, c.depth}; }
nn::MlpSpec decoder_spec(const Config& c) { return {c.d_x + c.d_r, c.d_r, 2 * c.d_y, c.depth}; }
nn::MlpSpec xenc_spec(const Config& c) { return {c.d_x, c.d_r, c.d_r, c.depth}; }
nn::MlpSpec xyenc_spec(const Config& c) { return {c.d_x + c.d_y, c.d_r, c.d_r, c.depth}; }
nn::StackSpec stack_spec(const Config& c) { return {c.d_r, c.depth, c.heads, c.ffn_hidden()}; }

}  // namespace

void Config::validate() const {
  if (d_x == 0 || d_y == 0 || d_r == 0) throw ConfigError("dimensions must be positive");
  if (heads == 0 || d_r % heads != 0)
    throw ConfigError("d_r " + std::to_string(d_r) + " not divisible by heads " +
                      std::to_string(heads));
  const bool sa = use_self_attention, loc = use_local_functions, seed = use_seed_generator;
  const bool valid = (sa && loc && seed) || (sa && loc && !seed) || (sa && !loc && !seed) ||
                     (!sa && !loc && !seed);
  if (!valid)
    throw ConfigError("invalid flag combination: self_attention=" + std::to_string(sa) +
                      " local_functions=" + std::to_string(loc) +
                      " seed_generator=" + std::to_string(seed));
}

std::string Config::preset_name() const {
  if (use_local_functions) return use_seed_generator ? "merlot" : "merlot_no_psi";
  return use_self_attention ? "metafun_sa" : "metafun";
}

Config preset(const std::string& name) {
  Config c;
  if (name == "merlot") {
    c.use_self_attention = c.use_local_functions = c.use_seed_generator = true;
  } else if (name == "merlot_no_psi") {
    c.use_self_attention = c.use_local_functions = true;
    c.use_seed_generator = false;
  } else if (name == "metafun_sa") {
    c.use_self_attention = true;
    c.use_local_functions = c.use_seed_generator = false;
  } else if (name == "metafun") {
    c.use_self_attention = c.use_local_functions = c.use_seed_generator = false;
  } else {
    throw ConfigError("unknown model preset: " + name);
  }
  return c;
}

Model build_model(const Config& cfg, std::uint64_t seed) {
  cfg.validate();
  Model model{cfg, {}};
  Rng rng(seed);
  if (cfg.use_local_functions) {
    nn::init_mlp(model.params, "psi.emb", psi_emb_spec(cfg), rng);
    nn::init_mlp(model.params, "psi.seed", psi_seed_spec(cfg), rng);
  } else {
    model.params.insert_or_assign("r0", Tensor::zeros({cfg.d_r}));
  }
  nn::init_mlp(model.params, "upd", updater_spec(cfg), rng);
  nn::init_mlp(model.params, "dec", decoder_spec(cfg), rng);
  nn::init_mlp(model.params, "sim.xenc", xenc_spec(cfg), rng);
  if (cfg.use_self_attention) {
    nn::init_mlp(model.params, "sim.xyenc", xyenc_spec(cfg), rng);
    nn::init_stack(model.params, "sim.stack", stack_spec(cfg), rng);
  }
  return model;
}

std::size_t param_count(const Model& model) {
  std::size_t total = 0;
  for (const auto& [name, value] : model.params) total += value.size();
  return total;
}

Tensor seed_field(Binder& bind, const Config& cfg, const Tensor& ctx_x, const Tensor& ctx_y,
                  const Tensor& eval_x) {
  const std::size_t m = ctx_x.rows();
  if (m == 0) throw ContractError("seed_field: empty context set");
  const std::size_t total = eval_x.rows();
  if (!cfg.use_local_functions) {
    Tensor r0 = bind("r0");
    return tile_rows(reshape(r0, {1, cfg.d_r}), total);
  }
  Tensor emb_in = cfg.use_seed_generator ? concat_cols({ctx_x, ctx_y}) : ctx_x;
  Tensor emb = nn::mlp_forward(bind, "psi.emb", psi_emb_spec(cfg), emb_in);
  Tensor xs = tile_rows(eval_x, m);
  Tensor emb_rep = repeat_rows(emb, total);
  return nn::mlp_forward(bind, "psi.seed", psi_seed_spec(cfg), concat_cols({xs, emb_rep}));
}

Tensor similarity_matrix(Binder& bind, const Config& cfg, const Tensor& ctx_x,
                         const Tensor& ctx_y, const Tensor& eval_x) {
  const std::size_t m = ctx_x.rows();
  if (m == 0) throw ContractError("similarity_matrix: empty context set");
  if (cfg.use_self_attention) {
    Tensor e0 = nn::mlp_forward(bind, "sim.xyenc", xyenc_spec(cfg), concat_cols({ctx_x, ctx_y}));
    Tensor d0 = nn::mlp_forward(bind, "sim.xenc", xenc_spec(cfg), eval_x);
    auto [e_final, d_final] = nn::encdec_forward(bind, "sim.stack", stack_spec(cfg), e0, d0);
    Tensor keys = slice_rows(d_final, 0, m);
    return softmax_lastaxis(matmul_nt(d_final, keys));
  }
  Tensor ctx_emb = nn::mlp_forward(bind, "sim.xenc", xenc_spec(cfg), ctx_x);
  Tensor eval_emb = nn::mlp_forward(bind, "sim.xenc", xenc_spec(cfg), eval_x);
  return softmax_lastaxis(matmul_nt(eval_emb, ctx_emb));
}

namespace {

// Updater outputs u_i^j for every (local function j, context point i), stacked
// j-major: [L*m x d_r]. `total` is the number of evaluation points per local
// block in `field`.
Tensor compute_updates(Binder& bind, const Config& cfg, const Tensor& field, std::size_t total,
                       const Tensor& ctx_x, const Tensor& ctx_y) {
  const std::size_t m = ctx_x.rows();
  const std::size_t n_local = cfg.use_local_functions ? m : 1;
  std::vector<std::size_t> ctx_rows;
  ctx_rows.reserve(n_local * m);
  for (std::size_t j = 0; j < n_local; ++j)
    for (std::size_t i = 0; i < m; ++i) ctx_rows.push_back(j * total + i);
  Tensor r_ctx = select_rows(field, ctx_rows);
  Tensor xy = concat_cols({ctx_x, ctx_y});
  return nn::mlp_forward(bind, "upd", updater_spec(cfg),
                         concat_cols({tile_rows(xy, n_local), r_ctx}));
}

// field <- field - alpha * (k-smoothed updates), block by local function.
Tensor apply_updates(const Config& cfg, const Tensor& field, const Tensor& k,
                     const Tensor& updates, std::size_t m, std::size_t n_local) {
  std::vector<Tensor> deltas;
  deltas.reserve(n_local);
  for (std::size_t j = 0; j < n_local; ++j)
    deltas.push_back(matmul(k, slice_rows(updates, j * m, m)));
  Tensor delta = n_local == 1 ? deltas[0] : concat_rows(deltas);
  return sub(field, mul_scalar(delta, cfg.alpha));
}

}  // namespace

Tensor functional_update_step(Binder& bind, const Config& cfg, const Tensor& field,
                              const Tensor& ctx_x, const Tensor& ctx_y, const Tensor& k) {
  const std::size_t m = ctx_x.rows();
  const std::size_t n_local = cfg.use_local_functions ? m : 1;
  Tensor updates = compute_updates(bind, cfg, field, k.rows(), ctx_x, ctx_y);
  return apply_updates(cfg, field, k, updates, m, n_local);
}

Decoded decode(Binder& bind, const Config& cfg, const Tensor& reps, const Tensor& xs) {
  Tensor out = nn::mlp_forward(bind, "dec", decoder_spec(cfg), concat_cols({xs, reps}));
  Decoded d;
  d.mu = slice_cols(out, 0, cfg.d_y);
  if (cfg.gaussian_output)
    d.sigma = add_scalar(mul_scalar(softplus(slice_cols(out, cfg.d_y, cfg.d_y)), 0.9), 0.1);
  return d;
}

Forward predict_tape(Binder& bind, const Config& cfg, const Task& task) {
  cfg.validate();
  const std::size_t m = task.m(), n = task.n();
  if (m == 0) throw ContractError("predict: empty context set");
  const std::size_t total = m + n;
  Tensor eval_x = concat_rows({task.ctx_x, task.query_x});
  Tensor k = similarity_matrix(bind, cfg, task.ctx_x, task.ctx_y, eval_x);
  Tensor field = seed_field(bind, cfg, task.ctx_x, task.ctx_y, eval_x);
  for (std::size_t t = 0; t < cfg.steps; ++t)
    field = functional_update_step(bind, cfg, field, task.ctx_x, task.ctx_y, k);
  const std::size_t n_local = cfg.use_local_functions ? m : 1;
  std::vector<std::size_t> query_rows;
  query_rows.reserve(n_local * n);
  for (std::size_t j = 0; j < n_local; ++j)
    for (std::size_t e = m; e < total; ++e) query_rows.push_back(j * total + e);
  Tensor reps = select_rows(field, query_rows);
  Decoded dec = decode(bind, cfg, reps, tile_rows(task.query_x, n_local));
  Forward fwd;
  fwd.mu = dec.mu;
  fwd.sigma = dec.sigma;
  fwd.n_local = n_local;
  fwd.n_query = n;
  fwd.weights = cfg.use_local_functions ? slice_rows(k, m, n) : Tensor::full({n, 1}, 1.0);
  return fwd;
}

Tensor nll_loss(const Forward& fwd, const Tensor& query_y) {
  const std::size_t n = fwd.n_query, L = fwd.n_local;
  const std::size_t d_y = query_y.cols();
  if (fwd.sigma.size() == 0)
    throw ContractError("nll_loss: prediction has no scale parameters (point-estimate mode)");
  Tensor y = tile_rows(query_y, L);
  Tensor z = div(sub(y, fwd.mu), fwd.sigma);
  Tensor row_ll = add_scalar(
      sub(mul_scalar(sum_lastaxis(mul(z, z)), -0.5), sum_lastaxis(log_of(fwd.sigma))),
      -0.5 * kLogTwoPi * static_cast<double>(d_y));
  Tensor per_component = transpose(reshape(row_ll, {L, n}));  // [n x L]
  Tensor logits = add(log_of(fwd.weights), per_component);
  return mean_all(neg(logsumexp_lastaxis(logits)));
}

Tensor l2_loss(const Forward& fwd, const Tensor& query_y) {
  const std::size_t n = fwd.n_query, L = fwd.n_local;
  Tensor yhat;
  for (std::size_t i = 0; i < L; ++i) {
    Tensor block = slice_rows(fwd.mu, i * n, n);
    Tensor w_col = reshape(slice_cols(fwd.weights, i, 1), {n});
    Tensor term = mul_colvec(block, w_col);
    yhat = i == 0 ? term : add(yhat, term);
  }
  return mean_all(sum_lastaxis(square(sub(yhat, query_y))));
}

std::vector<MixturePrediction> to_mixtures(const Forward& fwd) {
  const std::size_t n = fwd.n_query, L = fwd.n_local;
  const std::size_t d_y = fwd.mu.cols();
  const bool gaussian = fwd.sigma.size() != 0;
  std::vector<MixturePrediction> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    auto& mix = out[j];
    mix.weights.resize(L);
    mix.mu.assign(L, std::vector<double>(d_y));
    if (gaussian) mix.sigma.assign(L, std::vector<double>(d_y));
    for (std::size_t i = 0; i < L; ++i) {
      mix.weights[i] = fwd.weights.at(j, i);
      for (std::size_t d = 0; d < d_y; ++d) {
        mix.mu[i][d] = fwd.mu.at(i * n + j, d);
        if (gaussian) mix.sigma[i][d] = fwd.sigma.at(i * n + j, d);
      }
    }
  }
  return out;
}

std::vector<MixturePrediction> predict(const Model& model, const Task& task) {
  Tape tape;
  Binder bind(tape, model.params);
  return to_mixtures(predict_tape(bind, model.cfg, task));
}

double nll_value(const MixturePrediction& pred, const std::vector<double>& y) {
  const std::size_t L = pred.weights.size();
  if (pred.sigma.empty()) throw ContractError("nll_value: point-estimate prediction");
  std::vector<double> logits(L);
  for (std::size_t i = 0; i < L; ++i) {
    double ll = std::log(pred.weights[i]);
    for (std::size_t d = 0; d < y.size(); ++d) {
      const double s = pred.sigma[i][d];
      const double z = (y[d] - pred.mu[i][d]) / s;
      ll += -0.5 * kLogTwoPi - std::log(s) - 0.5 * z * z;
    }
    logits[i] = ll;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - mx);
  return -(mx + std::log(sum));
}

double density_value(const MixturePrediction& pred, double y) {
  if (pred.mu.empty() || pred.mu[0].size() != 1)
    throw ContractError("density_value: requires d_y = 1");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.weights.size(); ++i) {
    const double s = pred.sigma[i][0];
    const double z = (y - pred.mu[i][0]) / s;
    acc += pred.weights[i] * std::exp(-0.5 * z * z) / (s * std::sqrt(2.0 * 3.14159265358979323846));
  }
  return acc;
}

std::vector<double> mixture_mean(const MixturePrediction& pred) {
  const std::size_t d_y = pred.mu.empty() ? 0 : pred.mu[0].size();
  std::vector<double> mean(d_y, 0.0);
  for (std::size_t i = 0; i < pred.weights.size(); ++i)
    for (std::size_t d = 0; d < d_y; ++d) mean[d] += pred.weights[i] * pred.mu[i][d];
  return mean;
}

std::vector<double> point_prediction(const MixturePrediction& pred, std::size_t n_samples,
                                     Rng& rng) {
  if (pred.sigma.empty()) return mixture_mean(pred);
  const std::size_t d_y = pred.mu[0].size();
  std::vector<double> acc(d_y, 0.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const double u = rng.uniform();
    double cum = 0.0;
    std::size_t comp = pred.weights.size() - 1;
    for (std::size_t i = 0; i < pred.weights.size(); ++i) {
      cum += pred.weights[i];
      if (u < cum) {
        comp = i;
        break;
      }
    }
    for (std::size_t d = 0; d < d_y; ++d)
      acc[d] += pred.mu[comp][d] + pred.sigma[comp][d] * rng.normal();
  }
  for (auto& v : acc) v /= static_cast<double>(n_samples);
  return acc;
}

AdaptedContext adapt_context(const Model& model, const Tensor& ctx_x, const Tensor& ctx_y) {
  const Config& cfg = model.cfg;
  cfg.validate();
  const std::size_t m = ctx_x.rows();
  if (m == 0) throw ContractError("adapt_context: empty context set");
  Tape tape;
  Binder bind(tape, model.params);
  AdaptedContext out;
  out.ctx_x = ctx_x.detached();
  out.ctx_y = ctx_y.detached();

  Tensor k_ctx;
  if (cfg.use_self_attention) {
    Tensor e0 = nn::mlp_forward(bind, "sim.xyenc", xyenc_spec(cfg), concat_cols({ctx_x, ctx_y}));
    Tensor d0 = nn::mlp_forward(bind, "sim.xenc", xenc_spec(cfg), ctx_x);
    auto enc_levels = nn::encoder_forward(bind, "sim.stack", stack_spec(cfg), e0);
    Tensor d_ctx = nn::decoder_forward(bind, "sim.stack", stack_spec(cfg), enc_levels, d0);
    out.sim_keys = d_ctx.detached();
    for (auto& level : enc_levels) out.enc_levels.push_back(level.detached());
    k_ctx = softmax_lastaxis(matmul_nt(d_ctx, d_ctx));
  } else {
    Tensor ctx_emb = nn::mlp_forward(bind, "sim.xenc", xenc_spec(cfg), ctx_x);
    out.ctx_emb = ctx_emb.detached();
    k_ctx = softmax_lastaxis(matmul_nt(ctx_emb, ctx_emb));
  }

  Tensor field = seed_field(bind, cfg, ctx_x, ctx_y, ctx_x);
  if (cfg.use_local_functions) {
    Tensor emb_in = cfg.use_seed_generator ? concat_cols({ctx_x, ctx_y}) : ctx_x;
    out.psi_emb = nn::mlp_forward(bind, "psi.emb", psi_emb_spec(cfg), emb_in).detached();
  }
  const std::size_t n_local = cfg.use_local_functions ? m : 1;
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    Tensor updates = compute_updates(bind, cfg, field, m, ctx_x, ctx_y);
    out.updates.push_back(updates.detached());
    field = apply_updates(cfg, field, k_ctx, updates, m, n_local);
  }
  return out;
}

std::vector<MixturePrediction> predict_adapted(const Model& model, const AdaptedContext& actx,
                                               const Tensor& query_x) {
  const Config& cfg = model.cfg;
  const std::size_t m = actx.ctx_x.rows();
  const std::size_t n = query_x.rows();
  const std::size_t n_local = cfg.use_local_functions ? m : 1;
  Tape tape;
  Binder bind(tape, model.params);

  Tensor kq;
  if (cfg.use_self_attention) {
    Tensor d0q = nn::mlp_forward(bind, "sim.xenc", xenc_spec(cfg), query_x);
    Tensor dq = nn::decoder_forward(bind, "sim.stack", stack_spec(cfg), actx.enc_levels, d0q);
    kq = softmax_lastaxis(matmul_nt(dq, actx.sim_keys));
  } else {
    Tensor q_emb = nn::mlp_forward(bind, "sim.xenc", xenc_spec(cfg), query_x);
    kq = softmax_lastaxis(matmul_nt(q_emb, actx.ctx_emb));
  }

  Tensor field;
  if (cfg.use_local_functions) {
    Tensor xs = tile_rows(query_x, n_local);
    Tensor emb_rep = repeat_rows(actx.psi_emb, n);
    field = nn::mlp_forward(bind, "psi.seed", psi_seed_spec(cfg), concat_cols({xs, emb_rep}));
  } else {
    field = tile_rows(reshape(bind("r0"), {1, cfg.d_r}), n);
  }
  for (const Tensor& updates : actx.updates)
    field = apply_updates(cfg, field, kq, updates, m, n_local);

  Decoded dec = decode(bind, cfg, field, tile_rows(query_x, n_local));
  Forward fwd;
  fwd.mu = dec.mu;
  fwd.sigma = dec.sigma;
  fwd.n_local = n_local;
  fwd.n_query = n;
  fwd.weights = cfg.use_local_functions ? kq : Tensor::full({n, 1}, 1.0);
  return to_mixtures(fwd);
}

// ---- tape-free reference path ----

namespace {

struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;
};

Mat from_tensor(const Tensor& t) {
  if (t.rank() == 1) return {1, t.shape()[0], t.values()};
  return {t.rows(), t.cols(), t.values()};
}

Mat mat_mul(const Mat& a, const Mat& b) {
  Mat c{a.rows, b.cols, std::vector<double>(a.rows * b.cols)};
  detail::gemm_nn(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.cols, false);
  return c;
}

Mat mat_mul_nt(const Mat& a, const Mat& b) {
  Mat c{a.rows, b.rows, std::vector<double>(a.rows * b.rows)};
  detail::gemm_nt(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.rows, false);
  return c;
}

void add_bias(Mat& m, const std::vector<double>& bias) {
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) m.data[i * m.cols + j] += bias[j];
}

void relu_inplace(Mat& m) {
  for (auto& v : m.data) v = v > 0.0 ? v : 0.0;
}

void softmax_rows(Mat& m) {
  for (std::size_t i = 0; i < m.rows; ++i) {
    double* row = m.data.data() + i * m.cols;
    double mx = row[0];
    for (std::size_t j = 1; j < m.cols; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < m.cols; ++j) row[j] /= sum;
  }
}

Mat mlp_eval(const ParamStore& params, const std::string& prefix, const nn::MlpSpec& spec,
             Mat h) {
  for (std::size_t layer = 0; layer <= spec.depth; ++layer) {
    const Mat w = from_tensor(params.at(prefix + ".w" + std::to_string(layer)));
    h = mat_mul(h, w);
    add_bias(h, params.at(prefix + ".b" + std::to_string(layer)).values());
    if (layer < spec.depth) relu_inplace(h);
  }
  return h;
}

}  // namespace

std::vector<MixturePrediction> metafun_predict(const Model& model, const Task& task) {
  const Config& cfg = model.cfg;
  if (cfg.use_self_attention || cfg.use_local_functions)
    throw ContractError("metafun_predict: model is not the global x-kernel configuration");
  const std::size_t m = task.m(), n = task.n();
  if (m == 0) throw ContractError("metafun_predict: empty context set");
  const std::size_t total = m + n;

  Mat eval_x{total, cfg.d_x, {}};
  eval_x.data = task.ctx_x.values();
  eval_x.data.insert(eval_x.data.end(), task.query_x.values().begin(),
                     task.query_x.values().end());

  // x-only kernel: softmax over inner products of encoded inputs.
  Mat eval_emb = mlp_eval(model.params, "sim.xenc", xenc_spec(cfg), eval_x);
  Mat ctx_emb{m, cfg.d_r,
              std::vector<double>(eval_emb.data.begin(), eval_emb.data.begin() + m * cfg.d_r)};
  Mat k = mat_mul_nt(eval_emb, ctx_emb);
  softmax_rows(k);

  // Global field: the learned initial representation broadcast everywhere.
  const auto& r0 = model.params.at("r0").values();
  Mat field{total, cfg.d_r, std::vector<double>(total * cfg.d_r)};
  for (std::size_t e = 0; e < total; ++e)
    std::memcpy(field.data.data() + e * cfg.d_r, r0.data(), cfg.d_r * sizeof(double));

  Mat xy{m, cfg.d_x + cfg.d_y, std::vector<double>(m * (cfg.d_x + cfg.d_y))};
  for (std::size_t i = 0; i < m; ++i) {
    std::memcpy(xy.data.data() + i * xy.cols, task.ctx_x.values().data() + i * cfg.d_x,
                cfg.d_x * sizeof(double));
    std::memcpy(xy.data.data() + i * xy.cols + cfg.d_x,
                task.ctx_y.values().data() + i * cfg.d_y, cfg.d_y * sizeof(double));
  }

  for (std::size_t t = 0; t < cfg.steps; ++t) {
    Mat upd_in{m, xy.cols + cfg.d_r, std::vector<double>(m * (xy.cols + cfg.d_r))};
    for (std::size_t i = 0; i < m; ++i) {
      std::memcpy(upd_in.data.data() + i * upd_in.cols, xy.data.data() + i * xy.cols,
                  xy.cols * sizeof(double));
      std::memcpy(upd_in.data.data() + i * upd_in.cols + xy.cols,
                  field.data.data() + i * cfg.d_r, cfg.d_r * sizeof(double));
    }
    Mat updates = mlp_eval(model.params, "upd", updater_spec(cfg), upd_in);
    Mat delta = mat_mul(k, updates);
    std::vector<double> scaled(delta.data.size());
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = cfg.alpha * delta.data[i];
    for (std::size_t i = 0; i < field.data.size(); ++i) field.data[i] -= scaled[i];
  }

  Mat dec_in{n, cfg.d_x + cfg.d_r, std::vector<double>(n * (cfg.d_x + cfg.d_r))};
  for (std::size_t j = 0; j < n; ++j) {
    std::memcpy(dec_in.data.data() + j * dec_in.cols,
                task.query_x.values().data() + j * cfg.d_x, cfg.d_x * sizeof(double));
    std::memcpy(dec_in.data.data() + j * dec_in.cols + cfg.d_x,
                field.data.data() + (m + j) * cfg.d_r, cfg.d_r * sizeof(double));
  }
  Mat out = mlp_eval(model.params, "dec", decoder_spec(cfg), dec_in);

  std::vector<MixturePrediction> preds(n);
  for (std::size_t j = 0; j < n; ++j) {
    auto& mix = preds[j];
    mix.weights = {1.0};
    mix.mu = {std::vector<double>(cfg.d_y)};
    for (std::size_t d = 0; d < cfg.d_y; ++d) mix.mu[0][d] = out.data[j * out.cols + d];
    if (cfg.gaussian_output) {
      mix.sigma = {std::vector<double>(cfg.d_y)};
      std::vector<double> raw(cfg.d_y), sp(cfg.d_y), scaled(cfg.d_y);
      for (std::size_t d = 0; d < cfg.d_y; ++d) raw[d] = out.data[j * out.cols + cfg.d_y + d];
      for (std::size_t d = 0; d < cfg.d_y; ++d)
        sp[d] = raw[d] > 0.0 ? raw[d] + std::log1p(std::exp(-raw[d]))
                             : std::log1p(std::exp(raw[d]));
      for (std::size_t d = 0; d < cfg.d_y; ++d) scaled[d] = sp[d] * 0.9;
      for (std::size_t d = 0; d < cfg.d_y; ++d) mix.sigma[0][d] = scaled[d] + 0.1;
    }
  }
  return preds;
}

}  // namespace merlot::model
