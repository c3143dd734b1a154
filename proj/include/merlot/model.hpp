#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "merlot/nn.hpp"
#include "merlot/rng.hpp"
#include "merlot/tensor.hpp"

namespace merlot::model {

// One regression task: a context set the learner adapts to and a query set it
// is evaluated on.
struct Task {
  Tensor ctx_x;    // [m x d_x]
  Tensor ctx_y;    // [m x d_y]
  Tensor query_x;  // [n x d_x]
  Tensor query_y;  // [n x d_y]
  std::size_t m() const { return ctx_x.rows(); }
  std::size_t n() const { return query_x.rows(); }
};

// The four configurations of the model family share one implementation,
// selected by three flags:
//   self_attention  local_functions  seed_generator
//        on               on               on       full model (local seeded functions)
//        on               on               off      local functions, seeds from x_i only
//        on               off              off      global field, self-attentive kernel
//        off              off              off      global field, x-only kernel
// Other combinations are rejected.
struct Config {
  std::size_t d_x = 1;
  std::size_t d_y = 1;
  std::size_t d_r = 128;
  std::size_t depth = 2;  // hidden layers per fully connected block (K)
  std::size_t heads = 8;
  std::size_t steps = 3;  // adaptation iterations (T)
  double alpha = 0.01;
  bool use_self_attention = true;
  bool use_local_functions = true;
  bool use_seed_generator = true;
  bool gaussian_output = true;  // false: point estimates trained with l2 loss

  std::size_t ffn_hidden() const { return 2 * d_r; }
  void validate() const;
  std::string preset_name() const;
};

// Named preset -> flag triple. Accepts: merlot, metafun, metafun_sa,
// merlot_no_psi.
Config preset(const std::string& name);

struct Model {
  Config cfg;
  ParamStore params;
};

Model build_model(const Config& cfg, std::uint64_t seed);
std::size_t param_count(const Model& model);

// ---- recorded (differentiable) pipeline ----
// All functions record onto the binder's tape; inputs are plain value tensors.

// Local functional representations at t = 0. Local layout: row i*(m+n)+e is
// the representation of local function i at evaluation point e, where the
// evaluation points are the context x's followed by the query x's. Global
// configurations produce a single block [ (m+n) x d_r ].
Tensor seed_field(Binder& bind, const Config& cfg, const Tensor& ctx_x, const Tensor& ctx_y,
                  const Tensor& eval_x);

// Similarity of every evaluation point to every context point: [(m+n) x m],
// rows are probability vectors. Computed once per task and reused across all
// adaptation steps and for the mixture weights.
Tensor similarity_matrix(Binder& bind, const Config& cfg, const Tensor& ctx_x,
                         const Tensor& ctx_y, const Tensor& eval_x);

// One functional gradient step: per local function, updates from the context
// points are smoothed by `k` and applied with step size alpha.
Tensor functional_update_step(Binder& bind, const Config& cfg, const Tensor& field,
                              const Tensor& ctx_x, const Tensor& ctx_y, const Tensor& k);

struct Decoded {
  Tensor mu;     // [rows x d_y]
  Tensor sigma;  // [rows x d_y]; default-constructed in point-estimate mode
};

// Decodes representations into predictions; `xs` must align row-for-row with
// `reps`. sigma = 0.1 + 0.9 * softplus(raw) in the Gaussian configuration.
Decoded decode(Binder& bind, const Config& cfg, const Tensor& reps, const Tensor& xs);

// Full on-tape prediction for the query points.
struct Forward {
  Tensor weights;  // [n x L]; rows are probability vectors over components
  Tensor mu;       // [L*n x d_y], component-major (component i, query j at i*n+j)
  Tensor sigma;    // [L*n x d_y] or empty
  std::size_t n_local = 0;  // L: m for local configurations, 1 otherwise
  std::size_t n_query = 0;
};

Forward predict_tape(Binder& bind, const Config& cfg, const Task& task);

// Mean over query points of the Gaussian-mixture negative log-likelihood.
Tensor nll_loss(const Forward& fwd, const Tensor& query_y);
// Mean over query points of the squared error of the mixture-mean point
// estimate (point-estimate configurations).
Tensor l2_loss(const Forward& fwd, const Tensor& query_y);

// ---- value-level results ----

struct MixturePrediction {
  std::vector<double> weights;             // L
  std::vector<std::vector<double>> mu;     // L x d_y
  std::vector<std::vector<double>> sigma;  // L x d_y; empty in point mode
};

std::vector<MixturePrediction> predict(const Model& model, const Task& task);
std::vector<MixturePrediction> to_mixtures(const Forward& fwd);

// Independent value-level mixture NLL (log-sum-exp over components of the
// diagonal Gaussian log densities).
double nll_value(const MixturePrediction& pred, const std::vector<double>& y);
// Mixture density at a scalar y (d_y = 1).
double density_value(const MixturePrediction& pred, double y);
// Exact mixture mean, sum_i w_i mu_i.
std::vector<double> mixture_mean(const MixturePrediction& pred);
// Mean of n_samples ancestral samples; the point prediction used for RMSE.
// Point-estimate mixtures return the exact mixture mean.
std::vector<double> point_prediction(const MixturePrediction& pred, std::size_t n_samples,
                                     Rng& rng);

// Tape-free reference implementation of the global-field iterative model with
// the x-only kernel (the self_attention=off, local=off configuration).
// Composed independently of the tape pipeline; used as a cross-implementation
// oracle.
std::vector<MixturePrediction> metafun_predict(const Model& model, const Task& task);

// Context adaptation cached for repeated queries. All context-dependent work
// (similarity encoder, seeds, the T rounds of updates) happens once; each
// query then costs a handful of row evaluations. predict_adapted produces
// bitwise the same mixtures as predict() on the same queries.
struct AdaptedContext {
  Tensor ctx_x, ctx_y;
  std::vector<Tensor> enc_levels;  // self-attention stack encoder outputs
  Tensor sim_keys;                 // decoder outputs at the context points [m x d_r]
  Tensor ctx_emb;                  // x-only kernel context embeddings (non-SA)
  Tensor psi_emb;                  // seed embeddings [L x d_r] (local configurations)
  std::vector<Tensor> updates;     // per adaptation step: [L*m x d_r]
};

AdaptedContext adapt_context(const Model& model, const Tensor& ctx_x, const Tensor& ctx_y);
std::vector<MixturePrediction> predict_adapted(const Model& model, const AdaptedContext& ctx,
                                               const Tensor& query_x);

}  // namespace merlot::model
