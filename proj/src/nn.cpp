#include "merlot/nn.hpp"

#include <cmath>

namespace merlot::nn {

namespace {

std::string layer_name(const std::string& prefix, const char* what, std::size_t i) {
  return prefix + "." + what + std::to_string(i);
}

}  // namespace

void init_weight(ParamStore& store, const std::string& name, std::size_t fan_in,
                 std::size_t fan_out, Rng& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> w(fan_in * fan_out);
  for (auto& x : w) x = rng.uniform(-s, s);
  store.insert_or_assign(name, Tensor({fan_in, fan_out}, std::move(w)));
}

void init_mlp(ParamStore& store, const std::string& prefix, const MlpSpec& spec, Rng& rng) {
  std::size_t in = spec.in;
  for (std::size_t layer = 0; layer <= spec.depth; ++layer) {
    const std::size_t out = layer == spec.depth ? spec.out : spec.hidden;
    init_weight(store, layer_name(prefix, "w", layer), in, out, rng);
    store.insert_or_assign(layer_name(prefix, "b", layer), Tensor::zeros({out}));
    in = out;
  }
}

Tensor mlp_forward(Binder& bind, const std::string& prefix, const MlpSpec& spec, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != spec.in)
    throw ShapeError(prefix + ": input width " + shape_str(x.shape()) + " does not match FC(" +
                     std::to_string(spec.in) + ", ...)");
  Tensor h = x;
  for (std::size_t layer = 0; layer <= spec.depth; ++layer)
    h = affine(h, bind(layer_name(prefix, "w", layer)), bind(layer_name(prefix, "b", layer)),
               layer < spec.depth);
  return h;
}

std::size_t mlp_param_count(const MlpSpec& spec) {
  std::size_t total = 0, in = spec.in;
  for (std::size_t layer = 0; layer <= spec.depth; ++layer) {
    const std::size_t out = layer == spec.depth ? spec.out : spec.hidden;
    total += (in + 1) * out;
    in = out;
  }
  return total;
}

Tensor attention_weights(const Tensor& keys, const Tensor& queries, AttentionKind kind) {
  if (keys.rank() != 2 || keys.rows() == 0)
    throw ContractError("attention: empty key set");
  if (queries.cols() != keys.cols())
    throw ShapeError("attention: query width " + shape_str(queries.shape()) +
                     " does not match keys " + shape_str(keys.shape()));
  if (kind == AttentionKind::kDotProduct) return softmax_lastaxis(matmul_nt(queries, keys));
  // Laplace: softmax over negated pairwise L1 distances.
  const std::size_t m = keys.rows(), nq = queries.rows();
  Tensor q_rep = repeat_rows(queries, m);
  Tensor k_tile = tile_rows(keys, nq);
  Tensor dist = sum_lastaxis(abs_of(sub(q_rep, k_tile)));
  return softmax_lastaxis(neg(reshape(dist, {nq, m})));
}

Tensor attention(const Tensor& keys, const Tensor& values, const Tensor& query,
                 AttentionKind kind) {
  if (values.rank() != 2 || values.rows() != keys.rows())
    throw ShapeError("attention: keys " + shape_str(keys.shape()) + " and values " +
                     shape_str(values.shape()) + " row counts disagree");
  Tensor q = query.rank() == 1 ? reshape(query, {1, query.shape()[0]}) : query;
  Tensor w = attention_weights(keys, q, kind);
  Tensor out = matmul(w, values);
  return query.rank() == 1 ? reshape(out, {values.cols()}) : out;
}

void init_mha(ParamStore& store, const std::string& prefix, const MhaSpec& spec, Rng& rng) {
  if (spec.dim % spec.heads != 0)
    throw ConfigError("multi-head attention: dim " + std::to_string(spec.dim) +
                      " not divisible by heads " + std::to_string(spec.heads));
  for (const char* part : {"q", "k", "v", "o"}) {
    init_weight(store, prefix + ".w" + part, spec.dim, spec.dim, rng);
    store.insert_or_assign(prefix + ".b" + part, Tensor::zeros({spec.dim}));
  }
}

std::size_t mha_param_count(const MhaSpec& spec) { return 4 * (spec.dim + 1) * spec.dim; }

Tensor mha_forward(Binder& bind, const std::string& prefix, const MhaSpec& spec,
                   const Tensor& kv_rows, const Tensor& q_rows) {
  if (kv_rows.rows() == 0) throw ContractError("attention: empty key set");
  const std::size_t dh = spec.dim / spec.heads;
  Tensor K = affine(kv_rows, bind(prefix + ".wk"), bind(prefix + ".bk"), false);
  Tensor V = affine(kv_rows, bind(prefix + ".wv"), bind(prefix + ".bv"), false);
  Tensor Q = affine(q_rows, bind(prefix + ".wq"), bind(prefix + ".bq"), false);
  std::vector<Tensor> heads;
  heads.reserve(spec.heads);
  for (std::size_t h = 0; h < spec.heads; ++h) {
    Tensor Kh = slice_cols(K, h * dh, dh);
    Tensor Vh = slice_cols(V, h * dh, dh);
    Tensor Qh = slice_cols(Q, h * dh, dh);
    Tensor attn = softmax_lastaxis(matmul_nt(Qh, Kh));
    heads.push_back(matmul(attn, Vh));
  }
  Tensor merged = spec.heads == 1 ? heads[0] : concat_cols(heads);
  return affine(merged, bind(prefix + ".wo"), bind(prefix + ".bo"), false);
}

Tensor attention_multihead(Binder& bind, const std::string& prefix, const MhaSpec& spec,
                           const Tensor& keys, const Tensor& values, const Tensor& query) {
  if (!keys.same_shape(values))
    throw ShapeError("attention_multihead: keys/values shapes disagree");
  Tensor q = query.rank() == 1 ? reshape(query, {1, query.shape()[0]}) : query;
  Tensor out = mha_forward(bind, prefix, spec, keys, q);
  return query.rank() == 1 ? reshape(out, {spec.dim}) : out;
}

// ---- encoder-decoder stack ----

namespace {

struct NlNames {
  std::string norm1_g, norm1_b, norm2_g, norm2_b, ffn_w0, ffn_b0, ffn_w1, ffn_b1;
};

NlNames nl_names(const std::string& block) {
  return {block + ".n1.g", block + ".n1.b", block + ".n2.g", block + ".n2.b",
          block + ".ffn.w0", block + ".ffn.b0", block + ".ffn.w1", block + ".ffn.b1"};
}

void init_nl(ParamStore& store, const std::string& block, const StackSpec& spec, Rng& rng) {
  const auto n = nl_names(block);
  store.insert_or_assign(n.norm1_g, Tensor::full({spec.dim}, 1.0));
  store.insert_or_assign(n.norm1_b, Tensor::zeros({spec.dim}));
  init_weight(store, n.ffn_w0, spec.dim, spec.ffn_hidden, rng);
  store.insert_or_assign(n.ffn_b0, Tensor::zeros({spec.ffn_hidden}));
  init_weight(store, n.ffn_w1, spec.ffn_hidden, spec.dim, rng);
  store.insert_or_assign(n.ffn_b1, Tensor::zeros({spec.dim}));
  store.insert_or_assign(n.norm2_g, Tensor::full({spec.dim}, 1.0));
  store.insert_or_assign(n.norm2_b, Tensor::zeros({spec.dim}));
}

// Norm(X + FFN(Norm(X + dX)))
Tensor nl_block(Binder& bind, const std::string& block, const Tensor& x, const Tensor& dx) {
  const auto n = nl_names(block);
  Tensor inner = layer_norm(add(x, dx), bind(n.norm1_g), bind(n.norm1_b));
  Tensor hidden = affine(inner, bind(n.ffn_w0), bind(n.ffn_b0), true);
  Tensor ffn = affine(hidden, bind(n.ffn_w1), bind(n.ffn_b1), false);
  return layer_norm(add(x, ffn), bind(n.norm2_g), bind(n.norm2_b));
}

}  // namespace

void init_stack(ParamStore& store, const std::string& prefix, const StackSpec& spec, Rng& rng) {
  const MhaSpec mha{spec.dim, spec.heads};
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const std::string enc = prefix + ".enc" + std::to_string(l);
    init_mha(store, enc + ".att", mha, rng);
    init_nl(store, enc, spec, rng);
  }
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const std::string dec = prefix + ".dec" + std::to_string(l);
    init_mha(store, dec + ".att", mha, rng);
    init_nl(store, dec, spec, rng);
  }
}

std::size_t stack_param_count(const StackSpec& spec) {
  const std::size_t nl = 4 * spec.dim + (spec.dim + 1) * spec.ffn_hidden +
                         (spec.ffn_hidden + 1) * spec.dim;
  return 2 * spec.layers * (mha_param_count({spec.dim, spec.heads}) + nl);
}

std::vector<Tensor> encoder_forward(Binder& bind, const std::string& prefix,
                                    const StackSpec& spec, const Tensor& context_rows) {
  if (context_rows.rows() == 0) throw ContractError("encdec_forward: empty context");
  const MhaSpec mha{spec.dim, spec.heads};
  std::vector<Tensor> enc_levels;
  enc_levels.reserve(spec.layers + 1);
  enc_levels.push_back(context_rows);
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const std::string enc = prefix + ".enc" + std::to_string(l);
    const Tensor& e = enc_levels.back();
    Tensor delta = mha_forward(bind, enc + ".att", mha, e, e);
    enc_levels.push_back(nl_block(bind, enc, e, delta));
  }
  return enc_levels;
}

Tensor decoder_forward(Binder& bind, const std::string& prefix, const StackSpec& spec,
                       const std::vector<Tensor>& enc_levels, const Tensor& query_rows) {
  const MhaSpec mha{spec.dim, spec.heads};
  Tensor d = query_rows;
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const std::string dec = prefix + ".dec" + std::to_string(l);
    Tensor delta = mha_forward(bind, dec + ".att", mha, enc_levels[l + 1], d);
    d = nl_block(bind, dec, d, delta);
  }
  return d;
}

std::pair<Tensor, Tensor> encdec_forward(Binder& bind, const std::string& prefix,
                                         const StackSpec& spec, const Tensor& context_rows,
                                         const Tensor& query_rows) {
  auto enc_levels = encoder_forward(bind, prefix, spec, context_rows);
  Tensor d = decoder_forward(bind, prefix, spec, enc_levels, query_rows);
  return {enc_levels.back(), d};
}

void adam_step(AdamState& state, ParamStore& params, const GradMap& grads) {
  const auto& cfg = state.cfg;
  state.step += 1;
  const double corr1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double corr2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, value] : params) {
    auto git = grads.find(name);
    if (git == grads.end())
      throw ContractError("adam_step: missing gradient for parameter '" + name + "'");
    const Tensor& g = git->second;
    if (!g.same_shape(value))
      throw ShapeError("adam_step: gradient shape " + shape_str(g.shape()) +
                       " does not match parameter '" + name + "' " + shape_str(value.shape()));
    if (!g.all_finite())
      throw ContractError("adam_step: non-finite gradient for parameter '" + name + "'");
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      state.m.emplace(name, Tensor::zeros(value.shape()));
      state.v.emplace(name, Tensor::zeros(value.shape()));
      mit = state.m.find(name);
    }
    const std::size_t n = value.size();
    std::vector<double> m_new(n), v_new(n), p_new(n);
    const auto& mv = mit->second.values();
    const auto& vv = state.v.at(name).values();
    const auto& gv = g.values();
    const auto& pv = value.values();
    for (std::size_t i = 0; i < n; ++i) {
      m_new[i] = cfg.beta1 * mv[i] + (1.0 - cfg.beta1) * gv[i];
      v_new[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * gv[i] * gv[i];
      const double mhat = m_new[i] / corr1;
      const double vhat = v_new[i] / corr2;
      p_new[i] = pv[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    state.m.insert_or_assign(name, Tensor(value.shape(), std::move(m_new)));
    state.v.insert_or_assign(name, Tensor(value.shape(), std::move(v_new)));
    value = Tensor(value.shape(), std::move(p_new));
  }
}

}  // namespace merlot::nn
