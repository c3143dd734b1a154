#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "merlot/rng.hpp"
#include "merlot/tensor.hpp"

namespace merlot::nn {

// Fully connected network with `depth` hidden layers of width `hidden`
// (depth+1 weight matrices), relu between layers and a linear final layer.
struct MlpSpec {
  std::size_t in = 0;
  std::size_t hidden = 0;
  std::size_t out = 0;
  std::size_t depth = 2;
};

void init_mlp(ParamStore& store, const std::string& prefix, const MlpSpec& spec, Rng& rng);
Tensor mlp_forward(Binder& bind, const std::string& prefix, const MlpSpec& spec, const Tensor& x);
std::size_t mlp_param_count(const MlpSpec& spec);

enum class AttentionKind { kLaplace, kDotProduct };

// Attention weights for a batch of queries: [nq x m], each row a probability
// vector over the key rows. Laplace uses softmax of negated L1 distances so
// nearer keys get larger weight; dot-product is softmax of plain inner
// products.
Tensor attention_weights(const Tensor& keys, const Tensor& queries, AttentionKind kind);

// Single-query attention: weighted sum of value rows.
Tensor attention(const Tensor& keys, const Tensor& values, const Tensor& query,
                 AttentionKind kind);

struct MhaSpec {
  std::size_t dim = 0;
  std::size_t heads = 8;
};

void init_mha(ParamStore& store, const std::string& prefix, const MhaSpec& spec, Rng& rng);
// Multi-head attention over row sets: queries [nq x dim] attend to kv_rows
// [m x dim]. Per-head weights use plain (unscaled) dot-product attention.
Tensor mha_forward(Binder& bind, const std::string& prefix, const MhaSpec& spec,
                   const Tensor& kv_rows, const Tensor& q_rows);
std::size_t mha_param_count(const MhaSpec& spec);

// Multi-head attention for a single query vector with parameters from `store`.
Tensor attention_multihead(Binder& bind, const std::string& prefix, const MhaSpec& spec,
                           const Tensor& keys, const Tensor& values, const Tensor& query);

// L-layer encoder/decoder attention stack. Encoder layers are self-attention,
// decoder layers cross-attend to the same-depth encoder output; each is
// followed by the norm/feed-forward block Norm(X + FFN(Norm(X + dX))).
struct StackSpec {
  std::size_t dim = 0;
  std::size_t layers = 2;
  std::size_t heads = 8;
  std::size_t ffn_hidden = 0;
};

void init_stack(ParamStore& store, const std::string& prefix, const StackSpec& spec, Rng& rng);
std::pair<Tensor, Tensor> encdec_forward(Binder& bind, const std::string& prefix,
                                         const StackSpec& spec, const Tensor& context_rows,
                                         const Tensor& query_rows);
// Encoder levels E^(0..L); element l+1 is the output of encoder layer l.
std::vector<Tensor> encoder_forward(Binder& bind, const std::string& prefix,
                                    const StackSpec& spec, const Tensor& context_rows);
// Decoder pass against precomputed encoder levels. Decoder rows are
// independent of each other, so any row batch may be processed separately.
Tensor decoder_forward(Binder& bind, const std::string& prefix, const StackSpec& spec,
                       const std::vector<Tensor>& enc_levels, const Tensor& query_rows);
std::size_t stack_param_count(const StackSpec& spec);

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  std::int64_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

// One Adam update with bias correction. Moment tensors are created lazily on
// the first step. Throws ContractError naming the parameter if a gradient is
// not finite.
void adam_step(AdamState& state, ParamStore& params, const GradMap& grads);

// Registers a weight matrix [fan_in x fan_out] ~ uniform(-s, s) with
// s = sqrt(6 / (fan_in + fan_out)).
void init_weight(ParamStore& store, const std::string& name, std::size_t fan_in,
                 std::size_t fan_out, Rng& rng);

}  // namespace merlot::nn
