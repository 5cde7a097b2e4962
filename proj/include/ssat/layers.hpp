#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ssat/rng.hpp"
#include "ssat/tensor.hpp"

namespace ssat {

inline constexpr real kLayerNormEps = real{1e-6};

// Per-sample sequence of embedding vectors. tokens is [n, d] or [batch, n, d];
// when has_class_token is set, token 0 is the class token.
struct TokenSequence {
  Tensor tokens;
  bool has_class_token = false;

  std::size_t token_count() const { return tokens.dim(tokens.rank() - 2); }
  std::size_t channels() const { return tokens.dim(tokens.rank() - 1); }
  std::size_t patch_tokens() const { return token_count() - (has_class_token ? 1 : 0); }
};

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  std::size_t in_dim() const { return weight.dim(1); }
  std::size_t out_dim() const { return weight.dim(0); }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

inline LinearParams make_linear(std::size_t out, std::size_t in, Rng& rng, real init_std = real{0.02}) {
  Tensor w = Tensor::zeros({out, in});
  for (auto& v : w.values()) v = static_cast<real>(rng.truncated_normal(init_std));
  Tensor b = Tensor::zeros({out});
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  return {w, b};
}

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
};

inline LayerNormParams make_layer_norm(std::size_t dim) {
  Tensor g = Tensor::full({dim}, real{1});
  Tensor b = Tensor::zeros({dim});
  g.set_requires_grad(true);
  b.set_requires_grad(true);
  return {g, b};
}

inline Tensor linear(const LinearParams& params, const Tensor& x) {
  check(x.dim(x.rank() - 1) == params.in_dim(), "linear: token dim ", x.dim(x.rank() - 1),
        " does not match in_dim ", params.in_dim());
  return linear_op(x, params.weight, params.bias);
}

inline TokenSequence linear(const LinearParams& params, const TokenSequence& x) {
  return {linear(params, x.tokens), x.has_class_token};
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         real eps = kLayerNormEps) {
  return layer_norm_op(x, gamma, beta, eps);
}

inline Tensor layer_norm(const Tensor& x, const LayerNormParams& params, real eps = kLayerNormEps) {
  return layer_norm_op(x, params.gamma, params.beta, eps);
}

// Row-stochastic attention probabilities, [heads, n, n] per sample, kept for
// the diagnostics pass.
struct AttentionRecord {
  Tensor probs;

  std::size_t heads() const { return probs.dim(probs.rank() - 3); }
  std::size_t tokens() const { return probs.dim(probs.rank() - 1); }
};

struct AttentionParams {
  LinearParams query, key, value, out;
  std::size_t heads = 1;

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    query.visit(prefix + ".q", fn);
    key.visit(prefix + ".k", fn);
    value.visit(prefix + ".v", fn);
    out.visit(prefix + ".out", fn);
  }
};

inline AttentionParams make_attention(std::size_t dim, std::size_t heads, Rng& rng) {
  check(heads >= 1 && dim % heads == 0, "attention: model dim ", dim,
        " not divisible by head count ", heads);
  return {make_linear(dim, dim, rng), make_linear(dim, dim, rng), make_linear(dim, dim, rng),
          make_linear(dim, dim, rng), heads};
}

struct AttentionOptions {
  bool record = false;
};

inline std::pair<Tensor, AttentionRecord> multi_head_attention(const AttentionParams& params,
                                                               const Tensor& x,
                                                               const AttentionOptions& opts = {}) {
  const std::size_t d = x.dim(x.rank() - 1);
  check(d % params.heads == 0, "multi_head_attention: model dim ", d,
        " not divisible by head count ", params.heads);
  const std::size_t H = params.heads;
  const std::size_t hd = d / H;
  const std::size_t n = x.dim(x.rank() - 2);

  auto split_heads = [&](const Tensor& t) {
    Shape s = t.shape();
    s.pop_back();
    s.push_back(H);
    s.push_back(hd);
    return transpose(reshape(t, s), -3, -2);  // [*, H, n, hd]
  };

  Tensor q = split_heads(linear(params.query, x));
  Tensor k = split_heads(linear(params.key, x));
  Tensor v = split_heads(linear(params.value, x));

  Tensor scores = scale(matmul(q, transpose(k, -1, -2)), real{1} / std::sqrt(static_cast<real>(hd)));
  Tensor probs = softmax(scores);
  Tensor ctx = transpose(matmul(probs, v), -3, -2);  // [*, n, H, hd]

  Shape merged = x.shape();
  merged[merged.size() - 1] = d;
  merged[merged.size() - 2] = n;
  Tensor out = linear(params.out, reshape(ctx, merged));

  AttentionRecord record;
  if (opts.record) record.probs = probs.detached();
  return {out, record};
}

// Pre-norm residual block: x + MHA(LN(x)), then + MLP(LN(.)).
struct BlockParams {
  LayerNormParams norm_attn;
  AttentionParams attn;
  LayerNormParams norm_mlp;
  LinearParams mlp_in;
  LinearParams mlp_out;

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    norm_attn.visit(prefix + ".norm_attn", fn);
    attn.visit(prefix + ".attn", fn);
    norm_mlp.visit(prefix + ".norm_mlp", fn);
    mlp_in.visit(prefix + ".mlp_in", fn);
    mlp_out.visit(prefix + ".mlp_out", fn);
  }
};

inline BlockParams make_block(std::size_t dim, std::size_t heads, Rng& rng,
                              std::size_t mlp_ratio = 4) {
  return {make_layer_norm(dim), make_attention(dim, heads, rng), make_layer_norm(dim),
          make_linear(dim * mlp_ratio, dim, rng), make_linear(dim, dim * mlp_ratio, rng)};
}

struct BlockOptions {
  bool record_attention = false;
  // Residual-branch stochastic-depth factors, one per sample (0 for dropped,
  // 1/(1-p) for kept); absent means keep everything.
  const std::vector<real>* drop_attn = nullptr;
  const std::vector<real>* drop_mlp = nullptr;
};

inline std::pair<Tensor, AttentionRecord> transformer_block(const BlockParams& params,
                                                            const Tensor& x,
                                                            const BlockOptions& opts = {}) {
  auto [attn_out, record] =
      multi_head_attention(params.attn, layer_norm(x, params.norm_attn),
                           AttentionOptions{opts.record_attention});
  if (opts.drop_attn) attn_out = scale_rows(attn_out, *opts.drop_attn);
  Tensor mid = add(x, attn_out);

  Tensor mlp_out = linear(params.mlp_out, gelu(linear(params.mlp_in, layer_norm(mid, params.norm_mlp))));
  if (opts.drop_mlp) mlp_out = scale_rows(mlp_out, *opts.drop_mlp);
  return {add(mid, mlp_out), record};
}

inline std::pair<TokenSequence, AttentionRecord> transformer_block(const BlockParams& params,
                                                                   const TokenSequence& x,
                                                                   const BlockOptions& opts = {}) {
  auto [tokens, record] = transformer_block(params, x.tokens, opts);
  return {TokenSequence{tokens, x.has_class_token}, record};
}

}  // namespace ssat
