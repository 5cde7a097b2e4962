#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ssat/vit.hpp"

namespace ssat {

inline constexpr real kReconEps = real{1e-6};

// Visible/masked partition of the N patch positions.
struct MaskSpec {
  std::size_t total = 0;
  real ratio = 0;
  std::vector<std::size_t> visible;  // sorted
  std::vector<std::size_t> masked;   // sorted
  std::uint64_t seed = 0;
};

// round half away from zero, so 0.75 * 256 = 192 exactly
inline std::size_t masked_count(std::size_t total, real ratio) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(ratio) * static_cast<double>(total) + 0.5));
}

inline MaskSpec sample_mask(std::size_t total, real ratio, std::uint64_t seed) {
  check(total >= 1, "sample_mask: patch count must be >= 1");
  check(ratio >= 0 && ratio < 1, "sample_mask: ratio must be in [0, 1), got ", ratio);
  MaskSpec spec;
  spec.total = total;
  spec.ratio = ratio;
  spec.seed = seed;
  const std::size_t k = masked_count(total, ratio);
  Rng rng(seed);
  spec.masked = rng.sample_without_replacement(total, k);
  std::sort(spec.masked.begin(), spec.masked.end());
  std::vector<bool> is_masked(total, false);
  for (std::size_t m : spec.masked) is_masked[m] = true;
  spec.visible.reserve(total - k);
  for (std::size_t i = 0; i < total; ++i)
    if (!is_masked[i]) spec.visible.push_back(i);
  return spec;
}

// Select the visible patch tokens in original order; the class token, when
// present, rides along at index 0.
inline TokenSequence apply_mask(const TokenSequence& tokens, const MaskSpec& mask) {
  check(tokens.patch_tokens() == mask.total, "apply_mask: sequence has ", tokens.patch_tokens(),
        " patch tokens, mask expects ", mask.total);
  std::vector<std::size_t> indices;
  indices.reserve(mask.visible.size() + 1);
  const std::size_t offset = tokens.has_class_token ? 1 : 0;
  if (tokens.has_class_token) indices.push_back(0);
  for (std::size_t v : mask.visible) indices.push_back(v + offset);
  return {index_select(tokens.tokens, indices), tokens.has_class_token};
}

struct DecoderConfig {
  std::size_t depth = 2;
  std::size_t dim = 128;
  std::size_t heads = 16;
  std::size_t mlp_ratio = 4;

  void validate() const {
    check(depth >= 1 && dim > 0 && heads > 0, "decoder config: bad depth/dim/heads");
    check(dim % heads == 0, "decoder config: dim ", dim, " not divisible by heads ", heads);
  }
};

struct DecoderModel {
  DecoderConfig config;
  std::size_t patch_count = 0;
  std::size_t patch_dim = 0;
  LinearParams embed_in;  // encoder dim -> decoder dim
  Tensor mask_token;      // [decoder dim], learned
  Tensor pos;             // [N, decoder dim], learned, separate from the encoder's
  std::vector<BlockParams> blocks;
  LayerNormParams final_norm;
  LinearParams pred;  // decoder dim -> patch_dim pixels

  void visit(const ParamVisitor& fn) {
    embed_in.visit("decoder.embed_in", fn);
    fn("decoder.mask_token", mask_token);
    fn("decoder.pos", pos);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit("decoder.block" + std::to_string(i), fn);
    final_norm.visit("decoder.final_norm", fn);
    pred.visit("decoder.pred", fn);
  }
};

inline DecoderModel make_decoder(const DecoderConfig& config, std::size_t encoder_dim,
                                 std::size_t patch_count, std::size_t patch_dim, Rng& rng) {
  config.validate();
  DecoderModel m;
  m.config = config;
  m.patch_count = patch_count;
  m.patch_dim = patch_dim;
  m.embed_in = make_linear(config.dim, encoder_dim, rng);
  m.mask_token = Tensor::zeros({config.dim});
  for (auto& v : m.mask_token.values()) v = static_cast<real>(rng.normal(0.0, 0.02));
  m.mask_token.set_requires_grad(true);
  m.pos = Tensor::zeros({patch_count, config.dim});
  for (auto& v : m.pos.values()) v = static_cast<real>(rng.normal(0.0, 0.02));
  m.pos.set_requires_grad(true);
  for (std::size_t i = 0; i < config.depth; ++i)
    m.blocks.push_back(make_block(config.dim, config.heads, rng, config.mlp_ratio));
  m.final_norm = make_layer_norm(config.dim);
  m.pred = make_linear(patch_dim, config.dim, rng);
  return m;
}

// Visible latents projected to decoder width, mask token at every masked
// position, decoder positions added over the full length-N sequence, block
// stack, then a per-token pixel projection. The class-token latent, when
// present, is dropped here; reconstruction concerns patch positions only.
inline Tensor decode(DecoderModel& decoder, const TokenSequence& latent_visible,
                     const MaskSpec& mask) {
  check(mask.total == decoder.patch_count, "decode: mask over ", mask.total,
        " patches, decoder built for ", decoder.patch_count);
  Tensor latents = latent_visible.tokens;
  if (latent_visible.has_class_token) {
    std::vector<std::size_t> patch_rows(latent_visible.token_count() - 1);
    for (std::size_t i = 0; i < patch_rows.size(); ++i) patch_rows[i] = i + 1;
    latents = index_select(latents, patch_rows);
  }
  check(latents.dim(latents.rank() - 2) == mask.visible.size(), "decode: ",
        latents.dim(latents.rank() - 2), " visible latents for ", mask.visible.size(),
        " visible positions");

  Tensor x = linear(decoder.embed_in, latents);
  x = scatter_tokens(x, decoder.mask_token, mask.visible, decoder.patch_count);
  x = add(x, decoder.pos);
  for (auto& block : decoder.blocks) x = transformer_block(block, x).first;
  x = layer_norm(x, decoder.final_norm);
  return linear(decoder.pred, x);
}

// Per-patch target normalization (subtract mean, divide by sqrt(var + eps),
// population variance over the patch pixels), then MSE over masked patches
// only. Pure value computation; targets carry no gradient.
inline Tensor normalize_patch_targets(const Tensor& target, real eps) {
  check(eps > 0, "reconstruction_loss: eps must be positive");
  const std::size_t pd = target.dim(target.rank() - 1);
  const std::size_t rows = target.numel() / pd;
  Tensor out = Tensor::zeros(target.shape());
  const real* pt = target.values().data();
  real* po = out.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const real* tr = pt + r * pd;
    real mu = 0;
    for (std::size_t i = 0; i < pd; ++i) mu += tr[i];
    mu /= static_cast<real>(pd);
    real var = 0;
    for (std::size_t i = 0; i < pd; ++i) {
      const real d = tr[i] - mu;
      var += d * d;
    }
    var /= static_cast<real>(pd);
    const real inv = real{1} / std::sqrt(var + eps);
    for (std::size_t i = 0; i < pd; ++i) po[r * pd + i] = (tr[i] - mu) * inv;
  }
  return out;
}

inline Tensor reconstruction_loss(const Tensor& pred, const Tensor& target, const MaskSpec& mask,
                                  real eps = kReconEps, bool* empty_mask_warning = nullptr) {
  check(pred.shape() == target.shape(), "reconstruction_loss: pred ", shape_str(pred.shape()),
        " and target ", shape_str(target.shape()), " differ");
  check(pred.rank() >= 2 && pred.dim(pred.rank() - 2) == mask.total,
        "reconstruction_loss: expected ", mask.total, " patch rows, got ",
        shape_str(pred.shape()));
  if (empty_mask_warning) *empty_mask_warning = mask.masked.empty();
  if (mask.masked.empty()) return Tensor::scalar(0);

  const std::size_t pd = pred.dim(pred.rank() - 1);
  const std::size_t lead = pred.numel() / (mask.total * pd);

  Tensor normalized = normalize_patch_targets(target, eps);
  Tensor selector = Tensor::zeros(pred.shape());
  for (std::size_t l = 0; l < lead; ++l)
    for (std::size_t m : mask.masked)
      std::fill_n(selector.values().begin() + (l * mask.total + m) * pd, pd, real{1});

  Tensor diff = add(pred, scale(normalized, real{-1}));
  Tensor masked_sq = mul(power(diff, 2), selector);
  const real denom = static_cast<real>(lead * mask.masked.size() * pd);
  return scale(sum(masked_sq), real{1} / denom);
}

// Eq: L = lambda * L_cls + (1 - lambda) * L_SSAT
struct LossBreakdown {
  real l_cls = 0;
  real l_ssat = 0;
  real lambda = 0;
  real total = 0;
};

struct JointLoss {
  Tensor total;
  LossBreakdown breakdown;
};

inline JointLoss joint_loss(const Tensor& l_cls, const Tensor& l_ssat, real lambda) {
  check(lambda >= 0 && lambda <= 1, "joint_loss: lambda must be in [0, 1], got ", lambda);
  check(l_cls.numel() == 1 && l_ssat.numel() == 1, "joint_loss: losses must be scalars");
  JointLoss result;
  result.total = add(scale(l_cls, lambda), scale(l_ssat, real{1} - lambda));
  result.breakdown = LossBreakdown{l_cls.item(), l_ssat.item(), lambda, result.total.item()};
  return result;
}

// One joint training forward: patch inputs for both branches, soft targets
// for classification, one shared mask.
struct StepBatch {
  Tensor patches_cls;    // [B, N, pd], classification branch (post-mixup)
  Tensor targets;        // [B, K] soft label distributions
  Tensor patches_recon;  // [B, N, pd], reconstruction input and target (pre-mixup)
  MaskSpec mask;
};

struct SsatStepOptions {
  real label_smoothing = 0;
  real recon_eps = kReconEps;
  // stochastic-depth factors per branch (2 sets per encoder block)
  const std::vector<std::vector<real>>* cls_branch_factors = nullptr;
  const std::vector<std::vector<real>>* aux_branch_factors = nullptr;
};

struct SsatStepResult {
  Tensor total;
  Tensor l_cls;
  Tensor l_ssat;
  LossBreakdown breakdown;
  bool empty_mask_warning = false;
};

// Both branches share the encoder: full tokens -> classifier -> L_cls,
// visible tokens -> decoder -> L_SSAT, combined as the convex joint loss.
inline SsatStepResult ssat_step_forward(VitModel& model, DecoderModel& decoder,
                                        const StepBatch& batch, real lambda,
                                        const SsatStepOptions& opts = {}) {
  SsatStepResult result;

  EncodeOptions cls_opts;
  cls_opts.branch_factors = opts.cls_branch_factors;
  TokenSequence full = embed(model.embed, batch.patches_cls, model.config.class_token);
  Tensor logits = classify(model.head, encode(model, full, cls_opts).tokens);
  result.l_cls = cross_entropy(logits, batch.targets, opts.label_smoothing);

  EncodeOptions aux_opts;
  aux_opts.branch_factors = opts.aux_branch_factors;
  TokenSequence masked_in = apply_mask(
      embed(model.embed, batch.patches_recon, model.config.class_token), batch.mask);
  TokenSequence latent = encode(model, masked_in, aux_opts).tokens;
  Tensor pred = decode(decoder, latent, batch.mask);
  result.l_ssat = reconstruction_loss(pred, batch.patches_recon.detached(), batch.mask,
                                      opts.recon_eps, &result.empty_mask_warning);

  JointLoss joint = joint_loss(result.l_cls, result.l_ssat, lambda);
  result.total = joint.total;
  result.breakdown = joint.breakdown;
  return result;
}

}  // namespace ssat
