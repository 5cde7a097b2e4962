#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ssat/layers.hpp"

namespace ssat {

// Planar CHW pixel storage, values in [0, 1]. label < 0 means unlabeled.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<real> pixels;
  int label = -1;

  static Image blank(std::size_t h, std::size_t w, std::size_t c) {
    return Image{h, w, c, std::vector<real>(h * w * c, real{0}), -1};
  }

  real at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  real& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels[(c * height + y) * width + x];
  }
};

struct PatchGrid {
  std::size_t patch = 0;
  std::size_t image_h = 0;
  std::size_t image_w = 0;
  std::size_t channels = 0;

  static PatchGrid for_image(std::size_t h, std::size_t w, std::size_t c, std::size_t patch) {
    check(patch > 0 && h % patch == 0 && w % patch == 0, "patch size ", patch,
          " does not divide image ", h, "x", w);
    return PatchGrid{patch, h, w, c};
  }

  std::size_t rows() const { return image_h / patch; }
  std::size_t cols() const { return image_w / patch; }
  std::size_t count() const { return rows() * cols(); }
  std::size_t patch_dim() const { return patch * patch * channels; }
};

// row-major patch order; within a patch: channel-major, then rows, then cols
inline Tensor patchify(const Image& img, const PatchGrid& grid) {
  check(img.height == grid.image_h && img.width == grid.image_w && img.channels == grid.channels,
        "patchify: image ", img.height, "x", img.width, "x", img.channels,
        " does not match grid");
  Tensor out = Tensor::zeros({grid.count(), grid.patch_dim()});
  real* po = out.values().data();
  const std::size_t P = grid.patch;
  std::size_t write = 0;
  for (std::size_t gy = 0; gy < grid.rows(); ++gy)
    for (std::size_t gx = 0; gx < grid.cols(); ++gx)
      for (std::size_t c = 0; c < grid.channels; ++c)
        for (std::size_t py = 0; py < P; ++py)
          for (std::size_t px = 0; px < P; ++px)
            po[write++] = img.at(c, gy * P + py, gx * P + px);
  return out;
}

inline Image unpatchify(const Tensor& patches, const PatchGrid& grid) {
  check(patches.rank() == 2 && patches.dim(0) == grid.count() && patches.dim(1) == grid.patch_dim(),
        "unpatchify: patches ", shape_str(patches.shape()), " do not match grid");
  Image img = Image::blank(grid.image_h, grid.image_w, grid.channels);
  const real* pv = patches.values().data();
  const std::size_t P = grid.patch;
  std::size_t read = 0;
  for (std::size_t gy = 0; gy < grid.rows(); ++gy)
    for (std::size_t gx = 0; gx < grid.cols(); ++gx)
      for (std::size_t c = 0; c < grid.channels; ++c)
        for (std::size_t py = 0; py < P; ++py)
          for (std::size_t px = 0; px < P; ++px)
            img.at(c, gy * P + py, gx * P + px) = pv[read++];
  return img;
}

struct EncoderConfig {
  std::size_t depth = 12;
  std::size_t dim = 192;
  std::size_t heads = 3;
  std::size_t patch = 16;
  std::size_t image = 224;
  std::size_t channels = 3;
  std::size_t classes = 10;
  std::size_t mlp_ratio = 4;
  bool class_token = true;
  real drop_path = real{0.01};

  void validate() const {
    check(depth >= 0 && dim > 0 && heads > 0, "encoder config: bad depth/dim/heads");
    check(dim % heads == 0, "encoder config: dim ", dim, " not divisible by heads ", heads);
    check(patch > 0 && image % patch == 0, "encoder config: patch ", patch,
          " does not divide image ", image);
  }

  PatchGrid grid() const { return PatchGrid::for_image(image, image, channels, patch); }
  std::size_t patch_count() const { return grid().count(); }
  std::size_t token_count() const { return patch_count() + (class_token ? 1 : 0); }
};

struct EmbedParams {
  LinearParams proj;  // patch_dim -> dim
  Tensor pos;         // [N, dim], learned
  Tensor cls;         // [dim]; undefined when the class token is disabled

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    proj.visit(prefix + ".proj", fn);
    fn(prefix + ".pos", pos);
    if (cls.defined()) fn(prefix + ".cls", cls);
  }
};

struct ClassifierHead {
  LinearParams fc;

  void visit(const std::string& prefix, const ParamVisitor& fn) { fc.visit(prefix, fn); }
};

struct VitModel {
  EncoderConfig config;
  EmbedParams embed;
  std::vector<BlockParams> blocks;
  LayerNormParams final_norm;
  ClassifierHead head;

  void visit(const ParamVisitor& fn) {
    embed.visit("embed", fn);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit("block" + std::to_string(i), fn);
    final_norm.visit("final_norm", fn);
    head.visit("head", fn);
  }

  void visit_encoder(const ParamVisitor& fn) {
    embed.visit("embed", fn);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit("block" + std::to_string(i), fn);
    final_norm.visit("final_norm", fn);
  }
};

inline VitModel make_vit(const EncoderConfig& config, Rng& rng) {
  config.validate();
  VitModel m;
  m.config = config;
  m.embed.proj = make_linear(config.dim, config.grid().patch_dim(), rng);
  m.embed.pos = Tensor::zeros({config.patch_count(), config.dim});
  for (auto& v : m.embed.pos.values()) v = static_cast<real>(rng.normal(0.0, 0.02));
  m.embed.pos.set_requires_grad(true);
  if (config.class_token) {
    m.embed.cls = Tensor::zeros({config.dim});
    for (auto& v : m.embed.cls.values()) v = static_cast<real>(rng.normal(0.0, 0.02));
    m.embed.cls.set_requires_grad(true);
  }
  for (std::size_t i = 0; i < config.depth; ++i)
    m.blocks.push_back(make_block(config.dim, config.heads, rng, config.mlp_ratio));
  m.final_norm = make_layer_norm(config.dim);
  m.head.fc = make_linear(config.classes, config.dim, rng);
  return m;
}

// patches [*, N, patch_dim] -> tokens [*, N(+1), dim]
inline TokenSequence embed(const EmbedParams& params, const Tensor& patches, bool class_token) {
  check(patches.dim(patches.rank() - 1) == params.proj.in_dim(), "embed: patch dim ",
        patches.dim(patches.rank() - 1), " does not match projection in_dim ",
        params.proj.in_dim());
  check(patches.dim(patches.rank() - 2) == params.pos.dim(0), "embed: patch count ",
        patches.dim(patches.rank() - 2), " does not match positional table ", params.pos.dim(0));
  Tensor tokens = add(linear(params.proj, patches), params.pos);
  if (class_token) {
    check(params.cls.defined(), "embed: class token requested but not initialized");
    tokens = prepend_token(tokens, params.cls);
  }
  return {tokens, class_token};
}

struct EncodeOptions {
  bool record_attention = false;
  bool capture_layers = false;
  // stochastic-depth factors, 2 sets per block (attention branch, MLP branch)
  const std::vector<std::vector<real>>* branch_factors = nullptr;
};

struct EncodeResult {
  TokenSequence tokens;
  std::vector<AttentionRecord> attention;
  std::vector<Tensor> layer_tokens;  // post-block outputs when captured
};

// Applies the block stack, then the final norm. A depth-0 stack is the
// identity on tokens.
inline EncodeResult encode(VitModel& model, const TokenSequence& input,
                           const EncodeOptions& opts = {}) {
  check(input.channels() == model.config.dim, "encode: token dim ", input.channels(),
        " does not match model dim ", model.config.dim);
  EncodeResult result;
  TokenSequence x = input;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    BlockOptions bopts;
    bopts.record_attention = opts.record_attention;
    if (opts.branch_factors) {
      bopts.drop_attn = &(*opts.branch_factors)[2 * i];
      bopts.drop_mlp = &(*opts.branch_factors)[2 * i + 1];
    }
    auto [next, record] = transformer_block(model.blocks[i], x, bopts);
    x = next;
    if (opts.record_attention) result.attention.push_back(std::move(record));
    if (opts.capture_layers) result.layer_tokens.push_back(x.tokens.detached());
  }
  if (!model.blocks.empty()) x.tokens = layer_norm(x.tokens, model.final_norm);
  result.tokens = x;
  return result;
}

// Logits from the class token, or from mean-pooled tokens when the class
// token is disabled.
inline Tensor classify(const ClassifierHead& head, const TokenSequence& latent) {
  const std::size_t d = latent.channels();
  const std::size_t rank = latent.tokens.rank();
  Tensor feature;
  if (latent.has_class_token) {
    Tensor cls = index_select(latent.tokens, {0});  // [*, 1, d]
    Shape s = cls.shape();
    s.erase(s.end() - 2);
    feature = reshape(cls, s);
  } else {
    const std::size_t n = latent.token_count();
    Tensor pool = Tensor::full({n, 1}, real{1} / static_cast<real>(n));
    Tensor pooled = matmul(transpose(latent.tokens, -2, -1), pool);  // [*, d, 1]
    Shape s = pooled.shape();
    s.pop_back();
    feature = reshape(pooled, s);
  }
  check(feature.dim(feature.rank() - 1) == d, "classify: feature dim mismatch");
  (void)rank;
  return linear(head.fc, feature);
}

// mean over the batch of -sum(target' * log softmax(logits)), with
// target' = (1 - smoothing) * target + smoothing / K
inline Tensor cross_entropy(const Tensor& logits, const Tensor& target_dist, real smoothing) {
  check(smoothing >= 0 && smoothing < 1, "cross_entropy: smoothing must be in [0, 1), got ",
        smoothing);
  check(logits.shape() == target_dist.shape(), "cross_entropy: logits ", shape_str(logits.shape()),
        " and targets ", shape_str(target_dist.shape()), " differ");
  const std::size_t k = logits.dim(logits.rank() - 1);
  const std::size_t batch = logits.numel() / k;
  for (std::size_t b = 0; b < batch; ++b) {
    real s = 0;
    for (std::size_t c = 0; c < k; ++c) s += target_dist.values()[b * k + c];
    check(std::fabs(s - 1) < 1e-6, "cross_entropy: target row ", b, " sums to ", s);
  }
  Tensor smoothed = Tensor::zeros(target_dist.shape());
  const real uniform = smoothing / static_cast<real>(k);
  for (std::size_t i = 0; i < smoothed.numel(); ++i)
    smoothed.values()[i] = (1 - smoothing) * target_dist.values()[i] + uniform;
  return scale(sum(mul(smoothed, log_softmax(logits))), real{-1} / static_cast<real>(batch));
}

inline Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
  Tensor t = Tensor::zeros({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    check(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < classes, "one_hot: label ",
          labels[i], " out of range ", classes);
    t.values()[i * classes + static_cast<std::size_t>(labels[i])] = 1;
  }
  return t;
}

inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels, real smoothing) {
  return cross_entropy(logits, one_hot(labels, logits.dim(logits.rank() - 1)), smoothing);
}

}  // namespace ssat
