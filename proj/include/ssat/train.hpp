#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssat/data.hpp"
#include "ssat/ssat.hpp"

namespace ssat {

// --------------------------------------------------------------------------
// optimizer
// --------------------------------------------------------------------------

struct AdamMoments {
  std::vector<real> m;
  std::vector<real> v;
};

// Decoupled weight decay (param -= lr*wd*param), then the bias-corrected
// Adam update.
template <typename ParamVec, typename GradVec>
inline void adamw_update(ParamVec& param, const GradVec& grad, AdamMoments& moments,
                         std::int64_t t, real lr, real weight_decay, real beta1, real beta2,
                         real eps) {
  check(param.size() == grad.size(), "adamw_update: param holds ", param.size(),
        " values, grad holds ", grad.size());
  if (moments.m.empty()) {
    moments.m.assign(param.size(), real{0});
    moments.v.assign(param.size(), real{0});
  }
  check(moments.m.size() == param.size(), "adamw_update: moment shape mismatch");
  const real bc1 = real{1} - std::pow(beta1, static_cast<real>(t));
  const real bc2 = real{1} - std::pow(beta2, static_cast<real>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    param[i] -= lr * weight_decay * param[i];
    moments.m[i] = beta1 * moments.m[i] + (real{1} - beta1) * grad[i];
    moments.v[i] = beta2 * moments.v[i] + (real{1} - beta2) * grad[i] * grad[i];
    const real mhat = moments.m[i] / bc1;
    const real vhat = moments.v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

// named parameter with its depth position for layer-wise lr decay:
// -1 = patch embedding side, 0..depth-1 = blocks, depth = head/decoder side
struct ParamGroup {
  std::string name;
  Tensor tensor;
  int layer_id = 0;
};

// base_lr * decay^(depth - i) for block i, decay^0 for the classifier side,
// one extra decay step for the embedding side
inline real layer_lr_multiplier(int layer_id, std::size_t depth, real decay) {
  if (layer_id < 0) return std::pow(decay, static_cast<real>(depth + 1));
  if (static_cast<std::size_t>(layer_id) < depth)
    return std::pow(decay, static_cast<real>(depth - static_cast<std::size_t>(layer_id)));
  return real{1};
}

class AdamW {
 public:
  AdamW(real beta1, real beta2, real eps, real weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(std::vector<ParamGroup>& groups, const GradientMap& grads, real lr,
            const std::function<real(const ParamGroup&)>& lr_mult) {
    ++t_;
    for (ParamGroup& g : groups) {
      const Tensor* grad = grads.find_node(g.tensor.node());
      check(grad != nullptr, "AdamW::step: no gradient recorded for ", g.name);
      const real effective = lr * (lr_mult ? lr_mult(g) : real{1});
      applied_lr_[g.name] = effective;
      adamw_update(g.tensor.values(), grad->values(), state_[g.name], t_, effective,
                   weight_decay_, beta1_, beta2_, eps_);
    }
  }

  std::int64_t step_count() const { return t_; }
  void set_step_count(std::int64_t t) { t_ = t; }
  const std::unordered_map<std::string, AdamMoments>& moments() const { return state_; }
  std::unordered_map<std::string, AdamMoments>& moments() { return state_; }
  const std::unordered_map<std::string, real>& applied_lr() const { return applied_lr_; }

 private:
  real beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, AdamMoments> state_;
  std::unordered_map<std::string, real> applied_lr_;
};

// --------------------------------------------------------------------------
// learning-rate schedule: linear warmup, then cosine decay to min_lr
// --------------------------------------------------------------------------

inline real lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                        real base_lr, real warmup_lr, real min_lr) {
  check(step < total_steps, "lr_schedule: step ", step, " out of range ", total_steps);
  if (step < warmup_steps) {
    return warmup_lr + (base_lr - warmup_lr) * static_cast<real>(step) /
                           static_cast<real>(warmup_steps);
  }
  const std::size_t span = total_steps > warmup_steps + 1 ? total_steps - 1 - warmup_steps : 1;
  const real progress = static_cast<real>(step - warmup_steps) / static_cast<real>(span);
  return min_lr + (base_lr - min_lr) * real{0.5} *
                      (real{1} + std::cos(real{3.14159265358979323846} * progress));
}

// --------------------------------------------------------------------------
// analytic FLOP accounting (multiply-accumulate counts, the GFLOPs
// convention used for vision models)
// --------------------------------------------------------------------------

struct FlopsBreakdown {
  double full_branch = 0;
  double masked_branch = 0;
  double decoder = 0;
  double total = 0;
};

namespace detail {

inline double block_macs(double n, double d, double mlp_ratio) {
  // qkv + out projections: 4*n*d^2; attention matmuls: 2*n^2*d; mlp: 2*r*n*d^2
  return (4.0 + 2.0 * mlp_ratio) * n * d * d + 2.0 * n * n * d;
}

}  // namespace detail

enum class FlopsMode { classification, ssat, ssl_pretrain };

inline FlopsBreakdown estimate_flops(const EncoderConfig& enc, const DecoderConfig* dec,
                                     real mask_ratio, FlopsMode mode) {
  enc.validate();
  const double N = static_cast<double>(enc.patch_count());
  const double pd = static_cast<double>(enc.grid().patch_dim());
  const double d = static_cast<double>(enc.dim);
  const double r = static_cast<double>(enc.mlp_ratio);
  const double cls = enc.class_token ? 1.0 : 0.0;

  FlopsBreakdown out;
  {
    const double n = N + cls;
    out.full_branch = N * pd * d + static_cast<double>(enc.depth) * detail::block_macs(n, d, r) +
                      d * static_cast<double>(enc.classes);
  }
  if (mode != FlopsMode::classification) {
    check(dec != nullptr, "estimate_flops: decoder config required for ssat/ssl modes");
    dec->validate();
    const double masked = static_cast<double>(masked_count(enc.patch_count(), mask_ratio));
    const double vis = N - masked;
    const double n_vis = vis + cls;
    out.masked_branch = vis * pd * d +
                        static_cast<double>(enc.depth) * detail::block_macs(n_vis, d, r);
    const double dd = static_cast<double>(dec->dim);
    const double dr = static_cast<double>(dec->mlp_ratio);
    out.decoder = vis * d * dd + static_cast<double>(dec->depth) * detail::block_macs(N, dd, dr) +
                  N * dd * pd;
  }
  out.total = (mode == FlopsMode::ssl_pretrain ? 0.0 : out.full_branch) + out.masked_branch +
              out.decoder;
  return out;
}

// --------------------------------------------------------------------------
// checkpoint container: versioned binary, digest-checked
// --------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'S', 'S', 'A', 'T', 'C', 'K', 'P', '\0'};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_digest = 0;
  std::uint64_t epoch = 0;
  std::uint64_t run_seed = 0;
  std::int64_t opt_step = 0;
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> opt_m;
  std::vector<NamedTensor> opt_v;
};

namespace detail {

struct ByteWriter {
  std::vector<unsigned char> bytes;

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) u64(d);
    for (real v : t.values()) f64(static_cast<double>(v));
  }
};

struct ByteReader {
  const std::vector<unsigned char>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    check(pos + n <= bytes.size(), "checkpoint: truncated at byte ", pos);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + n));
    pos += n;
    return s;
  }
  Tensor tensor() {
    const std::uint32_t rank = u32();
    Shape shape(rank);
    for (auto& d : shape) d = u64();
    Tensor t = Tensor::zeros(shape);
    for (auto& v : t.values()) v = static_cast<real>(f64());
    return t;
  }
};

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes.insert(w.bytes.end(), kCheckpointMagic, kCheckpointMagic + 8);
  w.u32(ck.version);
  w.u64(ck.config_digest);
  w.u64(ck.epoch);
  w.u64(ck.run_seed);
  w.u64(std::bit_cast<std::uint64_t>(ck.opt_step));
  auto section = [&](const std::vector<NamedTensor>& list) {
    w.u32(static_cast<std::uint32_t>(list.size()));
    for (const auto& nt : list) {
      w.str(nt.name);
      w.tensor(nt.tensor);
    }
  };
  section(ck.params);
  section(ck.opt_m);
  section(ck.opt_v);
  w.u64(fnv1a(w.bytes.data(), w.bytes.size()));
  return w.bytes;
}

inline Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
  check(bytes.size() > 16, "checkpoint: file too short");
  const std::uint64_t stored =
      [&] {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
          v |= static_cast<std::uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
        return v;
      }();
  check(stored == fnv1a(bytes.data(), bytes.size() - 8),
        "checkpoint: digest mismatch, file is corrupt");
  detail::ByteReader r{bytes};
  r.need(8);
  check(std::equal(kCheckpointMagic, kCheckpointMagic + 8, bytes.begin()),
        "checkpoint: bad magic bytes");
  r.pos = 8;
  Checkpoint ck;
  ck.version = r.u32();
  check(ck.version == kCheckpointVersion, "checkpoint: version ", ck.version,
        " unsupported (expected ", kCheckpointVersion, ")");
  ck.config_digest = r.u64();
  ck.epoch = r.u64();
  ck.run_seed = r.u64();
  ck.opt_step = std::bit_cast<std::int64_t>(r.u64());
  auto section = [&](std::vector<NamedTensor>& list) {
    const std::uint32_t n = r.u32();
    list.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      NamedTensor nt;
      nt.name = r.str();
      nt.tensor = r.tensor();
      list.push_back(std::move(nt));
    }
  };
  section(ck.params);
  section(ck.opt_m);
  section(ck.opt_v);
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    check(out.good(), "save_checkpoint: cannot write ", tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "load_checkpoint: cannot open ", path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// --------------------------------------------------------------------------
// training configuration and the experiment runner
// --------------------------------------------------------------------------

enum class TrainMode { scratch, ssl_pretrain, finetune, ssat };

inline const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::scratch: return "scratch";
    case TrainMode::ssl_pretrain: return "ssl_pretrain";
    case TrainMode::finetune: return "finetune";
    case TrainMode::ssat: return "ssat";
  }
  return "?";
}

struct MixupSettings {
  bool enabled = true;
  real alpha = real{0.8};
};

struct TrainConfig {
  TrainMode mode = TrainMode::ssat;
  std::size_t epochs = 100;
  std::size_t warmup_epochs = 5;
  real base_lr = real{1e-3};
  real warmup_lr = real{1e-6};
  real min_lr = real{1e-6};
  real weight_decay = real{0.05};
  real beta1 = real{0.9};
  real beta2 = real{0.999};
  real opt_eps = real{1e-8};
  real layer_decay = real{0.75};
  real lambda = real{0.1};
  real mask_ratio = real{0.75};
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  real label_smoothing = real{0.1};
  MixupSettings mixup;
  real drop_path = real{0.01};
  std::size_t eval_every = 1;  // 0 = evaluate only after the final epoch
  AugmentConfig augment;
  std::string init_checkpoint;    // finetune: encoder weights source
  std::string resume_checkpoint;  // same-mode resume
  std::string checkpoint_out;

  void validate() const {
    check(epochs >= 1, "train config: epochs must be >= 1");
    check(warmup_epochs <= epochs, "train config: warmup epochs ", warmup_epochs, " > epochs ",
          epochs);
    check(base_lr > 0 && warmup_lr > 0 && min_lr > 0, "train config: learning rates must be positive");
    check(lambda >= 0 && lambda <= 1, "train config: lambda must be in [0, 1]");
    check(mask_ratio >= 0 && mask_ratio < 1, "train config: mask ratio must be in [0, 1)");
    check(batch_size >= 1, "train config: batch size must be >= 1");
    check(label_smoothing >= 0 && label_smoothing < 1, "train config: bad label smoothing");
    check(drop_path >= 0 && drop_path < 1, "train config: bad drop path rate");
    if (mode == TrainMode::finetune)
      check(!init_checkpoint.empty(), "train config: finetune requires init_checkpoint");
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  real l_cls = 0;
  real l_ssat = 0;
  real l_total = 0;
  real lr = 0;
  double eval_acc = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0;
};

struct ExperimentMetrics {
  std::vector<EpochMetrics> epochs;
  double flops_per_image = 0;
  double wall_seconds = 0;
  double final_accuracy = std::numeric_limits<double>::quiet_NaN();
};

// shared-impl handles: updates through the group write into the model
inline std::vector<ParamGroup> collect_param_groups(VitModel& model, DecoderModel* decoder,
                                                    bool include_head) {
  std::vector<ParamGroup> groups;
  const int depth = static_cast<int>(model.config.depth);
  model.embed.visit("embed", [&](const std::string& name, Tensor& t) {
    groups.push_back({name, t, -1});
  });
  for (std::size_t i = 0; i < model.blocks.size(); ++i)
    model.blocks[i].visit("block" + std::to_string(i), [&, i](const std::string& name, Tensor& t) {
      groups.push_back({name, t, static_cast<int>(i)});
    });
  model.final_norm.visit("final_norm", [&](const std::string& name, Tensor& t) {
    groups.push_back({name, t, depth});
  });
  if (include_head)
    model.head.visit("head", [&](const std::string& name, Tensor& t) {
      groups.push_back({name, t, depth});
    });
  if (decoder)
    decoder->visit([&](const std::string& name, Tensor& t) {
      groups.push_back({name, t, depth});
    });
  return groups;
}

// Patch batches are standardized from [0,1] pixels to [-1,1] model inputs.
// The reconstruction objective is unaffected: per-patch target normalization
// cancels any fixed affine input map.
inline constexpr real kInputShift = real{0.5};
inline constexpr real kInputScale = real{2};

inline Tensor batch_to_patches(const std::vector<Image>& images, const PatchGrid& grid) {
  check(!images.empty(), "batch_to_patches: empty batch");
  Tensor out = Tensor::uninitialized({images.size(), grid.count(), grid.patch_dim()});
  const std::size_t per = grid.count() * grid.patch_dim();
  for (std::size_t i = 0; i < images.size(); ++i) {
    Tensor p = patchify(images[i], grid);
    real* dst = out.values().data() + i * per;
    const real* src = p.values().data();
    for (std::size_t k = 0; k < per; ++k) dst[k] = (src[k] - kInputShift) * kInputScale;
  }
  return out;
}

// per-sample stochastic-depth factors, 2 sets per block; empty when the
// rate is zero
inline std::vector<std::vector<real>> make_drop_factors(std::size_t depth, std::size_t batch,
                                                        real rate, Rng& rng) {
  std::vector<std::vector<real>> factors;
  if (rate <= 0) return factors;
  const real keep_scale = real{1} / (real{1} - rate);
  factors.reserve(2 * depth);
  for (std::size_t b = 0; b < 2 * depth; ++b) {
    std::vector<real> f(batch);
    for (std::size_t s = 0; s < batch; ++s) f[s] = rng.bernoulli(rate) ? real{0} : keep_scale;
    factors.push_back(std::move(f));
  }
  return factors;
}

inline double evaluate_accuracy(VitModel& model, const Dataset& dataset, std::size_t batch_size,
                                real perturb_strength = 0, std::uint64_t perturb_seed = 0) {
  check(dataset.size() > 0, "evaluate_accuracy: empty dataset");
  NoGradScope no_grad;
  const PatchGrid grid = model.config.grid();
  std::size_t correct = 0;
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, dataset.size() - start);
    std::vector<Image> batch;
    batch.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      if (perturb_strength > 0) {
        Rng rng(derive_seed(perturb_seed, "perturb", start + i));
        batch.push_back(perspective_perturb(dataset.image(start + i), perturb_strength, rng));
      } else {
        batch.push_back(dataset.image(start + i));
      }
    }
    Tensor patches = batch_to_patches(batch, grid);
    TokenSequence seq = embed(model.embed, patches, model.config.class_token);
    Tensor logits = classify(model.head, encode(model, seq).tokens);
    const std::size_t k = model.config.classes;
    for (std::size_t i = 0; i < count; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (logits.values()[i * k + c] > logits.values()[i * k + best]) best = c;
      if (static_cast<int>(best) == dataset.label(start + i)) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

struct ExperimentModels {
  VitModel encoder;
  DecoderModel decoder;  // only populated when the mode needs it
  bool has_decoder = false;
};

inline std::vector<NamedTensor> snapshot_params(VitModel& model, DecoderModel* decoder) {
  std::vector<NamedTensor> out;
  model.visit([&](const std::string& name, Tensor& t) { out.push_back({name, t.clone()}); });
  if (decoder)
    decoder->visit([&](const std::string& name, Tensor& t) { out.push_back({name, t.clone()}); });
  return out;
}

inline void restore_params(VitModel& model, DecoderModel* decoder,
                           const std::vector<NamedTensor>& saved, bool encoder_only = false) {
  std::unordered_map<std::string, const NamedTensor*> byname;
  for (const auto& nt : saved) byname[nt.name] = &nt;
  auto load = [&](const std::string& name, Tensor& t) {
    auto it = byname.find(name);
    check(it != byname.end(), "checkpoint: missing parameter ", name);
    check(it->second->tensor.shape() == t.shape(), "checkpoint: shape mismatch for ", name);
    t.values() = it->second->tensor.values();
  };
  if (encoder_only) {
    model.visit_encoder(load);
  } else {
    model.visit(load);
    if (decoder) decoder->visit(load);
  }
}

// Runs one training experiment. Deterministic for a fixed seed: every RNG
// stream is derived per purpose from (seed, epoch, index), so regimes sharing
// a seed see identical data order, augmentation, and mixup draws.
inline ExperimentMetrics run_experiment(const TrainConfig& config, const Dataset& train_set,
                                        const Dataset& test_set, const EncoderConfig& enc_cfg,
                                        const DecoderConfig& dec_cfg,
                                        ExperimentModels* models_out = nullptr,
                                        std::uint64_t config_digest = 0) {
  config.validate();
  enc_cfg.validate();
  const bool needs_decoder =
      config.mode == TrainMode::ssat || config.mode == TrainMode::ssl_pretrain;
  const bool needs_labels = config.mode != TrainMode::ssl_pretrain;
  const auto t_start = std::chrono::steady_clock::now();

  // model init: one stream per component, so the encoder draw is identical
  // across regimes under a shared seed
  Rng enc_rng(derive_seed(config.seed, "init.encoder"));
  VitModel model = make_vit(enc_cfg, enc_rng);
  DecoderModel decoder;
  if (needs_decoder) {
    Rng dec_rng(derive_seed(config.seed, "init.decoder"));
    decoder = make_decoder(dec_cfg, enc_cfg.dim, enc_cfg.patch_count(),
                           enc_cfg.grid().patch_dim(), dec_rng);
  }

  AdamW optimizer(config.beta1, config.beta2, config.opt_eps, config.weight_decay);
  std::size_t start_epoch = 0;

  if (config.mode == TrainMode::finetune) {
    Checkpoint ck = load_checkpoint(config.init_checkpoint);
    restore_params(model, nullptr, ck.params, /*encoder_only=*/true);
    // classifier re-initialized fresh; the pretraining decoder is discarded
    Rng head_rng(derive_seed(config.seed, "init.head"));
    model.head.fc = make_linear(enc_cfg.classes, enc_cfg.dim, head_rng);
  } else if (!config.resume_checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(config.resume_checkpoint);
    check(config_digest == 0 || ck.config_digest == 0 || ck.config_digest == config_digest,
          "resume: checkpoint was produced by a different configuration");
    check(ck.run_seed == config.seed, "resume: checkpoint seed ", ck.run_seed,
          " differs from configured seed ", config.seed);
    restore_params(model, needs_decoder ? &decoder : nullptr, ck.params);
    optimizer.set_step_count(ck.opt_step);
    for (const auto& nt : ck.opt_m)
      optimizer.moments()[nt.name].m.assign(nt.tensor.values().begin(), nt.tensor.values().end());
    for (const auto& nt : ck.opt_v)
      optimizer.moments()[nt.name].v.assign(nt.tensor.values().begin(), nt.tensor.values().end());
    start_epoch = ck.epoch;
  }

  std::vector<ParamGroup> groups = collect_param_groups(
      model, needs_decoder ? &decoder : nullptr, /*include_head=*/needs_labels);
  auto lr_mult = [&](const ParamGroup& g) {
    return layer_lr_multiplier(g.layer_id, enc_cfg.depth, config.layer_decay);
  };

  const PatchGrid grid = enc_cfg.grid();
  const std::size_t steps_per_epoch = (train_set.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = config.epochs * steps_per_epoch;
  const std::size_t warmup_steps = config.warmup_epochs * steps_per_epoch;

  ExperimentMetrics metrics;
  {
    FlopsMode fm = config.mode == TrainMode::ssat
                       ? FlopsMode::ssat
                       : (config.mode == TrainMode::ssl_pretrain ? FlopsMode::ssl_pretrain
                                                                 : FlopsMode::classification);
    metrics.flops_per_image =
        estimate_flops(enc_cfg, needs_decoder ? &dec_cfg : nullptr, config.mask_ratio, fm).total;
  }

  Tape tape;
  for (std::size_t epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    {
      Rng order_rng(derive_seed(config.seed, "order", epoch));
      order_rng.shuffle(order);
    }

    real sum_cls = 0, sum_ssat = 0, sum_total = 0, last_lr = 0;
    std::size_t steps = 0;

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, order.size() - start);
      const std::size_t batch_index = start / config.batch_size;
      const std::size_t global_step = epoch * steps_per_epoch + batch_index;
      const real lr = lr_schedule(global_step, total_steps, warmup_steps, config.base_lr,
                                  config.warmup_lr, config.min_lr);
      last_lr = lr;

      std::vector<Image> augmented;
      augmented.reserve(count);
      std::vector<int> labels;
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t idx = order[start + i];
        Rng aug_rng(derive_seed(config.seed, "aug", epoch * 1000003 + idx));
        augmented.push_back(augment(train_set.image(idx), config.augment, aug_rng));
        if (needs_labels) labels.push_back(train_set.label(idx));
      }

      TapeScope scope(tape);
      Tensor loss;
      real l_cls = 0, l_ssat = 0;

      if (config.mode == TrainMode::ssl_pretrain) {
        const MaskSpec mask = sample_mask(grid.count(), config.mask_ratio,
                                          derive_seed(config.seed, "mask", epoch, batch_index));
        Tensor patches = batch_to_patches(augmented, grid);
        Rng dp_rng(derive_seed(config.seed, "droppath.aux", epoch, batch_index));
        const std::vector<std::vector<real>> factors =
            make_drop_factors(enc_cfg.depth, count, config.drop_path, dp_rng);
        EncodeOptions opts;
        if (!factors.empty()) opts.branch_factors = &factors;
        TokenSequence visible =
            apply_mask(embed(model.embed, patches, enc_cfg.class_token), mask);
        Tensor pred = decode(decoder, encode(model, visible, opts).tokens, mask);
        loss = reconstruction_loss(pred, patches.detached(), mask);
        l_ssat = loss.item();
      } else {
        // classification targets, mixed when configured
        Tensor targets = one_hot(labels, enc_cfg.classes);
        std::vector<Image>* cls_images = &augmented;
        std::vector<Image> mixed_storage;
        if (config.mixup.enabled && count >= 2) {
          Rng mix_rng(derive_seed(config.seed, "mixup", epoch, batch_index));
          MixupResult mixed = mixup(augmented, targets, config.mixup.alpha, mix_rng);
          mixed_storage = std::move(mixed.images);
          targets = mixed.soft_labels;
          cls_images = &mixed_storage;
        }
        Tensor cls_patches = batch_to_patches(*cls_images, grid);
        Rng dp_rng(derive_seed(config.seed, "droppath", epoch, batch_index));
        const std::vector<std::vector<real>> cls_factors =
            make_drop_factors(enc_cfg.depth, count, config.drop_path, dp_rng);

        if (config.mode == TrainMode::ssat) {
          StepBatch step;
          step.patches_cls = cls_patches;
          step.targets = targets;
          step.patches_recon = batch_to_patches(augmented, grid);  // pre-mixup
          step.mask = sample_mask(grid.count(), config.mask_ratio,
                                  derive_seed(config.seed, "mask", epoch, batch_index));
          Rng dp_aux(derive_seed(config.seed, "droppath.aux", epoch, batch_index));
          const std::vector<std::vector<real>> aux_factors =
              make_drop_factors(enc_cfg.depth, count, config.drop_path, dp_aux);
          SsatStepOptions opts;
          opts.label_smoothing = config.label_smoothing;
          if (!cls_factors.empty()) opts.cls_branch_factors = &cls_factors;
          if (!aux_factors.empty()) opts.aux_branch_factors = &aux_factors;
          SsatStepResult r = ssat_step_forward(model, decoder, step, config.lambda, opts);
          loss = r.total;
          l_cls = r.breakdown.l_cls;
          l_ssat = r.breakdown.l_ssat;
        } else {  // scratch or finetune
          EncodeOptions opts;
          if (!cls_factors.empty()) opts.branch_factors = &cls_factors;
          TokenSequence seq = embed(model.embed, cls_patches, enc_cfg.class_token);
          Tensor logits = classify(model.head, encode(model, seq, opts).tokens);
          loss = cross_entropy(logits, targets, config.label_smoothing);
          l_cls = loss.item();
        }
      }

      GradientMap grads = tape.backward(loss);
      optimizer.step(groups, grads, lr, lr_mult);
      tape.reset();

      sum_cls += l_cls;
      sum_ssat += l_ssat;
      sum_total += loss.item();
      ++steps;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.l_cls = sum_cls / static_cast<real>(steps);
    em.l_ssat = sum_ssat / static_cast<real>(steps);
    em.l_total = sum_total / static_cast<real>(steps);
    em.lr = last_lr;
    const bool last_epoch = epoch + 1 == config.epochs;
    const bool scheduled_eval = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
    if (needs_labels && (scheduled_eval || last_epoch))
      em.eval_acc = evaluate_accuracy(model, test_set, config.batch_size);
    em.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count();
    metrics.epochs.push_back(em);
  }

  if (!config.checkpoint_out.empty()) {
    Checkpoint ck;
    ck.config_digest = config_digest;
    ck.epoch = config.epochs;
    ck.run_seed = config.seed;
    ck.opt_step = optimizer.step_count();
    ck.params = snapshot_params(model, needs_decoder ? &decoder : nullptr);
    for (auto& [name, moments] : optimizer.moments()) {
      // moment shapes mirror their parameters
      for (const auto& g : groups) {
        if (g.name == name) {
          ck.opt_m.push_back({name, Tensor::from(g.tensor.shape(), moments.m)});
          ck.opt_v.push_back({name, Tensor::from(g.tensor.shape(), moments.v)});
          break;
        }
      }
    }
    std::sort(ck.opt_m.begin(), ck.opt_m.end(),
              [](const NamedTensor& a, const NamedTensor& b) { return a.name < b.name; });
    std::sort(ck.opt_v.begin(), ck.opt_v.end(),
              [](const NamedTensor& a, const NamedTensor& b) { return a.name < b.name; });
    save_checkpoint(config.checkpoint_out, ck);
  }

  if (!metrics.epochs.empty()) metrics.final_accuracy = metrics.epochs.back().eval_acc;
  metrics.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  if (models_out) {
    models_out->encoder = std::move(model);
    if (needs_decoder) {
      models_out->decoder = std::move(decoder);
      models_out->has_decoder = true;
    }
  }
  return metrics;
}

}  // namespace ssat
