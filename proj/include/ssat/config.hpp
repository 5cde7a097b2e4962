#pragma once

#include <json.hpp>

#include <fstream>
#include <set>
#include <string>

#include "ssat/diag.hpp"

namespace ssat {

using json = nlohmann::json;

enum class DataSource { synthetic, cifar, raw_dir };

struct DataSpec {
  DataSource source = DataSource::synthetic;
  std::string train_path;
  std::string test_path;
  std::size_t classes = 3;
  std::size_t per_class = 200;
  std::size_t test_per_class = 100;
  std::size_t image = 32;
};

enum class ComparePreset { regimes, lambda_sweep, subset_sweep };

struct ExperimentSpec {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/out";
  EncoderConfig encoder;
  DecoderConfig decoder;
  TrainConfig train;
  DataSpec data;
  DiagConfig diag;
  ComparePreset compare_preset = ComparePreset::regimes;
  std::string eval_checkpoint;
  real eval_perturb = 0;
  std::uint64_t digest = 0;
};

namespace detail {

// strict reader: every key must be known, every value well-typed and in range
struct SpecReader {
  const json& node;
  std::string path;
  std::set<std::string> seen;

  SpecReader(const json& n, std::string p) : node(n), path(std::move(p)) {
    check(node.is_object(), "config: ", path.empty() ? "top level" : path, " must be an object");
  }

  ~SpecReader() = default;

  void finish() {
    for (const auto& [key, value] : node.items()) {
      (void)value;
      check(seen.count(key) > 0, "config: unknown key '", path, key, "'");
    }
  }

  bool has(const std::string& key) {
    seen.insert(key);
    return node.contains(key);
  }

  template <typename T>
  void number(const std::string& key, T& out, double lo, double hi) {
    if (!has(key)) return;
    const json& v = node.at(key);
    check(v.is_number(), "config: '", path, key, "' must be a number");
    const double d = v.get<double>();
    check(d >= lo && d <= hi, "config: '", path, key, "' = ", d, " outside [", lo, ", ", hi, "]");
    out = static_cast<T>(d);
  }

  void boolean(const std::string& key, bool& out) {
    if (!has(key)) return;
    const json& v = node.at(key);
    check(v.is_boolean(), "config: '", path, key, "' must be a boolean");
    out = v.get<bool>();
  }

  void string(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const json& v = node.at(key);
    check(v.is_string(), "config: '", path, key, "' must be a string");
    out = v.get<std::string>();
  }

  bool object(const std::string& key, const json*& out) {
    if (!has(key)) return false;
    out = &node.at(key);
    return true;
  }
};

inline void read_augment(const json& node, const std::string& path, AugmentConfig& cfg) {
  SpecReader r(node, path);
  r.boolean("random_resized_crop", cfg.random_resized_crop);
  r.number("crop_scale_min", cfg.crop_scale_min, 0.001, 1.0);
  r.number("crop_scale_max", cfg.crop_scale_max, 0.001, 1.0);
  r.number("crop_ratio_min", cfg.crop_ratio_min, 0.1, 10.0);
  r.number("crop_ratio_max", cfg.crop_ratio_max, 0.1, 10.0);
  r.number("hflip_prob", cfg.hflip_prob, 0.0, 1.0);
  r.number("randaugment_ops", cfg.randaugment_ops, 0, 10);
  r.number("randaugment_magnitude", cfg.randaugment_magnitude, 0.0, 1.0);
  r.number("erase_prob", cfg.erase_prob, 0.0, 1.0);
  r.number("erase_area_min", cfg.erase_area_min, 0.001, 1.0);
  r.number("erase_area_max", cfg.erase_area_max, 0.001, 1.0);
  r.number("erase_aspect_min", cfg.erase_aspect_min, 0.01, 1.0);
  r.finish();
}

inline void read_encoder(const json& node, const std::string& path, EncoderConfig& cfg) {
  SpecReader r(node, path);
  r.number("depth", cfg.depth, 0, 64);
  r.number("dim", cfg.dim, 1, 4096);
  r.number("heads", cfg.heads, 1, 64);
  r.number("patch", cfg.patch, 1, 64);
  r.number("image", cfg.image, 4, 1024);
  r.number("channels", cfg.channels, 1, 4);
  r.number("classes", cfg.classes, 2, 10000);
  r.number("mlp_ratio", cfg.mlp_ratio, 1, 8);
  r.boolean("class_token", cfg.class_token);
  r.number("drop_path", cfg.drop_path, 0.0, 0.99);
  r.finish();
}

inline void read_decoder(const json& node, const std::string& path, DecoderConfig& cfg) {
  SpecReader r(node, path);
  r.number("depth", cfg.depth, 1, 32);
  r.number("dim", cfg.dim, 1, 2048);
  r.number("heads", cfg.heads, 1, 64);
  r.number("mlp_ratio", cfg.mlp_ratio, 1, 8);
  r.finish();
}

inline void read_train(const json& node, const std::string& path, TrainConfig& cfg) {
  SpecReader r(node, path);
  std::string mode;
  r.string("mode", mode);
  if (!mode.empty()) {
    if (mode == "scratch") cfg.mode = TrainMode::scratch;
    else if (mode == "ssl_pretrain") cfg.mode = TrainMode::ssl_pretrain;
    else if (mode == "finetune") cfg.mode = TrainMode::finetune;
    else if (mode == "ssat") cfg.mode = TrainMode::ssat;
    else fail("config: '", path, "mode' must be one of scratch|ssl_pretrain|finetune|ssat, got '",
              mode, "'");
  }
  r.number("epochs", cfg.epochs, 1, 100000);
  r.number("warmup_epochs", cfg.warmup_epochs, 0, 100000);
  r.number("base_lr", cfg.base_lr, 1e-12, 10.0);
  r.number("warmup_lr", cfg.warmup_lr, 1e-12, 10.0);
  r.number("min_lr", cfg.min_lr, 1e-12, 10.0);
  r.number("weight_decay", cfg.weight_decay, 0.0, 10.0);
  r.number("beta1", cfg.beta1, 0.0, 0.9999);
  r.number("beta2", cfg.beta2, 0.0, 0.99999);
  r.number("opt_eps", cfg.opt_eps, 1e-16, 1.0);
  r.number("layer_decay", cfg.layer_decay, 0.01, 1.0);
  r.number("lambda", cfg.lambda, 0.0, 1.0);
  r.number("mask_ratio", cfg.mask_ratio, 0.0, 0.999);
  r.number("batch_size", cfg.batch_size, 1, 8192);
  r.number("label_smoothing", cfg.label_smoothing, 0.0, 0.999);
  r.number("drop_path", cfg.drop_path, 0.0, 0.99);
  r.number("eval_every", cfg.eval_every, 0, 100000);
  r.string("init_checkpoint", cfg.init_checkpoint);
  r.string("resume_checkpoint", cfg.resume_checkpoint);
  r.string("checkpoint_out", cfg.checkpoint_out);
  const json* mix = nullptr;
  if (r.object("mixup", mix)) {
    SpecReader mr(*mix, path + "mixup.");
    mr.boolean("enabled", cfg.mixup.enabled);
    mr.number("alpha", cfg.mixup.alpha, 0.001, 10.0);
    mr.finish();
  }
  const json* aug = nullptr;
  if (r.object("augment", aug)) read_augment(*aug, path + "augment.", cfg.augment);
  r.finish();
}

inline void read_data(const json& node, const std::string& path, DataSpec& cfg) {
  SpecReader r(node, path);
  std::string source;
  r.string("source", source);
  if (!source.empty()) {
    if (source == "synthetic") cfg.source = DataSource::synthetic;
    else if (source == "cifar") cfg.source = DataSource::cifar;
    else if (source == "raw_dir") cfg.source = DataSource::raw_dir;
    else fail("config: '", path, "source' must be one of synthetic|cifar|raw_dir, got '", source,
              "'");
  }
  r.string("train_path", cfg.train_path);
  r.string("test_path", cfg.test_path);
  r.number("classes", cfg.classes, 2, 10000);
  r.number("per_class", cfg.per_class, 1, 1000000);
  r.number("test_per_class", cfg.test_per_class, 1, 1000000);
  r.number("image", cfg.image, 8, 1024);
  r.finish();
}

inline void read_diag(const json& node, const std::string& path, DiagConfig& cfg) {
  SpecReader r(node, path);
  r.number("slice", cfg.slice, 1, 1000000);
  r.number("batch_size", cfg.batch_size, 1, 8192);
  r.boolean("spectrum", cfg.spectrum);
  r.number("lanczos_k", cfg.lanczos_k, 1, 512);
  r.number("lanczos_iterations", cfg.lanczos_iterations, 1, 4096);
  r.number("hessian_samples", cfg.hessian_samples, 1, 8192);
  r.number("hvp_eps", cfg.hvp_eps, 1e-10, 1.0);
  r.finish();
}

}  // namespace detail

// desk-scale defaults: the training hyperparameters follow the reference
// recipe (AdamW, lr 1e-3, warmup 5, cosine to 1e-6, wd 0.05, layer decay
// 0.75, label smoothing 0.1, drop path 0.01, lambda 0.1, mask ratio 0.75);
// the default model is a small ViT on the synthetic dataset
inline ExperimentSpec default_spec() {
  ExperimentSpec spec;
  spec.encoder.depth = 4;
  spec.encoder.dim = 64;
  spec.encoder.heads = 4;
  spec.encoder.patch = 4;
  spec.encoder.image = 32;
  spec.encoder.classes = 3;
  spec.train = TrainConfig{};
  spec.decoder = DecoderConfig{};
  return spec;
}

struct SpecOverrides {
  bool has_seed = false;
  std::uint64_t seed = 0;
  bool has_lambda = false;
  real lambda = 0;
  bool has_mask_ratio = false;
  real mask_ratio = 0;
  bool has_mode = false;
  std::string mode;
  bool has_out = false;
  std::string out;
};

inline std::uint64_t spec_digest(const ExperimentSpec& spec);

inline ExperimentSpec parse_spec(const std::string& config_path, const SpecOverrides& over = {}) {
  ExperimentSpec spec = default_spec();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    check(in.good(), "config: cannot open ", config_path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      fail("config: ", config_path, " is not valid JSON: ", e.what());
    }
    detail::SpecReader r(j, "");
    r.number("seed", spec.seed, 0, 1e18);
    r.string("out_dir", spec.out_dir);
    std::string preset;
    r.string("compare_preset", preset);
    if (!preset.empty()) {
      if (preset == "regimes") spec.compare_preset = ComparePreset::regimes;
      else if (preset == "lambda-sweep") spec.compare_preset = ComparePreset::lambda_sweep;
      else if (preset == "subset-sweep") spec.compare_preset = ComparePreset::subset_sweep;
      else fail("config: 'compare_preset' must be regimes|lambda-sweep|subset-sweep, got '",
                preset, "'");
    }
    const json* model = nullptr;
    if (r.object("model", model)) {
      detail::SpecReader mr(*model, "model.");
      const json* enc = nullptr;
      if (mr.object("encoder", enc)) detail::read_encoder(*enc, "model.encoder.", spec.encoder);
      const json* dec = nullptr;
      if (mr.object("decoder", dec)) detail::read_decoder(*dec, "model.decoder.", spec.decoder);
      mr.finish();
    }
    const json* train = nullptr;
    if (r.object("train", train)) detail::read_train(*train, "train.", spec.train);
    const json* data = nullptr;
    if (r.object("data", data)) detail::read_data(*data, "data.", spec.data);
    const json* diag = nullptr;
    if (r.object("diag", diag)) detail::read_diag(*diag, "diag.", spec.diag);
    r.finish();
  }

  if (over.has_seed) spec.seed = over.seed;
  if (over.has_lambda) {
    check(over.lambda >= 0 && over.lambda <= 1, "config: --lambda must be in [0, 1]");
    spec.train.lambda = over.lambda;
  }
  if (over.has_mask_ratio) {
    check(over.mask_ratio >= 0 && over.mask_ratio < 1, "config: --mask-ratio must be in [0, 1)");
    spec.train.mask_ratio = over.mask_ratio;
  }
  if (over.has_mode) {
    if (over.mode == "scratch") spec.train.mode = TrainMode::scratch;
    else if (over.mode == "ssl_pretrain") spec.train.mode = TrainMode::ssl_pretrain;
    else if (over.mode == "finetune") spec.train.mode = TrainMode::finetune;
    else if (over.mode == "ssat") spec.train.mode = TrainMode::ssat;
    else fail("config: --mode must be one of scratch|ssl_pretrain|finetune|ssat");
  }
  if (over.has_out) spec.out_dir = over.out;

  spec.train.seed = spec.seed;
  spec.encoder.validate();
  spec.decoder.validate();
  spec.train.validate();
  spec.digest = spec_digest(spec);
  return spec;
}

// canonical JSON rendering of the fully resolved spec; the digest embedded
// in every artifact
inline json spec_to_json(const ExperimentSpec& spec) {
  json j;
  j["seed"] = spec.seed;
  j["out_dir"] = spec.out_dir;
  j["model"]["encoder"] = {{"depth", spec.encoder.depth},   {"dim", spec.encoder.dim},
                           {"heads", spec.encoder.heads},   {"patch", spec.encoder.patch},
                           {"image", spec.encoder.image},   {"channels", spec.encoder.channels},
                           {"classes", spec.encoder.classes}, {"mlp_ratio", spec.encoder.mlp_ratio},
                           {"class_token", spec.encoder.class_token},
                           {"drop_path", spec.encoder.drop_path}};
  j["model"]["decoder"] = {{"depth", spec.decoder.depth},
                           {"dim", spec.decoder.dim},
                           {"heads", spec.decoder.heads},
                           {"mlp_ratio", spec.decoder.mlp_ratio}};
  j["train"] = {{"mode", train_mode_name(spec.train.mode)},
                {"epochs", spec.train.epochs},
                {"warmup_epochs", spec.train.warmup_epochs},
                {"base_lr", spec.train.base_lr},
                {"warmup_lr", spec.train.warmup_lr},
                {"min_lr", spec.train.min_lr},
                {"weight_decay", spec.train.weight_decay},
                {"beta1", spec.train.beta1},
                {"beta2", spec.train.beta2},
                {"opt_eps", spec.train.opt_eps},
                {"layer_decay", spec.train.layer_decay},
                {"lambda", spec.train.lambda},
                {"mask_ratio", spec.train.mask_ratio},
                {"batch_size", spec.train.batch_size},
                {"label_smoothing", spec.train.label_smoothing},
                {"drop_path", spec.train.drop_path},
                {"eval_every", spec.train.eval_every},
                {"mixup", {{"enabled", spec.train.mixup.enabled}, {"alpha", spec.train.mixup.alpha}}},
                {"augment",
                 {{"random_resized_crop", spec.train.augment.random_resized_crop},
                  {"crop_scale_min", spec.train.augment.crop_scale_min},
                  {"crop_scale_max", spec.train.augment.crop_scale_max},
                  {"hflip_prob", spec.train.augment.hflip_prob},
                  {"randaugment_ops", spec.train.augment.randaugment_ops},
                  {"randaugment_magnitude", spec.train.augment.randaugment_magnitude},
                  {"erase_prob", spec.train.augment.erase_prob}}}};
  const char* source = spec.data.source == DataSource::synthetic
                           ? "synthetic"
                           : (spec.data.source == DataSource::cifar ? "cifar" : "raw_dir");
  j["data"] = {{"source", source},
               {"train_path", spec.data.train_path},
               {"test_path", spec.data.test_path},
               {"classes", spec.data.classes},
               {"per_class", spec.data.per_class},
               {"test_per_class", spec.data.test_per_class},
               {"image", spec.data.image}};
  j["diag"] = {{"slice", spec.diag.slice},
               {"batch_size", spec.diag.batch_size},
               {"spectrum", spec.diag.spectrum},
               {"lanczos_k", spec.diag.lanczos_k},
               {"lanczos_iterations", spec.diag.lanczos_iterations},
               {"hessian_samples", spec.diag.hessian_samples},
               {"hvp_eps", spec.diag.hvp_eps}};
  return j;
}

inline std::uint64_t spec_digest(const ExperimentSpec& spec) {
  return fnv1a(spec_to_json(spec).dump());
}

}  // namespace ssat
