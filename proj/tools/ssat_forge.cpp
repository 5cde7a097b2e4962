#include <CLI11.hpp>

#include <cstdio>
#include <string>

#include "ssat/harness.hpp"

namespace {

struct CommonFlags {
  std::string config;
  ssat::SpecOverrides overrides;
  std::string checkpoint;
  double perturb = -1;
  std::string preset;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "experiment config file (JSON)");
  auto* seed = cmd->add_option("--seed", flags.overrides.seed, "run seed");
  seed->each([&flags](const std::string&) { flags.overrides.has_seed = true; });
  auto* lambda = cmd->add_option("--lambda", flags.overrides.lambda,
                                 "loss scaling factor in [0, 1]");
  lambda->each([&flags](const std::string&) { flags.overrides.has_lambda = true; });
  auto* ratio = cmd->add_option("--mask-ratio", flags.overrides.mask_ratio,
                                "masking ratio in [0, 1)");
  ratio->each([&flags](const std::string&) { flags.overrides.has_mask_ratio = true; });
  auto* mode = cmd->add_option("--mode", flags.overrides.mode,
                               "training mode: scratch|ssl_pretrain|finetune|ssat");
  mode->each([&flags](const std::string&) { flags.overrides.has_mode = true; });
  auto* out = cmd->add_option("--out", flags.overrides.out, "output directory");
  out->each([&flags](const std::string&) { flags.overrides.has_out = true; });
}

ssat::ExperimentSpec resolve(const CommonFlags& flags) {
  ssat::ExperimentSpec spec = ssat::parse_spec(flags.config, flags.overrides);
  if (!flags.checkpoint.empty()) spec.eval_checkpoint = flags.checkpoint;
  if (flags.perturb >= 0) {
    ssat::check(flags.perturb <= 1, "--perturb must be in [0, 1]");
    spec.eval_perturb = static_cast<ssat::real>(flags.perturb);
  }
  if (!flags.preset.empty()) {
    if (flags.preset == "regimes") spec.compare_preset = ssat::ComparePreset::regimes;
    else if (flags.preset == "lambda-sweep") spec.compare_preset = ssat::ComparePreset::lambda_sweep;
    else if (flags.preset == "subset-sweep") spec.compare_preset = ssat::ComparePreset::subset_sweep;
    else ssat::fail("--preset must be regimes|lambda-sweep|subset-sweep");
  }
  return spec;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ssat-forge: joint classification + masked-reconstruction ViT training lab"};
  app.require_subcommand(1);

  CommonFlags train_flags, eval_flags, diag_flags, compare_flags, flops_flags;

  CLI::App* train = app.add_subcommand("train", "train one model per the config");
  add_common(train, train_flags);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval, eval_flags);
  eval->add_option("--checkpoint", eval_flags.checkpoint, "checkpoint path (default <out>/model.ckpt)");
  eval->add_option("--perturb", eval_flags.perturb,
                   "perspective perturbation strength in [0, 1]");

  CLI::App* diagnose = app.add_subcommand("diagnose", "attention/token/variance/spectrum report");
  add_common(diagnose, diag_flags);
  diagnose->add_option("--checkpoint", diag_flags.checkpoint,
                       "checkpoint path (default <out>/model.ckpt)");

  CLI::App* compare = app.add_subcommand("compare", "run regime or sweep presets under shared seeds");
  add_common(compare, compare_flags);
  compare->add_option("--preset", compare_flags.preset, "regimes|lambda-sweep|subset-sweep");

  CLI::App* flops = app.add_subcommand("flops", "print analytic per-image MAC counts");
  add_common(flops, flops_flags);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      ssat::ExperimentSpec spec = resolve(train_flags);
      ssat::ExperimentMetrics m = ssat::cmd_train(spec);
      std::printf("mode=%s epochs=%zu final_acc=%.4f wall=%.1fs out=%s\n",
                  ssat::train_mode_name(spec.train.mode), spec.train.epochs, m.final_accuracy,
                  m.wall_seconds, spec.out_dir.c_str());
    } else if (eval->parsed()) {
      ssat::ExperimentSpec spec = resolve(eval_flags);
      ssat::EvalResult r = ssat::cmd_eval(spec);
      std::printf("accuracy=%.4f perturb=%.2f\n", r.accuracy,
                  static_cast<double>(r.perturb_strength));
    } else if (diagnose->parsed()) {
      ssat::ExperimentSpec spec = resolve(diag_flags);
      ssat::DiagnosticsReport r = ssat::cmd_diagnose(spec);
      std::printf("layers=%zu samples=%zu", r.inter_token_distances.size(), r.samples);
      if (r.has_spectrum && !r.spectrum.top.empty())
        std::printf(" top_eig=%.4g neg_est=%zu", static_cast<double>(r.spectrum.top[0]),
                    r.spectrum.negative_count_estimate);
      std::printf(" out=%s\n", spec.out_dir.c_str());
    } else if (compare->parsed()) {
      ssat::ExperimentSpec spec = resolve(compare_flags);
      std::vector<ssat::CompareRow> rows = ssat::cmd_compare(spec);
      std::printf("%-10s %-9s %-9s %-12s %-9s\n", "regime", "epochs", "accuracy", "flops/image",
                  "wall(s)");
      for (const auto& r : rows)
        std::printf("%-10s %-9s %-9.4f %-12.4g %-9.1f\n", r.regime.c_str(), r.epochs.c_str(),
                    r.accuracy, r.flops_per_image, r.wall_seconds);
    } else if (flops->parsed()) {
      ssat::ExperimentSpec spec = resolve(flops_flags);
      ssat::FlopsReport r = ssat::cmd_flops(spec);
      std::printf("classification forward: %.4g GFLOPs/image\n", r.classification.total / 1e9);
      std::printf("ssl (masked+decoder):   %.4g GFLOPs/image\n", r.ssl.total / 1e9);
      std::printf("ssat joint forward:     %.4g GFLOPs/image\n", r.joint.total / 1e9);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
