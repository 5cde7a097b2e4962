#pragma once

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "ssat/config.hpp"

namespace ssat {

namespace detail {

inline void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    check(out.good(), "cannot write ", tmp);
    out << content;
  }
  std::filesystem::rename(tmp, path);
}

inline std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// for axis/identifier columns (lambda, fraction) where 0.9 should print as 0.9
inline std::string num_compact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return buf;
}

}  // namespace detail

// --------------------------------------------------------------------------
// metric emission: metrics.csv with a fixed header, summary.json with the
// spec digest; files are replaced atomically on rerun
// --------------------------------------------------------------------------

inline void emit_metrics(const ExperimentMetrics& metrics, const std::string& dir,
                         std::uint64_t digest, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  std::string csv = "epoch,l_cls,l_ssat,l_total,lr,eval_acc\n";
  for (const EpochMetrics& e : metrics.epochs) {
    csv += std::to_string(e.epoch);
    csv += ',';
    csv += detail::num(static_cast<double>(e.l_cls));
    csv += ',';
    csv += detail::num(static_cast<double>(e.l_ssat));
    csv += ',';
    csv += detail::num(static_cast<double>(e.l_total));
    csv += ',';
    csv += detail::num(static_cast<double>(e.lr));
    csv += ',';
    csv += detail::num(e.eval_acc);
    csv += '\n';
  }
  detail::write_file_atomic(dir + "/metrics.csv", csv);

  json summary;
  summary["config_digest"] = detail::hex64(digest);
  summary["seed"] = seed;
  summary["epochs"] = metrics.epochs.size();
  summary["final_accuracy"] = metrics.final_accuracy;
  summary["flops_per_image"] = metrics.flops_per_image;
  summary["wall_seconds"] = metrics.wall_seconds;
  detail::write_file_atomic(dir + "/summary.json", summary.dump(2) + "\n");
}

// --------------------------------------------------------------------------
// data loading per spec
// --------------------------------------------------------------------------

inline std::pair<Dataset, Dataset> load_data(const DataSpec& data, std::uint64_t seed) {
  switch (data.source) {
    case DataSource::synthetic: {
      Dataset train = generate_synthetic(data.classes, data.per_class, data.image,
                                         derive_seed(seed, "data.train"));
      Dataset test = generate_synthetic(data.classes, data.test_per_class, data.image,
                                        derive_seed(seed, "data.test"));
      test.split = "test";
      return {std::move(train), std::move(test)};
    }
    case DataSource::cifar: {
      check(!data.train_path.empty() && !data.test_path.empty(),
            "data: cifar source needs train_path and test_path");
      Dataset train = load_cifar_binary(data.train_path, data.classes);
      Dataset test = load_cifar_binary(data.test_path, data.classes);
      test.split = "test";
      return {std::move(train), std::move(test)};
    }
    case DataSource::raw_dir: {
      check(!data.train_path.empty() && !data.test_path.empty(),
            "data: raw_dir source needs train_path and test_path");
      Dataset train = load_raw_directory(data.train_path);
      Dataset test = load_raw_directory(data.test_path);
      test.split = "test";
      return {std::move(train), std::move(test)};
    }
  }
  fail("data: unknown source");
}

// keeps the per-class balance; takes the first round(fraction*count) of each
// class in dataset order
inline Dataset subset_per_class(const Dataset& ds, double fraction) {
  check(fraction > 0 && fraction <= 1, "subset_per_class: fraction must be in (0, 1]");
  std::vector<std::size_t> kept_per_class(ds.class_count, 0);
  std::vector<std::size_t> total_per_class(ds.class_count, 0);
  for (std::size_t i = 0; i < ds.size(); ++i)
    total_per_class[static_cast<std::size_t>(ds.label(i))]++;
  Dataset out;
  out.class_count = ds.class_count;
  out.split = ds.split;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto k = static_cast<std::size_t>(ds.label(i));
    const auto want = static_cast<std::size_t>(
        std::floor(fraction * static_cast<double>(total_per_class[k]) + 0.5));
    if (kept_per_class[k] < want) {
      out.images.push_back(ds.image(i));
      kept_per_class[k]++;
    }
  }
  check(out.size() > 0, "subset_per_class: fraction ", fraction, " keeps no samples");
  return out;
}

// --------------------------------------------------------------------------
// model restore for eval / diagnose
// --------------------------------------------------------------------------

inline VitModel restore_model(const ExperimentSpec& spec, const std::string& checkpoint_path) {
  Checkpoint ck = load_checkpoint(checkpoint_path);
  Rng rng(derive_seed(ck.run_seed, "init.encoder"));
  VitModel model = make_vit(spec.encoder, rng);
  restore_params(model, nullptr, ck.params);
  return model;
}

// --------------------------------------------------------------------------
// commands
// --------------------------------------------------------------------------

inline ExperimentMetrics cmd_train(const ExperimentSpec& spec) {
  std::filesystem::create_directories(spec.out_dir);
  auto [train_set, test_set] = load_data(spec.data, spec.seed);
  TrainConfig tc = spec.train;
  if (tc.checkpoint_out.empty()) tc.checkpoint_out = spec.out_dir + "/model.ckpt";
  ExperimentMetrics metrics =
      run_experiment(tc, train_set, test_set, spec.encoder, spec.decoder, nullptr, spec.digest);
  emit_metrics(metrics, spec.out_dir, spec.digest, spec.seed);
  detail::write_file_atomic(spec.out_dir + "/spec.json", spec_to_json(spec).dump(2) + "\n");
  return metrics;
}

struct EvalResult {
  double accuracy = 0;
  real perturb_strength = 0;
};

inline EvalResult cmd_eval(const ExperimentSpec& spec) {
  const std::string ckpt =
      spec.eval_checkpoint.empty() ? spec.out_dir + "/model.ckpt" : spec.eval_checkpoint;
  VitModel model = restore_model(spec, ckpt);
  auto [train_set, test_set] = load_data(spec.data, spec.seed);
  (void)train_set;
  EvalResult result;
  result.perturb_strength = spec.eval_perturb;
  result.accuracy = evaluate_accuracy(model, test_set, spec.train.batch_size, spec.eval_perturb,
                                      derive_seed(spec.seed, "eval.perturb"));
  std::filesystem::create_directories(spec.out_dir);
  json j;
  j["config_digest"] = detail::hex64(spec.digest);
  j["checkpoint"] = ckpt;
  j["perturb_strength"] = static_cast<double>(spec.eval_perturb);
  j["accuracy"] = result.accuracy;
  detail::write_file_atomic(spec.out_dir + "/eval.json", j.dump(2) + "\n");
  return result;
}

inline json report_to_json(const DiagnosticsReport& report, std::uint64_t spec_digest_value) {
  json j;
  j["schema_version"] = 1;
  j["provenance"] = {{"config_digest", detail::hex64(spec_digest_value)},
                     {"checkpoint_digest", detail::hex64(report.checkpoint_digest)},
                     {"dataset_digest", detail::hex64(report.dataset_digest)},
                     {"seed", report.seed},
                     {"samples", report.samples}};
  j["attention_received"] = report.attention_received;
  j["inter_token_distance"] = report.inter_token_distances;
  j["feature_variance"] = report.feature_variances;
  if (report.has_spectrum) {
    j["spectrum"] = {{"top", report.spectrum.top},
                     {"bottom", report.spectrum.bottom},
                     {"negative_count_estimate", report.spectrum.negative_count_estimate},
                     {"negative_mean_magnitude", report.spectrum.negative_mean_magnitude},
                     {"iterations", report.spectrum.iterations_used},
                     {"breakdown", report.spectrum.breakdown},
                     {"loss", "classification"}};
  }
  return j;
}

inline DiagnosticsReport cmd_diagnose(const ExperimentSpec& spec) {
  const std::string ckpt =
      spec.eval_checkpoint.empty() ? spec.out_dir + "/model.ckpt" : spec.eval_checkpoint;
  VitModel model = restore_model(spec, ckpt);
  auto [train_set, test_set] = load_data(spec.data, spec.seed);
  (void)train_set;
  DiagConfig dcfg = spec.diag;
  dcfg.seed = derive_seed(spec.seed, "diag");
  DiagnosticsReport report = build_report(model, test_set, dcfg);

  std::filesystem::create_directories(spec.out_dir);
  detail::write_file_atomic(spec.out_dir + "/report.json",
                            report_to_json(report, spec.digest).dump(2) + "\n");

  std::string attention = "layer,token,received\n";
  for (std::size_t l = 0; l < report.attention_received.size(); ++l)
    for (std::size_t t = 0; t < report.attention_received[l].size(); ++t)
      attention += std::to_string(l) + ',' + std::to_string(t) + ',' +
                   detail::num(static_cast<double>(report.attention_received[l][t])) + '\n';
  detail::write_file_atomic(spec.out_dir + "/attention.csv", attention);

  std::string distance = "layer,distance\n";
  for (std::size_t l = 0; l < report.inter_token_distances.size(); ++l)
    distance += std::to_string(l) + ',' +
                detail::num(static_cast<double>(report.inter_token_distances[l])) + '\n';
  detail::write_file_atomic(spec.out_dir + "/distance.csv", distance);

  std::string variance = "layer,variance\n";
  for (std::size_t l = 0; l < report.feature_variances.size(); ++l)
    variance += std::to_string(l) + ',' +
                detail::num(static_cast<double>(report.feature_variances[l])) + '\n';
  detail::write_file_atomic(spec.out_dir + "/variance.csv", variance);

  if (report.has_spectrum) {
    std::string spectrum = "end,rank,value\n";
    for (std::size_t i = 0; i < report.spectrum.top.size(); ++i)
      spectrum += "top," + std::to_string(i) + ',' +
                  detail::num(static_cast<double>(report.spectrum.top[i])) + '\n';
    for (std::size_t i = 0; i < report.spectrum.bottom.size(); ++i)
      spectrum += "bottom," + std::to_string(i) + ',' +
                  detail::num(static_cast<double>(report.spectrum.bottom[i])) + '\n';
    detail::write_file_atomic(spec.out_dir + "/spectrum.csv", spectrum);
  }
  return report;
}

struct FlopsReport {
  FlopsBreakdown classification;
  FlopsBreakdown ssl;
  FlopsBreakdown joint;
};

inline FlopsReport cmd_flops(const ExperimentSpec& spec) {
  FlopsReport r;
  r.classification =
      estimate_flops(spec.encoder, nullptr, spec.train.mask_ratio, FlopsMode::classification);
  r.ssl = estimate_flops(spec.encoder, &spec.decoder, spec.train.mask_ratio,
                         FlopsMode::ssl_pretrain);
  r.joint = estimate_flops(spec.encoder, &spec.decoder, spec.train.mask_ratio, FlopsMode::ssat);
  return r;
}

// --------------------------------------------------------------------------
// compare: regime presets under shared seeds, plus the sweep presets
// --------------------------------------------------------------------------

struct CompareRow {
  std::string regime;
  std::string epochs;
  double accuracy = 0;
  double flops_per_image = 0;
  double wall_seconds = 0;
};

inline std::vector<CompareRow> cmd_compare(const ExperimentSpec& spec) {
  std::filesystem::create_directories(spec.out_dir);
  auto [train_set, test_set] = load_data(spec.data, spec.seed);
  std::vector<CompareRow> rows;

  auto run_one = [&](const std::string& regime, TrainConfig tc, const Dataset& train_subset,
                     std::string epochs_desc) {
    ExperimentMetrics m =
        run_experiment(tc, train_subset, test_set, spec.encoder, spec.decoder, nullptr, spec.digest);
    rows.push_back({regime, std::move(epochs_desc), m.final_accuracy, m.flops_per_image,
                    m.wall_seconds});
    return m;
  };

  if (spec.compare_preset == ComparePreset::regimes) {
    const std::size_t E = spec.train.epochs;
    const std::size_t half = std::max<std::size_t>(1, E / 2);

    TrainConfig scratch = spec.train;
    scratch.mode = TrainMode::scratch;
    run_one("scratch", scratch, train_set, std::to_string(E));

    // the four sequential protocols: (ssl epochs, finetune epochs)
    const std::pair<std::size_t, std::size_t> protocols[4] = {
        {half, half}, {half, E}, {E, half}, {E, E}};
    for (int p = 0; p < 4; ++p) {
      TrainConfig ssl = spec.train;
      ssl.mode = TrainMode::ssl_pretrain;
      ssl.epochs = protocols[p].first;
      ssl.warmup_epochs = std::min(ssl.warmup_epochs, ssl.epochs);
      ssl.checkpoint_out = spec.out_dir + "/sslft" + std::to_string(p + 1) + "_pretrain.ckpt";
      run_experiment(ssl, train_set, test_set, spec.encoder, spec.decoder, nullptr, spec.digest);

      TrainConfig ft = spec.train;
      ft.mode = TrainMode::finetune;
      ft.epochs = protocols[p].second;
      ft.warmup_epochs = std::min(ft.warmup_epochs, ft.epochs);
      ft.init_checkpoint = ssl.checkpoint_out;
      run_one("sslft" + std::to_string(p + 1), ft, train_set,
              std::to_string(protocols[p].first) + "+" + std::to_string(protocols[p].second));
    }

    TrainConfig joint = spec.train;
    joint.mode = TrainMode::ssat;
    run_one("ssat", joint, train_set, std::to_string(E));

    std::string csv = "regime,epochs,accuracy,flops_per_image,wall_seconds\n";
    for (const CompareRow& r : rows)
      csv += r.regime + ',' + r.epochs + ',' + detail::num(r.accuracy) + ',' +
             detail::num(r.flops_per_image) + ',' + detail::num(r.wall_seconds) + '\n';
    detail::write_file_atomic(spec.out_dir + "/compare.csv", csv);
  } else if (spec.compare_preset == ComparePreset::lambda_sweep) {
    const real lambdas[5] = {real{0.9}, real{0.7}, real{0.5}, real{0.3}, real{0.1}};
    std::string csv = "lambda,accuracy,flops_per_image,wall_seconds\n";
    for (real lambda : lambdas) {
      TrainConfig tc = spec.train;
      tc.mode = TrainMode::ssat;
      tc.lambda = lambda;
      ExperimentMetrics m =
          run_experiment(tc, train_set, test_set, spec.encoder, spec.decoder, nullptr, spec.digest);
      rows.push_back({"lambda=" + detail::num_compact(static_cast<double>(lambda)),
                      std::to_string(tc.epochs), m.final_accuracy, m.flops_per_image,
                      m.wall_seconds});
      csv += detail::num_compact(static_cast<double>(lambda)) + ',' + detail::num(m.final_accuracy) + ',' +
             detail::num(m.flops_per_image) + ',' + detail::num(m.wall_seconds) + '\n';
    }
    detail::write_file_atomic(spec.out_dir + "/lambda_sweep.csv", csv);
  } else {
    const double fractions[5] = {0.1, 0.3, 0.5, 0.7, 1.0};
    std::string csv = "fraction,regime,accuracy\n";
    for (double fraction : fractions) {
      Dataset subset = subset_per_class(train_set, fraction);
      for (TrainMode mode : {TrainMode::scratch, TrainMode::ssat}) {
        TrainConfig tc = spec.train;
        tc.mode = mode;
        ExperimentMetrics m =
            run_experiment(tc, subset, test_set, spec.encoder, spec.decoder, nullptr, spec.digest);
        rows.push_back({train_mode_name(mode), std::to_string(tc.epochs), m.final_accuracy,
                        m.flops_per_image, m.wall_seconds});
        csv += detail::num_compact(fraction) + ',' + std::string(train_mode_name(mode)) + ',' +
               detail::num(m.final_accuracy) + '\n';
      }
    }
    detail::write_file_atomic(spec.out_dir + "/subset_sweep.csv", csv);
  }

  json summary;
  summary["config_digest"] = detail::hex64(spec.digest);
  summary["seed"] = spec.seed;
  summary["rows"] = json::array();
  for (const CompareRow& r : rows)
    summary["rows"].push_back({{"regime", r.regime},
                               {"epochs", r.epochs},
                               {"accuracy", r.accuracy},
                               {"flops_per_image", r.flops_per_image},
                               {"wall_seconds", r.wall_seconds}});
  detail::write_file_atomic(spec.out_dir + "/compare_summary.json", summary.dump(2) + "\n");
  return rows;
}

}  // namespace ssat
