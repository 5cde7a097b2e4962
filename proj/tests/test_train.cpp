#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ssat/train.hpp"

using namespace ssat;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "ssat_train_test";
  fs::create_directories(dir);
  return (dir / name).string();
}

EncoderConfig tiny_encoder() {
  EncoderConfig cfg;
  cfg.depth = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.patch = 4;
  cfg.image = 16;
  cfg.classes = 3;
  cfg.drop_path = real{0.01};
  return cfg;
}

DecoderConfig tiny_decoder() {
  DecoderConfig cfg;
  cfg.depth = 1;
  cfg.dim = 8;
  cfg.heads = 2;
  return cfg;
}

TrainConfig tiny_train(TrainMode mode, std::size_t epochs, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.epochs = epochs;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 8;
  cfg.seed = seed;
  cfg.augment = AugmentConfig::none();
  cfg.mixup.enabled = true;
  return cfg;
}

}  // namespace

TEST_CASE("adamw single updates") {
  SUBCASE("first step is approximately lr * sign(g)") {
    std::vector<real> p = {1.0};
    AdamMoments mom;
    const real lr = real{0.01}, g = real{0.5}, eps = real{1e-8};
    adamw_update(p, std::vector<real>{g}, mom, 1, lr, 0, real{0.9}, real{0.999}, eps);
    const real expected = real{1.0} - lr * g / (std::fabs(g) + eps);
    CHECK(p[0] == doctest::Approx(expected).epsilon(1e-14));
  }
  SUBCASE("zero grad with weight decay shrinks the parameter") {
    std::vector<real> p = {2.0};
    AdamMoments mom;
    adamw_update(p, std::vector<real>{0}, mom, 1, real{0.1}, real{0.05}, real{0.9}, real{0.999}, real{1e-8});
    CHECK(p[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.05)).epsilon(1e-15));
  }
  SUBCASE("shape mismatch errors") {
    std::vector<real> p = {1.0, 2.0};
    AdamMoments mom;
    CHECK_THROWS_AS(adamw_update(p, std::vector<real>{0.0}, mom, 1, 1, 0, real{0.9}, real{0.999}, real{1e-8}),
                    Error);
  }
}

TEST_CASE("adamw 10-step trajectory matches the scripted oracle") {
  // loss 0.5*a*theta^2, gradient a*theta
  const double a = 3.0, lr = 0.05, wd = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;

  // independent scalar transcription of the update rule
  double theta_oracle = 1.2, m = 0, v = 0;
  std::vector<double> oracle_points;
  for (int t = 1; t <= 10; ++t) {
    const double g = a * theta_oracle;
    theta_oracle -= lr * wd * theta_oracle;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    theta_oracle -= lr * mhat / (std::sqrt(vhat) + eps);
    oracle_points.push_back(theta_oracle);
  }

  // the module path: tape gradients + AdamW class
  Tensor theta = Tensor::scalar(1.2).set_requires_grad(true);
  std::vector<ParamGroup> groups = {{"theta", theta, 0}};
  AdamW opt{real(b1), real(b2), real(eps), real(wd)};
  Tape tape;
  for (int t = 1; t <= 10; ++t) {
    TapeScope scope(tape);
    Tensor loss = scale(mul(theta, theta), real(0.5 * a));
    GradientMap grads = tape.backward(loss);
    opt.step(groups, grads, real(lr), nullptr);
    tape.reset();
    CHECK(std::fabs(static_cast<double>(theta.item()) - oracle_points[t - 1]) < 1e-10);
  }
}

TEST_CASE("lr schedule hits the configured endpoints") {
  const real base = real{1e-3}, warm = real{1e-6}, mn = real{1e-6};
  CHECK(lr_schedule(0, 100, 5, base, warm, mn) == warm);
  CHECK(lr_schedule(5, 100, 5, base, warm, mn) == base);
  CHECK(lr_schedule(99, 100, 5, base, warm, mn) == mn);
  // decay is monotone after warmup
  real prev = base;
  for (std::size_t s = 5; s < 100; ++s) {
    const real lr = lr_schedule(s, 100, 5, base, warm, mn);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(lr_schedule(100, 100, 5, base, warm, mn), Error);
}

TEST_CASE("layer-wise lr decay multipliers") {
  const real decay = real{0.75};
  const std::size_t depth = 4;
  CHECK(layer_lr_multiplier(4, depth, decay) == 1);                       // classifier side
  CHECK(layer_lr_multiplier(3, depth, decay) == doctest::Approx(0.75));   // last block
  CHECK(layer_lr_multiplier(0, depth, decay) ==
        doctest::Approx(std::pow(0.75, 4.0)));                            // first block
  CHECK(layer_lr_multiplier(-1, depth, decay) ==
        doctest::Approx(std::pow(0.75, 5.0)));                            // embedding side

  // applied lrs visible through the optimizer
  Rng rng(1);
  EncoderConfig cfg = tiny_encoder();
  VitModel model = make_vit(cfg, rng);
  std::vector<ParamGroup> groups = collect_param_groups(model, nullptr, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor patches = Tensor::full({1, cfg.patch_count(), cfg.grid().patch_dim()}, real{0.5});
  Tensor logits = classify(model.head, encode(model, embed(model.embed, patches, true)).tokens);
  GradientMap grads = tape.backward(cross_entropy(logits, std::vector<int>{1}, 0));
  AdamW opt(real{0.9}, real{0.999}, real{1e-8}, real{0.05});
  const real base = real{1e-3};
  opt.step(groups, grads, base, [&](const ParamGroup& g) {
    return layer_lr_multiplier(g.layer_id, cfg.depth, decay);
  });
  CHECK(opt.applied_lr().at("head.weight") == base);
  CHECK(opt.applied_lr().at("block1.attn.q.weight") == doctest::Approx(base * 0.75));
  CHECK(opt.applied_lr().at("block0.attn.q.weight") == doctest::Approx(base * 0.75 * 0.75));
  CHECK(opt.applied_lr().at("embed.pos") == doctest::Approx(base * std::pow(0.75, 3.0)));
}

TEST_CASE("checkpoint round trip and integrity") {
  Rng rng(5);
  Checkpoint ck;
  ck.config_digest = 0xabcdef;
  ck.epoch = 17;
  ck.run_seed = 99;
  ck.opt_step = 1234;
  for (int i = 0; i < 3; ++i) {
    Tensor t = Tensor::zeros({2, 3});
    for (auto& v : t.values()) v = static_cast<real>(rng.uniform(-1, 1));
    ck.params.push_back({"p" + std::to_string(i), t});
  }
  ck.opt_m.push_back({"p0", Tensor::full({2, 3}, real{0.5})});
  ck.opt_v.push_back({"p0", Tensor::full({2, 3}, real{0.25})});

  SUBCASE("save, load, save produces identical bytes") {
    const auto bytes1 = serialize_checkpoint(ck);
    Checkpoint back = deserialize_checkpoint(bytes1);
    const auto bytes2 = serialize_checkpoint(back);
    CHECK(bytes1 == bytes2);
    CHECK(back.epoch == 17);
    CHECK(back.opt_step == 1234);
    CHECK(back.params[1].tensor.values() == ck.params[1].tensor.values());
  }
  SUBCASE("file round trip") {
    const std::string path = temp_path("roundtrip.ckpt");
    save_checkpoint(path, ck);
    Checkpoint back = load_checkpoint(path);
    CHECK(serialize_checkpoint(back) == serialize_checkpoint(ck));
  }
  SUBCASE("corrupt byte is rejected by the digest") {
    auto bytes = serialize_checkpoint(ck);
    bytes[bytes.size() / 2] ^= 0x40;
    CHECK_THROWS_WITH_AS(deserialize_checkpoint(bytes), doctest::Contains("corrupt"), Error);
  }
  SUBCASE("wrong version byte is an explicit error") {
    auto bytes = serialize_checkpoint(ck);
    bytes[8] = 9;  // version field
    // recompute the trailing digest so only the version differs
    const std::uint64_t digest = fnv1a(bytes.data(), bytes.size() - 8);
    for (int i = 0; i < 8; ++i)
      bytes[bytes.size() - 8 + static_cast<std::size_t>(i)] =
          static_cast<unsigned char>(digest >> (8 * i));
    CHECK_THROWS_WITH_AS(deserialize_checkpoint(bytes), doctest::Contains("version"), Error);
  }
}

TEST_CASE("flop estimates match the published ViT-T numbers") {
  EncoderConfig vit_t;
  vit_t.depth = 12;
  vit_t.dim = 192;
  vit_t.heads = 3;
  vit_t.patch = 16;
  vit_t.image = 224;
  vit_t.classes = 1000;

  const double scratch = estimate_flops(vit_t, nullptr, 0, FlopsMode::classification).total;
  CHECK(std::fabs(scratch / 1.26e9 - 1.0) < 0.10);

  DecoderConfig dec;  // depth 2, dim 128, heads 16
  const double joint = estimate_flops(vit_t, &dec, real{0.75}, FlopsMode::ssat).total;
  CHECK(std::fabs(joint / 1.67e9 - 1.0) < 0.10);

  SUBCASE("analytic count for a bare projection plus head") {
    EncoderConfig flat = vit_t;
    flat.depth = 0;
    const double macs = estimate_flops(flat, nullptr, 0, FlopsMode::classification).total;
    const double n = 196, pd = 768, d = 192, k = 1000;
    CHECK(macs == doctest::Approx(n * pd * d + d * k));
  }
  SUBCASE("monotone in depth, dim, and token count") {
    EncoderConfig deeper = vit_t;
    deeper.depth = 13;
    EncoderConfig wider = vit_t;
    wider.dim = 384;
    wider.heads = 6;
    EncoderConfig bigger = vit_t;
    bigger.image = 448;
    for (const EncoderConfig& grown : {deeper, wider, bigger})
      CHECK(estimate_flops(grown, nullptr, 0, FlopsMode::classification).total > scratch);
  }
}

TEST_CASE("training runs are bit deterministic under a fixed seed") {
  Dataset train = generate_synthetic(3, 16, 16, 301);
  Dataset test = generate_synthetic(3, 8, 16, 302);
  TrainConfig cfg = tiny_train(TrainMode::ssat, 2, 7);

  ExperimentMetrics a = run_experiment(cfg, train, test, tiny_encoder(), tiny_decoder());
  ExperimentMetrics b = run_experiment(cfg, train, test, tiny_encoder(), tiny_decoder());
  REQUIRE(a.epochs.size() == b.epochs.size());
  for (std::size_t e = 0; e < a.epochs.size(); ++e) {
    CHECK(a.epochs[e].l_cls == b.epochs[e].l_cls);
    CHECK(a.epochs[e].l_ssat == b.epochs[e].l_ssat);
    CHECK(a.epochs[e].l_total == b.epochs[e].l_total);
    CHECK(a.epochs[e].eval_acc == b.epochs[e].eval_acc);
  }
}

TEST_CASE("ssat with lambda 1 reproduces the scratch trajectory") {
  Dataset train = generate_synthetic(3, 16, 16, 303);
  Dataset test = generate_synthetic(3, 8, 16, 304);

  TrainConfig scratch_cfg = tiny_train(TrainMode::scratch, 2, 11);
  TrainConfig ssat_cfg = tiny_train(TrainMode::ssat, 2, 11);
  ssat_cfg.lambda = 1;

  ExperimentMetrics scratch = run_experiment(scratch_cfg, train, test, tiny_encoder(), tiny_decoder());
  ExperimentMetrics joint = run_experiment(ssat_cfg, train, test, tiny_encoder(), tiny_decoder());
  REQUIRE(scratch.epochs.size() == joint.epochs.size());
  for (std::size_t e = 0; e < scratch.epochs.size(); ++e) {
    CHECK(scratch.epochs[e].l_cls == joint.epochs[e].l_cls);
    CHECK(scratch.epochs[e].l_total == joint.epochs[e].l_total);
    CHECK(scratch.epochs[e].eval_acc == joint.epochs[e].eval_acc);
  }
}

TEST_CASE("ssl pretraining never reads labels") {
  Dataset train = generate_synthetic(3, 16, 16, 305);
  Dataset test = generate_synthetic(3, 8, 16, 306);
  TrainConfig cfg = tiny_train(TrainMode::ssl_pretrain, 1, 13);
  run_experiment(cfg, train, test, tiny_encoder(), tiny_decoder());
  CHECK(train.label_reads() == 0);
  CHECK(test.label_reads() == 0);
}

TEST_CASE("resume equals uninterrupted training") {
  Dataset train = generate_synthetic(3, 16, 16, 307);
  Dataset test = generate_synthetic(3, 8, 16, 308);

  TrainConfig full_cfg = tiny_train(TrainMode::ssat, 2, 17);
  ExperimentModels full_models;
  ExperimentMetrics full = run_experiment(full_cfg, train, test, tiny_encoder(), tiny_decoder(),
                                          &full_models);

  TrainConfig first_cfg = tiny_train(TrainMode::ssat, 1, 17);
  first_cfg.checkpoint_out = temp_path("resume_half.ckpt");
  run_experiment(first_cfg, train, test, tiny_encoder(), tiny_decoder());

  TrainConfig second_cfg = tiny_train(TrainMode::ssat, 2, 17);
  second_cfg.resume_checkpoint = first_cfg.checkpoint_out;
  ExperimentModels resumed_models;
  ExperimentMetrics resumed =
      run_experiment(second_cfg, train, test, tiny_encoder(), tiny_decoder(), &resumed_models);

  // final epoch metrics and all parameters must agree bitwise
  CHECK(resumed.epochs.back().l_total == full.epochs.back().l_total);
  CHECK(resumed.epochs.back().eval_acc == full.epochs.back().eval_acc);
  auto full_params = snapshot_params(full_models.encoder, &full_models.decoder);
  auto resumed_params = snapshot_params(resumed_models.encoder, &resumed_models.decoder);
  REQUIRE(full_params.size() == resumed_params.size());
  for (std::size_t i = 0; i < full_params.size(); ++i) {
    CAPTURE(full_params[i].name);
    CHECK(full_params[i].tensor.values() == resumed_params[i].tensor.values());
  }
}

TEST_CASE("ssl plus finetune protocol wiring") {
  Dataset train = generate_synthetic(3, 16, 16, 309);
  Dataset test = generate_synthetic(3, 8, 16, 310);

  TrainConfig ssl_cfg = tiny_train(TrainMode::ssl_pretrain, 1, 19);
  ssl_cfg.checkpoint_out = temp_path("ssl.ckpt");
  run_experiment(ssl_cfg, train, test, tiny_encoder(), tiny_decoder());

  TrainConfig ft_cfg = tiny_train(TrainMode::finetune, 1, 19);
  ft_cfg.init_checkpoint = ssl_cfg.checkpoint_out;
  ExperimentMetrics ft = run_experiment(ft_cfg, train, test, tiny_encoder(), tiny_decoder());
  CHECK(std::isfinite(static_cast<double>(ft.epochs.back().l_cls)));
  CHECK(ft.final_accuracy >= 0);

  SUBCASE("finetune without a checkpoint errors") {
    TrainConfig bad = tiny_train(TrainMode::finetune, 1, 19);
    CHECK_THROWS_WITH_AS(run_experiment(bad, train, test, tiny_encoder(), tiny_decoder()),
                         doctest::Contains("init_checkpoint"), Error);
  }
}

TEST_CASE("30-epoch smoke run reduces the training loss") {
  Dataset train = generate_synthetic(3, 10, 16, 311);
  Dataset test = generate_synthetic(3, 5, 16, 312);
  TrainConfig cfg = tiny_train(TrainMode::ssat, 30, 23);
  cfg.batch_size = 15;
  cfg.warmup_epochs = 3;
  cfg.eval_every = 0;  // only the final epoch
  ExperimentMetrics m = run_experiment(cfg, train, test, tiny_encoder(), tiny_decoder());
  REQUIRE(m.epochs.size() == 30);
  CHECK(m.epochs.back().l_total < m.epochs.front().l_total);
  CHECK(std::isfinite(m.final_accuracy));
}
