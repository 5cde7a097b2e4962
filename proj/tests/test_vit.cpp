#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "ssat/vit.hpp"

using namespace ssat;

namespace {

Image random_image(Rng& rng, std::size_t h, std::size_t w, std::size_t c) {
  Image img = Image::blank(h, w, c);
  for (auto& v : img.pixels) v = static_cast<real>(rng.uniform01());
  return img;
}

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = static_cast<real>(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("patchify counts and dims") {
  Rng rng(1);
  SUBCASE("8x8x3 with P=4 gives 4 patches of 48") {
    Image img = random_image(rng, 8, 8, 3);
    Tensor p = patchify(img, PatchGrid::for_image(8, 8, 3, 4));
    CHECK(p.shape() == Shape{4, 48});
  }
  SUBCASE("32x32x3 with P=2 gives 256 patches") {
    Image img = random_image(rng, 32, 32, 3);
    Tensor p = patchify(img, PatchGrid::for_image(32, 32, 3, 2));
    CHECK(p.shape() == Shape{256, 12});
  }
  SUBCASE("P=3 does not divide 32") {
    CHECK_THROWS_WITH_AS(PatchGrid::for_image(32, 32, 3, 3), doctest::Contains("divide"), Error);
  }
}

TEST_CASE("patchify then unpatchify is the identity, bit exact") {
  Rng rng(2);
  for (std::size_t P : {std::size_t{2}, std::size_t{4}, std::size_t{8}}) {
    Image img = random_image(rng, 16, 16, 3);
    PatchGrid grid = PatchGrid::for_image(16, 16, 3, P);
    Image back = unpatchify(patchify(img, grid), grid);
    CHECK(back.pixels == img.pixels);
  }
}

TEST_CASE("embed basics") {
  Rng rng(3);
  EncoderConfig cfg;
  cfg.depth = 1;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.patch = 4;
  cfg.image = 8;
  cfg.classes = 3;
  VitModel m = make_vit(cfg, rng);

  Tensor patches = random_tensor(rng, {2, 4, 48});

  SUBCASE("zero projection and zero positions give zero patch tokens plus the class token") {
    std::fill(m.embed.proj.weight.values().begin(), m.embed.proj.weight.values().end(), real{0});
    std::fill(m.embed.pos.values().begin(), m.embed.pos.values().end(), real{0});
    TokenSequence seq = embed(m.embed, patches, true);
    CHECK(seq.token_count() == 5);
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t c = 0; c < 8; ++c)
        CHECK(seq.tokens.values()[b * 5 * 8 + c] == m.embed.cls.values()[c]);
      for (std::size_t t = 1; t < 5; ++t)
        for (std::size_t c = 0; c < 8; ++c) CHECK(seq.tokens.values()[(b * 5 + t) * 8 + c] == 0);
    }
  }
  SUBCASE("token count is N+1 with class token, N without") {
    CHECK(embed(m.embed, patches, true).token_count() == 5);
    CHECK(embed(m.embed, patches, false).token_count() == 4);
  }
  SUBCASE("dim mismatch") {
    CHECK_THROWS_WITH_AS(embed(m.embed, random_tensor(rng, {2, 4, 47}), true),
                         doctest::Contains("patch dim"), Error);
  }
  SUBCASE("gradient check through the embedding") {
    auto fn = [&](const Tensor& t) { return sum(embed(m.embed, t, true).tokens); };
    CHECK(finite_difference_check(fn, patches, real{1e-5}) < 1e-6);
  }
}

TEST_CASE("encode contracts") {
  Rng rng(4);
  EncoderConfig cfg;
  cfg.depth = 3;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.patch = 4;
  cfg.image = 8;
  VitModel m = make_vit(cfg, rng);

  Tensor patches = random_tensor(rng, {2, 4, 48});
  TokenSequence seq = embed(m.embed, patches, true);

  SUBCASE("depth 0 is the identity") {
    EncoderConfig c0 = cfg;
    c0.depth = 0;
    VitModel m0 = make_vit(c0, rng);
    EncodeResult r = encode(m0, seq);
    CHECK(r.tokens.tokens.values() == seq.tokens.values());
  }
  SUBCASE("shape preserved and per-layer capture works") {
    EncodeOptions opts;
    opts.record_attention = true;
    opts.capture_layers = true;
    EncodeResult r = encode(m, seq, opts);
    CHECK(r.tokens.tokens.shape() == seq.tokens.shape());
    CHECK(r.attention.size() == 3);
    CHECK(r.layer_tokens.size() == 3);
    for (const auto& rec : r.attention) CHECK(rec.probs.shape() == Shape{2, 2, 5, 5});
  }
}

TEST_CASE("encode is permutation equivariant when positions are zeroed") {
  Rng rng(5);
  EncoderConfig cfg;
  cfg.depth = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.patch = 4;
  cfg.image = 8;
  cfg.class_token = false;
  cfg.drop_path = 0;
  VitModel m = make_vit(cfg, rng);
  std::fill(m.embed.pos.values().begin(), m.embed.pos.values().end(), real{0});

  Tensor patches = random_tensor(rng, {4, 48});
  std::vector<std::size_t> perm = {2, 0, 3, 1};
  Tensor shuffled = Tensor::zeros({4, 48});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 48; ++c)
      shuffled.values()[i * 48 + c] = patches.values()[perm[i] * 48 + c];

  Tensor base = encode(m, embed(m.embed, patches, false)).tokens.tokens;
  Tensor permuted = encode(m, embed(m.embed, shuffled, false)).tokens.tokens;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 8; ++c)
      CHECK(permuted.values()[i * 8 + c] ==
            doctest::Approx(base.values()[perm[i] * 8 + c]).epsilon(1e-12));
}

TEST_CASE("classify contracts") {
  Rng rng(6);
  EncoderConfig cfg;
  cfg.depth = 1;
  cfg.dim = 6;
  cfg.heads = 2;
  cfg.patch = 4;
  cfg.image = 8;
  cfg.classes = 4;
  VitModel m = make_vit(cfg, rng);

  TokenSequence latent{random_tensor(rng, {3, 5, 6}), true};

  SUBCASE("zero head weights give the bias for any input") {
    std::fill(m.head.fc.weight.values().begin(), m.head.fc.weight.values().end(), real{0});
    m.head.fc.bias = Tensor::from({4}, {1, 2, 3, 4}).set_requires_grad(true);
    Tensor logits = classify(m.head, latent);
    CHECK(logits.shape() == Shape{3, 4});
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t k = 0; k < 4; ++k) CHECK(logits.values()[b * 4 + k] == real(k + 1));
  }
  SUBCASE("logit count equals class count") {
    CHECK(classify(m.head, latent).shape() == Shape{3, 4});
    TokenSequence pooled{random_tensor(rng, {3, 5, 6}), false};
    CHECK(classify(m.head, pooled).shape() == Shape{3, 4});
  }
  SUBCASE("mean-pool path averages tokens") {
    std::fill(m.head.fc.weight.values().begin(), m.head.fc.weight.values().end(), real{0});
    for (std::size_t i = 0; i < 4; ++i) m.head.fc.weight.values()[i * 6 + i] = 1;
    std::fill(m.head.fc.bias.values().begin(), m.head.fc.bias.values().end(), real{0});
    TokenSequence pooled{random_tensor(rng, {5, 6}), false};
    Tensor logits = classify(m.head, pooled);
    for (std::size_t k = 0; k < 4; ++k) {
      real want = 0;
      for (std::size_t t = 0; t < 5; ++t) want += pooled.tokens.values()[t * 6 + k];
      want /= 5;
      CHECK(logits.values()[k] == doctest::Approx(want).epsilon(1e-12));
    }
  }
  SUBCASE("gradient check") {
    auto fn = [&](const Tensor& t) {
      return sum(classify(m.head, TokenSequence{t, true}));
    };
    CHECK(finite_difference_check(fn, latent.tokens, real{1e-5}) < 1e-6);
  }
}

TEST_CASE("cross entropy values and gradients") {
  SUBCASE("uniform logits, no smoothing, is ln K") {
    Tensor logits = Tensor::zeros({1, 7});
    Tensor target = Tensor::full({1, 7}, real{1} / 7);
    CHECK(cross_entropy(logits, target, 0).item() ==
          doctest::Approx(1.9459101490553132).epsilon(1e-14));
  }
  SUBCASE("gradient is softmax minus smoothed target") {
    Rng rng(7);
    Tensor logits = random_tensor(rng, {1, 5}, -2, 2).set_requires_grad(true);
    const real s = real{0.2};
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = cross_entropy(logits, std::vector<int>{3}, s);
    GradientMap grads = tape.backward(loss);
    Tensor probs = softmax(logits.detached());
    for (std::size_t k = 0; k < 5; ++k) {
      const real target = (k == 3 ? 1 - s : real{0}) + s / 5;
      CHECK(grads.grad(logits).values()[k] ==
            doctest::Approx(probs.values()[k] - target).epsilon(1e-12));
    }
  }
  SUBCASE("hand case matches the scripted oracle") {
    // independent scalar computation of the smoothed cross-entropy
    const double logits[4] = {0.2, -1.1, 3.0, 0.7};
    double lse = 0;
    for (double v : logits) lse += std::exp(v);
    lse = std::log(lse);
    const double tp[4] = {0.025, 0.025, 0.925, 0.025};
    double oracle = 0;
    for (int i = 0; i < 4; ++i) oracle -= tp[i] * (logits[i] - lse);
    CHECK(oracle == doctest::Approx(0.39351377895822059).epsilon(1e-15));  // frozen

    Tensor l = Tensor::from({1, 4}, {0.2, -1.1, 3.0, 0.7});
    CHECK(cross_entropy(l, std::vector<int>{2}, real{0.1}).item() ==
          doctest::Approx(oracle).epsilon(1e-12));
  }
  SUBCASE("loss is nonnegative on random distributions") {
    Rng rng(8);
    for (int trial = 0; trial < 25; ++trial) {
      Tensor logits = random_tensor(rng, {2, 6}, -4, 4);
      std::vector<int> labels = {static_cast<int>(rng.uniform_below(6)),
                                 static_cast<int>(rng.uniform_below(6))};
      const real s = static_cast<real>(rng.uniform(0.0, 0.5));
      CHECK(cross_entropy(logits, labels, s).item() >= 0);
    }
  }
  SUBCASE("invalid smoothing and malformed targets error") {
    Tensor logits = Tensor::zeros({1, 3});
    CHECK_THROWS_AS(cross_entropy(logits, std::vector<int>{0}, 1), Error);
    CHECK_THROWS_WITH_AS(cross_entropy(logits, Tensor::from({1, 3}, {0.5, 0.2, 0.2}), 0),
                         doctest::Contains("sums to"), Error);
  }
}

TEST_CASE("batched vit forward produces finite losses and full gradients") {
  Rng rng(9);
  EncoderConfig cfg;
  cfg.depth = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.patch = 4;
  cfg.image = 8;
  cfg.classes = 3;
  VitModel m = make_vit(cfg, rng);

  Tensor patches = random_tensor(rng, {4, 4, 48}, 0.0, 1.0);
  Tape tape;
  TapeScope scope(tape);
  TokenSequence seq = embed(m.embed, patches, true);
  Tensor logits = classify(m.head, encode(m, seq).tokens);
  Tensor loss = cross_entropy(logits, std::vector<int>{0, 1, 2, 0}, real{0.1});
  CHECK(std::isfinite(static_cast<double>(loss.item())));
  GradientMap grads = tape.backward(loss);
  std::size_t n_params = 0;
  m.visit([&](const std::string&, Tensor& t) {
    CHECK(grads.contains(t));
    ++n_params;
  });
  CHECK(n_params == 2 + 1 + 1 + 2 * 16 + 2 + 2);
}
