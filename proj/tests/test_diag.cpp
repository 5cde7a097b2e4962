#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ssat/diag.hpp"

using namespace ssat;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = static_cast<real>(rng.uniform(lo, hi));
  return t;
}

// test-side oracle: cyclic Jacobi eigenvalue iteration on a dense symmetric
// matrix, independent of the tridiagonal QL path used by the module
std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::fabs(apq) < 1e-18) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
  std::sort(eig.begin(), eig.end());
  return eig;
}

// micro model whose Hessian is cheap: 4 -> 5 -> 3 MLP with a cross-entropy
// loss over a fixed batch (43 parameters)
struct MicroMlp {
  LinearParams fc1, fc2;
  Tensor input;
  std::vector<int> labels;
  std::vector<ParamGroup> groups;

  static MicroMlp make(std::uint64_t seed) {
    Rng rng(seed);
    MicroMlp m;
    m.fc1 = make_linear(5, 4, rng, real{0.5});
    m.fc2 = make_linear(3, 5, rng, real{0.5});
    m.input = random_tensor(rng, {6, 4});
    for (int i = 0; i < 6; ++i) m.labels.push_back(i % 3);
    m.groups = {{"fc1.w", m.fc1.weight, 0},
                {"fc1.b", m.fc1.bias, 0},
                {"fc2.w", m.fc2.weight, 0},
                {"fc2.b", m.fc2.bias, 0}};
    return m;
  }

  LossGradFn fn() {
    return [this](const std::vector<real>& theta) {
      std::vector<real> saved = flatten_params(groups);
      write_params(groups, theta);
      GradEval out;
      {
        Tape tape;
        TapeScope scope(tape);
        Tensor logits = linear(fc2, gelu(linear(fc1, input)));
        Tensor loss = cross_entropy(logits, labels, 0);
        out.loss = loss.item();
        GradientMap grads = tape.backward(loss);
        for (const auto& g : groups) {
          const Tensor grad = grads.grad(g.tensor);
          out.grad.insert(out.grad.end(), grad.values().begin(), grad.values().end());
        }
      }
      write_params(groups, saved);
      return out;
    };
  }
};

}  // namespace

TEST_CASE("attention column sums") {
  SUBCASE("uniform attention gives every token 1") {
    AttentionRecord rec{Tensor::full({2, 4, 4}, real{0.25})};
    for (real v : attention_column_sums(rec)) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("identity attention gives every token exactly 1") {
    Tensor eye = Tensor::zeros({1, 3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.values()[i * 3 + i] = 1;
    AttentionRecord rec{eye};
    for (real v : attention_column_sums(rec)) CHECK(v == 1.0);
  }
  SUBCASE("received attention totals n for real attention records") {
    Rng rng(3);
    AttentionParams p = make_attention(8, 2, rng);
    auto [out, rec] = multi_head_attention(p, random_tensor(rng, {3, 5, 8}, -2, 2),
                                           AttentionOptions{true});
    const auto received = attention_column_sums(rec);
    real total = 0;
    for (real v : received) total += v;
    CHECK(std::fabs(total - 5.0) < 1e-6);
  }
}

TEST_CASE("inter-token distance") {
  SUBCASE("identical tokens are at distance zero") {
    TokenSequence seq{Tensor::full({4, 3}, real{0.7}), false};
    CHECK(inter_token_distance(seq) == 0);
  }
  SUBCASE("two tokens at distance d") {
    Tensor t = Tensor::from({2, 2}, {0, 0, 3, 4});
    CHECK(inter_token_distance({t, false}) == doctest::Approx(5.0).epsilon(1e-14));
  }
  SUBCASE("matches the brute-force oracle") {
    Rng rng(5);
    Tensor t = random_tensor(rng, {8, 6}, -2, 2);
    // oracle: all ordered pairs, halved
    double acc = 0;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        if (i == j) continue;
        double d2 = 0;
        for (std::size_t c = 0; c < 6; ++c) {
          const double diff =
              static_cast<double>(t.values()[i * 6 + c]) - static_cast<double>(t.values()[j * 6 + c]);
          d2 += diff * diff;
        }
        acc += std::sqrt(d2);
      }
    const double oracle = acc / 2.0 / (8.0 * 7.0 / 2.0);
    CHECK(std::fabs(static_cast<double>(inter_token_distance({t, false})) - oracle) < 1e-10);
  }
  SUBCASE("class token is excluded") {
    Tensor t = Tensor::from({3, 2}, {100, 100, 0, 0, 3, 4});
    CHECK(inter_token_distance({t, true}) == doctest::Approx(5.0).epsilon(1e-14));
  }
  SUBCASE("too few tokens errors") {
    CHECK_THROWS_AS(inter_token_distance({Tensor::zeros({1, 4}), false}), Error);
  }
  SUBCASE("invariant to token order") {
    Rng rng(7);
    Tensor t = random_tensor(rng, {6, 4});
    Tensor shuffled = Tensor::zeros({6, 4});
    const std::size_t perm[6] = {3, 1, 5, 0, 4, 2};
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t c = 0; c < 4; ++c)
        shuffled.values()[i * 4 + c] = t.values()[perm[i] * 4 + c];
    CHECK(inter_token_distance({t, false}) ==
          doctest::Approx(inter_token_distance({shuffled, false})).epsilon(1e-12));
  }
}

TEST_CASE("feature variance") {
  SUBCASE("constant tokens have zero variance") {
    CHECK(feature_variance({Tensor::full({5, 3}, real{2.5}), false}) == 0);
  }
  SUBCASE("unit-variance draws land near 1") {
    Rng rng(9);
    Tensor t = Tensor::zeros({256, 8});
    for (auto& v : t.values()) v = static_cast<real>(rng.normal());
    CHECK(std::fabs(static_cast<double>(feature_variance({t, false})) - 1.0) < 0.2);
  }
  SUBCASE("invariant to token order") {
    Rng rng(11);
    Tensor t = random_tensor(rng, {5, 4});
    Tensor reversed = Tensor::zeros({5, 4});
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 4; ++c)
        reversed.values()[i * 4 + c] = t.values()[(4 - i) * 4 + c];
    CHECK(feature_variance({t, false}) ==
          doctest::Approx(feature_variance({reversed, false})).epsilon(1e-12));
  }
}

TEST_CASE("hessian-vector products") {
  SUBCASE("quadratic form has an exact Hessian") {
    Rng rng(13);
    const std::size_t n = 6;
    std::vector<real> A(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        const real v = static_cast<real>(rng.uniform(-1, 1));
        A[i * n + j] = v;
        A[j * n + i] = v;
      }
    // loss 0.5 theta^T A theta, gradient A theta
    LossGradFn fn = [&](const std::vector<real>& theta) {
      GradEval out;
      out.grad.assign(n, real{0});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out.grad[i] += A[i * n + j] * theta[j];
      for (std::size_t i = 0; i < n; ++i) out.loss += real{0.5} * theta[i] * out.grad[i];
      return out;
    };
    std::vector<real> theta(n), v(n);
    for (auto& x : theta) x = static_cast<real>(rng.uniform(-1, 1));
    for (auto& x : v) x = static_cast<real>(rng.uniform(-1, 1));
    const std::vector<real> hv = hessian_vector_product(fn, theta, v, real{1e-4});
    for (std::size_t i = 0; i < n; ++i) {
      real want = 0;
      for (std::size_t j = 0; j < n; ++j) want += A[i * n + j] * v[j];
      CHECK(std::fabs(hv[i] - want) < 1e-8);
    }
  }
  SUBCASE("symmetry and linearity on a micro MLP") {
    MicroMlp m = MicroMlp::make(17);
    LossGradFn fn = m.fn();
    const std::vector<real> theta = flatten_params(m.groups);
    Rng rng(19);
    std::vector<real> u(theta.size()), v(theta.size());
    for (auto& x : u) x = static_cast<real>(rng.uniform(-1, 1));
    for (auto& x : v) x = static_cast<real>(rng.uniform(-1, 1));

    const auto hu = hessian_vector_product(fn, theta, u, real{1e-4});
    const auto hv = hessian_vector_product(fn, theta, v, real{1e-4});
    real uhv = 0, vhu = 0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      uhv += u[i] * hv[i];
      vhu += v[i] * hu[i];
    }
    CHECK(std::fabs(uhv - vhu) < 1e-6);

    std::vector<real> combo(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) combo[i] = 2 * u[i] - 3 * v[i];
    const auto hc = hessian_vector_product(fn, theta, combo, real{1e-4});
    for (std::size_t i = 0; i < theta.size(); ++i)
      CHECK(std::fabs(hc[i] - (2 * hu[i] - 3 * hv[i])) < 1e-6);
  }
  SUBCASE("rejects bad eps and mismatched sizes") {
    MicroMlp m = MicroMlp::make(23);
    LossGradFn fn = m.fn();
    const std::vector<real> theta = flatten_params(m.groups);
    CHECK_THROWS_AS(hessian_vector_product(fn, theta, theta, 0), Error);
    CHECK_THROWS_AS(hessian_vector_product(fn, theta, std::vector<real>(3, 1), real{1e-4}), Error);
  }
}

TEST_CASE("dense hessian oracle") {
  SUBCASE("quadratic form recovers the symmetrized matrix") {
    Rng rng(29);
    const std::size_t n = 5;
    std::vector<real> A(n * n);
    for (auto& v : A) v = static_cast<real>(rng.uniform(-1, 1));  // deliberately asymmetric
    LossGradFn fn = [&](const std::vector<real>& theta) {
      GradEval out;
      out.grad.assign(n, real{0});
      // loss 0.5 theta^T A theta -> grad = 0.5 (A + A^T) theta
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          out.grad[i] += real{0.5} * (A[i * n + j] + A[j * n + i]) * theta[j];
      for (std::size_t i = 0; i < n; ++i) out.loss += real{0.5} * theta[i] * out.grad[i];
      return out;
    };
    std::vector<real> theta(n, real{0.3});
    DenseHessian h = dense_hessian(fn, theta, real{1e-5});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        CHECK(std::fabs(h.at(i, j) - real{0.5} * (A[i * n + j] + A[j * n + i])) < 1e-7);
  }
  SUBCASE("micro MLP hessian is nearly symmetric before symmetrization") {
    MicroMlp m = MicroMlp::make(31);
    LossGradFn fn = m.fn();
    DenseHessian h = dense_hessian(fn, flatten_params(m.groups), real{1e-4});
    CHECK(h.dim == 43);
    CHECK(h.max_asymmetry < 1e-5);
  }
  SUBCASE("column matches the matrix-free product") {
    MicroMlp m = MicroMlp::make(37);
    LossGradFn fn = m.fn();
    const std::vector<real> theta = flatten_params(m.groups);
    DenseHessian h = dense_hessian(fn, theta, real{1e-4});
    std::vector<real> e(theta.size(), real{0});
    e[7] = 1;
    const auto hv = hessian_vector_product(fn, theta, e, real{1e-4});
    for (std::size_t i = 0; i < theta.size(); ++i) CHECK(std::fabs(hv[i] - h.at(i, 7)) < 1e-5);
  }
  SUBCASE("parameter-count guard") {
    LossGradFn fn = [](const std::vector<real>& t) {
      return GradEval{0, std::vector<real>(t.size(), real{0})};
    };
    CHECK_THROWS_WITH_AS(dense_hessian(fn, std::vector<real>(5000, real{0}), real{1e-4}),
                         doctest::Contains("guard"), Error);
  }
}

TEST_CASE("lanczos spectra") {
  auto diag_operator = [](std::vector<real> dvals) {
    return [dvals](const std::vector<real>& v) {
      std::vector<real> out(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = dvals[i] * v[i];
      return out;
    };
  };

  SUBCASE("diag(1..10) top three are 10, 9, 8") {
    std::vector<real> d(10);
    for (std::size_t i = 0; i < 10; ++i) d[i] = static_cast<real>(i + 1);
    SpectrumSummary s = lanczos_spectrum(diag_operator(d), 10, 3, 10, 77);
    REQUIRE(s.top.size() == 3);
    CHECK(std::fabs(s.top[0] - 10) < 1e-8);
    CHECK(std::fabs(s.top[1] - 9) < 1e-8);
    CHECK(std::fabs(s.top[2] - 8) < 1e-8);
    CHECK(s.negative_count_estimate == 0);
  }
  SUBCASE("random symmetric 64x64 matches the Jacobi oracle") {
    Rng rng(41);
    const std::size_t n = 64;
    std::vector<double> A(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        const double v = rng.uniform(-1, 1);
        A[i * n + j] = v;
        A[j * n + i] = v;
      }
    LinearOperator op = [&](const std::vector<real>& v) {
      std::vector<real> out(n, real{0});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          out[i] += static_cast<real>(A[i * n + j]) * v[j];
      return out;
    };
    SpectrumSummary s = lanczos_spectrum(op, n, 5, n, 43);
    const std::vector<double> oracle = jacobi_eigenvalues(A, n);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(std::fabs(static_cast<double>(s.top[i]) - oracle[n - 1 - i]) < 1e-6);
      CHECK(std::fabs(static_cast<double>(s.bottom[i]) - oracle[i]) < 1e-6);
    }
  }
  SUBCASE("signed diagonal reports the negative end") {
    SpectrumSummary s = lanczos_spectrum(diag_operator({-3, -1, 2, 5}), 4, 2, 4, 7);
    CHECK(std::fabs(s.bottom[0] + 3) < 1e-8);
    CHECK(s.negative_count_estimate == 2);
    CHECK(s.negative_mean_magnitude == doctest::Approx(2.0).epsilon(1e-8));
  }
  SUBCASE("top Ritz value is non-decreasing in iteration count") {
    Rng rng(47);
    const std::size_t n = 40;
    std::vector<double> A(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        const double v = rng.uniform(-1, 1);
        A[i * n + j] = v;
        A[j * n + i] = v;
      }
    LinearOperator op = [&](const std::vector<real>& v) {
      std::vector<real> out(n, real{0});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          out[i] += static_cast<real>(A[i * n + j]) * v[j];
      return out;
    };
    real prev = -std::numeric_limits<real>::infinity();
    for (std::size_t iters : {std::size_t{4}, std::size_t{8}, std::size_t{16}, std::size_t{32}}) {
      SpectrumSummary s = lanczos_spectrum(op, n, 1, iters, 91);
      CHECK(s.top[0] >= prev - real{1e-10});
      prev = s.top[0];
    }
  }
  SUBCASE("parameter validation") {
    CHECK_THROWS_AS(lanczos_spectrum(diag_operator({1, 2}), 2, 3, 3, 0), Error);
    CHECK_THROWS_AS(lanczos_spectrum(diag_operator({1, 2}), 2, 1, 5, 0), Error);
  }
}

TEST_CASE("diagnostics report") {
  Rng rng(51);
  EncoderConfig cfg;
  cfg.depth = 3;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.patch = 4;
  cfg.image = 8;
  cfg.classes = 3;
  VitModel model = make_vit(cfg, rng);
  Dataset slice = generate_synthetic(3, 8, 8, 53);

  DiagConfig dcfg;
  dcfg.slice = 12;
  dcfg.batch_size = 6;
  dcfg.lanczos_k = 3;
  dcfg.lanczos_iterations = 12;
  dcfg.hessian_samples = 6;

  DiagnosticsReport report = build_report(model, slice, dcfg);

  SUBCASE("structure matches the depth") {
    CHECK(report.attention_received.size() == 3);
    CHECK(report.inter_token_distances.size() == 3);
    CHECK(report.feature_variances.size() == 3);
    CHECK(report.attention_received[0].size() == cfg.token_count());
    CHECK(report.has_spectrum);
    CHECK(report.spectrum.top.size() == 3);
    CHECK(report.samples == 12);
  }
  SUBCASE("per-layer received attention totals the token count") {
    for (const auto& layer : report.attention_received) {
      real total = 0;
      for (real v : layer) total += v;
      CHECK(std::fabs(total - static_cast<real>(cfg.token_count())) < 1e-6);
    }
  }
  SUBCASE("deterministic and parameter-addressed") {
    DiagnosticsReport again = build_report(model, slice, dcfg);
    CHECK(again.checkpoint_digest == report.checkpoint_digest);
    CHECK(again.dataset_digest == report.dataset_digest);
    CHECK(again.inter_token_distances == report.inter_token_distances);
    CHECK(again.feature_variances == report.feature_variances);
    CHECK(again.spectrum.top == report.spectrum.top);

    // an identical-parameter copy of the model reports identically
    Rng rng2(51);
    VitModel twin = make_vit(cfg, rng2);
    DiagnosticsReport twin_report = build_report(twin, slice, dcfg);
    CHECK(twin_report.checkpoint_digest == report.checkpoint_digest);
    CHECK(twin_report.attention_received == report.attention_received);
    CHECK(twin_report.spectrum.bottom == report.spectrum.bottom);
  }
}
