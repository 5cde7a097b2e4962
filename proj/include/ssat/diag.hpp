#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "ssat/train.hpp"

namespace ssat {

// --------------------------------------------------------------------------
// attention mass and token statistics
// --------------------------------------------------------------------------

// For each token j: sum over rows i of A[i][j], averaged over heads (and over
// the batch when the record is batched). With row-stochastic attention the
// per-token values total n.
inline std::vector<real> attention_column_sums(const AttentionRecord& record) {
  check(record.probs.defined(), "attention_column_sums: empty record");
  const std::size_t n = record.tokens();
  const std::size_t rows_total = record.probs.numel() / n;     // (batch*heads)*n rows
  const std::size_t matrices = rows_total / n;                 // batch*heads
  std::vector<real> received(n, real{0});
  const real* p = record.probs.values().data();
  for (std::size_t m = 0; m < matrices; ++m)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) received[j] += p[(m * n + i) * n + j];
  for (auto& v : received) v /= static_cast<real>(matrices);
  return received;
}

// mean pairwise Euclidean distance among patch tokens (class token excluded),
// averaged over the batch when present
inline real inter_token_distance(const TokenSequence& seq) {
  const std::size_t skip = seq.has_class_token ? 1 : 0;
  const std::size_t n = seq.token_count() - skip;
  check(n >= 2, "inter_token_distance: needs at least 2 patch tokens, got ", n);
  const std::size_t d = seq.channels();
  const std::size_t lead = seq.tokens.numel() / (seq.token_count() * d);
  const real* p = seq.tokens.values().data();
  real total = 0;
  for (std::size_t b = 0; b < lead; ++b) {
    const real* base = p + b * seq.token_count() * d;
    real acc = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        real dist2 = 0;
        const real* ti = base + (i + skip) * d;
        const real* tj = base + (j + skip) * d;
        for (std::size_t c = 0; c < d; ++c) {
          const real diff = ti[c] - tj[c];
          dist2 += diff * diff;
        }
        acc += std::sqrt(dist2);
      }
    total += acc / static_cast<real>(n * (n - 1) / 2);
  }
  return total / static_cast<real>(lead);
}

// per-channel variance across patch tokens (population), averaged over
// channels and over the batch; class token excluded
inline real feature_variance(const TokenSequence& seq) {
  const std::size_t skip = seq.has_class_token ? 1 : 0;
  const std::size_t n = seq.token_count() - skip;
  check(n >= 2, "feature_variance: needs at least 2 patch tokens, got ", n);
  const std::size_t d = seq.channels();
  const std::size_t lead = seq.tokens.numel() / (seq.token_count() * d);
  const real* p = seq.tokens.values().data();
  real total = 0;
  for (std::size_t b = 0; b < lead; ++b) {
    const real* base = p + b * seq.token_count() * d;
    real acc = 0;
    for (std::size_t c = 0; c < d; ++c) {
      real mu = 0;
      for (std::size_t i = 0; i < n; ++i) mu += base[(i + skip) * d + c];
      mu /= static_cast<real>(n);
      real var = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const real diff = base[(i + skip) * d + c] - mu;
        var += diff * diff;
      }
      acc += var / static_cast<real>(n);
    }
    total += acc / static_cast<real>(d);
  }
  return total / static_cast<real>(lead);
}

// --------------------------------------------------------------------------
// Hessian machinery: finite differences of gradients
// --------------------------------------------------------------------------

struct GradEval {
  real loss = 0;
  std::vector<real> grad;
};

using LossGradFn = std::function<GradEval(const std::vector<real>&)>;

// (grad(theta + eps*vhat) - grad(theta - eps*vhat)) * ||v|| / (2*eps),
// with eps scaled by the parameter magnitude
inline std::vector<real> hessian_vector_product(const LossGradFn& fn,
                                                const std::vector<real>& theta,
                                                const std::vector<real>& v, real fd_eps) {
  check(fd_eps > 0, "hessian_vector_product: fd_eps must be positive");
  check(theta.size() == v.size(), "hessian_vector_product: v has ", v.size(), " entries for ",
        theta.size(), " parameters");
  real vnorm = 0;
  for (real x : v) vnorm += x * x;
  vnorm = std::sqrt(vnorm);
  if (vnorm == 0) return std::vector<real>(theta.size(), real{0});

  real tnorm = 0;
  for (real x : theta) tnorm += x * x;
  tnorm = std::sqrt(tnorm / static_cast<real>(theta.size()));
  const real eps = fd_eps * std::max(real{1}, tnorm);

  std::vector<real> plus(theta), minus(theta);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const real step = eps * v[i] / vnorm;
    plus[i] += step;
    minus[i] -= step;
  }
  GradEval up = fn(plus);
  GradEval down = fn(minus);
  check(std::isfinite(static_cast<double>(up.loss)) &&
            std::isfinite(static_cast<double>(down.loss)),
        "hessian_vector_product: loss is not finite");
  check(up.grad.size() == theta.size() && down.grad.size() == theta.size(),
        "hessian_vector_product: gradient size mismatch");
  std::vector<real> hv(theta.size());
  const real scalef = vnorm / (2 * eps);
  for (std::size_t i = 0; i < theta.size(); ++i) hv[i] = (up.grad[i] - down.grad[i]) * scalef;
  return hv;
}

struct DenseHessian {
  std::size_t dim = 0;
  std::vector<real> matrix;  // row-major, symmetrized
  real max_asymmetry = 0;    // largest |H - H^T| entry before symmetrization

  real at(std::size_t i, std::size_t j) const { return matrix[i * dim + j]; }
};

inline constexpr std::size_t kDenseHessianGuard = 2000;

inline DenseHessian dense_hessian(const LossGradFn& fn, const std::vector<real>& theta,
                                  real fd_eps) {
  check(theta.size() <= kDenseHessianGuard, "dense_hessian: ", theta.size(),
        " parameters exceed the guard (", kDenseHessianGuard, ")");
  check(fd_eps > 0, "dense_hessian: fd_eps must be positive");
  const std::size_t n = theta.size();
  DenseHessian out;
  out.dim = n;
  out.matrix.assign(n * n, real{0});
  std::vector<real> probe(theta);
  for (std::size_t j = 0; j < n; ++j) {
    probe[j] = theta[j] + fd_eps;
    GradEval up = fn(probe);
    probe[j] = theta[j] - fd_eps;
    GradEval down = fn(probe);
    probe[j] = theta[j];
    check(std::isfinite(static_cast<double>(up.loss)) &&
              std::isfinite(static_cast<double>(down.loss)),
          "dense_hessian: loss is not finite");
    for (std::size_t i = 0; i < n; ++i)
      out.matrix[i * n + j] = (up.grad[i] - down.grad[i]) / (2 * fd_eps);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const real a = out.matrix[i * n + j];
      const real b = out.matrix[j * n + i];
      out.max_asymmetry = std::max(out.max_asymmetry, std::fabs(a - b));
      const real s = (a + b) / 2;
      out.matrix[i * n + j] = s;
      out.matrix[j * n + i] = s;
    }
  return out;
}

// --------------------------------------------------------------------------
// symmetric eigensolvers
// --------------------------------------------------------------------------

namespace detail {

// implicit-shift QL for a symmetric tridiagonal matrix; eigenvalues only
inline std::vector<real> tridiagonal_eigenvalues(std::vector<real> d, std::vector<real> e) {
  const std::size_t n = d.size();
  if (n == 0) return {};
  e.resize(n, real{0});  // e[i] couples d[i] and d[i+1]; e[n-1] is padding
  for (std::size_t l = 0; l < n; ++l) {
    std::size_t iterations = 0;
    for (;;) {
      std::size_t m = l;
      for (; m + 1 < n; ++m) {
        const real dd = std::fabs(d[m]) + std::fabs(d[m + 1]);
        if (std::fabs(e[m]) <= std::numeric_limits<real>::epsilon() * dd) break;
      }
      if (m == l) break;
      check(++iterations <= 64, "tridiagonal_eigenvalues: no convergence");
      real g = (d[l + 1] - d[l]) / (2 * e[l]);
      real r = std::hypot(g, real{1});
      g = d[m] - d[l] + e[l] / (g + std::copysign(r, g));
      real s = 1, c = 1, p = 0;
      bool underflow = false;
      for (std::size_t i = m; i-- > l;) {
        real f = s * e[i];
        const real b = c * e[i];
        r = std::hypot(f, g);
        e[i + 1] = r;
        if (r == 0) {  // recover from a vanishing rotation and retry
          d[i + 1] -= p;
          e[m] = 0;
          underflow = true;
          break;
        }
        s = f / r;
        c = g / r;
        g = d[i + 1] - p;
        r = (d[i] - g) * s + 2 * c * b;
        p = s * r;
        d[i + 1] = g + p;
        g = c * r - b;
      }
      if (underflow) continue;
      d[l] -= p;
      e[l] = g;
      e[m] = 0;
    }
  }
  std::sort(d.begin(), d.end());
  return d;
}

}  // namespace detail

// full symmetric eigenvalues via Householder tridiagonalization + QL;
// used for exact spectra of micro models
inline std::vector<real> symmetric_eigenvalues(const std::vector<real>& matrix, std::size_t n) {
  check(matrix.size() == n * n, "symmetric_eigenvalues: matrix size mismatch");
  std::vector<real> a(matrix);
  std::vector<real> d(n, real{0}), e(n, real{0});
  // Householder reduction (values-only variant)
  for (std::size_t i = n; i-- > 1;) {
    const std::size_t l = i - 1;
    real h = 0, scale = 0;
    if (l > 0) {
      for (std::size_t k = 0; k <= l; ++k) scale += std::fabs(a[i * n + k]);
      if (scale == 0) {
        e[i] = a[i * n + l];
      } else {
        for (std::size_t k = 0; k <= l; ++k) {
          a[i * n + k] /= scale;
          h += a[i * n + k] * a[i * n + k];
        }
        real f = a[i * n + l];
        real g = f >= 0 ? -std::sqrt(h) : std::sqrt(h);
        e[i] = scale * g;
        h -= f * g;
        a[i * n + l] = f - g;
        f = 0;
        for (std::size_t j = 0; j <= l; ++j) {
          g = 0;
          for (std::size_t k = 0; k <= j; ++k) g += a[j * n + k] * a[i * n + k];
          for (std::size_t k = j + 1; k <= l; ++k) g += a[k * n + j] * a[i * n + k];
          e[j] = g / h;
          f += e[j] * a[i * n + j];
        }
        const real hh = f / (h + h);
        for (std::size_t j = 0; j <= l; ++j) {
          f = a[i * n + j];
          e[j] = g = e[j] - hh * f;
          for (std::size_t k = 0; k <= j; ++k)
            a[j * n + k] -= f * e[k] + g * a[i * n + k];
        }
      }
    } else {
      e[i] = a[i * n + l];
    }
    d[i] = h;
  }
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i * n + i];
  std::vector<real> sub(n > 1 ? n - 1 : 0);
  for (std::size_t i = 1; i < n; ++i) sub[i - 1] = e[i];
  return detail::tridiagonal_eigenvalues(d, sub);
}

// --------------------------------------------------------------------------
// Lanczos with full reorthogonalization
// --------------------------------------------------------------------------

using LinearOperator = std::function<std::vector<real>(const std::vector<real>&)>;

struct SpectrumSummary {
  std::vector<real> top;     // descending
  std::vector<real> bottom;  // ascending
  std::size_t negative_count_estimate = 0;
  real negative_mean_magnitude = 0;
  std::size_t iterations_used = 0;
  bool breakdown = false;
};

inline SpectrumSummary lanczos_spectrum(const LinearOperator& op, std::size_t dim, std::size_t k,
                                        std::size_t iterations, std::uint64_t seed) {
  check(dim >= 1, "lanczos_spectrum: dim must be >= 1");
  check(k >= 1 && k <= iterations && iterations <= dim, "lanczos_spectrum: need k <= iterations <= dim, got k=",
        k, " iterations=", iterations, " dim=", dim);

  Rng rng(seed);
  std::vector<std::vector<real>> basis;
  std::vector<real> alpha, beta;
  std::vector<real> q(dim);
  for (auto& x : q) x = static_cast<real>(rng.normal());
  real norm = 0;
  for (real x : q) norm += x * x;
  norm = std::sqrt(norm);
  for (auto& x : q) x /= norm;
  basis.push_back(q);

  SpectrumSummary out;
  for (std::size_t j = 0; j < iterations; ++j) {
    std::vector<real> w = op(basis[j]);
    check(w.size() == dim, "lanczos_spectrum: operator returned ", w.size(), " values for dim ",
          dim);
    real a = 0;
    for (std::size_t i = 0; i < dim; ++i) a += w[i] * basis[j][i];
    alpha.push_back(a);
    if (j + 1 == iterations) break;

    for (std::size_t i = 0; i < dim; ++i) w[i] -= a * basis[j][i];
    if (j > 0)
      for (std::size_t i = 0; i < dim; ++i) w[i] -= beta[j - 1] * basis[j - 1][i];
    // full reorthogonalization, two passes
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& qb : basis) {
        real dot = 0;
        for (std::size_t i = 0; i < dim; ++i) dot += w[i] * qb[i];
        for (std::size_t i = 0; i < dim; ++i) w[i] -= dot * qb[i];
      }
    real b = 0;
    for (real x : w) b += x * x;
    b = std::sqrt(b);
    if (b < real{1e-12}) {
      out.breakdown = true;  // invariant subspace found; Ritz values are exact
      break;
    }
    beta.push_back(b);
    for (auto& x : w) x /= b;
    basis.push_back(std::move(w));
  }

  out.iterations_used = alpha.size();
  std::vector<real> ritz = detail::tridiagonal_eigenvalues(alpha, beta);

  const std::size_t kk = std::min(k, ritz.size());
  out.bottom.assign(ritz.begin(), ritz.begin() + static_cast<long>(kk));
  out.top.assign(ritz.rbegin(), ritz.rbegin() + static_cast<long>(kk));
  real neg_sum = 0;
  for (real v : ritz)
    if (v < 0) {
      ++out.negative_count_estimate;
      neg_sum += -v;
    }
  if (out.negative_count_estimate > 0)
    out.negative_mean_magnitude = neg_sum / static_cast<real>(out.negative_count_estimate);
  return out;
}

// --------------------------------------------------------------------------
// model-level glue: flattened classification loss for Hessian analysis
// --------------------------------------------------------------------------

inline std::vector<real> flatten_params(const std::vector<ParamGroup>& groups) {
  std::vector<real> flat;
  for (const auto& g : groups)
    flat.insert(flat.end(), g.tensor.values().begin(), g.tensor.values().end());
  return flat;
}

inline void write_params(std::vector<ParamGroup>& groups, const std::vector<real>& flat) {
  std::size_t pos = 0;
  for (auto& g : groups) {
    auto& vals = g.tensor.values();
    check(pos + vals.size() <= flat.size(), "write_params: flat vector too short");
    std::copy(flat.begin() + static_cast<long>(pos),
              flat.begin() + static_cast<long>(pos + vals.size()), vals.begin());
    pos += vals.size();
  }
  check(pos == flat.size(), "write_params: flat vector has ", flat.size(), " values, model wants ",
        pos);
}

// Loss-and-gradient closure over the model's (encoder + head) parameters,
// evaluated on a fixed batch with no augmentation or stochastic depth.
inline LossGradFn classification_loss_grad(VitModel& model, const Tensor& patches,
                                           const std::vector<int>& labels) {
  auto groups = std::make_shared<std::vector<ParamGroup>>(collect_param_groups(model, nullptr, true));
  return [groups, &model, patches, labels](const std::vector<real>& theta) {
    std::vector<real> saved = flatten_params(*groups);
    write_params(*groups, theta);
    GradEval result;
    {
      Tape tape;
      TapeScope scope(tape);
      TokenSequence seq = embed(model.embed, patches, model.config.class_token);
      Tensor logits = classify(model.head, encode(model, seq).tokens);
      Tensor loss = cross_entropy(logits, labels, 0);
      result.loss = loss.item();
      GradientMap grads = tape.backward(loss);
      for (const auto& g : *groups) {
        const Tensor grad = grads.grad(g.tensor);
        result.grad.insert(result.grad.end(), grad.values().begin(), grad.values().end());
      }
    }
    write_params(*groups, saved);
    return result;
  };
}

// --------------------------------------------------------------------------
// report building
// --------------------------------------------------------------------------

struct DiagConfig {
  std::size_t slice = 64;        // samples analyzed
  std::size_t batch_size = 32;
  bool spectrum = true;
  std::size_t lanczos_k = 5;
  std::size_t lanczos_iterations = 32;
  std::size_t hessian_samples = 16;  // batch used for the Hessian loss
  real hvp_eps = real{1e-4};
  std::uint64_t seed = 0;
};

struct DiagnosticsReport {
  std::vector<std::vector<real>> attention_received;  // [layer][token]
  std::vector<real> inter_token_distances;            // [layer]
  std::vector<real> feature_variances;                // [layer]
  SpectrumSummary spectrum;
  bool has_spectrum = false;
  std::size_t samples = 0;
  std::uint64_t checkpoint_digest = 0;
  std::uint64_t dataset_digest = 0;
  std::uint64_t seed = 0;
};

inline std::uint64_t model_digest(VitModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  model.visit([&](const std::string& name, Tensor& t) {
    h = fnv1a(name, h);
    h = fnv1a(t.values().data(), t.values().size() * sizeof(real), h);
  });
  return h;
}

inline DiagnosticsReport build_report(VitModel& model, const Dataset& dataset,
                                      const DiagConfig& config) {
  check(dataset.size() > 0, "build_report: empty dataset slice");
  const std::size_t depth = model.config.depth;
  const std::size_t take = std::min(config.slice, dataset.size());

  DiagnosticsReport report;
  report.samples = take;
  report.seed = config.seed;
  report.checkpoint_digest = model_digest(model);
  report.dataset_digest = dataset.digest();
  report.attention_received.assign(depth, std::vector<real>(model.config.token_count(), real{0}));
  report.inter_token_distances.assign(depth, real{0});
  report.feature_variances.assign(depth, real{0});

  const PatchGrid grid = model.config.grid();
  NoGradScope no_grad;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < take; start += config.batch_size) {
    const std::size_t count = std::min(config.batch_size, take - start);
    std::vector<Image> images;
    images.reserve(count);
    for (std::size_t i = 0; i < count; ++i) images.push_back(dataset.image(start + i));
    Tensor patches = batch_to_patches(images, grid);
    EncodeOptions opts;
    opts.record_attention = true;
    opts.capture_layers = true;
    EncodeResult result = encode(model, embed(model.embed, patches, model.config.class_token), opts);
    for (std::size_t l = 0; l < depth; ++l) {
      const std::vector<real> received = attention_column_sums(result.attention[l]);
      for (std::size_t t = 0; t < received.size(); ++t)
        report.attention_received[l][t] += received[t];
      TokenSequence layer{result.layer_tokens[l], model.config.class_token};
      report.inter_token_distances[l] += inter_token_distance(layer);
      report.feature_variances[l] += feature_variance(layer);
    }
    ++batches;
  }
  for (std::size_t l = 0; l < depth; ++l) {
    for (auto& v : report.attention_received[l]) v /= static_cast<real>(batches);
    report.inter_token_distances[l] /= static_cast<real>(batches);
    report.feature_variances[l] /= static_cast<real>(batches);
  }

  if (config.spectrum) {
    const std::size_t hess_count = std::min(config.hessian_samples, dataset.size());
    std::vector<Image> images;
    std::vector<int> labels;
    for (std::size_t i = 0; i < hess_count; ++i) {
      images.push_back(dataset.image(i));
      labels.push_back(dataset.label(i));
    }
    Tensor patches = batch_to_patches(images, grid);
    LossGradFn fn = classification_loss_grad(model, patches, labels);
    std::vector<ParamGroup> groups = collect_param_groups(model, nullptr, true);
    const std::vector<real> theta = flatten_params(groups);
    const std::size_t dim = theta.size();
    LinearOperator op = [&](const std::vector<real>& v) {
      return hessian_vector_product(fn, theta, v, config.hvp_eps);
    };
    const std::size_t iters = std::min(config.lanczos_iterations, dim);
    const std::size_t k = std::min(config.lanczos_k, iters);
    report.spectrum = lanczos_spectrum(op, dim, k, iters, derive_seed(config.seed, "lanczos"));
    report.has_spectrum = true;
  }
  return report;
}

}  // namespace ssat
