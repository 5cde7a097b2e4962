#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ssat/rng.hpp"
#include "ssat/vit.hpp"

namespace ssat {

struct Dataset {
  std::vector<Image> images;
  std::size_t class_count = 0;
  std::string split = "train";

  std::size_t size() const { return images.size(); }
  const Image& image(std::size_t i) const { return images[i]; }

  // all label access goes through here; lets tests assert that
  // self-supervised phases never touch labels
  int label(std::size_t i) const {
    ++label_reads_;
    return images[i].label;
  }
  std::size_t label_reads() const { return label_reads_; }

  std::uint64_t digest() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const Image& img : images) {
      h = fnv1a(img.pixels.data(), img.pixels.size() * sizeof(real), h);
      h = fnv1a(&img.label, sizeof(img.label), h);
    }
    return h;
  }

 private:
  mutable std::size_t label_reads_ = 0;
};

// --------------------------------------------------------------------------
// loaders
// --------------------------------------------------------------------------

// CIFAR-10 binary layout: records of 1 label byte + 3072 pixel bytes
// (32x32 R plane, G plane, B plane)
inline Dataset load_cifar_binary(const std::string& path, std::size_t class_count = 10) {
  constexpr std::size_t kSide = 32;
  constexpr std::size_t kRecord = 1 + 3 * kSide * kSide;
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "load_cifar_binary: cannot open ", path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  check(!bytes.empty() && bytes.size() % kRecord == 0, "load_cifar_binary: ", path, " holds ",
        bytes.size(), " bytes, not a multiple of the ", kRecord, "-byte record");
  Dataset ds;
  ds.class_count = class_count;
  const std::size_t count = bytes.size() / kRecord;
  ds.images.reserve(count);
  for (std::size_t r = 0; r < count; ++r) {
    const unsigned char* rec = bytes.data() + r * kRecord;
    check(rec[0] < class_count, "load_cifar_binary: record ", r, " label byte ", int(rec[0]),
          " >= class count ", class_count);
    Image img = Image::blank(kSide, kSide, 3);
    img.label = rec[0];
    for (std::size_t i = 0; i < 3 * kSide * kSide; ++i)
      img.pixels[i] = static_cast<real>(rec[1 + i]) / real{255};
    ds.images.push_back(std::move(img));
  }
  return ds;
}

// Generic raw-image directory: header.txt "H W C K", labels.txt (one index
// per line), img_<index>.raw files of C*H*W bytes, planar, channel-major.
inline Dataset load_raw_directory(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream header(fs::path(dir) / "header.txt");
  check(header.good(), "load_raw_directory: missing header.txt in ", dir);
  std::size_t h = 0, w = 0, c = 0, k = 0;
  header >> h >> w >> c >> k;
  check(h > 0 && w > 0 && c > 0 && k > 0, "load_raw_directory: malformed header.txt in ", dir);

  std::ifstream labels(fs::path(dir) / "labels.txt");
  check(labels.good(), "load_raw_directory: missing labels.txt in ", dir);
  Dataset ds;
  ds.class_count = k;
  long label = 0;
  std::size_t index = 0;
  while (labels >> label) {
    check(label >= 0 && static_cast<std::size_t>(label) < k, "load_raw_directory: label ", label,
          " out of range ", k, " at image ", index);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%06zu.raw", index);
    std::ifstream raw(fs::path(dir) / name, std::ios::binary);
    check(raw.good(), "load_raw_directory: missing ", name);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(raw)),
                                     std::istreambuf_iterator<char>());
    check(bytes.size() == h * w * c, "load_raw_directory: ", name, " holds ", bytes.size(),
          " bytes, expected ", h * w * c);
    Image img = Image::blank(h, w, c);
    img.label = static_cast<int>(label);
    for (std::size_t i = 0; i < bytes.size(); ++i)
      img.pixels[i] = static_cast<real>(bytes[i]) / real{255};
    ds.images.push_back(std::move(img));
    ++index;
  }
  check(!ds.images.empty(), "load_raw_directory: no labeled images in ", dir);
  return ds;
}

// --------------------------------------------------------------------------
// synthetic dataset: class-conditioned filled shapes with jitter and noise
// --------------------------------------------------------------------------

namespace detail {

inline bool inside_shape(std::size_t klass, real dx, real dy, real r) {
  const real ax = std::fabs(dx), ay = std::fabs(dy);
  switch (klass % 6) {
    case 0: return ax <= r && ay <= r;                                     // square
    case 1: return dx * dx + dy * dy <= r * r;                             // circle
    case 2: return (ax <= r / 3 || ay <= r / 3) && ax <= r && ay <= r;     // cross
    case 3: return dy >= -r && dy <= r && ax <= (r - dy) * real{0.5};      // triangle
    case 4: {                                                              // ring
      const real d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= (r * real{0.55}) * (r * real{0.55});
    }
    default: return ax + ay <= r;                                          // diamond
  }
}

}  // namespace detail

inline Dataset generate_synthetic(std::size_t classes, std::size_t per_class,
                                  std::size_t image_size, std::uint64_t seed) {
  check(classes >= 2 && classes <= 6, "generate_synthetic: classes must be in [2, 6], got ",
        classes);
  check(per_class >= 1 && image_size >= 8, "generate_synthetic: degenerate spec");
  Dataset ds;
  ds.class_count = classes;
  const std::size_t total = classes * per_class;
  ds.images.reserve(total);
  const real s = static_cast<real>(image_size);
  for (std::size_t idx = 0; idx < total; ++idx) {
    const std::size_t klass = idx % classes;  // interleaved for easy splitting
    Rng rng(derive_seed(seed, "synthetic", idx));

    Image img = Image::blank(image_size, image_size, 3);
    img.label = static_cast<int>(klass);
    real bg[3], fg[3];
    for (int c = 0; c < 3; ++c) bg[c] = static_cast<real>(rng.uniform(0.05, 0.38));
    for (int c = 0; c < 3; ++c) fg[c] = static_cast<real>(rng.uniform(0.48, 0.97));
    const real cx = s * real{0.5} + static_cast<real>(rng.uniform(-0.20, 0.20)) * s;
    const real cy = s * real{0.5} + static_cast<real>(rng.uniform(-0.20, 0.20)) * s;
    const real r = static_cast<real>(rng.uniform(0.17, 0.31)) * s;

    for (std::size_t y = 0; y < image_size; ++y)
      for (std::size_t x = 0; x < image_size; ++x) {
        const bool in = detail::inside_shape(klass, static_cast<real>(x) + real{0.5} - cx,
                                             static_cast<real>(y) + real{0.5} - cy, r);
        for (std::size_t c = 0; c < 3; ++c) {
          real v = (in ? fg[c] : bg[c]) + static_cast<real>(rng.normal(0.0, 0.09));
          img.at(c, y, x) = std::clamp(v, real{0}, real{1});
        }
      }
    ds.images.push_back(std::move(img));
  }
  return ds;
}

// --------------------------------------------------------------------------
// resampling primitives
// --------------------------------------------------------------------------

namespace detail {

// Catmull-Rom cubic kernel (a = -0.5)
inline real cubic_weight(real t) {
  constexpr real a = real{-0.5};
  t = std::fabs(t);
  if (t <= 1) return ((a + 2) * t - (a + 3)) * t * t + 1;
  if (t < 2) return (((t - 5) * t + 8) * t - 4) * a;
  return 0;
}

inline real sample_bicubic(const Image& img, std::size_t c, real sy, real sx) {
  const long iy = static_cast<long>(std::floor(sy));
  const long ix = static_cast<long>(std::floor(sx));
  real acc = 0;
  for (long m = -1; m <= 2; ++m) {
    const long y = std::clamp(iy + m, 0L, static_cast<long>(img.height) - 1);
    const real wy = cubic_weight(sy - static_cast<real>(iy + m));
    for (long n = -1; n <= 2; ++n) {
      const long x = std::clamp(ix + n, 0L, static_cast<long>(img.width) - 1);
      acc += wy * cubic_weight(sx - static_cast<real>(ix + n)) *
             img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
    }
  }
  return std::clamp(acc, real{0}, real{1});
}

// bilinear with zero outside the frame
inline real sample_bilinear_zero(const Image& img, std::size_t c, real sy, real sx) {
  const long y0 = static_cast<long>(std::floor(sy));
  const long x0 = static_cast<long>(std::floor(sx));
  const real fy = sy - static_cast<real>(y0);
  const real fx = sx - static_cast<real>(x0);
  real acc = 0;
  for (long dy = 0; dy <= 1; ++dy)
    for (long dx = 0; dx <= 1; ++dx) {
      const long y = y0 + dy;
      const long x = x0 + dx;
      if (y < 0 || x < 0 || y >= static_cast<long>(img.height) ||
          x >= static_cast<long>(img.width))
        continue;
      const real w = (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
      acc += w * img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
    }
  // rounding in the weights can push a fraction of an ulp past the range
  return std::clamp(acc, real{0}, real{1});
}

}  // namespace detail

// --------------------------------------------------------------------------
// individual transforms
// --------------------------------------------------------------------------

inline Image hflip(const Image& img) {
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

// crop the continuous rect (top, left, h, w) and resize back to the full
// frame with bicubic sampling
inline Image crop_resize(const Image& img, real top, real left, real crop_h, real crop_w) {
  Image out = Image::blank(img.height, img.width, img.channels);
  out.label = img.label;
  const real sy = crop_h / static_cast<real>(img.height);
  const real sx = crop_w / static_cast<real>(img.width);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        const real src_y = (static_cast<real>(y) + real{0.5}) * sy - real{0.5} + top;
        const real src_x = (static_cast<real>(x) + real{0.5}) * sx - real{0.5} + left;
        out.at(c, y, x) = detail::sample_bicubic(img, c, src_y, src_x);
      }
  return out;
}

inline Image rotate(const Image& img, real degrees) {
  const real rad = degrees * real{3.14159265358979323846} / 180;
  const real cs = std::cos(rad), sn = std::sin(rad);
  const real cy = static_cast<real>(img.height - 1) / 2;
  const real cx = static_cast<real>(img.width - 1) / 2;
  Image out = Image::blank(img.height, img.width, img.channels);
  out.label = img.label;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        const real dy = static_cast<real>(y) - cy;
        const real dx = static_cast<real>(x) - cx;
        out.at(c, y, x) = detail::sample_bilinear_zero(img, c, cy + cs * dy - sn * dx,
                                                       cx + sn * dy + cs * dx);
      }
  return out;
}

inline Image translate(const Image& img, real shift_y, real shift_x) {
  Image out = Image::blank(img.height, img.width, img.channels);
  out.label = img.label;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        out.at(c, y, x) = detail::sample_bilinear_zero(img, c, static_cast<real>(y) - shift_y,
                                                       static_cast<real>(x) - shift_x);
  return out;
}

inline Image brightness(const Image& img, real factor) {
  Image out = img;
  for (auto& v : out.pixels) v = std::clamp(v * factor, real{0}, real{1});
  return out;
}

inline Image contrast(const Image& img, real factor) {
  real mean = 0;
  for (real v : img.pixels) mean += v;
  mean /= static_cast<real>(img.pixels.size());
  Image out = img;
  for (auto& v : out.pixels) v = std::clamp((v - mean) * factor + mean, real{0}, real{1});
  return out;
}

// keep the top `bits` bits of the 8-bit quantization
inline Image posterize(const Image& img, int bits) {
  check(bits >= 1 && bits <= 8, "posterize: bits must be in [1, 8]");
  const unsigned mask = ~((1u << (8 - bits)) - 1) & 0xffu;
  Image out = img;
  for (auto& v : out.pixels) {
    const unsigned q = static_cast<unsigned>(std::lround(v * 255)) & mask;
    v = static_cast<real>(q) / real{255};
  }
  return out;
}

// --------------------------------------------------------------------------
// augmentation pipeline
// --------------------------------------------------------------------------

struct AugmentConfig {
  bool random_resized_crop = true;
  double crop_scale_min = 0.08;
  double crop_scale_max = 1.0;
  double crop_ratio_min = 0.75;
  double crop_ratio_max = 4.0 / 3.0;

  double hflip_prob = 0.5;

  // reduced RandAugment: brightness, contrast, rotate, translate, posterize
  int randaugment_ops = 2;
  double randaugment_magnitude = 9.0 / 30.0;

  double erase_prob = 0.25;
  double erase_area_min = 0.02;
  double erase_area_max = 1.0 / 3.0;
  double erase_aspect_min = 0.3;

  static AugmentConfig none() {
    AugmentConfig c;
    c.random_resized_crop = false;
    c.hflip_prob = 0;
    c.randaugment_ops = 0;
    c.erase_prob = 0;
    return c;
  }
};

namespace detail {

inline Image apply_randaugment_op(const Image& img, int op, double magnitude, Rng& rng) {
  const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
  switch (op) {
    case 0: return brightness(img, static_cast<real>(1.0 + sign * 0.9 * magnitude));
    case 1: return contrast(img, static_cast<real>(1.0 + sign * 0.9 * magnitude));
    case 2: return rotate(img, static_cast<real>(sign * 30.0 * magnitude));
    case 3: {
      const real shift = static_cast<real>(sign * 0.45 * magnitude) *
                         static_cast<real>(std::min(img.height, img.width));
      return rng.bernoulli(0.5) ? translate(img, shift, 0) : translate(img, 0, shift);
    }
    default: {
      const int bits = 8 - static_cast<int>(std::lround(4.0 * magnitude * 30.0 / 9.0));
      return posterize(img, std::clamp(bits, 4, 8));
    }
  }
}

}  // namespace detail

inline Image augment(const Image& img, const AugmentConfig& cfg, Rng& rng) {
  Image out = img;

  if (cfg.random_resized_crop) {
    const real H = static_cast<real>(img.height), W = static_cast<real>(img.width);
    real top = 0, left = 0, ch = H, cw = W;
    for (int attempt = 0; attempt < 10; ++attempt) {
      const real area = static_cast<real>(rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max)) * H * W;
      const real ratio = std::exp(
          static_cast<real>(rng.uniform(std::log(cfg.crop_ratio_min), std::log(cfg.crop_ratio_max))));
      const real w = std::sqrt(area * ratio);
      const real h = std::sqrt(area / ratio);
      if (w <= W && h <= H) {
        ch = h;
        cw = w;
        top = static_cast<real>(rng.uniform01()) * (H - h);
        left = static_cast<real>(rng.uniform01()) * (W - w);
        break;
      }
    }
    out = crop_resize(out, top, left, ch, cw);
  }

  if (cfg.hflip_prob > 0 && rng.bernoulli(cfg.hflip_prob)) out = hflip(out);

  for (int i = 0; i < cfg.randaugment_ops; ++i) {
    const int op = static_cast<int>(rng.uniform_below(5));
    out = detail::apply_randaugment_op(out, op, cfg.randaugment_magnitude, rng);
  }

  if (cfg.erase_prob > 0 && rng.bernoulli(cfg.erase_prob)) {
    const real H = static_cast<real>(img.height), W = static_cast<real>(img.width);
    for (int attempt = 0; attempt < 10; ++attempt) {
      const real area = static_cast<real>(rng.uniform(cfg.erase_area_min, cfg.erase_area_max)) * H * W;
      const real aspect = std::exp(static_cast<real>(
          rng.uniform(std::log(cfg.erase_aspect_min), std::log(1.0 / cfg.erase_aspect_min))));
      const std::size_t eh = static_cast<std::size_t>(std::sqrt(area / aspect));
      const std::size_t ew = static_cast<std::size_t>(std::sqrt(area * aspect));
      if (eh == 0 || ew == 0 || eh > img.height || ew > img.width) continue;
      const std::size_t y0 = rng.uniform_below(img.height - eh + 1);
      const std::size_t x0 = rng.uniform_below(img.width - ew + 1);
      for (std::size_t c = 0; c < out.channels; ++c)
        for (std::size_t y = y0; y < y0 + eh; ++y)
          for (std::size_t x = x0; x < x0 + ew; ++x)
            out.at(c, y, x) = static_cast<real>(rng.uniform01());
      break;
    }
  }

  out.label = img.label;
  return out;
}

// --------------------------------------------------------------------------
// mixup
// --------------------------------------------------------------------------

struct MixupResult {
  std::vector<Image> images;
  Tensor soft_labels;  // [B, K], rows sum to 1
  real lambda_mix = 1;
  std::vector<std::size_t> pairing;
};

// deterministic core: pixels and one-hot rows mixed as lm*a + (1-lm)*b
// against the given pairing
inline MixupResult mixup_apply(const std::vector<Image>& batch, const Tensor& one_hot_labels,
                               real lambda_mix, std::vector<std::size_t> pairing) {
  check(one_hot_labels.rank() == 2 && one_hot_labels.dim(0) == batch.size(),
        "mixup: label shape ", shape_str(one_hot_labels.shape()), " does not match batch ",
        batch.size());
  check(pairing.size() == batch.size(), "mixup: pairing size mismatch");
  MixupResult result;
  result.lambda_mix = lambda_mix;
  result.pairing = std::move(pairing);

  const real lm = lambda_mix;
  result.images.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Image& a = batch[i];
    const Image& b = batch[result.pairing[i]];
    Image mixed = a;
    for (std::size_t p = 0; p < mixed.pixels.size(); ++p)
      mixed.pixels[p] = lm * a.pixels[p] + (1 - lm) * b.pixels[p];
    result.images.push_back(std::move(mixed));
  }
  result.soft_labels = Tensor::zeros(one_hot_labels.shape());
  const std::size_t k = one_hot_labels.dim(1);
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t c = 0; c < k; ++c)
      result.soft_labels.values()[i * k + c] =
          lm * one_hot_labels.values()[i * k + c] +
          (1 - lm) * one_hot_labels.values()[result.pairing[i] * k + c];
  return result;
}

inline MixupResult mixup(const std::vector<Image>& batch, const Tensor& one_hot_labels,
                         real alpha, Rng& rng) {
  check(alpha > 0, "mixup: alpha must be positive");
  check(batch.size() >= 2, "mixup: batch must hold at least 2 samples");
  const real lm = static_cast<real>(rng.beta(alpha, alpha));
  std::vector<std::size_t> pairing(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) pairing[i] = i;
  rng.shuffle(pairing);
  return mixup_apply(batch, one_hot_labels, lm, std::move(pairing));
}

// --------------------------------------------------------------------------
// perspective perturbation (the perturbed-evaluation transform)
// --------------------------------------------------------------------------

namespace detail {

// solve the 8x8 system mapping unit corners to displaced corners
inline std::array<real, 8> homography(const std::array<std::array<real, 2>, 4>& src,
                                      const std::array<std::array<real, 2>, 4>& dst) {
  real m[8][9] = {};
  for (int i = 0; i < 4; ++i) {
    const real x = src[i][0], y = src[i][1];
    const real u = dst[i][0], v = dst[i][1];
    real* r0 = m[2 * i];
    real* r1 = m[2 * i + 1];
    r0[0] = x; r0[1] = y; r0[2] = 1; r0[6] = -u * x; r0[7] = -u * y; r0[8] = u;
    r1[3] = x; r1[4] = y; r1[5] = 1; r1[6] = -v * x; r1[7] = -v * y; r1[8] = v;
  }
  for (int col = 0; col < 8; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 8; ++r)
      if (std::fabs(m[r][col]) > std::fabs(m[pivot][col])) pivot = r;
    check(std::fabs(m[pivot][col]) > 1e-12, "perspective: degenerate corner configuration");
    std::swap(m[col], m[pivot]);
    for (int r = 0; r < 8; ++r) {
      if (r == col) continue;
      const real f = m[r][col] / m[col][col];
      for (int cc = col; cc < 9; ++cc) m[r][cc] -= f * m[col][cc];
    }
  }
  std::array<real, 8> out;
  for (int i = 0; i < 8; ++i) out[i] = m[i][8] / m[i][i];
  return out;
}

}  // namespace detail

// the four displaced corners used by perspective_perturb, exposed so the
// displacement bound is testable
inline std::array<std::array<real, 2>, 4> perspective_corners(std::size_t h, std::size_t w,
                                                              real strength, Rng& rng) {
  const real bound = strength * static_cast<real>(std::min(h, w)) / 4;
  const real hh = static_cast<real>(h - 1), ww = static_cast<real>(w - 1);
  std::array<std::array<real, 2>, 4> corners = {{{0, 0}, {ww, 0}, {0, hh}, {ww, hh}}};
  for (auto& c : corners) {
    c[0] += static_cast<real>(rng.uniform(-bound, bound));
    c[1] += static_cast<real>(rng.uniform(-bound, bound));
  }
  return corners;
}

inline Image perspective_perturb(const Image& img, real strength, Rng& rng) {
  check(strength >= 0 && strength <= 1, "perspective_perturb: strength must be in [0, 1], got ",
        strength);
  if (strength == 0) return img;

  const real hh = static_cast<real>(img.height - 1), ww = static_cast<real>(img.width - 1);
  const std::array<std::array<real, 2>, 4> out_corners = {{{0, 0}, {ww, 0}, {0, hh}, {ww, hh}}};
  const auto src_corners = perspective_corners(img.height, img.width, strength, rng);
  const auto hmat = detail::homography(out_corners, src_corners);

  Image out = Image::blank(img.height, img.width, img.channels);
  out.label = img.label;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const real xf = static_cast<real>(x), yf = static_cast<real>(y);
      const real denom = hmat[6] * xf + hmat[7] * yf + 1;
      const real sx = (hmat[0] * xf + hmat[1] * yf + hmat[2]) / denom;
      const real sy = (hmat[3] * xf + hmat[4] * yf + hmat[5]) / denom;
      for (std::size_t c = 0; c < img.channels; ++c)
        out.at(c, y, x) = detail::sample_bilinear_zero(img, c, sy, sx);
    }
  return out;
}

}  // namespace ssat
