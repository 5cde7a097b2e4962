#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ssat/common.hpp"
#include "ssat/parallel.hpp"

namespace ssat {

// uninitialized-by-default storage; zeroing is explicit and parallel
namespace detail {

template <typename T>
struct UninitAllocator {
  using value_type = T;
  UninitAllocator() = default;
  template <typename U>
  UninitAllocator(const UninitAllocator<U>&) {}
  T* allocate(std::size_t n) { return std::allocator<T>().allocate(n); }
  void deallocate(T* p, std::size_t n) { std::allocator<T>().deallocate(p, n); }
  template <typename U>
  void construct(U*) noexcept {}
  template <typename U, typename A0, typename... Args>
  void construct(U* p, A0&& a0, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<A0>(a0), std::forward<Args>(args)...);
  }
  bool operator==(const UninitAllocator&) const { return true; }
  bool operator!=(const UninitAllocator&) const { return false; }
};

inline bool operator==(const std::vector<real, UninitAllocator<real>>& a,
                       const std::vector<real>& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}
inline bool operator==(const std::vector<real>& a,
                       const std::vector<real, UninitAllocator<real>>& b) {
  return b == a;
}

}  // namespace detail

using Values = std::vector<real, detail::UninitAllocator<real>>;

inline void zero_fill(Values& v) {
  real* p = v.data();
  parallel_for(v.size(), 262144, [p](std::size_t i0, std::size_t i1) {
    std::memset(p + i0, 0, (i1 - i0) * sizeof(real));
  });
}

class Tape;

// Dense n-dimensional array. Handles share storage; math ops allocate fresh
// outputs. Values are mutated in place only by single-owner code (optimizer,
// data prep) between tape resets.
class Tensor {
 public:
  struct Impl {
    Shape shape;
    std::shared_ptr<Values> data;
    bool requires_grad = false;
    int node = -1;
    std::uint64_t tape_gen = 0;
  };

  Tensor() = default;

  // storage left uninitialized; every element must be written before reads
  static Tensor uninitialized(Shape shape) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    const std::size_t n = numel_of(shape);
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::make_shared<Values>();
    t.impl_->data->resize(n);
    return t;
  }

  static Tensor zeros(Shape shape) {
    Tensor t = uninitialized(std::move(shape));
    zero_fill(*t.impl_->data);
    return t;
  }

  static Tensor full(Shape shape, real value) {
    Tensor t = uninitialized(std::move(shape));
    std::fill(t.values().begin(), t.values().end(), value);
    return t;
  }

  static Tensor from(Shape shape, Values values) {
    check(numel_of(shape) == values.size(), "Tensor::from: shape ", shape_str(shape), " wants ",
          numel_of(shape), " values, got ", values.size());
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::make_shared<Values>(std::move(values));
    return t;
  }

  static Tensor from(Shape shape, const std::vector<real>& values) {
    Values v(values.begin(), values.end());
    return from(std::move(shape), std::move(v));
  }

  static Tensor from(Shape shape, std::initializer_list<real> values) {
    return from(std::move(shape), Values(values));
  }

  static Tensor scalar(real v) { return from(Shape{}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
  std::size_t numel() const { return impl_->data->size(); }

  const Values& values() const { return *impl_->data; }
  Values& values() { return *impl_->data; }

  real item() const {
    check(numel() == 1, "Tensor::item: tensor is not scalar, shape ", shape_str(shape()));
    return (*impl_->data)[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  // deep copy, detached from any tape
  Tensor clone() const {
    Tensor t = from(impl_->shape, *impl_->data);
    return t;
  }

  // shares storage, carries no grad metadata
  Tensor detached() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  // view with a different shape over the same storage
  Tensor reshaped_view(Shape shape) const {
    check(numel_of(shape) == numel(), "reshape: cannot view ", shape_str(this->shape()), " as ",
          shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = impl_->data;
    return t;
  }

  int node() const { return impl_ ? impl_->node : -1; }
  std::uint64_t tape_gen() const { return impl_ ? impl_->tape_gen : 0; }

  // tape bookkeeping; used by Tape and the op layer
  void attach_(int node, std::uint64_t gen) const {
    impl_->node = node;
    impl_->tape_gen = gen;
  }

  std::shared_ptr<const Values> data_ptr() const { return impl_->data; }

 private:
  std::shared_ptr<Impl> impl_;
};

// Gradients keyed by tape node id; every requires_grad leaf of the traversed
// tape gets an entry of identical shape.
class GradientMap {
 public:
  void insert(int node, Tensor g) { grads_.emplace(node, std::move(g)); }

  const Tensor* find_node(int node) const {
    auto it = grads_.find(node);
    return it == grads_.end() ? nullptr : &it->second;
  }

  bool contains(const Tensor& param) const { return find_node(param.node()) != nullptr; }

  Tensor grad(const Tensor& param) const {
    const Tensor* g = find_node(param.node());
    check(g != nullptr, "GradientMap::grad: parameter (node ", param.node(),
          ") has no entry; was it used in the recorded computation?");
    return *g;
  }

  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<int, Tensor> grads_;
};

namespace detail {

struct BackwardContext {
  std::vector<Values>& bufs;
  const std::vector<Shape>& node_shapes;

  // zero-initialized on first touch
  Values& buf(int node) {
    auto& b = bufs[static_cast<std::size_t>(node)];
    if (b.empty()) {
      b.resize(numel_of(node_shapes[static_cast<std::size_t>(node)]));
      zero_fill(b);
    }
    return b;
  }
};

}  // namespace detail

// Records one training step's operations in topological order. Single-writer;
// reset() invalidates every node id issued under the previous generation.
class Tape {
 public:
  using PullFn = std::function<void(const Values& out_grad, detail::BackwardContext& ctx)>;

  Tape() : gen_(next_generation()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t generation() const { return gen_; }
  std::size_t num_records() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  void reset() {
    records_.clear();
    node_shapes_.clear();
    leaves_.clear();
    consumed_ = false;
    gen_ = next_generation();
  }

  // registers a requires_grad leaf; idempotent within a generation
  int watch(const Tensor& t) {
    check(t.requires_grad(), "Tape::watch: tensor does not require grad");
    if (t.tape_gen() == gen_ && t.node() >= 0) return t.node();
    const int id = add_node(t.shape());
    leaves_.push_back(id);
    t.attach_(id, gen_);
    return id;
  }

  int add_output(const Tensor& out) {
    const int id = add_node(out.shape());
    out.attach_(id, gen_);
    return id;
  }

  void record(std::vector<int> input_nodes, int out_node, PullFn pull) {
    records_.push_back(Record{std::move(input_nodes), out_node, std::move(pull)});
  }

  GradientMap backward(const Tensor& loss) {
    check(loss.defined() && loss.numel() == 1, "backward: loss must be a scalar tensor");
    check(loss.tape_gen() == gen_ && loss.node() >= 0,
          "backward: loss is detached from this tape (missing or stale node)");
    check(!consumed_, "backward: tape already consumed; call reset() before reusing it");
    consumed_ = true;

    std::vector<Values> bufs(node_shapes_.size());
    detail::BackwardContext ctx{bufs, node_shapes_};
    ctx.buf(loss.node())[0] = real{1};

    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      const auto& og = bufs[static_cast<std::size_t>(it->out)];
      if (og.empty()) continue;  // output never contributed to the loss
      it->pull(og, ctx);
    }

    GradientMap map;
    for (int leaf : leaves_) {
      auto& b = bufs[static_cast<std::size_t>(leaf)];
      const Shape& shape = node_shapes_[static_cast<std::size_t>(leaf)];
      if (b.empty()) {
        map.insert(leaf, Tensor::zeros(shape));
      } else {
        map.insert(leaf, Tensor::from(shape, std::move(b)));
      }
    }
    return map;
  }

 private:
  struct Record {
    std::vector<int> in;
    int out;
    PullFn pull;
  };

  int add_node(const Shape& shape) {
    node_shapes_.push_back(shape);
    return static_cast<int>(node_shapes_.size()) - 1;
  }

  // node ids are only meaningful within a generation; generations are unique
  // across all tapes so stale ids can never alias into a new tape
  static std::uint64_t next_generation() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }

  std::vector<Shape> node_shapes_;
  std::vector<Record> records_;
  std::vector<int> leaves_;
  std::uint64_t gen_;
  bool consumed_ = false;
};

namespace detail {
inline thread_local Tape* g_active_tape = nullptr;
}

inline Tape* active_tape() { return detail::g_active_tape; }

class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::g_active_tape) { detail::g_active_tape = &tape; }
  ~TapeScope() { detail::g_active_tape = prev_; }
  TapeScope(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

class NoGradScope {
 public:
  NoGradScope() : prev_(detail::g_active_tape) { detail::g_active_tape = nullptr; }
  ~NoGradScope() { detail::g_active_tape = prev_; }
  NoGradScope(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

// ---------------------------------------------------------------------------
// kernels: raw array math shared by forward ops and backward rules
// ---------------------------------------------------------------------------

namespace kernels {

// exp via the standard 2^k * poly(r) reduction, |r| <= ln2/2, degree-12
// Horner of the Taylor coefficients (~1 ulp on the softmax/GELU range).
// exp(0) is exactly 1.
inline double fast_exp(double x) {
  if (x < -708.0) return 0.0;
  if (x > 708.0) return std::exp(x);  // rare; defer to libm
  constexpr double log2e = 1.4426950408889634074;
  constexpr double ln2_hi = 6.93147180369123816490e-01;
  constexpr double ln2_lo = 1.90821492927058770002e-10;
  const double kd = std::floor(x * log2e + 0.5);
  const int k = static_cast<int>(kd);
  const double r = (x - kd * ln2_hi) - kd * ln2_lo;
  // sum_{i=0..12} r^i / i!
  double p = 2.08767569878680989792e-09;  // 1/12!
  p = p * r + 2.50521083854417187751e-08;
  p = p * r + 2.75573192239858906526e-07;
  p = p * r + 2.75573192239858906526e-06;
  p = p * r + 2.48015873015873015873e-05;
  p = p * r + 1.98412698412698412698e-04;
  p = p * r + 1.38888888888888888889e-03;
  p = p * r + 8.33333333333333333333e-03;
  p = p * r + 4.16666666666666666667e-02;
  p = p * r + 1.66666666666666666667e-01;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  if (k >= -1021 && k <= 1023) {
    const std::uint64_t bits = static_cast<std::uint64_t>(1023 + k) << 52;
    double scale;
    std::memcpy(&scale, &bits, sizeof(scale));
    return p * scale;
  }
  return std::ldexp(p, k);
}

// tanh through the exp identity: tanh(x) = sign(x) * (1 - 2/(e^{2|x|} + 1))
inline double fast_tanh(double x) {
  const double ax = std::fabs(x);
  if (ax > 20.0) return x > 0 ? 1.0 : -1.0;
  const double e = fast_exp(2.0 * ax);
  const double t = 1.0 - 2.0 / (e + 1.0);
  return x >= 0 ? t : -t;
}

#if defined(__GNUC__) || defined(__clang__)
#if !defined(SSAT_REAL_FLOAT)
#define SSAT_VECTOR_MATH 1
typedef double vmath8 __attribute__((vector_size(64)));
typedef std::int64_t vmathi8 __attribute__((vector_size(64)));

inline vmath8 vm_load(const double* p) {
  vmath8 v;
  __builtin_memcpy(&v, p, sizeof(v));
  return v;
}
inline void vm_store(double* p, vmath8 v) { __builtin_memcpy(p, &v, sizeof(v)); }

inline vmath8 vm_splat(double x) { return vmath8{x, x, x, x, x, x, x, x}; }

// 8-lane variant of fast_exp; inputs must be pre-clamped to [-708, 708]
inline vmath8 fast_exp8(vmath8 x) {
  const vmath8 y = x * vm_splat(1.4426950408889634074) + vm_splat(0.5);
  vmathi8 ki = __builtin_convertvector(y, vmathi8);  // trunc
  const vmath8 yf = __builtin_convertvector(ki, vmath8);
  ki += (yf > y);  // mask is -1 where trunc overshot; adjusts to floor
  const vmath8 kd = __builtin_convertvector(ki, vmath8);
  const vmath8 r = (x - kd * vm_splat(6.93147180369123816490e-01)) -
                   kd * vm_splat(1.90821492927058770002e-10);
  vmath8 p = vm_splat(2.08767569878680989792e-09);
  p = p * r + vm_splat(2.50521083854417187751e-08);
  p = p * r + vm_splat(2.75573192239858906526e-07);
  p = p * r + vm_splat(2.75573192239858906526e-06);
  p = p * r + vm_splat(2.48015873015873015873e-05);
  p = p * r + vm_splat(1.98412698412698412698e-04);
  p = p * r + vm_splat(1.38888888888888888889e-03);
  p = p * r + vm_splat(8.33333333333333333333e-03);
  p = p * r + vm_splat(4.16666666666666666667e-02);
  p = p * r + vm_splat(1.66666666666666666667e-01);
  p = p * r + vm_splat(0.5);
  p = p * r + vm_splat(1.0);
  p = p * r + vm_splat(1.0);
  const vmathi8 bits = (ki + 1023) << 52;
  return p * (vmath8)bits;
}
#endif
#endif

// C += A * B, row-major. 4-row strips with register-resident 8-wide
// accumulators: every output element accumulates in k order, so results are
// bitwise reproducible for any worker count.
#if defined(__GNUC__) || defined(__clang__)
#define SSAT_VECTOR_KERNELS 1
typedef real vec8 __attribute__((vector_size(8 * sizeof(real))));

inline vec8 load8(const real* p) {
  vec8 v;
  __builtin_memcpy(&v, p, sizeof(v));
  return v;
}
inline void store8(real* p, vec8 v) { __builtin_memcpy(p, &v, sizeof(v)); }
#endif

// Epilogue modes: accumulate into C, overwrite C, or overwrite with a bias
// row added (the linear-layer forward).
enum class GemmMode { accumulate, assign, assign_bias };

template <GemmMode mode = GemmMode::accumulate>
inline void gemm_strip(const real* a, const real* b, real* c, std::size_t i0, std::size_t i1,
                       std::size_t K, std::size_t N, const real* bias = nullptr) {
  std::size_t i = i0;
#if defined(SSAT_VECTOR_KERNELS)
  for (; i + 4 <= i1; i += 4) {
    const real* a0 = a + i * K;
    const real* a1 = a0 + K;
    const real* a2 = a1 + K;
    const real* a3 = a2 + K;
    std::size_t j = 0;
    for (; j + 8 <= N; j += 8) {
      vec8 acc0 = {}, acc1 = {}, acc2 = {}, acc3 = {};
      if constexpr (mode == GemmMode::assign_bias)
        acc0 = acc1 = acc2 = acc3 = load8(bias + j);
      const real* bk = b + j;
      for (std::size_t k = 0; k < K; ++k, bk += N) {
        const vec8 bv = load8(bk);
        acc0 += a0[k] * bv;
        acc1 += a1[k] * bv;
        acc2 += a2[k] * bv;
        acc3 += a3[k] * bv;
      }
      real* c0 = c + i * N + j;
      if constexpr (mode == GemmMode::accumulate) {
        store8(c0, load8(c0) + acc0);
        store8(c0 + N, load8(c0 + N) + acc1);
        store8(c0 + 2 * N, load8(c0 + 2 * N) + acc2);
        store8(c0 + 3 * N, load8(c0 + 3 * N) + acc3);
      } else {
        store8(c0, acc0);
        store8(c0 + N, acc1);
        store8(c0 + 2 * N, acc2);
        store8(c0 + 3 * N, acc3);
      }
    }
    for (; j < N; ++j) {
      const real init = mode == GemmMode::assign_bias ? bias[j] : real{0};
      real s0 = init, s1 = init, s2 = init, s3 = init;
      for (std::size_t k = 0; k < K; ++k) {
        const real bv = b[k * N + j];
        s0 += a0[k] * bv;
        s1 += a1[k] * bv;
        s2 += a2[k] * bv;
        s3 += a3[k] * bv;
      }
      if constexpr (mode == GemmMode::accumulate) {
        c[(i + 0) * N + j] += s0;
        c[(i + 1) * N + j] += s1;
        c[(i + 2) * N + j] += s2;
        c[(i + 3) * N + j] += s3;
      } else {
        c[(i + 0) * N + j] = s0;
        c[(i + 1) * N + j] = s1;
        c[(i + 2) * N + j] = s2;
        c[(i + 3) * N + j] = s3;
      }
    }
  }
  for (; i < i1; ++i) {
    const real* ai = a + i * K;
    real* ci = c + i * N;
    std::size_t j = 0;
    for (; j + 8 <= N; j += 8) {
      vec8 acc = mode == GemmMode::assign_bias ? load8(bias + j) : vec8{};
      const real* bk = b + j;
      for (std::size_t k = 0; k < K; ++k, bk += N) acc += ai[k] * load8(bk);
      if constexpr (mode == GemmMode::accumulate)
        store8(ci + j, load8(ci + j) + acc);
      else
        store8(ci + j, acc);
    }
    for (; j < N; ++j) {
      real s = mode == GemmMode::assign_bias ? bias[j] : real{0};
      for (std::size_t k = 0; k < K; ++k) s += ai[k] * b[k * N + j];
      if constexpr (mode == GemmMode::accumulate)
        ci[j] += s;
      else
        ci[j] = s;
    }
  }
#else
  for (; i < i1; ++i) {
    real* ci = c + i * N;
    if constexpr (mode == GemmMode::assign) {
      std::memset(ci, 0, N * sizeof(real));
    } else if constexpr (mode == GemmMode::assign_bias) {
      std::memcpy(ci, bias, N * sizeof(real));
    }
    const real* ai = a + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const real f = ai[k];
      const real* bk = b + k * N;
      for (std::size_t j = 0; j < N; ++j) ci[j] += f * bk[j];
    }
  }
#endif
}

template <GemmMode mode = GemmMode::accumulate>
inline void gemm(const real* a, const real* b, real* c, std::size_t M, std::size_t K,
                 std::size_t N, const real* bias = nullptr) {
  const std::size_t grain = std::max<std::size_t>(8, 262144 / std::max<std::size_t>(1, K * N));
  parallel_for(M, grain, [=](std::size_t i0, std::size_t i1) {
    gemm_strip<mode>(a, b, c, i0, i1, K, N, bias);
  });
}

// C[M,N] += A^T * B with A stored [K, M] and B stored [K, N]; the backward
// form that avoids materializing large transposed copies. The K loop runs in
// cache-resident blocks; per-element accumulation stays in ascending-k order
// (partials round-trip through C, which is exact).
inline void gemm_tn_strip(const real* a, const real* b, real* c, std::size_t i0, std::size_t i1,
                          std::size_t K, std::size_t M, std::size_t N) {
  constexpr std::size_t kBlock = 256;
  for (std::size_t k0 = 0; k0 < K; k0 += kBlock) {
    const std::size_t k1 = std::min(K, k0 + kBlock);
    std::size_t i = i0;
#if defined(SSAT_VECTOR_KERNELS)
    for (; i + 4 <= i1; i += 4) {
      std::size_t j = 0;
      for (; j + 8 <= N; j += 8) {
        vec8 acc0 = {}, acc1 = {}, acc2 = {}, acc3 = {};
        for (std::size_t k = k0; k < k1; ++k) {
          const real* ak = a + k * M + i;
          const vec8 bv = load8(b + k * N + j);
          acc0 += ak[0] * bv;
          acc1 += ak[1] * bv;
          acc2 += ak[2] * bv;
          acc3 += ak[3] * bv;
        }
        real* c0 = c + i * N + j;
        store8(c0, load8(c0) + acc0);
        store8(c0 + N, load8(c0 + N) + acc1);
        store8(c0 + 2 * N, load8(c0 + 2 * N) + acc2);
        store8(c0 + 3 * N, load8(c0 + 3 * N) + acc3);
      }
      for (; j < N; ++j) {
        real s0 = 0, s1 = 0, s2 = 0, s3 = 0;
        for (std::size_t k = k0; k < k1; ++k) {
          const real* ak = a + k * M + i;
          const real bv = b[k * N + j];
          s0 += ak[0] * bv;
          s1 += ak[1] * bv;
          s2 += ak[2] * bv;
          s3 += ak[3] * bv;
        }
        c[(i + 0) * N + j] += s0;
        c[(i + 1) * N + j] += s1;
        c[(i + 2) * N + j] += s2;
        c[(i + 3) * N + j] += s3;
      }
    }
#endif
    for (; i < i1; ++i) {
      real* ci = c + i * N;
      for (std::size_t k = k0; k < k1; ++k) {
        const real f = a[k * M + i];
        const real* bk = b + k * N;
        for (std::size_t j = 0; j < N; ++j) ci[j] += f * bk[j];
      }
    }
  }
}

inline void gemm_tn(const real* a, const real* b, real* c, std::size_t K, std::size_t M,
                    std::size_t N) {
  const std::size_t grain = std::max<std::size_t>(8, 262144 / std::max<std::size_t>(1, K * N));
  parallel_for(M, grain,
               [=](std::size_t i0, std::size_t i1) { gemm_tn_strip(a, b, c, i0, i1, K, M, N); });
}

inline void transpose2d(const real* src, real* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

inline Shape swapped(const Shape& s, std::size_t i, std::size_t j) {
  Shape out = s;
  std::swap(out[i], out[j]);
  return out;
}

// dst[..., b, ..., a, ...] (+)= src[..., a, ..., b, ...]: any single axis swap
// decomposes into [outer, A, mid, B, inner] with contiguous inner runs
inline void swap_axes_copy(const real* src, real* dst, const Shape& src_shape, std::size_t ax1,
                           std::size_t ax2, bool accumulate) {
  if (ax1 == ax2) {
    const std::size_t n = numel_of(src_shape);
    if (accumulate)
      for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
    else
      std::memcpy(dst, src, n * sizeof(real));
    return;
  }
  const std::size_t lo = std::min(ax1, ax2), hi = std::max(ax1, ax2);
  std::size_t outer = 1, mid = 1, inner = 1;
  for (std::size_t i = 0; i < lo; ++i) outer *= src_shape[i];
  for (std::size_t i = lo + 1; i < hi; ++i) mid *= src_shape[i];
  for (std::size_t i = hi + 1; i < src_shape.size(); ++i) inner *= src_shape[i];
  const std::size_t A = src_shape[lo], B = src_shape[hi];

  parallel_for(outer * A, std::max<std::size_t>(1, 16384 / std::max<std::size_t>(1, mid * B * inner)),
               [=](std::size_t w0, std::size_t w1) {
                 for (std::size_t w = w0; w < w1; ++w) {
                   const std::size_t o = w / A;
                   const std::size_t a = w % A;
                   for (std::size_t m = 0; m < mid; ++m)
                     for (std::size_t b = 0; b < B; ++b) {
                       const real* s = src + (((o * A + a) * mid + m) * B + b) * inner;
                       real* d = dst + (((o * B + b) * mid + m) * A + a) * inner;
                       if (accumulate)
                         for (std::size_t i = 0; i < inner; ++i) d[i] += s[i];
                       else if (inner == 1)
                         *d = *s;
                       else
                         std::memcpy(d, s, inner * sizeof(real));
                     }
                 }
               });
}

inline void softmax_rows(const real* x, real* y, std::size_t rows, std::size_t cols) {
  parallel_for(rows, std::max<std::size_t>(1, 8192 / std::max<std::size_t>(1, cols)),
               [=](std::size_t r0, std::size_t r1) {
                 for (std::size_t r = r0; r < r1; ++r) {
                   const real* xr = x + r * cols;
                   real* yr = y + r * cols;
                   real mx = xr[0];
                   for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
                   real sum = 0;
                   std::size_t c = 0;
#if defined(SSAT_VECTOR_MATH)
                   const vmath8 vmx = vm_splat(static_cast<double>(mx));
                   const vmath8 lo = vm_splat(-708.0);
                   for (; c + 8 <= cols; c += 8) {
                     vmath8 arg = vm_load(xr + c) - vmx;
                     arg = arg < lo ? lo : arg;  // lanewise clamp
                     const vmath8 e = fast_exp8(arg);
                     vm_store(yr + c, e);
                     for (int t = 0; t < 8; ++t) sum += e[t];
                   }
#endif
                   for (; c < cols; ++c) {
                     yr[c] = static_cast<real>(fast_exp(static_cast<double>(xr[c] - mx)));
                     sum += yr[c];
                   }
                   const real inv = real{1} / sum;
                   for (std::size_t cc = 0; cc < cols; ++cc) yr[cc] *= inv;
                 }
               });
}

inline void log_softmax_rows(const real* x, real* y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const real* xr = x + r * cols;
    real* yr = y + r * cols;
    real mx = xr[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    real sum = 0;
    for (std::size_t c = 0; c < cols; ++c)
      sum += static_cast<real>(fast_exp(static_cast<double>(xr[c] - mx)));
    const real lse = mx + std::log(sum);
    for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] - lse;
  }
}

// GELU, tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
inline constexpr real kGeluC = real{0.7978845608028654};  // sqrt(2/pi)
inline constexpr real kGeluA = real{0.044715};

inline void gelu_forward(const real* x, real* y, real* tanh_out, std::size_t n) {
  parallel_for(n, 32768, [=](std::size_t i0, std::size_t i1) {
    std::size_t i = i0;
#if defined(SSAT_VECTOR_MATH)
    const vmath8 c1 = vm_splat(static_cast<double>(kGeluC));
    const vmath8 c2 = vm_splat(static_cast<double>(kGeluA));
    const vmath8 half = vm_splat(0.5);
    const vmath8 one = vm_splat(1.0);
    const vmath8 two = vm_splat(2.0);
    const vmath8 cap = vm_splat(40.0);  // tanh saturates well below exp overflow
    for (; i + 8 <= i1; i += 8) {
      const vmath8 v = vm_load(x + i);
      const vmath8 u = c1 * (v + c2 * v * v * v);
      vmath8 au = u < vmath8{} ? -u : u;
      const vmath8 du = two * au;
      const vmath8 e = fast_exp8(du < cap ? du : cap);
      vmath8 t = one - two / (e + one);
      t = u < vmath8{} ? -t : t;
      vm_store(tanh_out + i, t);
      vm_store(y + i, half * v * (one + t));
    }
#endif
    for (; i < i1; ++i) {
      const real v = x[i];
      const real t =
          static_cast<real>(fast_tanh(static_cast<double>(kGeluC * (v + kGeluA * v * v * v))));
      tanh_out[i] = t;
      y[i] = real{0.5} * v * (real{1} + t);
    }
  });
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// op layer
// ---------------------------------------------------------------------------

enum class OpKind {
  matmul,
  linear,
  add,
  mul,
  scale,
  scale_rows,
  transpose,
  reshape,
  concat,
  index_select,
  scatter_tokens,
  prepend_token,
  softmax,
  log_softmax,
  layer_norm,
  gelu,
  exp,
  log,
  power,
  sum,
  mean,
};

inline constexpr std::array<OpKind, 21> all_op_kinds = {
    OpKind::matmul,       OpKind::linear,         OpKind::add,           OpKind::mul,
    OpKind::scale,        OpKind::scale_rows,     OpKind::transpose,     OpKind::reshape,
    OpKind::concat,       OpKind::index_select,   OpKind::scatter_tokens, OpKind::prepend_token,
    OpKind::softmax,      OpKind::log_softmax,    OpKind::layer_norm,    OpKind::gelu,
    OpKind::exp,          OpKind::log,            OpKind::power,         OpKind::sum,
    OpKind::mean,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::matmul: return "matmul";
    case OpKind::linear: return "linear";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::scale_rows: return "scale_rows";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::concat: return "concat";
    case OpKind::index_select: return "index_select";
    case OpKind::scatter_tokens: return "scatter_tokens";
    case OpKind::prepend_token: return "prepend_token";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::gelu: return "gelu";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::power: return "power";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
  }
  return "?";
}

namespace detail {

// Collects differentiable inputs and finalizes recording for one op.
struct OpRecorder {
  Tape* tape = active_tape();
  std::vector<int> in_nodes;
  bool any = false;

  void input(const Tensor& t) {
    if (!tape) return;
    if (t.requires_grad()) {
      in_nodes.push_back(tape->watch(t));
      any = true;
    } else {
      in_nodes.push_back(-1);
    }
  }

  bool recording() const { return tape != nullptr && any; }

  int node(std::size_t i) const { return in_nodes[i]; }

  void finish(const Tensor& out, Tape::PullFn pull) {
    if (!recording()) return;
    const_cast<Tensor&>(out).set_requires_grad(true);
    const int oid = tape->add_output(out);
    tape->record(std::move(in_nodes), oid, std::move(pull));
  }
};

inline bool is_shape_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline std::size_t normalize_axis(long axis, std::size_t rank, const char* op) {
  long a = axis;
  if (a < 0) a += static_cast<long>(rank);
  check(a >= 0 && a < static_cast<long>(rank), op, ": axis ", axis, " out of range for rank ", rank);
  return static_cast<std::size_t>(a);
}

}  // namespace detail

// --- elementwise add/mul with trailing-shape broadcast --------------------

namespace detail {

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  const bool b_small = is_shape_suffix(a.shape(), b.shape());
  const bool a_small = !b_small && is_shape_suffix(b.shape(), a.shape());
  check(b_small || a_small, name, ": shapes ", shape_str(a.shape()), " and ", shape_str(b.shape()),
        " are not equal or leading-broadcastable");
  const Tensor& big = b_small ? a : b;
  const Tensor& small = b_small ? b : a;
  const std::size_t sn = std::max<std::size_t>(1, small.numel());
  const std::size_t n = big.numel();
  const bool equal_shape = sn == n;

  Tensor out = Tensor::uninitialized(big.shape());
  {
    const real* pb = big.values().data();
    const real* ps = small.values().data();
    real* po = out.values().data();
    if (equal_shape) {
      parallel_for(n, 65536, [=](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i)
          po[i] = b_small ? fwd(pb[i], ps[i]) : fwd(ps[i], pb[i]);
      });
    } else {
      const std::size_t blocks = n / sn;
      parallel_for(blocks, std::max<std::size_t>(1, 65536 / sn),
                   [=](std::size_t k0, std::size_t k1) {
                     for (std::size_t k = k0; k < k1; ++k) {
                       const real* pbk = pb + k * sn;
                       real* pok = po + k * sn;
                       for (std::size_t i = 0; i < sn; ++i)
                         pok[i] = b_small ? fwd(pbk[i], ps[i]) : fwd(ps[i], pbk[i]);
                     }
                   });
    }
  }

  OpRecorder rec;
  rec.input(a);
  rec.input(b);
  if (rec.recording()) {
    auto av = a.data_ptr();
    auto bv = b.data_ptr();
    const int na = rec.node(0), nb = rec.node(1);
    rec.finish(out, [=](const Values& og, BackwardContext& ctx) {
      const real* pa = av->data();
      const real* pb2 = bv->data();
      const real* g = og.data();
      const std::size_t blocks = n / sn;
      auto pull_one = [&](int node, bool wrt_a, bool operand_small) {
        if (node < 0) return;
        auto& buf = ctx.buf(node);
        real* dst = buf.data();
        if (!operand_small) {
          parallel_for(blocks, std::max<std::size_t>(1, 65536 / sn),
                       [=](std::size_t k0, std::size_t k1) {
                         for (std::size_t k = k0; k < k1; ++k)
                           for (std::size_t i = 0; i < sn; ++i) {
                             const std::size_t gi = k * sn + i;
                             dst[gi] += g[gi] * bwd(wrt_a, pa[b_small ? gi : i],
                                                    pb2[b_small ? i : gi]);
                           }
                       });
        } else {
          // gradient of the broadcast operand: per-coordinate sums over the
          // leading blocks; each coordinate is owned by one chunk
          parallel_for(sn, 512, [=](std::size_t i0, std::size_t i1) {
            for (std::size_t i = i0; i < i1; ++i) {
              real acc = 0;
              for (std::size_t k = 0; k < blocks; ++k) {
                const std::size_t gi = k * sn + i;
                acc += g[gi] * bwd(wrt_a, pa[b_small ? gi : i], pb2[b_small ? i : gi]);
              }
              dst[i] += acc;
            }
          });
        }
      };
      if (equal_shape) {
        if (na >= 0) {
          auto& buf = ctx.buf(na);
          real* dst = buf.data();
          parallel_for(n, 65536, [=](std::size_t i0, std::size_t i1) {
            for (std::size_t i = i0; i < i1; ++i) dst[i] += g[i] * bwd(true, pa[i], pb2[i]);
          });
        }
        if (nb >= 0) {
          auto& buf = ctx.buf(nb);
          real* dst = buf.data();
          parallel_for(n, 65536, [=](std::size_t i0, std::size_t i1) {
            for (std::size_t i = i0; i < i1; ++i) dst[i] += g[i] * bwd(false, pa[i], pb2[i]);
          });
        }
      } else {
        pull_one(na, true, a_small);
        pull_one(nb, false, b_small);
      }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "add", a, b, [](real x, real y) { return x + y; },
      [](bool, real, real) { return real{1}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "mul", a, b, [](real x, real y) { return x * y; },
      [](bool wrt_a, real x, real y) { return wrt_a ? y : x; });
}

inline Tensor scale(const Tensor& a, real c) {
  Tensor out = Tensor::uninitialized(a.shape());
  const real* pa = a.values().data();
  real* po = out.values().data();
  const std::size_t n = a.numel();
  parallel_for(n, 65536, [=](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) po[i] = pa[i] * c;
  });
  detail::OpRecorder rec;
  rec.input(a);
  if (rec.recording()) {
    const int na = rec.node(0);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      auto& buf = ctx.buf(na);
      real* dst = buf.data();
      const real* g = og.data();
      parallel_for(og.size(), 65536, [=](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) dst[i] += g[i] * c;
      });
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, real{-1})); }

// out[lead, ...] = x[lead, ...] * factors[lead]; factors carry no gradient
inline Tensor scale_rows(const Tensor& a, const std::vector<real>& factors) {
  check(!factors.empty() && a.numel() % factors.size() == 0, "scale_rows: ", factors.size(),
        " factors do not divide ", shape_str(a.shape()));
  const std::size_t block = a.numel() / factors.size();
  Tensor out = Tensor::uninitialized(a.shape());
  auto fv = std::make_shared<std::vector<real>>(factors);
  {
    const real* pa = a.values().data();
    real* po = out.values().data();
    const real* pf = fv->data();
    parallel_for(factors.size(), std::max<std::size_t>(1, 65536 / block),
                 [=](std::size_t k0, std::size_t k1) {
                   for (std::size_t k = k0; k < k1; ++k)
                     for (std::size_t i = 0; i < block; ++i)
                       po[k * block + i] = pa[k * block + i] * pf[k];
                 });
  }
  detail::OpRecorder rec;
  rec.input(a);
  if (rec.recording()) {
    const int na = rec.node(0);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      auto& buf = ctx.buf(na);
      real* dst = buf.data();
      const real* g = og.data();
      const real* pf = fv->data();
      parallel_for(fv->size(), std::max<std::size_t>(1, 65536 / block),
                   [=](std::size_t k0, std::size_t k1) {
                     for (std::size_t k = k0; k < k1; ++k)
                       for (std::size_t i = 0; i < block; ++i)
                         dst[k * block + i] += g[k * block + i] * pf[k];
                   });
    });
  }
  return out;
}

// --- unary elementwise ------------------------------------------------------

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(const Tensor& a, Fwd fwd, Bwd bwd_from_in_out) {
  Tensor out = Tensor::uninitialized(a.shape());
  const real* pa = a.values().data();
  real* po = out.values().data();
  const std::size_t n = a.numel();
  parallel_for(n, 65536, [=](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) po[i] = fwd(pa[i]);
  });
  OpRecorder rec;
  rec.input(a);
  if (rec.recording()) {
    auto av = a.data_ptr();
    auto ov = out.data_ptr();
    const int na = rec.node(0);
    rec.finish(out, [=](const Values& og, BackwardContext& ctx) {
      auto& buf = ctx.buf(na);
      for (std::size_t i = 0; i < og.size(); ++i)
        buf[i] += og[i] * bwd_from_in_out((*av)[i], (*ov)[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor exp(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](real x) { return std::log(x); }, [](real x, real) { return real{1} / x; });
}

inline Tensor power(const Tensor& a, real p) {
  return detail::unary_elementwise(
      a, [p](real x) { return std::pow(x, p); },
      [p](real x, real) { return p == real{2} ? real{2} * x : p * std::pow(x, p - real{1}); });
}

inline Tensor gelu(const Tensor& a) {
  const std::size_t n = a.numel();
  Tensor out = Tensor::uninitialized(a.shape());
  auto tanh_saved = std::make_shared<std::vector<real>>(n);
  kernels::gelu_forward(a.values().data(), out.values().data(), tanh_saved->data(), n);
  detail::OpRecorder rec;
  rec.input(a);
  if (rec.recording()) {
    auto av = a.data_ptr();
    const int na = rec.node(0);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      auto& buf = ctx.buf(na);
      real* dst = buf.data();
      const real* g = og.data();
      const real* x = av->data();
      const real* th = tanh_saved->data();
      parallel_for(og.size(), 32768, [=](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
          const real v = x[i];
          const real t = th[i];
          const real du = kernels::kGeluC * (real{1} + real{3} * kernels::kGeluA * v * v);
          const real d = real{0.5} * (real{1} + t) + real{0.5} * v * (real{1} - t * t) * du;
          dst[i] += g[i] * d;
        }
      });
    });
  }
  return out;
}

// --- reductions -------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  real acc = 0;
  for (real v : a.values()) acc += v;
  Tensor out = Tensor::scalar(acc);
  detail::OpRecorder rec;
  rec.input(a);
  if (rec.recording()) {
    const int na = rec.node(0);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      auto& buf = ctx.buf(na);
      const real g = og[0];
      for (auto& v : buf) v += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  const real inv = real{1} / static_cast<real>(a.numel());
  real acc = 0;
  for (real v : a.values()) acc += v;
  Tensor out = Tensor::scalar(acc * inv);
  detail::OpRecorder rec;
  rec.input(a);
  if (rec.recording()) {
    const int na = rec.node(0);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      auto& buf = ctx.buf(na);
      const real g = og[0] * inv;
      for (auto& v : buf) v += g;
    });
  }
  return out;
}

// --- shape ops ---------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  Tensor out = a.detached().reshaped_view(std::move(shape));
  detail::OpRecorder rec;
  rec.input(a);
  if (rec.recording()) {
    const int na = rec.node(0);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      auto& buf = ctx.buf(na);
      real* dst = buf.data();
      const real* g = og.data();
      parallel_for(og.size(), 65536, [=](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) dst[i] += g[i];
      });
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a, long axis1, long axis2) {
  const std::size_t r = a.rank();
  const std::size_t i = detail::normalize_axis(axis1, r, "transpose");
  const std::size_t j = detail::normalize_axis(axis2, r, "transpose");
  Tensor out = Tensor::uninitialized(kernels::swapped(a.shape(), i, j));
  kernels::swap_axes_copy(a.values().data(), out.values().data(), a.shape(), i, j, false);
  detail::OpRecorder rec;
  rec.input(a);
  if (rec.recording()) {
    const int na = rec.node(0);
    const Shape oshape = out.shape();
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      kernels::swap_axes_copy(og.data(), ctx.buf(na).data(), oshape, i, j, true);
    });
  }
  return out;
}

inline Tensor concat(const Tensor& a, const Tensor& b, long axis) {
  check(a.rank() == b.rank(), "concat: rank mismatch ", shape_str(a.shape()), " vs ",
        shape_str(b.shape()));
  const std::size_t ax = detail::normalize_axis(axis, a.rank(), "concat");
  for (std::size_t d = 0; d < a.rank(); ++d) {
    if (d != ax)
      check(a.dim(d) == b.dim(d), "concat: shapes ", shape_str(a.shape()), " and ",
            shape_str(b.shape()), " differ outside axis ", ax);
  }
  Shape oshape = a.shape();
  oshape[ax] += b.dim(ax);
  std::size_t inner = 1;
  for (std::size_t d = ax + 1; d < a.rank(); ++d) inner *= a.dim(d);
  const std::size_t ablock = a.dim(ax) * inner;
  const std::size_t bblock = b.dim(ax) * inner;
  const std::size_t lead = a.numel() / std::max<std::size_t>(1, ablock);

  Tensor out = Tensor::uninitialized(oshape);
  {
    const real* pa = a.values().data();
    const real* pb = b.values().data();
    real* po = out.values().data();
    for (std::size_t l = 0; l < lead; ++l) {
      std::memcpy(po + l * (ablock + bblock), pa + l * ablock, ablock * sizeof(real));
      std::memcpy(po + l * (ablock + bblock) + ablock, pb + l * bblock, bblock * sizeof(real));
    }
  }
  detail::OpRecorder rec;
  rec.input(a);
  rec.input(b);
  if (rec.recording()) {
    const int na = rec.node(0), nb = rec.node(1);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      for (std::size_t l = 0; l < lead; ++l) {
        const real* src = og.data() + l * (ablock + bblock);
        if (na >= 0) {
          auto& buf = ctx.buf(na);
          for (std::size_t i = 0; i < ablock; ++i) buf[l * ablock + i] += src[i];
        }
        if (nb >= 0) {
          auto& buf = ctx.buf(nb);
          for (std::size_t i = 0; i < bblock; ++i) buf[l * bblock + i] += src[ablock + i];
        }
      }
    });
  }
  return out;
}

// select rows along the token axis (second-to-last); indices may repeat
inline Tensor index_select(const Tensor& a, const std::vector<std::size_t>& indices) {
  check(a.rank() >= 2, "index_select: rank must be >= 2, got ", shape_str(a.shape()));
  const std::size_t n = a.dim(a.rank() - 2);
  const std::size_t d = a.dim(a.rank() - 1);
  for (std::size_t idx : indices)
    check(idx < n, "index_select: index ", idx, " out of range for ", shape_str(a.shape()));
  Shape oshape = a.shape();
  oshape[a.rank() - 2] = indices.size();
  const std::size_t lead = a.numel() / (n * d);

  Tensor out = Tensor::uninitialized(oshape);
  {
    const real* pa = a.values().data();
    real* po = out.values().data();
    for (std::size_t l = 0; l < lead; ++l)
      for (std::size_t i = 0; i < indices.size(); ++i)
        std::memcpy(po + (l * indices.size() + i) * d, pa + (l * n + indices[i]) * d,
                    d * sizeof(real));
  }
  detail::OpRecorder rec;
  rec.input(a);
  if (rec.recording()) {
    const int na = rec.node(0);
    auto idx = std::make_shared<std::vector<std::size_t>>(indices);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      auto& buf = ctx.buf(na);
      for (std::size_t l = 0; l < lead; ++l)
        for (std::size_t i = 0; i < idx->size(); ++i) {
          const real* src = og.data() + (l * idx->size() + i) * d;
          real* dst = buf.data() + (l * n + (*idx)[i]) * d;
          for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
        }
    });
  }
  return out;
}

// place visible tokens at their original positions, fill token elsewhere
inline Tensor scatter_tokens(const Tensor& visible, const Tensor& fill,
                             const std::vector<std::size_t>& positions, std::size_t total) {
  check(visible.rank() >= 2, "scatter_tokens: visible rank must be >= 2");
  const std::size_t v = visible.dim(visible.rank() - 2);
  const std::size_t d = visible.dim(visible.rank() - 1);
  check(fill.rank() == 1 && fill.dim(0) == d, "scatter_tokens: fill token shape ",
        shape_str(fill.shape()), " does not match channel dim ", d);
  check(positions.size() == v, "scatter_tokens: ", positions.size(), " positions for ", v,
        " visible tokens");
  std::vector<bool> seen(total, false);
  for (std::size_t p : positions) {
    check(p < total, "scatter_tokens: position ", p, " out of range ", total);
    check(!seen[p], "scatter_tokens: duplicate position ", p);
    seen[p] = true;
  }
  Shape oshape = visible.shape();
  oshape[oshape.size() - 2] = total;
  const std::size_t lead = visible.numel() / std::max<std::size_t>(1, v * d);

  Tensor out = Tensor::uninitialized(oshape);
  {
    const real* pv = visible.values().data();
    const real* pf = fill.values().data();
    real* po = out.values().data();
    for (std::size_t l = 0; l < lead; ++l) {
      for (std::size_t t = 0; t < total; ++t)
        std::memcpy(po + (l * total + t) * d, pf, d * sizeof(real));
      for (std::size_t i = 0; i < v; ++i)
        std::memcpy(po + (l * total + positions[i]) * d, pv + (l * v + i) * d, d * sizeof(real));
    }
  }
  detail::OpRecorder rec;
  rec.input(visible);
  rec.input(fill);
  if (rec.recording()) {
    const int nv = rec.node(0), nf = rec.node(1);
    auto pos = std::make_shared<std::vector<std::size_t>>(positions);
    auto seen_mask = std::make_shared<std::vector<bool>>(seen);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      if (nv >= 0) {
        auto& buf = ctx.buf(nv);
        for (std::size_t l = 0; l < lead; ++l)
          for (std::size_t i = 0; i < pos->size(); ++i) {
            const real* src = og.data() + (l * total + (*pos)[i]) * d;
            real* dst = buf.data() + (l * pos->size() + i) * d;
            for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
          }
      }
      if (nf >= 0) {
        auto& buf = ctx.buf(nf);
        for (std::size_t l = 0; l < lead; ++l)
          for (std::size_t t = 0; t < total; ++t) {
            if ((*seen_mask)[t]) continue;
            const real* src = og.data() + (l * total + t) * d;
            for (std::size_t c = 0; c < d; ++c) buf[c] += src[c];
          }
      }
    });
  }
  return out;
}

inline Tensor prepend_token(const Tensor& tokens, const Tensor& tok) {
  check(tokens.rank() >= 2, "prepend_token: tokens rank must be >= 2");
  const std::size_t n = tokens.dim(tokens.rank() - 2);
  const std::size_t d = tokens.dim(tokens.rank() - 1);
  check(tok.rank() == 1 && tok.dim(0) == d, "prepend_token: token shape ", shape_str(tok.shape()),
        " does not match channel dim ", d);
  Shape oshape = tokens.shape();
  oshape[oshape.size() - 2] = n + 1;
  const std::size_t lead = tokens.numel() / std::max<std::size_t>(1, n * d);

  Tensor out = Tensor::uninitialized(oshape);
  {
    const real* pt = tokens.values().data();
    const real* pk = tok.values().data();
    real* po = out.values().data();
    for (std::size_t l = 0; l < lead; ++l) {
      std::memcpy(po + l * (n + 1) * d, pk, d * sizeof(real));
      std::memcpy(po + (l * (n + 1) + 1) * d, pt + l * n * d, n * d * sizeof(real));
    }
  }
  detail::OpRecorder rec;
  rec.input(tokens);
  rec.input(tok);
  if (rec.recording()) {
    const int nt = rec.node(0), nk = rec.node(1);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      for (std::size_t l = 0; l < lead; ++l) {
        const real* src = og.data() + l * (n + 1) * d;
        if (nk >= 0) {
          auto& buf = ctx.buf(nk);
          for (std::size_t c = 0; c < d; ++c) buf[c] += src[c];
        }
        if (nt >= 0) {
          auto& buf = ctx.buf(nt);
          real* dst = buf.data() + l * n * d;
          for (std::size_t i = 0; i < n * d; ++i) dst[i] += src[d + i];
        }
      }
    });
  }
  return out;
}

// --- matmul / linear ---------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() >= 2 && b.rank() >= 2, "matmul: inputs must have rank >= 2, got ",
        shape_str(a.shape()), " and ", shape_str(b.shape()));
  const std::size_t M = a.dim(a.rank() - 2);
  const std::size_t K = a.dim(a.rank() - 1);
  const bool b_broadcast = b.rank() == 2 && a.rank() >= 2;
  if (b_broadcast) {
    check(b.dim(0) == K, "matmul: inner dimensions disagree for shapes ", shape_str(a.shape()),
          " and ", shape_str(b.shape()));
  } else {
    check(a.rank() == b.rank(), "matmul: rank mismatch for shapes ", shape_str(a.shape()), " and ",
          shape_str(b.shape()));
    check(b.dim(b.rank() - 2) == K, "matmul: inner dimensions disagree for shapes ",
          shape_str(a.shape()), " and ", shape_str(b.shape()));
    for (std::size_t d = 0; d + 2 < a.rank(); ++d)
      check(a.dim(d) == b.dim(d), "matmul: batch dimensions disagree for shapes ",
            shape_str(a.shape()), " and ", shape_str(b.shape()));
  }
  const std::size_t N = b.dim(b.rank() - 1);
  Shape oshape = a.shape();
  oshape[oshape.size() - 1] = N;
  Tensor out = Tensor::uninitialized(oshape);

  const std::size_t slices = a.numel() / (M * K);
  const real* pa = a.values().data();
  const real* pb = b.values().data();
  real* po = out.values().data();
  if (b_broadcast) {
    kernels::gemm<kernels::GemmMode::assign>(pa, pb, po, slices * M, K, N);
  } else {
    parallel_for(slices, 1, [=](std::size_t s0, std::size_t s1) {
      for (std::size_t s = s0; s < s1; ++s)
        kernels::gemm_strip<kernels::GemmMode::assign>(pa + s * M * K, pb + s * K * N,
                                                       po + s * M * N, 0, M, K, N);
    });
  }

  detail::OpRecorder rec;
  rec.input(a);
  rec.input(b);
  if (rec.recording()) {
    auto av = a.data_ptr();
    auto bv = b.data_ptr();
    const int na = rec.node(0), nb = rec.node(1);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      if (b_broadcast) {
        const std::size_t S = slices * M;
        if (na >= 0) {
          // dA = dC * B^T
          std::vector<real> bt(K * N);
          kernels::transpose2d(bv->data(), bt.data(), K, N);
          kernels::gemm(og.data(), bt.data(), ctx.buf(na).data(), S, N, K);
        }
        if (nb >= 0) kernels::gemm_tn(av->data(), og.data(), ctx.buf(nb).data(), S, K, N);
      } else {
        if (na >= 0) {
          auto& buf = ctx.buf(na);
          parallel_for(slices, 1, [&](std::size_t s0, std::size_t s1) {
            std::vector<real> bt(N * K);
            for (std::size_t s = s0; s < s1; ++s) {
              kernels::transpose2d(bv->data() + s * K * N, bt.data(), K, N);
              kernels::gemm_strip(og.data() + s * M * N, bt.data(), buf.data() + s * M * K, 0, M, N,
                                  K);
            }
          });
        }
        if (nb >= 0) {
          auto& buf = ctx.buf(nb);
          parallel_for(slices, 1, [&](std::size_t s0, std::size_t s1) {
            std::vector<real> at(K * M);
            for (std::size_t s = s0; s < s1; ++s) {
              kernels::transpose2d(av->data() + s * M * K, at.data(), M, K);
              kernels::gemm_strip(at.data(), og.data() + s * M * N, buf.data() + s * K * N, 0, K, M,
                                  N);
            }
          });
        }
      }
    });
  }
  return out;
}

// y = x * W^T + bias, over the last dim; the workhorse of every layer
inline Tensor linear_op(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check(weight.rank() == 2, "linear: weight must be rank 2, got ", shape_str(weight.shape()));
  const std::size_t in = weight.dim(1);
  const std::size_t out_dim = weight.dim(0);
  check(x.rank() >= 1 && x.dim(x.rank() - 1) == in, "linear: input ", shape_str(x.shape()),
        " does not match weight ", shape_str(weight.shape()));
  check(bias.rank() == 1 && bias.dim(0) == out_dim, "linear: bias ", shape_str(bias.shape()),
        " does not match weight ", shape_str(weight.shape()));
  Shape oshape = x.shape();
  oshape[oshape.size() - 1] = out_dim;
  const std::size_t S = x.numel() / in;

  Tensor out = Tensor::uninitialized(oshape);
  {
    std::vector<real> wt(in * out_dim);
    kernels::transpose2d(weight.values().data(), wt.data(), out_dim, in);
    kernels::gemm<kernels::GemmMode::assign_bias>(x.values().data(), wt.data(),
                                                  out.values().data(), S, in, out_dim,
                                                  bias.values().data());
  }

  detail::OpRecorder rec;
  rec.input(x);
  rec.input(weight);
  rec.input(bias);
  if (rec.recording()) {
    auto xv = x.data_ptr();
    auto wv = weight.data_ptr();
    const int nx = rec.node(0), nw = rec.node(1), nb = rec.node(2);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      if (nx >= 0) kernels::gemm(og.data(), wv->data(), ctx.buf(nx).data(), S, out_dim, in);
      if (nw >= 0)
        kernels::gemm_tn(og.data(), xv->data(), ctx.buf(nw).data(), S, out_dim, in);
      if (nb >= 0) {
        auto& buf = ctx.buf(nb);
        for (std::size_t s = 0; s < S; ++s) {
          const real* src = og.data() + s * out_dim;
          for (std::size_t o = 0; o < out_dim; ++o) buf[o] += src[o];
        }
      }
    });
  }
  return out;
}

// --- softmax family ----------------------------------------------------------

inline Tensor softmax(const Tensor& a) {
  check(a.rank() >= 1, "softmax: input must have rank >= 1");
  const std::size_t cols = a.dim(a.rank() - 1);
  const std::size_t rows = a.numel() / cols;
  Tensor out = Tensor::uninitialized(a.shape());
  kernels::softmax_rows(a.values().data(), out.values().data(), rows, cols);
  detail::OpRecorder rec;
  rec.input(a);
  if (rec.recording()) {
    auto ov = out.data_ptr();
    const int na = rec.node(0);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      auto& buf = ctx.buf(na);
      const real* y = ov->data();
      real* dst = buf.data();
      const real* g = og.data();
      parallel_for(rows, std::max<std::size_t>(1, 4096 / std::max<std::size_t>(1, cols)),
                   [=](std::size_t r0, std::size_t r1) {
                     for (std::size_t r = r0; r < r1; ++r) {
                       const real* yr = y + r * cols;
                       const real* gr = g + r * cols;
                       real dot = 0;
                       for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
                       real* br = dst + r * cols;
                       for (std::size_t c = 0; c < cols; ++c) br[c] += yr[c] * (gr[c] - dot);
                     }
                   });
    });
  }
  return out;
}

inline Tensor log_softmax(const Tensor& a) {
  check(a.rank() >= 1, "log_softmax: input must have rank >= 1");
  const std::size_t cols = a.dim(a.rank() - 1);
  const std::size_t rows = a.numel() / cols;
  Tensor out = Tensor::uninitialized(a.shape());
  kernels::log_softmax_rows(a.values().data(), out.values().data(), rows, cols);
  detail::OpRecorder rec;
  rec.input(a);
  if (rec.recording()) {
    auto ov = out.data_ptr();
    const int na = rec.node(0);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      auto& buf = ctx.buf(na);
      for (std::size_t r = 0; r < rows; ++r) {
        const real* lr = ov->data() + r * cols;
        const real* gr = og.data() + r * cols;
        real gsum = 0;
        for (std::size_t c = 0; c < cols; ++c) gsum += gr[c];
        real* br = buf.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) br[c] += gr[c] - std::exp(lr[c]) * gsum;
      }
    });
  }
  return out;
}

// fused per-row normalization over the last dim, population variance
inline Tensor layer_norm_op(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps) {
  check(eps > 0, "layer_norm: eps must be positive");
  const std::size_t d = x.dim(x.rank() - 1);
  check(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
        "layer_norm: gamma/beta shape must be [", d, "]");
  const std::size_t rows = x.numel() / d;
  Tensor out = Tensor::uninitialized(x.shape());
  auto xhat = std::make_shared<std::vector<real>>(x.numel());
  auto rstd = std::make_shared<std::vector<real>>(rows);
  {
    const real* px = x.values().data();
    const real* pg = gamma.values().data();
    const real* pb = beta.values().data();
    real* po = out.values().data();
    real* ph = xhat->data();
    real* pr = rstd->data();
    parallel_for(rows, std::max<std::size_t>(1, 4096 / std::max<std::size_t>(1, d)),
                 [=](std::size_t r0, std::size_t r1) {
                   for (std::size_t r = r0; r < r1; ++r) {
                     const real* xr = px + r * d;
                     real mu = 0;
                     for (std::size_t c = 0; c < d; ++c) mu += xr[c];
                     mu /= static_cast<real>(d);
                     real var = 0;
                     for (std::size_t c = 0; c < d; ++c) {
                       const real dv = xr[c] - mu;
                       var += dv * dv;
                     }
                     var /= static_cast<real>(d);
                     const real rs = real{1} / std::sqrt(var + eps);
                     pr[r] = rs;
                     real* hr = ph + r * d;
                     real* yr = po + r * d;
                     for (std::size_t c = 0; c < d; ++c) {
                       hr[c] = (xr[c] - mu) * rs;
                       yr[c] = pg[c] * hr[c] + pb[c];
                     }
                   }
                 });
  }
  detail::OpRecorder rec;
  rec.input(x);
  rec.input(gamma);
  rec.input(beta);
  if (rec.recording()) {
    auto gv = gamma.data_ptr();
    const int nx = rec.node(0), ng = rec.node(1), nb = rec.node(2);
    rec.finish(out, [=](const Values& og, detail::BackwardContext& ctx) {
      const real* h = xhat->data();
      const real* rs = rstd->data();
      const real* g = og.data();
      if (nx >= 0) {
        auto& buf = ctx.buf(nx);
        real* dst = buf.data();
        const real* pg = gv->data();
        parallel_for(rows, std::max<std::size_t>(1, 4096 / std::max<std::size_t>(1, d)),
                     [=](std::size_t r0, std::size_t r1) {
                       for (std::size_t r = r0; r < r1; ++r) {
                         const real* gr = g + r * d;
                         const real* hr = h + r * d;
                         real m1 = 0, m2 = 0;
                         for (std::size_t c = 0; c < d; ++c) {
                           const real t = gr[c] * pg[c];
                           m1 += t;
                           m2 += t * hr[c];
                         }
                         m1 /= static_cast<real>(d);
                         m2 /= static_cast<real>(d);
                         real* br = dst + r * d;
                         for (std::size_t c = 0; c < d; ++c)
                           br[c] += rs[r] * (gr[c] * pg[c] - m1 - hr[c] * m2);
                       }
                     });
      }
      if (ng >= 0) {
        auto& buf = ctx.buf(ng);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < d; ++c) buf[c] += g[r * d + c] * h[r * d + c];
      }
      if (nb >= 0) {
        auto& buf = ctx.buf(nb);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < d; ++c) buf[c] += g[r * d + c];
      }
    });
  }
  return out;
}

// --- generic dispatcher -------------------------------------------------------

struct OpAttrs {
  real scalar = 0;       // scale factor, power exponent, layer_norm eps
  long axis_a = 0;       // transpose/concat axes
  long axis_b = 1;
  Shape shape;           // reshape target
  std::vector<std::size_t> indices;  // index_select / scatter_tokens
  std::size_t count = 0;             // scatter_tokens total length
  std::vector<real> weights;         // scale_rows per-lead factors
};

inline Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {}) {
  const auto want = [&](std::size_t n) {
    check(inputs.size() == n, op_name(kind), ": expected ", n, " inputs, got ", inputs.size());
  };
  switch (kind) {
    case OpKind::matmul: want(2); return matmul(inputs[0], inputs[1]);
    case OpKind::linear: want(3); return linear_op(inputs[0], inputs[1], inputs[2]);
    case OpKind::add: want(2); return add(inputs[0], inputs[1]);
    case OpKind::mul: want(2); return mul(inputs[0], inputs[1]);
    case OpKind::scale: want(1); return scale(inputs[0], attrs.scalar);
    case OpKind::scale_rows: want(1); return scale_rows(inputs[0], attrs.weights);
    case OpKind::transpose: want(1); return transpose(inputs[0], attrs.axis_a, attrs.axis_b);
    case OpKind::reshape: want(1); return reshape(inputs[0], attrs.shape);
    case OpKind::concat: want(2); return concat(inputs[0], inputs[1], attrs.axis_a);
    case OpKind::index_select: want(1); return index_select(inputs[0], attrs.indices);
    case OpKind::scatter_tokens:
      want(2);
      return scatter_tokens(inputs[0], inputs[1], attrs.indices, attrs.count);
    case OpKind::prepend_token: want(2); return prepend_token(inputs[0], inputs[1]);
    case OpKind::softmax: want(1); return softmax(inputs[0]);
    case OpKind::log_softmax: want(1); return log_softmax(inputs[0]);
    case OpKind::layer_norm:
      want(3);
      return layer_norm_op(inputs[0], inputs[1], inputs[2], attrs.scalar);
    case OpKind::gelu: want(1); return gelu(inputs[0]);
    case OpKind::exp: want(1); return exp(inputs[0]);
    case OpKind::log: want(1); return log(inputs[0]);
    case OpKind::power: want(1); return power(inputs[0], attrs.scalar);
    case OpKind::sum: want(1); return sum(inputs[0]);
    case OpKind::mean: want(1); return mean(inputs[0]);
  }
  fail("apply: unknown op_kind ", static_cast<int>(kind));
}

// ---------------------------------------------------------------------------
// finite-difference oracle
// ---------------------------------------------------------------------------

// max over coordinates of |analytic - central difference| / max(1, |analytic|)
inline real finite_difference_check(const std::function<Tensor(const Tensor&)>& fn,
                                    const Tensor& point, real eps) {
  check(eps > 0, "finite_difference_check: epsilon must be positive");
  Tensor x = point.clone();
  x.set_requires_grad(true);

  std::vector<real> analytic(point.numel(), real{0});
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = fn(x);
    check(loss.numel() == 1, "finite_difference_check: function must return a scalar");
    check(std::isfinite(static_cast<double>(loss.item())),
          "finite_difference_check: function value is not finite");
    GradientMap grads = tape.backward(loss);
    if (const Tensor* g = grads.find_node(x.node()))
      analytic.assign(g->values().begin(), g->values().end());
  }

  NoGradScope no_grad;
  real worst = 0;
  Tensor probe = point.clone();
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const real saved = probe.values()[i];
    probe.values()[i] = saved + eps;
    const real up = fn(probe).item();
    probe.values()[i] = saved - eps;
    const real down = fn(probe).item();
    probe.values()[i] = saved;
    check(std::isfinite(static_cast<double>(up)) && std::isfinite(static_cast<double>(down)),
          "finite_difference_check: function value is not finite");
    const real fd = (up - down) / (2 * eps);
    const real err = std::fabs(analytic[i] - fd) / std::max(real{1}, std::fabs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace ssat
