#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "pbrl/errors.hpp"
#include "pbrl/rng.hpp"
#include "pbrl/thread_pool.hpp"

namespace pbrl {

/// Counts exported kernel launches.  A vectorized population update issues the
/// same number of launches regardless of the population size; a sequential
/// loop issues N times as many.  Benchmarks read this to verify that claim.
inline std::atomic<std::uint64_t>& kernel_invocations() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

inline void bump_kernel_count() {
  kernel_invocations().fetch_add(1, std::memory_order_relaxed);
}

/// Dense row-major array whose first axis indexes population members.
/// Values, not references: copying a PopTensor copies its storage, and all
/// kernels are pure functions, so tensors are safe to share across threads.
template <typename T>
struct PopTensor {
  std::vector<std::size_t> shape;  // axis 0 = population size N
  std::vector<T> data;

  PopTensor() = default;
  PopTensor(std::vector<std::size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {}

  static PopTensor zeros(std::vector<std::size_t> s) {
    PopTensor t;
    t.shape = std::move(s);
    t.data.assign(numel_of(t.shape), T(0));
    return t;
  }

  static PopTensor full(std::vector<std::size_t> s, T value) {
    PopTensor t;
    t.shape = std::move(s);
    t.data.assign(numel_of(t.shape), value);
    return t;
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t members() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t member_stride() const { return shape.empty() ? 1 : numel() / shape[0]; }

  T* member_ptr(std::size_t i) { return data.data() + i * member_stride(); }
  const T* member_ptr(std::size_t i) const { return data.data() + i * member_stride(); }

  /// Reinterprets the extents in place; element count must not change.
  PopTensor& set_shape(std::vector<std::size_t> s) {
    if (numel_of(s) != numel()) {
      throw ShapeError("set_shape: element count mismatch between " + shape_str(shape) +
                       " and " + shape_str(s));
    }
    shape = std::move(s);
    return *this;
  }

  static std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
  }
};

template <typename T>
bool same_shape(const PopTensor<T>& a, const PopTensor<T>& b) {
  return a.shape == b.shape;
}

template <typename T>
void require_same_shape(const PopTensor<T>& a, const PopTensor<T>& b, const char* op) {
  if (!same_shape(a, b)) {
    throw ShapeError(std::string(op) + ": shape mismatch between " +
                     PopTensor<T>::shape_str(a.shape) + " and " + PopTensor<T>::shape_str(b.shape));
  }
}

template <typename T>
bool all_finite(const PopTensor<T>& x) {
  for (T v : x.data) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

namespace detail {

/// Member-parallel driver.  Each member is handled by exactly one lane with a
/// fixed loop order inside, so chunking never changes the result.
template <typename Fn>
void for_members(std::size_t n, std::size_t work_per_member, Fn&& fn,
                 std::size_t min_total_work = 65536) {
  // Dispatch costs a few microseconds per launch; only kernels with real
  // arithmetic behind them go to the pool.
  if (n <= 1 || n * work_per_member < min_total_work) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  ThreadPool::global().parallel_for(n, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) fn(i);
  });
}

/// Deterministic parallel map over a flat range.
template <typename Fn>
void for_range(std::size_t count, Fn&& fn, std::size_t min_total_work = 65536) {
  if (count < min_total_work) {
    fn(std::size_t{0}, count);
    return;
  }
  ThreadPool::global().parallel_for(count, std::forward<Fn>(fn));
}

}  // namespace detail

/// out[n,b,o] = sum_i x[n,b,i] * w[n,i,o]
template <typename T>
PopTensor<T> pop_matmul(const PopTensor<T>& x, const PopTensor<T>& w) {
  if (x.shape.size() != 3 || w.shape.size() != 3 || x.shape[0] != w.shape[0] ||
      x.shape[2] != w.shape[1]) {
    throw ShapeError("pop_matmul: incompatible shapes " + PopTensor<T>::shape_str(x.shape) +
                     " and " + PopTensor<T>::shape_str(w.shape));
  }
  bump_kernel_count();
  const std::size_t n = x.shape[0], rows = x.shape[1], in = x.shape[2], out = w.shape[2];
  PopTensor<T> y;
  y.shape = {n, rows, out};
  y.data.resize(n * rows * out);
  detail::for_members(n, rows * in * out, [&](std::size_t m) {
    const T* xm = x.member_ptr(m);
    const T* wm = w.member_ptr(m);
    T* ym = y.member_ptr(m);
    for (std::size_t b = 0; b < rows; ++b) {
      const T* xr = xm + b * in;
      T* yr = ym + b * out;
      {
        const T x0 = xr[0];
        for (std::size_t o = 0; o < out; ++o) yr[o] = x0 * wm[o];
      }
      for (std::size_t i = 1; i < in; ++i) {
        const T xi = xr[i];
        const T* wr = wm + i * out;
        for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
      }
    }
  });
  return y;
}

/// grad_x[n] = grad_out[n] * w[n]^T ;  grad_w[n] = x[n]^T * grad_out[n]
template <typename T>
std::pair<PopTensor<T>, PopTensor<T>> pop_matmul_backward(const PopTensor<T>& grad_out,
                                                          const PopTensor<T>& x,
                                                          const PopTensor<T>& w) {
  if (grad_out.shape.size() != 3 || grad_out.shape[0] != x.shape[0] ||
      grad_out.shape[1] != x.shape[1] || grad_out.shape[2] != w.shape[2] ||
      x.shape[2] != w.shape[1]) {
    throw ShapeError("pop_matmul_backward: incompatible shapes " +
                     PopTensor<T>::shape_str(grad_out.shape) + " and " +
                     PopTensor<T>::shape_str(x.shape) + " / " + PopTensor<T>::shape_str(w.shape));
  }
  bump_kernel_count();
  const std::size_t n = x.shape[0], rows = x.shape[1], in = x.shape[2], out = w.shape[2];
  PopTensor<T> gx = PopTensor<T>::zeros(x.shape);
  PopTensor<T> gw = PopTensor<T>::zeros(w.shape);
  detail::for_members(n, rows * in * out, [&](std::size_t m) {
    const T* gm = grad_out.member_ptr(m);
    const T* xm = x.member_ptr(m);
    const T* wm = w.member_ptr(m);
    T* gxm = gx.member_ptr(m);
    T* gwm = gw.member_ptr(m);
    for (std::size_t b = 0; b < rows; ++b) {
      const T* gr = gm + b * out;
      const T* xr = xm + b * in;
      T* gxr = gxm + b * in;
      for (std::size_t i = 0; i < in; ++i) {
        const T* wr = wm + i * out;
        T acc = 0;
        for (std::size_t o = 0; o < out; ++o) acc += gr[o] * wr[o];
        gxr[i] = acc;
        const T xi = xr[i];
        T* gwr = gwm + i * out;
        for (std::size_t o = 0; o < out; ++o) gwr[o] += xi * gr[o];
      }
    }
  });
  return {std::move(gx), std::move(gw)};
}

/// Broadcast add of a per-member bias row over the batch axis.
template <typename T>
PopTensor<T> pop_add_bias(const PopTensor<T>& x, const PopTensor<T>& b) {
  if (x.shape.size() != 3 || b.shape.size() != 3 || b.shape[1] != 1 ||
      x.shape[0] != b.shape[0] || x.shape[2] != b.shape[2]) {
    throw ShapeError("pop_add_bias: incompatible shapes " + PopTensor<T>::shape_str(x.shape) +
                     " and " + PopTensor<T>::shape_str(b.shape));
  }
  bump_kernel_count();
  const std::size_t n = x.shape[0], rows = x.shape[1], out = x.shape[2];
  PopTensor<T> y = PopTensor<T>::zeros(x.shape);
  detail::for_members(n, rows * out, [&](std::size_t m) {
    const T* xm = x.member_ptr(m);
    const T* bm = b.member_ptr(m);
    T* ym = y.member_ptr(m);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t o = 0; o < out; ++o) ym[r * out + o] = xm[r * out + o] + bm[o];
    }
  });
  return y;
}

/// grad_x passes through; grad_b sums grad_out over the batch axis.
template <typename T>
std::pair<PopTensor<T>, PopTensor<T>> pop_add_bias_backward(const PopTensor<T>& grad_out,
                                                            const PopTensor<T>& b_shape_like) {
  bump_kernel_count();
  const std::size_t n = grad_out.shape[0], rows = grad_out.shape[1], out = grad_out.shape[2];
  PopTensor<T> gb = PopTensor<T>::zeros({n, 1, out});
  detail::for_members(n, rows * out, [&](std::size_t m) {
    const T* gm = grad_out.member_ptr(m);
    T* gbm = gb.member_ptr(m);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t o = 0; o < out; ++o) gbm[o] += gm[r * out + o];
    }
  });
  (void)b_shape_like;
  return {grad_out, std::move(gb)};
}

enum class Act { kNone, kRelu, kTanh };

template <typename T>
PopTensor<T> activation(const PopTensor<T>& x, Act kind) {
  bump_kernel_count();
  PopTensor<T> y = x;
  if (kind == Act::kRelu) {
    detail::for_range(y.data.size(), [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) y.data[i] = y.data[i] > T(0) ? y.data[i] : T(0);
    });
  } else if (kind == Act::kTanh) {
    detail::for_range(
        y.data.size(),
        [&](std::size_t b, std::size_t e) {
          for (std::size_t i = b; i < e; ++i) y.data[i] = std::tanh(y.data[i]);
        },
        8192);  // tanh is arithmetic-heavy, parallelize sooner
  }
  return y;
}

/// relu'(0) is defined as 0 so sequential and vectorized runs agree bitwise.
template <typename T>
PopTensor<T> activation_backward(const PopTensor<T>& grad_out, const PopTensor<T>& x, Act kind) {
  require_same_shape(grad_out, x, "activation_backward");
  bump_kernel_count();
  PopTensor<T> gx = grad_out;
  if (kind == Act::kRelu) {
    detail::for_range(gx.data.size(), [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        if (!(x.data[i] > T(0))) gx.data[i] = T(0);
      }
    });
  } else if (kind == Act::kTanh) {
    detail::for_range(
        gx.data.size(),
        [&](std::size_t b, std::size_t e) {
          for (std::size_t i = b; i < e; ++i) {
            const T t = std::tanh(x.data[i]);
            gx.data[i] *= (T(1) - t * t);
          }
        },
        8192);
  }
  return gx;
}

/// First/second Adam moments for one parameter tensor, per member.
template <typename T>
struct AdamState {
  PopTensor<T> m;
  PopTensor<T> v;
  std::vector<std::int64_t> t;  // per-member step count
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState like(const PopTensor<T>& params) {
    AdamState s;
    s.m = PopTensor<T>::zeros(params.shape);
    s.v = PopTensor<T>::zeros(params.shape);
    s.t.assign(params.members(), 0);
    return s;
  }

  void reset_member(std::size_t i) {
    const std::size_t stride = m.member_stride();
    std::fill(m.member_ptr(i), m.member_ptr(i) + stride, T(0));
    std::fill(v.member_ptr(i), v.member_ptr(i) + stride, T(0));
    t[i] = 0;
  }
};

/// One Adam update applied independently per member with that member's
/// learning rate.  Members whose mask entry is false are left untouched,
/// bitwise (used for delayed policy updates).
template <typename T>
void adam_step_inplace(PopTensor<T>& params, const PopTensor<T>& grads, AdamState<T>& state,
                       const std::vector<double>& lr, const std::vector<char>* mask = nullptr) {
  require_same_shape(params, grads, "adam_step");
  require_same_shape(params, state.m, "adam_step(state)");
  const std::size_t n = params.members();
  if (lr.size() != n) throw ConfigError("adam_step: lr vector length != population size");
  for (double r : lr) {
    if (!(r > 0.0)) throw ConfigError("adam_step: learning rate must be positive");
  }
  bump_kernel_count();
  const std::size_t stride = params.member_stride();
  detail::for_members(
      n, stride,
      [&](std::size_t i) {
        if (mask && !(*mask)[i]) return;
        state.t[i] += 1;
        const T b1 = static_cast<T>(state.beta1);
        const T b2 = static_cast<T>(state.beta2);
        const T corr1 =
            static_cast<T>(1.0 - std::pow(state.beta1, static_cast<double>(state.t[i])));
        const T corr2 =
            static_cast<T>(1.0 - std::pow(state.beta2, static_cast<double>(state.t[i])));
        const T step = static_cast<T>(lr[i]);
        const T epsv = static_cast<T>(state.eps);
        T* p = params.member_ptr(i);
        const T* g = grads.member_ptr(i);
        T* m = state.m.member_ptr(i);
        T* v = state.v.member_ptr(i);
        for (std::size_t k = 0; k < stride; ++k) {
          m[k] = b1 * m[k] + (T(1) - b1) * g[k];
          v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
          const T mhat = m[k] / corr1;
          const T vhat = v[k] / corr2;
          p[k] -= step * mhat / (std::sqrt(vhat) + epsv);
        }
      },
      16384);
}

/// Pure-value form of the Adam update.
template <typename T>
std::pair<PopTensor<T>, AdamState<T>> adam_step(const PopTensor<T>& params,
                                                const PopTensor<T>& grads,
                                                const AdamState<T>& state,
                                                const std::vector<double>& lr) {
  PopTensor<T> p = params;
  AdamState<T> s = state;
  adam_step_inplace(p, grads, s, lr);
  return {std::move(p), std::move(s)};
}

/// Arithmetic mean over the population axis; output drops axis 0.
template <typename T>
PopTensor<T> reduce_mean_members(const PopTensor<T>& x) {
  if (x.shape.empty()) throw ShapeError("reduce_mean_members: scalar input");
  bump_kernel_count();
  const std::size_t n = x.shape[0];
  const std::size_t stride = x.member_stride();
  PopTensor<T> y;
  y.shape.assign(x.shape.begin() + 1, x.shape.end());
  y.data.assign(stride, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    const T* xm = x.member_ptr(i);
    for (std::size_t k = 0; k < stride; ++k) y.data[k] += xm[k];
  }
  const T inv = T(1) / static_cast<T>(n);
  for (T& v : y.data) v *= inv;
  return y;
}

/// target <- tau * online + (1 - tau) * target
template <typename T>
PopTensor<T> soft_update(const PopTensor<T>& target, const PopTensor<T>& online, double tau) {
  require_same_shape(target, online, "soft_update");
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("soft_update: tau must be in (0, 1]");
  bump_kernel_count();
  PopTensor<T> y = target;
  const T a = static_cast<T>(tau);
  const T b = static_cast<T>(1.0 - tau);
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = a * online.data[i] + b * y.data[i];
  return y;
}

/// Per-member soft update; members with mask false keep target bits unchanged.
template <typename T>
void soft_update_members_inplace(PopTensor<T>& target, const PopTensor<T>& online,
                                 const std::vector<double>& tau, const std::vector<char>& mask) {
  require_same_shape(target, online, "soft_update");
  bump_kernel_count();
  const std::size_t stride = target.member_stride();
  for (std::size_t i = 0; i < target.members(); ++i) {
    if (!mask[i]) continue;
    if (!(tau[i] > 0.0 && tau[i] <= 1.0)) throw ConfigError("soft_update: tau must be in (0, 1]");
    const T a = static_cast<T>(tau[i]);
    const T b = static_cast<T>(1.0 - tau[i]);
    T* tg = target.member_ptr(i);
    const T* on = online.member_ptr(i);
    for (std::size_t k = 0; k < stride; ++k) tg[k] = a * on[k] + b * tg[k];
  }
}

/// Concatenates two feature blocks along the trailing axis.
template <typename T>
PopTensor<T> concat_features(const PopTensor<T>& a, const PopTensor<T>& b) {
  if (a.shape.size() != 3 || b.shape.size() != 3 || a.shape[0] != b.shape[0] ||
      a.shape[1] != b.shape[1]) {
    throw ShapeError("concat_features: incompatible shapes " + PopTensor<T>::shape_str(a.shape) +
                     " and " + PopTensor<T>::shape_str(b.shape));
  }
  bump_kernel_count();
  const std::size_t n = a.shape[0], rows = a.shape[1], fa = a.shape[2], fb = b.shape[2];
  PopTensor<T> y;
  y.shape = {n, rows, fa + fb};
  y.data.resize(n * rows * (fa + fb));
  detail::for_members(n, rows * (fa + fb), [&](std::size_t m) {
    const T* am = a.member_ptr(m);
    const T* bm = b.member_ptr(m);
    T* ym = y.member_ptr(m);
    for (std::size_t r = 0; r < rows; ++r) {
      T* yr = ym + r * (fa + fb);
      const T* ar = am + r * fa;
      const T* br = bm + r * fb;
      for (std::size_t i = 0; i < fa; ++i) yr[i] = ar[i];
      for (std::size_t i = 0; i < fb; ++i) yr[fa + i] = br[i];
    }
  });
  return y;
}

/// Splits the trailing axis back into two blocks (reverse of concat_features).
template <typename T>
std::pair<PopTensor<T>, PopTensor<T>> split_features(const PopTensor<T>& y, std::size_t fa) {
  bump_kernel_count();
  const std::size_t n = y.shape[0], rows = y.shape[1], f = y.shape[2];
  const std::size_t fb = f - fa;
  PopTensor<T> a = PopTensor<T>::zeros({n, rows, fa});
  PopTensor<T> b = PopTensor<T>::zeros({n, rows, fb});
  for (std::size_t m = 0; m < n; ++m) {
    const T* ym = y.member_ptr(m);
    T* am = a.member_ptr(m);
    T* bm = b.member_ptr(m);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = ym + r * f;
      for (std::size_t i = 0; i < fa; ++i) am[r * fa + i] = yr[i];
      for (std::size_t i = 0; i < fb; ++i) bm[r * fb + i] = yr[fa + i];
    }
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
PopTensor<T> slice_member(const PopTensor<T>& x, std::size_t i) {
  if (i >= x.members()) throw UsageError("slice_member: index out of range");
  PopTensor<T> y;
  y.shape = x.shape;
  y.shape[0] = 1;
  y.data.assign(x.member_ptr(i), x.member_ptr(i) + x.member_stride());
  return y;
}

template <typename T>
void set_member(PopTensor<T>& x, std::size_t i, const PopTensor<T>& src) {
  if (i >= x.members()) throw UsageError("set_member: index out of range");
  if (src.member_stride() != x.member_stride() || src.members() != 1) {
    throw ShapeError("set_member: shape mismatch between " + PopTensor<T>::shape_str(x.shape) +
                     " and " + PopTensor<T>::shape_str(src.shape));
  }
  std::copy(src.data.begin(), src.data.end(), x.member_ptr(i));
}

/// Fills with standard normals read from per-element counters (stride 2).
template <typename T>
void fill_normal(PopTensor<T>& x, const RngStream& stream, double std_dev = 1.0) {
  for (std::size_t e = 0; e < x.data.size(); ++e) {
    x.data[e] = static_cast<T>(std_dev * stream.normal_pair(2 * e));
  }
}

template <typename T>
void fill_uniform(PopTensor<T>& x, const RngStream& stream, double lo, double hi) {
  for (std::size_t e = 0; e < x.data.size(); ++e) {
    x.data[e] = static_cast<T>(stream.uniform(e, lo, hi));
  }
}

template <typename T>
double max_abs_diff(const PopTensor<T>& a, const PopTensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  }
  return m;
}

}  // namespace pbrl
