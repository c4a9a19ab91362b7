#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <vector>

#include "pbrl/pop_tensor.hpp"

namespace pbrl {

/// A population of identically shaped MLPs stored layer-major: every layer
/// holds weight [N, in, out] and bias [N, 1, out] tensors.  Hidden layers use
/// relu; the output is either linear (critics) or tanh scaled by output_scale
/// (policies, where output_scale is the action bound).
template <typename T>
struct PopMLPParams {
  struct Layer {
    PopTensor<T> w;
    PopTensor<T> b;
  };
  std::vector<Layer> layers;
  Act output = Act::kNone;
  T output_scale = T(1);

  std::size_t members() const { return layers.empty() ? 0 : layers[0].w.shape[0]; }
  std::size_t in_dim() const { return layers.front().w.shape[1]; }
  std::size_t out_dim() const { return layers.back().w.shape[2]; }

  std::vector<std::size_t> dims() const {
    std::vector<std::size_t> d;
    d.push_back(in_dim());
    for (const auto& l : layers) d.push_back(l.w.shape[2]);
    return d;
  }

  std::size_t params_per_member() const {
    std::size_t c = 0;
    for (const auto& l : layers) c += l.w.member_stride() + l.b.member_stride();
    return c;
  }
};

/// Per-layer gradients in the same layout as the parameters.
template <typename T>
using MlpGrads = std::vector<typename PopMLPParams<T>::Layer>;

template <typename T>
MlpGrads<T> zero_grads_like(const PopMLPParams<T>& p) {
  MlpGrads<T> g;
  g.reserve(p.layers.size());
  for (const auto& l : p.layers) {
    g.push_back({PopTensor<T>::zeros(l.w.shape), PopTensor<T>::zeros(l.b.shape)});
  }
  return g;
}

inline std::size_t member_param_count(const std::vector<std::size_t>& dims) {
  std::size_t c = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) c += dims[l] * dims[l + 1] + dims[l + 1];
  return c;
}

/// Per-member weights are Kaiming-uniform with bound sqrt(1/fan_in); biases
/// uniform within +/- 1/sqrt(fan_in).  Each (member, layer) pair draws from
/// its own counter stream, so initialization is order-independent and any
/// member can be reproduced alone.
template <typename T>
PopMLPParams<T> init_pop_mlp(std::size_t n, const std::vector<std::size_t>& dims,
                             std::uint64_t seed, Act output = Act::kNone,
                             T output_scale = T(1)) {
  if (n < 1) throw ConfigError("init_pop_mlp: population size must be >= 1");
  if (dims.size() < 2) throw ConfigError("init_pop_mlp: need at least input and output extents");
  PopMLPParams<T> p;
  p.output = output;
  p.output_scale = output_scale;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t fan_in = dims[l], fan_out = dims[l + 1];
    typename PopMLPParams<T>::Layer layer;
    layer.w = PopTensor<T>::zeros({n, fan_in, fan_out});
    layer.b = PopTensor<T>::zeros({n, 1, fan_out});
    const double wb = std::sqrt(1.0 / static_cast<double>(fan_in));
    const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t m = 0; m < n; ++m) {
      const RngStream ws = RngStream::of(seed, m, RngUse::kInitWeight, l);
      const RngStream bs = RngStream::of(seed, m, RngUse::kInitBias, l);
      T* wp = layer.w.member_ptr(m);
      for (std::size_t e = 0; e < fan_in * fan_out; ++e) {
        wp[e] = static_cast<T>(ws.uniform(e, -wb, wb));
      }
      T* bp = layer.b.member_ptr(m);
      for (std::size_t e = 0; e < fan_out; ++e) {
        bp[e] = static_cast<T>(bs.uniform(e, -bb, bb));
      }
    }
    p.layers.push_back(std::move(layer));
  }
  return p;
}

/// Retains what backward needs: each layer's input and pre-activation.
template <typename T>
struct ForwardCache {
  std::vector<PopTensor<T>> inputs;   // inputs[l] feeds layer l
  std::vector<PopTensor<T>> preacts;  // z_l = x_l * w_l + b_l
};

template <typename T>
std::pair<PopTensor<T>, ForwardCache<T>> pop_mlp_forward(const PopMLPParams<T>& p,
                                                         const PopTensor<T>& x) {
  if (x.shape.size() != 3 || x.shape[0] != p.members() || x.shape[2] != p.in_dim()) {
    throw ShapeError("pop_mlp_forward: input " + PopTensor<T>::shape_str(x.shape) +
                     " does not match network with N=" + std::to_string(p.members()) +
                     " in=" + std::to_string(p.in_dim()));
  }
  ForwardCache<T> cache;
  PopTensor<T> cur = x;
  const std::size_t depth = p.layers.size();
  for (std::size_t l = 0; l < depth; ++l) {
    cache.inputs.push_back(std::move(cur));
    PopTensor<T> z = pop_add_bias(pop_matmul(cache.inputs.back(), p.layers[l].w), p.layers[l].b);
    const Act act = (l + 1 < depth) ? Act::kRelu : p.output;
    cur = (act == Act::kNone) ? z : activation(z, act);
    cache.preacts.push_back(std::move(z));
  }
  if (p.output_scale != T(1)) {
    for (T& v : cur.data) v *= p.output_scale;
  }
  return {std::move(cur), std::move(cache)};
}

/// Chain-rule composition of the per-layer backward rules.
template <typename T>
std::pair<MlpGrads<T>, PopTensor<T>> pop_mlp_backward(const PopMLPParams<T>& p,
                                                      const ForwardCache<T>& cache,
                                                      const PopTensor<T>& grad_y) {
  const std::size_t depth = p.layers.size();
  if (cache.inputs.size() != depth || cache.preacts.size() != depth) {
    throw UsageError("pop_mlp_backward: cache does not match this network");
  }
  if (grad_y.shape != cache.preacts.back().shape) {
    throw UsageError("pop_mlp_backward: cotangent shape does not match cached forward");
  }
  MlpGrads<T> grads(depth);
  PopTensor<T> g = grad_y;
  if (p.output_scale != T(1)) {
    for (T& v : g.data) v *= p.output_scale;
  }
  for (std::size_t l = depth; l-- > 0;) {
    const Act act = (l + 1 < depth) ? Act::kRelu : p.output;
    if (act != Act::kNone) g = activation_backward(g, cache.preacts[l], act);
    auto [gz, gb] = pop_add_bias_backward(g, p.layers[l].b);
    auto [gx, gw] = pop_matmul_backward(gz, cache.inputs[l], p.layers[l].w);
    grads[l].w = std::move(gw);
    grads[l].b = std::move(gb);
    g = std::move(gx);
  }
  return {std::move(grads), std::move(g)};
}

/// Fixed flat layout: layers in order, weight then bias, row-major.
template <typename T>
std::vector<T> flatten_member(const PopMLPParams<T>& p, std::size_t i) {
  if (i >= p.members()) throw UsageError("flatten_member: index out of range");
  std::vector<T> out;
  out.reserve(p.params_per_member());
  for (const auto& l : p.layers) {
    out.insert(out.end(), l.w.member_ptr(i), l.w.member_ptr(i) + l.w.member_stride());
    out.insert(out.end(), l.b.member_ptr(i), l.b.member_ptr(i) + l.b.member_stride());
  }
  return out;
}

template <typename T>
void unflatten_member(PopMLPParams<T>& p, std::size_t i, std::span<const T> vec) {
  if (i >= p.members()) throw UsageError("unflatten_member: index out of range");
  if (vec.size() != p.params_per_member()) {
    throw ShapeError("unflatten_member: vector length " + std::to_string(vec.size()) +
                     " != member parameter count " + std::to_string(p.params_per_member()));
  }
  std::size_t at = 0;
  for (auto& l : p.layers) {
    std::copy(vec.begin() + at, vec.begin() + at + l.w.member_stride(), l.w.member_ptr(i));
    at += l.w.member_stride();
    std::copy(vec.begin() + at, vec.begin() + at + l.b.member_stride(), l.b.member_ptr(i));
    at += l.b.member_stride();
  }
}

/// Overwrites member dst with a bitwise copy of member src.
template <typename T>
void copy_member(PopMLPParams<T>& p, std::size_t src, std::size_t dst) {
  if (src >= p.members() || dst >= p.members()) {
    throw UsageError("copy_member: index out of range");
  }
  if (src == dst) return;
  for (auto& l : p.layers) {
    std::copy(l.w.member_ptr(src), l.w.member_ptr(src) + l.w.member_stride(), l.w.member_ptr(dst));
    std::copy(l.b.member_ptr(src), l.b.member_ptr(src) + l.b.member_stride(), l.b.member_ptr(dst));
  }
}

template <typename T>
PopMLPParams<T> slice_member(const PopMLPParams<T>& p, std::size_t i) {
  PopMLPParams<T> s;
  s.output = p.output;
  s.output_scale = p.output_scale;
  for (const auto& l : p.layers) {
    s.layers.push_back({slice_member(l.w, i), slice_member(l.b, i)});
  }
  return s;
}

template <typename T>
void set_member(PopMLPParams<T>& p, std::size_t i, const PopMLPParams<T>& sub) {
  if (sub.layers.size() != p.layers.size()) throw ShapeError("set_member: layer count mismatch");
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    set_member(p.layers[l].w, i, sub.layers[l].w);
    set_member(p.layers[l].b, i, sub.layers[l].b);
  }
}

// ---------------------------------------------------------------------------
// Checkpoint file: little-endian binary, header then flat members in index
// order.  Header: magic "PBRLNET1", u32 precision bytes, u64 N, u64 extent
// count, u64 extents..., u8 output activation, f64 output scale.
// ---------------------------------------------------------------------------

namespace detail {
constexpr char kNetMagic[8] = {'P', 'B', 'R', 'L', 'N', 'E', 'T', '1'};

template <typename V>
void write_pod(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  return v;
}
}  // namespace detail

template <typename T>
void save_checkpoint(const PopMLPParams<T>& p, std::ostream& os) {
  os.write(detail::kNetMagic, sizeof(detail::kNetMagic));
  detail::write_pod<std::uint32_t>(os, sizeof(T));
  detail::write_pod<std::uint64_t>(os, p.members());
  const auto dims = p.dims();
  detail::write_pod<std::uint64_t>(os, dims.size());
  for (std::size_t d : dims) detail::write_pod<std::uint64_t>(os, d);
  detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(p.output));
  detail::write_pod<double>(os, static_cast<double>(p.output_scale));
  for (std::size_t i = 0; i < p.members(); ++i) {
    const auto flat = flatten_member(p, i);
    os.write(reinterpret_cast<const char*>(flat.data()),
             static_cast<std::streamsize>(flat.size() * sizeof(T)));
  }
}

template <typename T>
void save_checkpoint(const PopMLPParams<T>& p, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("save_checkpoint: cannot open " + path);
  save_checkpoint(p, os);
}

template <typename T>
PopMLPParams<T> load_checkpoint(std::istream& is) {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kNetMagic, sizeof(magic)) != 0) {
    throw ConfigError("load_checkpoint: bad magic");
  }
  const auto prec = detail::read_pod<std::uint32_t>(is);
  if (prec != sizeof(T)) {
    throw ConfigError("load_checkpoint: file stores " + std::to_string(prec * 8) +
                      "-bit values but " + std::to_string(sizeof(T) * 8) + "-bit was requested");
  }
  const auto n = detail::read_pod<std::uint64_t>(is);
  const auto ndims = detail::read_pod<std::uint64_t>(is);
  std::vector<std::size_t> dims(ndims);
  for (auto& d : dims) d = detail::read_pod<std::uint64_t>(is);
  const auto act = static_cast<Act>(detail::read_pod<std::uint8_t>(is));
  const auto scale = detail::read_pod<double>(is);
  PopMLPParams<T> p = init_pop_mlp<T>(n, dims, 0, act, static_cast<T>(scale));
  std::vector<T> flat(p.params_per_member());
  for (std::size_t i = 0; i < n; ++i) {
    is.read(reinterpret_cast<char*>(flat.data()),
            static_cast<std::streamsize>(flat.size() * sizeof(T)));
    if (!is) throw ConfigError("load_checkpoint: truncated file");
    unflatten_member(p, i, std::span<const T>(flat));
  }
  return p;
}

template <typename T>
PopMLPParams<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("load_checkpoint: cannot open " + path);
  return load_checkpoint<T>(is);
}

}  // namespace pbrl
