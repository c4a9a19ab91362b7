#pragma once

#include "pbrl/net_pop.hpp"
#include "pbrl/pop_tensor.hpp"

namespace pbrl {

/// Adam moments for every tensor of a population MLP.
template <typename T>
struct MlpAdam {
  std::vector<AdamState<T>> w;  // one per layer
  std::vector<AdamState<T>> b;

  static MlpAdam like(const PopMLPParams<T>& p) {
    MlpAdam a;
    for (const auto& l : p.layers) {
      a.w.push_back(AdamState<T>::like(l.w));
      a.b.push_back(AdamState<T>::like(l.b));
    }
    return a;
  }

  void step(PopMLPParams<T>& p, const MlpGrads<T>& g, const std::vector<double>& lr,
            const std::vector<char>* mask = nullptr) {
    if (g.size() != p.layers.size()) throw ShapeError("MlpAdam::step: layer count mismatch");
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      adam_step_inplace(p.layers[l].w, g[l].w, w[l], lr, mask);
      adam_step_inplace(p.layers[l].b, g[l].b, b[l], lr, mask);
    }
  }

  void reset_member(std::size_t i) {
    for (auto& s : w) s.reset_member(i);
    for (auto& s : b) s.reset_member(i);
  }

  MlpAdam slice(std::size_t i) const {
    MlpAdam s;
    for (const auto& st : w) {
      AdamState<T> one;
      one.m = slice_member(st.m, i);
      one.v = slice_member(st.v, i);
      one.t = {st.t[i]};
      one.beta1 = st.beta1;
      one.beta2 = st.beta2;
      one.eps = st.eps;
      s.w.push_back(std::move(one));
    }
    for (const auto& st : b) {
      AdamState<T> one;
      one.m = slice_member(st.m, i);
      one.v = slice_member(st.v, i);
      one.t = {st.t[i]};
      one.beta1 = st.beta1;
      one.beta2 = st.beta2;
      one.eps = st.eps;
      s.b.push_back(std::move(one));
    }
    return s;
  }

  void set_member(std::size_t i, const MlpAdam& sub) {
    for (std::size_t l = 0; l < w.size(); ++l) {
      pbrl::set_member(w[l].m, i, sub.w[l].m);
      pbrl::set_member(w[l].v, i, sub.w[l].v);
      w[l].t[i] = sub.w[l].t[0];
      pbrl::set_member(b[l].m, i, sub.b[l].m);
      pbrl::set_member(b[l].v, i, sub.b[l].v);
      b[l].t[i] = sub.b[l].t[0];
    }
  }
};

template <typename T>
void add_scaled(MlpGrads<T>& acc, const MlpGrads<T>& other, T scale) {
  if (acc.size() != other.size()) throw ShapeError("add_scaled: layer count mismatch");
  for (std::size_t l = 0; l < acc.size(); ++l) {
    for (std::size_t i = 0; i < acc[l].w.data.size(); ++i) {
      acc[l].w.data[i] += scale * other[l].w.data[i];
    }
    for (std::size_t i = 0; i < acc[l].b.data.size(); ++i) {
      acc[l].b.data[i] += scale * other[l].b.data[i];
    }
  }
}

}  // namespace pbrl
