#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "recal/errors.hpp"
#include "recal/rng.hpp"

// Minimal dense networks with hand-written backprop. Sized for this problem
// (2 inputs, tens of hidden units, scalar heads); everything is per-sample
// loops over contiguous vectors, which is plenty at desk scale and keeps the
// gradient code auditable against finite differences.
namespace recal::nets {

// Fully connected stack, tanh on hidden layers, linear output.
class Mlp {
 public:
  Mlp() = default;

  explicit Mlp(std::vector<int> sizes) : sizes_(std::move(sizes)) {
    if (sizes_.size() < 2) throw ShapeError("mlp needs at least input and output sizes");
    layers_.resize(sizes_.size() - 1);
    for (size_t l = 0; l < layers_.size(); ++l) {
      layers_[l].in = sizes_[l];
      layers_[l].out = sizes_[l + 1];
      layers_[l].w.assign(static_cast<size_t>(layers_[l].in) * layers_[l].out, 0.0);
      layers_[l].b.assign(layers_[l].out, 0.0);
      layers_[l].gw.assign(layers_[l].w.size(), 0.0);
      layers_[l].gb.assign(layers_[l].b.size(), 0.0);
    }
  }

  const std::vector<int>& sizes() const { return sizes_; }
  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }

  // Xavier-style init, deterministic under the caller's rng.
  void init(Rng& rng) {
    for (auto& L : layers_) {
      double scale = std::sqrt(2.0 / (L.in + L.out));
      for (auto& w : L.w) w = rng.gaussian() * scale;
      for (auto& b : L.b) b = 0.0;
    }
  }

  // Const because evaluation is logically read-only; the activation cache it
  // fills makes an Mlp instance single-threaded.
  std::vector<double> forward(const std::vector<double>& x) const {
    if (static_cast<int>(x.size()) != input_size())
      throw ShapeError("mlp forward: input size mismatch");
    act_.resize(layers_.size() + 1);
    act_[0] = x;
    for (size_t l = 0; l < layers_.size(); ++l) {
      const Layer& L = layers_[l];
      std::vector<double>& out = act_[l + 1];
      out.assign(L.out, 0.0);
      for (int o = 0; o < L.out; ++o) {
        double z = L.b[o];
        const double* wrow = &L.w[static_cast<size_t>(o) * L.in];
        for (int i = 0; i < L.in; ++i) z += wrow[i] * act_[l][i];
        out[o] = (l + 1 == layers_.size()) ? z : std::tanh(z);
      }
    }
    return act_.back();
  }

  // Accumulates parameter gradients for the sample last passed to forward();
  // returns dL/dinput.
  std::vector<double> backward(const std::vector<double>& dout) {
    if (static_cast<int>(dout.size()) != output_size())
      throw ShapeError("mlp backward: output gradient size mismatch");
    std::vector<double> delta = dout;
    for (size_t l = layers_.size(); l-- > 0;) {
      Layer& L = layers_[l];
      if (l + 1 != layers_.size()) {
        for (int o = 0; o < L.out; ++o) {
          double a = act_[l + 1][o];  // tanh activation
          delta[o] *= 1.0 - a * a;
        }
      }
      std::vector<double> dprev(L.in, 0.0);
      for (int o = 0; o < L.out; ++o) {
        double* gwrow = &L.gw[static_cast<size_t>(o) * L.in];
        const double* wrow = &L.w[static_cast<size_t>(o) * L.in];
        for (int i = 0; i < L.in; ++i) {
          gwrow[i] += delta[o] * act_[l][i];
          dprev[i] += delta[o] * wrow[i];
        }
        L.gb[o] += delta[o];
      }
      delta = std::move(dprev);
    }
    return delta;
  }

  void zero_grad() {
    for (auto& L : layers_) {
      std::fill(L.gw.begin(), L.gw.end(), 0.0);
      std::fill(L.gb.begin(), L.gb.end(), 0.0);
    }
  }

  size_t param_count() const {
    size_t n = 0;
    for (const auto& L : layers_) n += L.w.size() + L.b.size();
    return n;
  }

  void flatten_params(std::vector<double>& out) const {
    for (const auto& L : layers_) {
      out.insert(out.end(), L.w.begin(), L.w.end());
      out.insert(out.end(), L.b.begin(), L.b.end());
    }
  }

  void flatten_grads(std::vector<double>& out) const {
    for (const auto& L : layers_) {
      out.insert(out.end(), L.gw.begin(), L.gw.end());
      out.insert(out.end(), L.gb.begin(), L.gb.end());
    }
  }

  // Reads param_count() values starting at it; advances it.
  template <typename It>
  void load_params(It& it) {
    for (auto& L : layers_) {
      for (auto& w : L.w) w = *it++;
      for (auto& b : L.b) b = *it++;
    }
  }

  bool params_finite() const {
    for (const auto& L : layers_) {
      for (double w : L.w)
        if (!std::isfinite(w)) return false;
      for (double b : L.b)
        if (!std::isfinite(b)) return false;
    }
    return true;
  }

 private:
  struct Layer {
    int in = 0, out = 0;
    std::vector<double> w, b;    // row-major: w[o*in + i]
    std::vector<double> gw, gb;  // gradient accumulators
  };

  std::vector<int> sizes_;
  std::vector<Layer> layers_;
  mutable std::vector<std::vector<double>> act_;  // forward cache, act_[0] = input
};

// Adam over a flat parameter vector.
class Adam {
 public:
  Adam(size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw ShapeError("adam: parameter/gradient size mismatch");
    ++t_;
    double c1 = 1.0 - std::pow(beta1_, t_);
    double c2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace recal::nets
