#pragma once
// Test-only reference implementations. None of these call into the code
// paths they check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <set>
#include <vector>

#include "eex/eex.hpp"

namespace eex::oracle {

template <typename T>
Tensor<T> random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

/// Direct six-loop cross-correlation with bounds checks instead of padding.
template <typename T>
Tensor<T> conv2d_reference(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                           std::size_t pad) {
  const long cin = static_cast<long>(x.dim(0)), h = static_cast<long>(x.dim(1)), wd = static_cast<long>(x.dim(2));
  const long cout = static_cast<long>(w.dim(0)), k = static_cast<long>(w.dim(2));
  const long ho = (h + 2 * static_cast<long>(pad) - k) / static_cast<long>(stride) + 1;
  const long wo = (wd + 2 * static_cast<long>(pad) - k) / static_cast<long>(stride) + 1;
  Tensor<T> out({static_cast<std::size_t>(cout), static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)});
  for (long co = 0; co < cout; ++co)
    for (long oy = 0; oy < ho; ++oy)
      for (long ox = 0; ox < wo; ++ox) {
        double acc = static_cast<double>(b[static_cast<std::size_t>(co)]);
        for (long ci = 0; ci < cin; ++ci)
          for (long ky = 0; ky < k; ++ky)
            for (long kx = 0; kx < k; ++kx) {
              const long iy = oy * static_cast<long>(stride) + ky - static_cast<long>(pad);
              const long ix = ox * static_cast<long>(stride) + kx - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
              acc += static_cast<double>(w[static_cast<std::size_t>(((co * cin + ci) * k + ky) * k + kx)]) *
                     static_cast<double>(x[static_cast<std::size_t>((ci * h + iy) * wd + ix)]);
            }
        out[static_cast<std::size_t>((co * ho + oy) * wo + ox)] = static_cast<T>(acc);
      }
  return out;
}

template <typename T>
Tensor<T> dense_reference(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t m = w.dim(0), n = w.dim(1);
  Tensor<T> out({m});
  for (std::size_t j = 0; j < m; ++j) {
    double acc = static_cast<double>(b[j]);
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(w[j * n + i]) * static_cast<double>(x[i]);
    out[j] = static_cast<T>(acc);
  }
  return out;
}

template <typename T>
Tensor<T> gap_reference(const Tensor<T>& x) {
  Tensor<T> out({x.dim(0)});
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    double s = 0;
    for (std::size_t y = 0; y < x.dim(1); ++y)
      for (std::size_t z = 0; z < x.dim(2); ++z) s += static_cast<double>(x.at(c, y, z));
    out[c] = static_cast<T>(s / static_cast<double>(x.dim(1) * x.dim(2)));
  }
  return out;
}

/// |a - n| / max(|a|, |n|, floor)
inline double rel_err(double a, double n, double floor = 1e-3) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Five-point central difference of f at the current point along one
/// coordinate; `set(delta)` moves the coordinate by delta from its origin.
template <typename F, typename Set>
double five_point(F&& f, Set&& set, double h) {
  set(2 * h);
  const double a = f();
  set(h);
  const double b = f();
  set(-h);
  const double c = f();
  set(-2 * h);
  const double d = f();
  set(0.0);
  return (-a + 8 * b - 8 * c + d) / (12 * h);
}

/// Relu on/off pattern and max-pool winners of a forward pass; central
/// differences are only meaningful when this does not change across the
/// perturbation.
template <typename T>
std::vector<std::size_t> kink_signature(const Model<T>& m, const Tensor<T>& input) {
  std::vector<std::size_t> sig;
  Tensor<T> x = input;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& s = m.config.backbone[i];
    if (s.kind == LayerKind::pool) {
      if (s.pool == PoolMode::max) {
        const std::size_t ho = (x.dim(1) - s.kernel) / s.stride + 1, wo = (x.dim(2) - s.kernel) / s.stride + 1;
        for (std::size_t c = 0; c < x.dim(0); ++c)
          for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
              std::size_t best = 0;
              T bv = x.at(c, oy * s.stride, ox * s.stride);
              for (std::size_t q = 0; q < s.kernel * s.kernel; ++q) {
                const T v = x.at(c, oy * s.stride + q / s.kernel, ox * s.stride + q % s.kernel);
                if (v > bv) bv = v, best = q;
              }
              sig.push_back(best);
            }
        x = ops::max_pool2d(x, s.kernel, s.stride);
      } else {
        x = ops::avg_pool2d(x, s.kernel, s.stride);
      }
      continue;
    }
    Tensor<T> pre = s.kind == LayerKind::conv ? conv2d_reference(x, m.layers[i].weight, m.layers[i].bias, s.stride, s.pad)
                                              : dense_reference(x, m.layers[i].weight, m.layers[i].bias);
    if (s.activation == Activation::relu) {
      for (T v : pre.data()) sig.push_back(v > T{0} ? 1 : 0);
      pre = ops::relu(pre);
    }
    x = std::move(pre);
  }
  return sig;
}

/// Composite loss recomputed from scalar formulas over a forward pass built
/// from the forward kernels only.
template <typename T>
double composite_loss_reference(const Model<T>& m, const Tensor<T>& input, std::size_t label, double alpha,
                                bool with_exit_classifiers) {
  const auto out = forward_full(m, input);
  const std::size_t n = out.exits.size();
  std::vector<double> z(out.final_logits.data().begin(), out.final_logits.data().end());
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0;
  for (double v : z) s += std::exp(v - mx);
  double loss = std::log(s) + mx - z[label];
  for (std::size_t i = 0; i < n; ++i) {
    const double coeff = alpha / static_cast<double>(n - i);
    for (std::size_t j = 0; j < out.exits[i].exclusion.size(); ++j) {
      const double y = std::clamp(static_cast<double>(out.exits[i].exclusion[j]), 1e-7, 1 - 1e-7);
      loss -= coeff * (j == label ? std::log(y) : std::log(1 - y));
    }
    if (with_exit_classifiers) loss -= std::log(static_cast<double>(out.exits[i].classifier[label]));
  }
  return loss;
}

/// Independent replay of class-exclusion decisions from recorded exit
/// probabilities. Written from the rule description, not from the engine.
struct ReplayStep {
  std::optional<std::size_t> recovered;
  std::vector<std::size_t> excluded;
  std::vector<std::size_t> remaining;
};

struct ReplayResult {
  std::vector<ReplayStep> steps;
  std::size_t exit_layer = 0;
  std::size_t predicted = 0;
  bool final_layer = false;
};

inline ReplayResult replay_exclusion(const std::vector<std::vector<double>>& probs, const std::vector<double>& betas,
                                     const std::vector<double>& final_logits) {
  const std::size_t m = final_logits.size();
  std::set<std::size_t> alive;
  for (std::size_t j = 0; j < m; ++j) alive.insert(j);
  ReplayResult r;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto& p = probs[i];
    ReplayStep st;
    if (i > 0) {
      std::size_t g = 0;
      for (std::size_t j = 1; j < m; ++j)
        if (p[j] > p[g]) g = j;
      if (!alive.count(g)) {
        alive.insert(g);
        st.recovered = g;
      }
    }
    double x = 0;
    for (auto j : alive) x = std::max(x, p[j]);
    std::set<std::size_t> next;
    for (auto j : alive) {
      if (p[j] < betas[i] * x) st.excluded.push_back(j);
      else next.insert(j);
    }
    alive = next;
    st.remaining.assign(alive.begin(), alive.end());
    r.steps.push_back(st);
    r.exit_layer = i + 1;
    if (alive.size() == 1) {
      r.predicted = *alive.begin();
      return r;
    }
  }
  r.final_layer = true;
  std::size_t best = *alive.begin();
  for (auto j : alive)
    if (final_logits[j] > final_logits[best]) best = j;
  r.predicted = best;
  return r;
}

/// Random conv backbone with `convs` conv layers, optional pools and an
/// optional hidden dense layer.
inline ModelConfig random_config(std::mt19937_64& rng, std::size_t convs, std::size_t classes, Shape input,
                                 std::size_t max_channels = 8) {
  ModelConfig c;
  c.input = input;
  c.num_classes = classes;
  c.num_exits = convs;
  std::uniform_int_distribution<std::size_t> ch(1, max_channels);
  std::bernoulli_distribution coin(0.4);
  std::size_t h = input[1], w = input[2];
  for (std::size_t i = 0; i < convs; ++i) {
    const std::size_t k = (h >= 3 && w >= 3 && coin(rng)) ? 3 : 1;
    const std::size_t pad = k == 3 && coin(rng) ? 1 : 0;
    const std::size_t stride = (h > 4 && coin(rng)) ? 2 : 1;
    c.backbone.push_back(LayerSpec::conv(ch(rng), k, stride, pad));
    h = (h + 2 * pad - k) / stride + 1;
    w = (w + 2 * pad - k) / stride + 1;
    if (h >= 4 && w >= 4 && coin(rng)) {
      c.backbone.push_back(coin(rng) ? LayerSpec::max_pool(2, 2) : LayerSpec::avg_pool(2, 2));
      h /= 2;
      w /= 2;
    }
  }
  if (coin(rng)) c.backbone.push_back(LayerSpec::dense(ch(rng)));
  c.validate();
  return c;
}

}  // namespace eex::oracle
