#pragma once
// Reverse-mode differentiation over a linear tape of tensor ops.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "eex/ops.hpp"
#include "eex/tensor.hpp"

namespace eex {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

template <typename T = float>
class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t)>;

  /// Leaf owning its value.
  Var leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), nullptr, {}, {}, requires_grad});
    return Var{nodes_.size() - 1};
  }

  /// Leaf that borrows `value`; the tensor must outlive the tape.
  Var param(const Tensor<T>& value) {
    nodes_.push_back(Node{{}, &value, {}, {}, true});
    return Var{nodes_.size() - 1};
  }

  Var record(Tensor<T> value, std::initializer_list<Var> inputs, Backprop backprop) {
    bool rg = false;
    for (Var v : inputs) rg = rg || nodes_[v.id].requires_grad;
    nodes_.push_back(Node{std::move(value), nullptr, {}, rg ? std::move(backprop) : Backprop{}, rg});
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return nodes_[v.id].value(); }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient accumulated at `v` by the last backward(); zero when the node
  /// was not reached.
  Tensor<T> grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad) return *n.grad;
    return Tensor<T>(n.value().shape());
  }

  /// Mutable gradient buffer for `v`, allocated on first use.
  Tensor<T>& grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (!n.grad) n.grad.emplace(n.value().shape());
    return *n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backprop in reverse
  /// execution order. Returns the ids of the nodes whose backprop ran.
  std::vector<std::size_t> backward(Var loss) {
    if (value(loss).size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(value(loss).shape()));
    for (auto& n : nodes_) n.grad.reset();
    grad_buffer(loss)[0] = T{1};
    std::vector<std::size_t> visited;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad || !n.backprop) continue;
      n.backprop(*this, i);
      visited.push_back(i);
    }
    return visited;
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* borrowed = nullptr;
    std::optional<Tensor<T>> grad;
    Backprop backprop;
    bool requires_grad = false;

    const Tensor<T>& value() const { return borrowed ? *borrowed : owned; }
  };

  std::vector<Node> nodes_;
};

namespace ad {

template <typename T>
void accumulate(Tape<T>& tape, Var target, const Tensor<T>& g) {
  if (!tape.requires_grad(target)) return;
  auto& buf = tape.grad_buffer(target);
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(w);
  ops::check_conv_shapes(xv, wv, tape.value(b));
  ops::conv_out_extent(xv.dim(1), wv.dim(2), stride, pad);
  ops::conv_out_extent(xv.dim(2), wv.dim(2), stride, pad);
  Tensor<T> xp = ops::pad2d(xv, pad);
  Tensor<T> out = ops::conv2d_padded(xp, wv, tape.value(b), stride);
  return tape.record(std::move(out), {x, w, b},
                     [x, w, b, stride, pad, xp = std::move(xp)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad_buffer(Var{self});
    const Tensor<T>& wt = t.value(w);
    const std::size_t cout = wt.dim(0), cin = wt.dim(1), k = wt.dim(2);
    const std::size_t ho = gy.dim(1), wo = gy.dim(2);
    const std::size_t hp = xp.dim(1), wp = xp.dim(2);
    const bool need_x = t.requires_grad(x), need_w = t.requires_grad(w);
    Tensor<T> gxp(xp.shape());
    Tensor<T> gw(wt.shape());
    Tensor<T> gb({cout});
    for (std::size_t co = 0; co < cout; ++co) {
      const T* gplane = gy.data().data() + co * ho * wo;
      T bsum{0};
      for (std::size_t i = 0; i < ho * wo; ++i) bsum += gplane[i];
      gb[co] = bsum;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T* src = xp.data().data() + ci * hp * wp;
        T* gsrc = gxp.data().data() + ci * hp * wp;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t widx = ((co * cin + ci) * k + ky) * k + kx;
            const T wval = wt[widx];
            T acc{0};
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const std::size_t base = (oy * stride + ky) * wp + kx;
              const T* g = gplane + oy * wo;
              if (need_w)
                for (std::size_t ox = 0; ox < wo; ++ox) acc += g[ox] * src[base + ox * stride];
              if (need_x)
                for (std::size_t ox = 0; ox < wo; ++ox) gsrc[base + ox * stride] += g[ox] * wval;
            }
            gw[widx] = acc;
          }
      }
    }
    accumulate(t, w, gw);
    accumulate(t, b, gb);
    if (need_x) {
      const Tensor<T>& xv = t.value(x);
      Tensor<T> gx(xv.shape());
      for (std::size_t c = 0; c < xv.dim(0); ++c)
        for (std::size_t y = 0; y < xv.dim(1); ++y)
          for (std::size_t xx = 0; xx < xv.dim(2); ++xx) gx.at(c, y, xx) = gxp.at(c, y + pad, xx + pad);
      accumulate(t, x, gx);
    }
  });
}

template <typename T>
Var dense(Tape<T>& tape, Var x, Var w, Var b) {
  Tensor<T> out = ops::dense(tape.value(x), tape.value(w), tape.value(b));
  return tape.record(std::move(out), {x, w, b}, [x, w, b](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad_buffer(Var{self});
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& wv = t.value(w);
    const std::size_t m = wv.dim(0), n = wv.dim(1);
    if (t.requires_grad(w)) {
      auto& gw = t.grad_buffer(w);
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < n; ++i) gw[j * n + i] += gy[j] * xv[i];
    }
    accumulate(t, b, gy);
    if (t.requires_grad(x)) {
      auto& gx = t.grad_buffer(x);
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < n; ++i) gx[i] += gy[j] * wv[j * n + i];
    }
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  Tensor<T> out = ops::relu(tape.value(x));
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad_buffer(Var{self});
    const Tensor<T>& xv = t.value(x);
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < xv.size(); ++i)
      if (xv[i] > T{0}) gx[i] += gy[i];
  });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
  Tensor<T> out = ops::sigmoid(tape.value(x));
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad_buffer(Var{self});
    const Tensor<T>& y = t.value(Var{self});
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] += gy[i] * y[i] * (T{1} - y[i]);
  });
}

template <typename T>
Var softmax(Tape<T>& tape, Var x) {
  Tensor<T> out = ops::softmax(tape.value(x));
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad_buffer(Var{self});
    const Tensor<T>& y = t.value(Var{self});
    T dot{0};
    for (std::size_t i = 0; i < y.size(); ++i) dot += gy[i] * y[i];
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] += y[i] * (gy[i] - dot);
  });
}

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  Tensor<T> out = ops::global_avg_pool(tape.value(x));
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad_buffer(Var{self});
    auto& gx = t.grad_buffer(x);
    const std::size_t area = gx.dim(1) * gx.dim(2);
    for (std::size_t c = 0; c < gx.dim(0); ++c) {
      const T g = gy[c] / static_cast<T>(area);
      for (std::size_t i = 0; i < area; ++i) gx[c * area + i] += g;
    }
  });
}

template <typename T>
Var max_pool2d(Tape<T>& tape, Var x, std::size_t k, std::size_t stride) {
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> out = ops::max_pool2d(xv, k, stride);
  // winning input offset per output, first maximum in scan order
  std::vector<std::size_t> win(out.size());
  const std::size_t h = xv.dim(1), w = xv.dim(2), ho = out.dim(1), wo = out.dim(2);
  for (std::size_t c = 0; c < out.dim(0); ++c)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (c * h + oy * stride) * w + ox * stride;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t idx = (c * h + oy * stride + ky) * w + ox * stride + kx;
            if (xv[idx] > xv[best]) best = idx;
          }
        win[(c * ho + oy) * wo + ox] = best;
      }
  return tape.record(std::move(out), {x}, [x, win = std::move(win)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad_buffer(Var{self});
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < win.size(); ++i) gx[win[i]] += gy[i];
  });
}

template <typename T>
Var avg_pool2d(Tape<T>& tape, Var x, std::size_t k, std::size_t stride) {
  Tensor<T> out = ops::avg_pool2d(tape.value(x), k, stride);
  return tape.record(std::move(out), {x}, [x, k, stride](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad_buffer(Var{self});
    auto& gx = t.grad_buffer(x);
    const T denom = static_cast<T>(k * k);
    for (std::size_t c = 0; c < gy.dim(0); ++c)
      for (std::size_t oy = 0; oy < gy.dim(1); ++oy)
        for (std::size_t ox = 0; ox < gy.dim(2); ++ox) {
          const T g = gy.at(c, oy, ox) / denom;
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) gx.at(c, oy * stride + ky, ox * stride + kx) += g;
        }
  });
}

/// Copy of `x` that blocks gradient flow.
template <typename T>
Var detach(Tape<T>& tape, Var x) {
  return tape.leaf(tape.value(x), false);
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  T acc{0};
  for (T v : xv.data()) acc += v;
  return tape.record(Tensor<T>({1}, acc), {x}, [x](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(Var{self})[0];
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

/// 0.5 * sum(x^2)
template <typename T>
Var half_sq_norm(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  T acc{0};
  for (T v : xv.data()) acc += v * v;
  return tape.record(Tensor<T>({1}, acc / T{2}), {x}, [x](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(Var{self})[0];
    const Tensor<T>& xv2 = t.value(x);
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * xv2[i];
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const T v = tape.value(a)[0] + tape.value(b)[0];
  return tape.record(Tensor<T>({1}, v), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(Var{self})[0];
    if (t.requires_grad(a)) t.grad_buffer(a)[0] += g;
    if (t.requires_grad(b)) t.grad_buffer(b)[0] += g;
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor) {
  return tape.record(Tensor<T>({1}, tape.value(a)[0] * factor), {a}, [a, factor](Tape<T>& t, std::size_t self) {
    t.grad_buffer(a)[0] += t.grad_buffer(Var{self})[0] * factor;
  });
}

/// Cross entropy of softmax(logits) against class `label`, computed through
/// a shifted log-sum-exp.
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::size_t label) {
  const Tensor<T>& z = tape.value(logits);
  if (label >= z.size()) throw ContractError("label out of range");
  const T mx = *std::max_element(z.data().begin(), z.data().end());
  T sum{0};
  for (T v : z.data()) sum += std::exp(v - mx);
  const T loss = std::log(sum) + mx - z[label];
  return tape.record(Tensor<T>({1}, loss), {logits}, [logits, label](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(Var{self})[0];
    Tensor<T> p = ops::softmax(t.value(logits));
    p[label] -= T{1};
    auto& gz = t.grad_buffer(logits);
    for (std::size_t i = 0; i < p.size(); ++i) gz[i] += g * p[i];
  });
}

/// Weighted binary cross entropy summed over a probability vector:
/// sum_j -coeff * (t_j log y_j + (1 - t_j) log(1 - y_j)), with y clamped to
/// [clamp, 1 - clamp]. Clamped entries pass no gradient.
template <typename T>
Var binary_cross_entropy(Tape<T>& tape, Var probs, std::vector<T> targets, T coeff, T clamp) {
  const Tensor<T>& y = tape.value(probs);
  if (targets.size() != y.size()) throw DimensionError("bce target length mismatch");
  T loss{0};
  for (std::size_t j = 0; j < y.size(); ++j) {
    const T yc = std::clamp(y[j], clamp, T{1} - clamp);
    loss -= targets[j] * std::log(yc) + (T{1} - targets[j]) * std::log(T{1} - yc);
  }
  return tape.record(Tensor<T>({1}, coeff * loss), {probs},
                     [probs, targets = std::move(targets), coeff, clamp](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(Var{self})[0] * coeff;
    const Tensor<T>& yv = t.value(probs);
    auto& gy = t.grad_buffer(probs);
    for (std::size_t j = 0; j < yv.size(); ++j) {
      if (yv[j] < clamp || yv[j] > T{1} - clamp) continue;
      gy[j] += g * (-(targets[j] / yv[j]) + (T{1} - targets[j]) / (T{1} - yv[j]));
    }
  });
}

}  // namespace ad
}  // namespace eex
