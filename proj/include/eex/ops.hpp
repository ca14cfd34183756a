#pragma once
// Forward kernels. Every kernel reports its work to the active OpCount (if
// any) using the loop trip counts it actually executes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "eex/tensor.hpp"

namespace eex::ops {

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  if (stride == 0) throw DimensionError("stride must be >= 1");
  if (k == 0 || k > in + 2 * pad)
    throw DimensionError("kernel " + std::to_string(k) + " does not fit extent " +
                         std::to_string(in) + " with pad " + std::to_string(pad));
  return (in + 2 * pad - k) / stride + 1;
}

/// Zero-padded copy of a [C,H,W] map.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, std::size_t pad) {
  if (pad == 0) return x;
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> out({c, h + 2 * pad, w + 2 * pad});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(&x.at(ch, y, 0), w, &out.at(ch, y + pad, pad));
  return out;
}

/// Cross-correlation over an already padded input.
template <typename T>
Tensor<T> conv2d_padded(const Tensor<T>& xp, const Tensor<T>& weight, const Tensor<T>& bias,
                        std::size_t stride) {
  const std::size_t cin = xp.dim(0), hp = xp.dim(1), wp = xp.dim(2);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  const std::size_t ho = conv_out_extent(hp, k, stride, 0);
  const std::size_t wo = conv_out_extent(wp, k, stride, 0);
  Tensor<T> out({cout, ho, wo});
  const T* in = xp.data().data();
  const T* wt = weight.data().data();
  T* o = out.data().data();
  for (std::size_t co = 0; co < cout; ++co) {
    T* plane = o + co * ho * wo;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* src = in + ci * hp * wp;
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T wv = wt[((co * cin + ci) * k + ky) * k + kx];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const T* row = src + (oy * stride + ky) * wp + kx;
            T* dst = plane + oy * wo;
            if (stride == 1) {
              for (std::size_t ox = 0; ox < wo; ++ox) dst[ox] += wv * row[ox];
            } else {
              for (std::size_t ox = 0; ox < wo; ++ox) dst[ox] += wv * row[ox * stride];
            }
          }
        }
    }
    const T b = bias[co];
    for (std::size_t i = 0; i < ho * wo; ++i) plane[i] += b;
  }
  detail::count_macs(static_cast<std::uint64_t>(cout) * cin * k * k * ho * wo);
  detail::count_ops(static_cast<std::uint64_t>(cout) * ho * wo);
  return out;
}

template <typename T>
void check_conv_shapes(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (input.rank() != 3) throw DimensionError("conv2d input must be [C,H,W], got " + shape_str(input.shape()));
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3))
    throw DimensionError("conv2d weight must be [Cout,Cin,K,K], got " + shape_str(weight.shape()));
  if (weight.dim(1) != input.dim(0))
    throw DimensionError("conv2d weight expects " + std::to_string(weight.dim(1)) +
                         " input channels, input has " + std::to_string(input.dim(0)));
  if (bias.size() != weight.dim(0)) throw DimensionError("conv2d bias length mismatch");
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
  check_conv_shapes(input, weight, bias);
  conv_out_extent(input.dim(1), weight.dim(2), stride, pad);
  conv_out_extent(input.dim(2), weight.dim(2), stride, pad);
  return conv2d_padded(pad2d(input, pad), weight, bias, stride);
}

/// out[j] = sum_i weight[j,i] * input[i] + bias[j]; input of any shape is
/// read as a flat vector.
template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2) throw DimensionError("dense weight must be [m,n], got " + shape_str(weight.shape()));
  const std::size_t m = weight.dim(0), n = weight.dim(1);
  if (input.size() != n)
    throw DimensionError("dense expects " + std::to_string(n) + " inputs, got " + std::to_string(input.size()));
  if (bias.size() != m) throw DimensionError("dense bias length mismatch");
  Tensor<T> out({m});
  const T* x = input.data().data();
  const T* w = weight.data().data();
  for (std::size_t j = 0; j < m; ++j) {
    T acc{0};
    const T* row = w + j * n;
    for (std::size_t i = 0; i < n; ++i) acc += row[i] * x[i];
    out[j] = acc + bias[j];
  }
  detail::count_macs(static_cast<std::uint64_t>(m) * n);
  detail::count_ops(m);
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  if (input.rank() != 3) throw DimensionError("global_avg_pool input must be [C,H,W]");
  const std::size_t c = input.dim(0), area = input.dim(1) * input.dim(2);
  Tensor<T> out({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* p = input.data().data() + ch * area;
    T acc = p[0];
    for (std::size_t i = 1; i < area; ++i) acc += p[i];
    out[ch] = acc / static_cast<T>(area);
  }
  // area-1 adds plus one divide per channel
  detail::count_ops(static_cast<std::uint64_t>(c) * area);
  return out;
}

template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
  detail::count_ops(x.size());
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T mx = *std::max_element(x.data().begin(), x.data().end());
  T sum{0};
  for (std::size_t i = 0; i < x.size(); ++i) sum += (out[i] = std::exp(x[i] - mx));
  for (std::size_t i = 0; i < x.size(); ++i) out[i] /= sum;
  detail::count_ops(x.size());
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  detail::count_ops(x.size());
  return out;
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  if (x.rank() != 3) throw DimensionError("max_pool2d input must be [C,H,W]");
  const std::size_t c = x.dim(0);
  const std::size_t ho = conv_out_extent(x.dim(1), k, stride, 0);
  const std::size_t wo = conv_out_extent(x.dim(2), k, stride, 0);
  Tensor<T> out({c, ho, wo});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T best = x.at(ch, oy * stride, ox * stride);
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) best = std::max(best, x.at(ch, oy * stride + ky, ox * stride + kx));
        out.at(ch, oy, ox) = best;
      }
  detail::count_ops(static_cast<std::uint64_t>(c) * ho * wo * (k * k - 1));
  return out;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  if (x.rank() != 3) throw DimensionError("avg_pool2d input must be [C,H,W]");
  const std::size_t c = x.dim(0);
  const std::size_t ho = conv_out_extent(x.dim(1), k, stride, 0);
  const std::size_t wo = conv_out_extent(x.dim(2), k, stride, 0);
  Tensor<T> out({c, ho, wo});
  const T denom = static_cast<T>(k * k);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T acc{0};
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) acc += x.at(ch, oy * stride + ky, ox * stride + kx);
        out.at(ch, oy, ox) = acc / denom;
      }
  detail::count_ops(static_cast<std::uint64_t>(c) * ho * wo * k * k);
  return out;
}

/// Index of the largest value; the lowest index wins ties.
template <typename T>
std::size_t argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

template <typename T>
std::size_t argmax(const Tensor<T>& t) {
  return argmax(t.data());
}

}  // namespace eex::ops
