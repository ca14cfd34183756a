#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "oracles.hpp"

using namespace eex;
using eex::oracle::random_tensor;
using eex::oracle::rel_err;

namespace {

constexpr double kStep = 1e-3;

using UnaryOp = std::function<Var(Tape<double>&, Var)>;

/// Checks d(sum(r .* op(x)))/dx against central differences for a random
/// projection r. Returns the worst relative error over all coordinates.
double check_unary(const UnaryOp& op, Tensor<double> x, std::mt19937_64& rng) {
  Tape<double> probe;
  const Shape out_shape = probe.value(op(probe, probe.leaf(x))).shape();
  const auto r = random_tensor<double>(rng, out_shape);
  auto loss_of = [&](const Tensor<double>& in) {
    Tape<double> t;
    const auto& y = t.value(op(t, t.leaf(in)));
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += r[i] * y[i];
    return s;
  };
  Tape<double> t;
  Var xv = t.leaf(x, true);
  Var y = op(t, xv);
  Var proj = ad::sum(t, ad::dense(t, y, t.leaf(r.reshaped({1, r.size()})), t.leaf(Tensor<double>({1}))));
  t.backward(proj);
  const auto g = t.grad(xv);
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto xs = x;
    const double origin = x[i];
    const double fd = oracle::five_point([&] { return loss_of(xs); }, [&](double d) { xs[i] = origin + d; }, kStep);
    worst = std::max(worst, rel_err(g[i], fd));
  }
  return worst;
}

}  // namespace

TEST(Backward, SumGivesOnes) {
  Tape<double> t;
  Var w = t.leaf(Tensor<double>({4}, 2.5), true);
  t.backward(ad::sum(t, w));
  const auto g = t.grad(w);
  for (double v : g.data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, HalfSquaredNormGivesWeights) {
  Tape<double> t;
  auto w0 = Tensor<double>::vector({1.0, -2.0, 0.5});
  Var w = t.leaf(w0, true);
  t.backward(ad::half_sq_norm(t, w));
  EXPECT_EQ(t.grad(w), w0);
}

TEST(Backward, NonScalarLossRejected) {
  Tape<double> t;
  Var w = t.leaf(Tensor<double>({3}, 1.0), true);
  EXPECT_THROW(t.backward(ad::relu(t, w)), ContractError);
}

TEST(Backward, VisitsOpsInReverseExecutionOrder) {
  Tape<double> t;
  Var a = t.leaf(Tensor<double>({3}, 0.5), true);
  Var b = ad::relu(t, a);
  Var c = ad::sigmoid(t, b);
  Var d = ad::softmax(t, c);
  Var e = ad::sum(t, d);
  const auto visited = t.backward(e);
  EXPECT_EQ(visited, (std::vector<std::size_t>{e.id, d.id, c.id, b.id}));
}

TEST(Backward, DetachBlocksGradient) {
  Tape<double> t;
  Var a = t.leaf(Tensor<double>({2}, 0.5), true);
  Var b = ad::detach(t, a);
  t.backward(ad::sum(t, b));
  const auto g = t.grad(a);
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(GradCheck, Relu) {
  std::mt19937_64 rng(11);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    auto x = random_tensor<double>(rng, {7});
    for (auto& v : x.data())
      if (std::abs(v) < 10 * kStep) v += 0.1;  // keep away from the kink
    worst = std::max(worst, check_unary([](Tape<double>& t, Var v) { return ad::relu(t, v); }, x, rng));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(GradCheck, SigmoidSoftmaxGap) {
  std::mt19937_64 rng(12);
  double ws = 0, wm = 0, wg = 0;
  for (int i = 0; i < 100; ++i) {
    ws = std::max(ws, check_unary([](Tape<double>& t, Var v) { return ad::sigmoid(t, v); },
                                  random_tensor<double>(rng, {6}, -4, 4), rng));
    wm = std::max(wm, check_unary([](Tape<double>& t, Var v) { return ad::softmax(t, v); },
                                  random_tensor<double>(rng, {6}, -4, 4), rng));
    wg = std::max(wg, check_unary([](Tape<double>& t, Var v) { return ad::global_avg_pool(t, v); },
                                  random_tensor<double>(rng, {3, 4, 5}), rng));
  }
  EXPECT_LT(ws, 1e-4);
  EXPECT_LT(wm, 1e-4);
  EXPECT_LT(wg, 1e-4);
}

TEST(GradCheck, Pooling) {
  std::mt19937_64 rng(13);
  double wmax = 0, wavg = 0;
  for (int i = 0; i < 100; ++i) {
    // distinct values spaced well beyond the step keep the max winner fixed
    Tensor<double> x({2, 4, 4});
    std::vector<double> vals(x.size());
    for (std::size_t k = 0; k < vals.size(); ++k) vals[k] = 0.05 * static_cast<double>(k);
    std::shuffle(vals.begin(), vals.end(), rng);
    std::copy(vals.begin(), vals.end(), x.data().begin());
    wmax = std::max(wmax, check_unary([](Tape<double>& t, Var v) { return ad::max_pool2d(t, v, 2, 2); }, x, rng));
    wavg = std::max(wavg, check_unary([](Tape<double>& t, Var v) { return ad::avg_pool2d(t, v, 2, 2); },
                                      random_tensor<double>(rng, {2, 4, 4}), rng));
  }
  EXPECT_LT(wmax, 1e-4);
  EXPECT_LT(wavg, 1e-4);
}

TEST(GradCheck, ConvAndDenseAllInputs) {
  std::mt19937_64 rng(14);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t stride = 1 + i % 2, pad = i % 3 == 0 ? 1 : 0;
    auto x = random_tensor<double>(rng, {2, 5, 5});
    auto w = random_tensor<double>(rng, {3, 2, 3, 3});
    auto b = random_tensor<double>(rng, {3});
    auto r = random_tensor<double>(rng, {3 * ops::conv_out_extent(5, 3, stride, pad) * ops::conv_out_extent(5, 3, stride, pad)});
    auto f = [&](const Tensor<double>& xx, const Tensor<double>& ww, const Tensor<double>& bb) {
      auto y = ops::conv2d(xx, ww, bb, stride, pad);
      double s = 0;
      for (std::size_t k = 0; k < y.size(); ++k) s += r[k] * y[k];
      return s;
    };
    Tape<double> t;
    Var xv = t.leaf(x, true), wv = t.leaf(w, true), bv = t.leaf(b, true);
    Var y = ad::conv2d(t, xv, wv, bv, stride, pad);
    Var l = ad::sum(t, ad::dense(t, y, t.leaf(r.reshaped({1, r.size()})), t.leaf(Tensor<double>({1}))));
    t.backward(l);
    auto gx = t.grad(xv), gw = t.grad(wv), gb = t.grad(bv);
    auto fd = [&](Tensor<double>& target, std::size_t k) {
      const double keep = target[k];
      return oracle::five_point([&] { return f(x, w, b); }, [&](double d) { target[k] = keep + d; }, kStep);
    };
    for (std::size_t k = 0; k < x.size(); ++k) worst = std::max(worst, rel_err(gx[k], fd(x, k)));
    for (std::size_t k = 0; k < w.size(); ++k) worst = std::max(worst, rel_err(gw[k], fd(w, k)));
    for (std::size_t k = 0; k < b.size(); ++k) worst = std::max(worst, rel_err(gb[k], fd(b, k)));

    worst = std::max(worst, check_unary(
                                [&](Tape<double>& tt, Var v) {
                                  return ad::dense(tt, v, tt.leaf(w.reshaped({3, 18})), tt.leaf(b));
                                },
                                random_tensor<double>(rng, {18}), rng));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(GradCheck, LossOps) {
  std::mt19937_64 rng(15);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    auto z = random_tensor<double>(rng, {5}, -3, 3);
    const std::size_t label = static_cast<std::size_t>(i % 5);
    std::vector<double> targets(5, 0.0);
    targets[label] = 1.0;
    worst = std::max(worst, check_unary(
                                [&](Tape<double>& t, Var v) { return ad::softmax_cross_entropy(t, v, label); }, z, rng));
    auto p = random_tensor<double>(rng, {5}, 0.05, 0.95);
    worst = std::max(worst, check_unary(
                                [&](Tape<double>& t, Var v) {
                                  return ad::binary_cross_entropy(t, v, targets, 2.5, 1e-7);
                                },
                                p, rng));
  }
  EXPECT_LT(worst, 1e-4);
}
