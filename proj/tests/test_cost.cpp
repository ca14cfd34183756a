#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "oracles.hpp"

using namespace eex;
using eex::oracle::random_tensor;

TEST(LayerMacs, ClosedFormExamples) {
  EXPECT_EQ(layer_macs(LayerSpec::conv(16, 3, 1, 1), {3, 32, 32}), 442368u);
  EXPECT_EQ(layer_macs(LayerSpec::dense(10), {512}), 5120u);
  EXPECT_EQ(layer_macs(LayerSpec::max_pool(), {4, 8, 8}), 0u);
  EXPECT_THROW(layer_macs(LayerSpec::conv(4, 5, 1, 0), {1, 3, 3}), DimensionError);
}

TEST(LayerFlops, AtLeastTwiceMacs) {
  EXPECT_GE(layer_flops(LayerSpec::conv(16, 3, 1, 1), {3, 32, 32}), 2 * 442368u);
  EXPECT_EQ(layer_flops(LayerSpec::dense(10, Activation::none), {512}), 2 * 5120u + 10);
  EXPECT_EQ(layer_flops(LayerSpec::avg_pool(), {2, 4, 4}), 2u * 2 * 2 * 4);
  EXPECT_EQ(layer_flops(LayerSpec::max_pool(), {2, 4, 4}), 2u * 2 * 2 * 3);
}

TEST(ExitOverhead, ClosedFormExamples) {
  EXPECT_EQ(exit_overhead_flops(16, 64, 10), 1364u);
  const std::uint64_t c = 7, hw = 9;
  EXPECT_EQ(exit_overhead_flops(c, hw, 1), c * hw + (2 * c + 1) + 1);
  EXPECT_THROW(exit_overhead_flops(0, 4, 2), DimensionError);
}

TEST(ExitOverhead, MatchesInstrumentedCounter) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> d(1, 12);
  for (int t = 0; t < 100; ++t) {
    const std::size_t c = d(rng), h = d(rng), w = d(rng), m = 1 + d(rng) % 10;
    const auto fmap = random_tensor<float>(rng, {c, h, w});
    const auto wt = random_tensor<float>(rng, {m, c});
    const auto b = random_tensor<float>(rng, {m});
    OpCount n;
    {
      CountingScope scope(n);
      ops::sigmoid(ops::dense(ops::global_avg_pool(fmap), wt, b));
    }
    EXPECT_EQ(n.flops, exit_overhead_flops(c, h * w, m));
    EXPECT_EQ(n.macs, exit_overhead_macs(c, m));
  }
}

TEST(LayerCost, MatchesInstrumentedCounterOnRandomArchitectures) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 10; ++t) {
    const auto cfg = oracle::random_config(rng, 1 + t % 5, 2 + t % 9, {1 + static_cast<std::size_t>(t % 3), 14, 14});
    const auto m = build<float>(cfg, t);
    const auto cost = CostModel::from_config(cfg);
    Tensor<float> x = random_tensor<float>(rng, cfg.input, 0, 1);
    for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
      OpCount n;
      {
        CountingScope scope(n);
        x = apply_layer(cfg.backbone[i], m.layers[i], x);
      }
      EXPECT_EQ(n.macs, cost.layers[i].macs) << "layer " << i;
      EXPECT_EQ(n.flops, cost.layers[i].flops) << "layer " << i;
    }
    OpCount n;
    {
      CountingScope scope(n);
      ops::dense(x, m.classifier.weight, m.classifier.bias);
    }
    EXPECT_EQ(n.macs, cost.classifier_macs);
    EXPECT_EQ(n.flops, cost.classifier_flops);
  }
}

TEST(TraceCost, InstrumentedDynamicInferenceMatchesTraceFlops) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::size_t early = 0;
  for (int t = 0; t < 60; ++t) {
    const auto cfg = oracle::random_config(rng, 1 + t % 5, 2 + t % 6, {2, 12, 12});
    auto m = build<float>(cfg, t);
    for (auto& e : m.exits)
      for (auto& w : e.exclusion.weight.data()) w *= 15.0f;
    const auto cost = CostModel::from_config(cfg);
    BetaSchedule b;
    for (std::size_t i = 0; i < cfg.num_exits; ++i) b.beta.push_back(u(rng));
    const auto x = random_tensor<float>(rng, cfg.input, 0, 1);
    OpCount n;
    InferenceTrace tr;
    {
      CountingScope scope(n);
      tr = dynamic_infer(m, x, b, cost);
    }
    EXPECT_EQ(n.flops, tr.flops);
    EXPECT_EQ(n.macs, tr.macs);
    if (tr.exit_layer < cfg.num_exits) ++early;
  }
  EXPECT_GT(early, 5u);
}

TEST(TraceCost, BoundaryCases) {
  ModelConfig cfg;
  cfg.input = {1, 8, 8};
  cfg.num_classes = 3;
  cfg.backbone = {LayerSpec::conv(4), LayerSpec::max_pool(), LayerSpec::conv(6), LayerSpec::dense(5)};
  cfg.num_exits = 2;
  const auto c = CostModel::from_config(cfg);
  InferenceTrace full;
  full.exits.resize(2);
  full.exit_layer = 2;
  full.reason = ExitReason::final_layer;
  EXPECT_EQ(flops_of_trace(full, c), c.backbone_flops() + c.exit_flops[0] + c.exit_flops[1] + c.classifier_flops);
  InferenceTrace first;
  first.exits.resize(1);
  first.exit_layer = 1;
  first.reason = ExitReason::single_class;
  EXPECT_EQ(flops_of_trace(first, c), c.layers[0].flops + c.exit_flops[0]);
  InferenceTrace bad;
  bad.exits.resize(3);
  bad.exit_layer = 3;
  EXPECT_THROW(flops_of_trace(bad, c), ContractError);
}

TEST(TraceCost, RandomTracesMatchTableReplay) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 200; ++t) {
    const auto cfg = oracle::random_config(rng, 1 + t % 6, 3, {1, 16, 16});
    const auto c = CostModel::from_config(cfg);
    const auto shapes = cfg.layer_shapes();
    InferenceTrace tr;
    tr.exit_layer = 1 + rng() % cfg.num_exits;
    tr.exits.resize(tr.exit_layer);
    tr.reason = tr.exit_layer == cfg.num_exits && rng() % 2 ? ExitReason::final_layer : ExitReason::single_class;
    // replay from per-layer closed forms computed here
    std::uint64_t want = 0;
    Shape prev = cfg.input;
    std::size_t seen = 0;
    for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
      const bool past_exit = seen >= tr.exit_layer;
      if (past_exit && tr.reason != ExitReason::final_layer) break;
      want += layer_flops(cfg.backbone[i], prev);
      if (cfg.backbone[i].kind == LayerKind::conv) {
        want += exit_overhead_flops(shapes[i][0], shapes[i][1] * shapes[i][2], cfg.num_classes);
        ++seen;
      }
      prev = shapes[i];
    }
    if (tr.reason == ExitReason::final_layer) want += 2 * shape_numel(prev) * cfg.num_classes + cfg.num_classes;
    EXPECT_EQ(flops_of_trace(tr, c), want);
  }
}

TEST(TraceCost, StrictlyIncreasingInExitLayer) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const auto cfg = oracle::random_config(rng, 2 + t % 5, 4, {1, 16, 16});
    const auto c = CostModel::from_config(cfg);
    std::uint64_t prev = 0;
    for (std::size_t e = 1; e <= cfg.num_exits; ++e) {
      InferenceTrace tr;
      tr.exit_layer = e;
      tr.exits.resize(e);
      tr.reason = e == cfg.num_exits ? ExitReason::final_layer : ExitReason::single_class;
      const auto f = flops_of_trace(tr, c);
      EXPECT_GT(f, prev);
      prev = f;
    }
  }
}

TEST(AverageFlops, HandArithmeticAndBoundaries) {
  ModelConfig cfg;
  cfg.input = {1, 4, 4};
  cfg.num_classes = 2;
  cfg.backbone = {LayerSpec::conv(2), LayerSpec::conv(2)};
  cfg.num_exits = 2;
  const auto c = CostModel::from_config(cfg);
  // conv1: 2*1*9*16 = 288 MACs; flops 576 + 32 bias + 32 relu = 640
  EXPECT_EQ(c.layers[0].flops, 640u);
  // conv2: 2*2*9*16 = 576 MACs; flops 1152 + 64 = 1216
  EXPECT_EQ(c.layers[1].flops, 1216u);
  // exit overhead: 2*16 + 2*2*2 + 2 + 2 = 44; classifier: 2*32*2 + 2 = 130
  EXPECT_EQ(c.exit_flops[0], 44u);
  EXPECT_EQ(c.classifier_flops, 130u);
  InferenceTrace a, b;
  a.exit_layer = 1;
  a.exits.resize(1);
  a.reason = ExitReason::single_class;
  a.flops = flops_of_trace(a, c);
  b.exit_layer = 2;
  b.exits.resize(2);
  b.reason = ExitReason::final_layer;
  b.flops = flops_of_trace(b, c);
  EXPECT_EQ(a.flops, 684u);
  EXPECT_EQ(b.flops, 640u + 1216 + 44 + 44 + 130);
  const auto s = average_flops({a, b}, c);
  EXPECT_DOUBLE_EQ(s.mean_flops, (684.0 + 2074.0) / 2);
  EXPECT_DOUBLE_EQ(s.reduction, 1.0 - s.mean_flops / 1986.0);
  EXPECT_LE(average_flops({b, b}, c).reduction, 0.0);
  EXPECT_THROW(average_flops({}, c), ContractError);
}

TEST(AverageFlops, ZeroBetaEqualsStaticPlusOverhead) {
  std::mt19937_64 rng(6);
  const auto cfg = oracle::random_config(rng, 3, 4, {1, 12, 12});
  const auto m = build<float>(cfg, 1);
  const auto cost = CostModel::from_config(cfg);
  std::vector<InferenceTrace> tr;
  for (int i = 0; i < 20; ++i)
    tr.push_back(dynamic_infer(m, random_tensor<float>(rng, cfg.input, 0, 1), BetaSchedule::zeros(3), cost));
  EXPECT_EQ(average_flops(tr, cost).mean_flops, static_cast<double>(cost.static_flops() + cost.total_exit_flops()));
}

TEST(CostModel, CsvHasOneRowPerLayerPlusClassifier) {
  ModelConfig cfg;
  cfg.input = {1, 8, 8};
  cfg.num_classes = 3;
  cfg.backbone = {LayerSpec::conv(4), LayerSpec::avg_pool(), LayerSpec::conv(6)};
  cfg.num_exits = 2;
  std::ostringstream os;
  CostModel::from_config(cfg).write_csv(os);
  const std::string s = os.str();
  EXPECT_EQ(s.rfind("layer,kind,macs,flops,exit_overhead\n", 0), 0u);
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 5);
  EXPECT_NE(s.find("1,pool,0,"), std::string::npos);
}
