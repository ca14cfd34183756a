#pragma once
// Closed-form MAC / FLOP accounting.
//
// Convention: 1 MAC = 2 FLOPs; bias adds, activations (ReLU, sigmoid,
// softmax) and comparisons count 1 op per element; global average pooling
// over an H*W map costs H*W ops per channel (H*W-1 adds and one divide).

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <vector>

#include "eex/model.hpp"
#include "eex/trace.hpp"

namespace eex {

struct LayerCost {
  std::size_t index = 0;
  LayerKind kind = LayerKind::conv;
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;
  std::uint64_t exit_overhead = 0;  // exclusion-head cost when this layer hosts an exit
};

inline std::uint64_t layer_macs(const LayerSpec& spec, const Shape& input) {
  switch (spec.kind) {
    case LayerKind::conv: {
      if (input.size() != 3) throw DimensionError("conv cost needs a [C,H,W] input");
      const std::uint64_t ho = ops::conv_out_extent(input[1], spec.kernel, spec.stride, spec.pad);
      const std::uint64_t wo = ops::conv_out_extent(input[2], spec.kernel, spec.stride, spec.pad);
      return std::uint64_t{spec.units} * input[0] * spec.kernel * spec.kernel * ho * wo;
    }
    case LayerKind::dense: return std::uint64_t{spec.units} * shape_numel(input);
    case LayerKind::pool: return 0;
  }
  return 0;
}

inline std::uint64_t layer_flops(const LayerSpec& spec, const Shape& input) {
  const std::uint64_t macs = layer_macs(spec, input);
  switch (spec.kind) {
    case LayerKind::conv: {
      const std::uint64_t out = std::uint64_t{spec.units} *
                                ops::conv_out_extent(input[1], spec.kernel, spec.stride, spec.pad) *
                                ops::conv_out_extent(input[2], spec.kernel, spec.stride, spec.pad);
      return 2 * macs + out + (spec.activation == Activation::relu ? out : 0);
    }
    case LayerKind::dense:
      return 2 * macs + spec.units + (spec.activation == Activation::relu ? spec.units : 0);
    case LayerKind::pool: {
      if (input.size() != 3) throw DimensionError("pool cost needs a [C,H,W] input");
      const std::uint64_t out = std::uint64_t{input[0]} * ops::conv_out_extent(input[1], spec.kernel, spec.stride, 0) *
                                ops::conv_out_extent(input[2], spec.kernel, spec.stride, 0);
      const std::uint64_t window = std::uint64_t{spec.kernel} * spec.kernel;
      return out * (spec.pool == PoolMode::max ? window - 1 : window);
    }
  }
  return 0;
}

/// GAP over C channels of `area` pixels, M affine units over C inputs, and
/// one output activation (sigmoid or softmax) per class.
inline std::uint64_t exit_overhead_flops(std::uint64_t channels, std::uint64_t area, std::uint64_t num_classes) {
  if (channels == 0 || area == 0 || num_classes == 0) throw DimensionError("exit overhead needs positive dims");
  return channels * area + 2 * channels * num_classes + num_classes + num_classes;
}

inline std::uint64_t exit_overhead_macs(std::uint64_t channels, std::uint64_t num_classes) {
  return channels * num_classes;
}

class CostModel {
 public:
  std::vector<LayerCost> layers;
  std::vector<std::size_t> exit_layer;           // backbone index per exit
  std::vector<std::uint64_t> exit_flops;         // head overhead per exit
  std::vector<std::uint64_t> exit_macs;
  std::uint64_t classifier_flops = 0;
  std::uint64_t classifier_macs = 0;

  static CostModel from_config(const ModelConfig& cfg) {
    cfg.validate();
    const auto shapes = cfg.layer_shapes();
    CostModel c;
    Shape prev = cfg.input;
    for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
      const auto& s = cfg.backbone[i];
      LayerCost lc{i, s.kind, layer_macs(s, prev), layer_flops(s, prev), 0};
      if (s.kind == LayerKind::conv) {
        const auto& out = shapes[i];
        lc.exit_overhead = exit_overhead_flops(out[0], out[1] * out[2], cfg.num_classes);
        c.exit_layer.push_back(i);
        c.exit_flops.push_back(lc.exit_overhead);
        c.exit_macs.push_back(exit_overhead_macs(out[0], cfg.num_classes));
      }
      c.layers.push_back(lc);
      prev = shapes[i];
    }
    const LayerSpec head = LayerSpec::dense(cfg.num_classes, Activation::none);
    c.classifier_macs = layer_macs(head, prev);
    c.classifier_flops = layer_flops(head, prev);
    return c;
  }

  std::size_t num_exits() const noexcept { return exit_layer.size(); }

  /// Backbone cost of every layer up to and including exit `exit`'s conv
  /// layer (1-based).
  std::uint64_t backbone_flops_through(std::size_t exit) const {
    check_exit(exit);
    std::uint64_t f = 0;
    for (std::size_t i = 0; i <= exit_layer[exit - 1]; ++i) f += layers[i].flops;
    return f;
  }

  std::uint64_t backbone_macs_through(std::size_t exit) const {
    check_exit(exit);
    std::uint64_t m = 0;
    for (std::size_t i = 0; i <= exit_layer[exit - 1]; ++i) m += layers[i].macs;
    return m;
  }

  std::uint64_t backbone_flops() const {
    std::uint64_t f = 0;
    for (auto& l : layers) f += l.flops;
    return f;
  }

  std::uint64_t backbone_macs() const {
    std::uint64_t m = 0;
    for (auto& l : layers) m += l.macs;
    return m;
  }

  /// Cost of plain inference without any exit heads.
  std::uint64_t static_flops() const { return backbone_flops() + classifier_flops; }
  std::uint64_t static_macs() const { return backbone_macs() + classifier_macs; }

  std::uint64_t total_exit_flops() const { return std::accumulate(exit_flops.begin(), exit_flops.end(), std::uint64_t{0}); }

  /// MAC count of the conv layer hosting exit `exit` (1-based).
  std::uint64_t exit_layer_macs(std::size_t exit) const {
    check_exit(exit);
    return layers[exit_layer[exit - 1]].macs;
  }

  /// CSV with columns layer, kind, macs, flops, exit_overhead; the final
  /// classifier is the last row.
  void write_csv(std::ostream& os) const {
    os << "layer,kind,macs,flops,exit_overhead\n";
    for (auto& l : layers) {
      const char* kind = l.kind == LayerKind::conv ? "conv" : l.kind == LayerKind::dense ? "dense" : "pool";
      os << l.index << ',' << kind << ',' << l.macs << ',' << l.flops << ',' << l.exit_overhead << '\n';
    }
    os << "classifier,dense," << classifier_macs << ',' << classifier_flops << ",0\n";
  }

 private:
  void check_exit(std::size_t exit) const {
    if (exit < 1 || exit > exit_layer.size())
      throw ContractError("exit " + std::to_string(exit) + " outside [1, " + std::to_string(exit_layer.size()) + "]");
  }
};

namespace detail {
inline void check_trace(const InferenceTrace& t, const CostModel& cost) {
  if (t.exit_layer < 1 || t.exit_layer > cost.num_exits())
    throw ContractError("trace exit layer " + std::to_string(t.exit_layer) + " does not fit the cost model");
  if (t.exits.size() != t.exit_layer) throw ContractError("trace records do not match its exit layer");
}
}  // namespace detail

/// Backbone through the exit layer, one head overhead per visited exit, and
/// the final classifier when the trace ran to the end.
inline std::uint64_t flops_of_trace(const InferenceTrace& t, const CostModel& cost) {
  detail::check_trace(t, cost);
  std::uint64_t f = cost.backbone_flops_through(t.exit_layer);
  for (std::size_t i = 0; i < t.exit_layer; ++i) f += cost.exit_flops[i];
  if (t.reason == ExitReason::final_layer) {
    for (std::size_t i = cost.exit_layer.back() + 1; i < cost.layers.size(); ++i) f += cost.layers[i].flops;
    f += cost.classifier_flops;
  }
  return f;
}

inline std::uint64_t macs_of_trace(const InferenceTrace& t, const CostModel& cost) {
  detail::check_trace(t, cost);
  std::uint64_t m = cost.backbone_macs_through(t.exit_layer);
  for (std::size_t i = 0; i < t.exit_layer; ++i) m += cost.exit_macs[i];
  if (t.reason == ExitReason::final_layer) {
    for (std::size_t i = cost.exit_layer.back() + 1; i < cost.layers.size(); ++i) m += cost.layers[i].macs;
    m += cost.classifier_macs;
  }
  return m;
}

struct FlopsSummary {
  double mean_flops = 0.0;
  double mean_macs = 0.0;
  double reduction = 0.0;  // 1 - mean / static
};

inline FlopsSummary average_flops(const std::vector<InferenceTrace>& traces, const CostModel& cost) {
  if (traces.empty()) throw ContractError("average_flops needs at least one trace");
  double f = 0.0, m = 0.0;
  for (auto& t : traces) {
    f += static_cast<double>(t.flops);
    m += static_cast<double>(t.macs);
  }
  FlopsSummary s;
  s.mean_flops = f / static_cast<double>(traces.size());
  s.mean_macs = m / static_cast<double>(traces.size());
  s.reduction = 1.0 - s.mean_flops / static_cast<double>(cost.static_flops());
  return s;
}

}  // namespace eex
