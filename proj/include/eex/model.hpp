#pragma once
// Convolutional backbone with an exit point after every conv layer. Each exit
// carries M independent class-exclusion units (GAP -> affine -> sigmoid) and
// a softmax classifier used by the confidence baseline.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "eex/autograd.hpp"
#include "eex/ops.hpp"
#include "eex/tensor.hpp"

namespace eex {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class LayerKind { conv, dense, pool };
enum class Activation { none, relu };
enum class PoolMode { max, avg };

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::size_t units = 0;  // output channels for conv, output width for dense
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 0;
  Activation activation = Activation::relu;
  PoolMode pool = PoolMode::max;

  static LayerSpec conv(std::size_t channels, std::size_t kernel = 3, std::size_t stride = 1,
                        std::size_t pad = 1, Activation act = Activation::relu) {
    return {LayerKind::conv, channels, kernel, stride, pad, act, PoolMode::max};
  }
  static LayerSpec max_pool(std::size_t kernel = 2, std::size_t stride = 2) {
    return {LayerKind::pool, 0, kernel, stride, 0, Activation::none, PoolMode::max};
  }
  static LayerSpec avg_pool(std::size_t kernel = 2, std::size_t stride = 2) {
    return {LayerKind::pool, 0, kernel, stride, 0, Activation::none, PoolMode::avg};
  }
  static LayerSpec dense(std::size_t units, Activation act = Activation::relu) {
    return {LayerKind::dense, units, 0, 1, 0, act, PoolMode::max};
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelConfig {
  Shape input{1, 16, 16};  // C, H, W
  std::vector<LayerSpec> backbone;
  std::size_t num_classes = 10;
  std::size_t num_exits = 0;

  /// Output shape of every backbone layer. Throws ConfigError on any
  /// incompatibility.
  std::vector<Shape> layer_shapes() const {
    if (input.size() != 3) throw ConfigError("input shape must be [C,H,W]");
    for (auto d : input)
      if (d == 0) throw ConfigError("input shape has a zero extent");
    std::vector<Shape> shapes;
    Shape cur = input;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
      const LayerSpec& s = backbone[i];
      const std::string where = "layer " + std::to_string(i) + ": ";
      try {
        switch (s.kind) {
          case LayerKind::conv:
            if (cur.size() != 3) throw ConfigError(where + "conv after dense");
            if (s.units == 0) throw ConfigError(where + "conv needs channels > 0");
            cur = {s.units, ops::conv_out_extent(cur[1], s.kernel, s.stride, s.pad),
                   ops::conv_out_extent(cur[2], s.kernel, s.stride, s.pad)};
            break;
          case LayerKind::pool:
            if (cur.size() != 3) throw ConfigError(where + "pool after dense");
            cur = {cur[0], ops::conv_out_extent(cur[1], s.kernel, s.stride, 0),
                   ops::conv_out_extent(cur[2], s.kernel, s.stride, 0)};
            break;
          case LayerKind::dense:
            if (s.units == 0) throw ConfigError(where + "dense needs units > 0");
            cur = {s.units};
            break;
        }
      } catch (const DimensionError& e) {
        throw ConfigError(where + e.what());
      }
      shapes.push_back(cur);
    }
    return shapes;
  }

  /// Backbone indices of the conv layers, one per exit point.
  std::vector<std::size_t> exit_layers() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < backbone.size(); ++i)
      if (backbone[i].kind == LayerKind::conv) idx.push_back(i);
    return idx;
  }

  void validate() const {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    const auto convs = exit_layers();
    if (convs.empty()) throw ConfigError("backbone needs at least one conv layer");
    if (num_exits != convs.size())
      throw ConfigError("num_exits (" + std::to_string(num_exits) + ") must equal the conv layer count (" +
                        std::to_string(convs.size()) + ")");
    layer_shapes();
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct Affine {
  Tensor<T> weight;  // [out, in] or [Cout, Cin, K, K]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct ExitHeads {
  std::size_t layer = 0;  // backbone index of the tapped conv layer
  Affine<T> exclusion;    // row j is the unit for class j
  Affine<T> classifier;
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T = float>
class Model {
 public:
  ModelConfig config;
  std::vector<Affine<T>> layers;  // pool layers hold empty tensors
  std::vector<ExitHeads<T>> exits;
  Affine<T> classifier;

  std::size_t num_exits() const noexcept { return exits.size(); }
  std::size_t num_classes() const noexcept { return config.num_classes; }

  /// Every trainable tensor in declaration order: backbone layers, then exit
  /// heads, then the final classifier.
  std::vector<NamedParam<T>> parameters() {
    std::vector<NamedParam<T>> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (config.backbone[i].kind == LayerKind::pool) continue;
      const std::string p = "layer" + std::to_string(i);
      out.push_back({p + ".weight", &layers[i].weight});
      out.push_back({p + ".bias", &layers[i].bias});
    }
    for (std::size_t i = 0; i < exits.size(); ++i) {
      const std::string p = "exit" + std::to_string(i + 1);
      out.push_back({p + ".exclusion.weight", &exits[i].exclusion.weight});
      out.push_back({p + ".exclusion.bias", &exits[i].exclusion.bias});
      out.push_back({p + ".classifier.weight", &exits[i].classifier.weight});
      out.push_back({p + ".classifier.bias", &exits[i].classifier.bias});
    }
    out.push_back({"classifier.weight", &classifier.weight});
    out.push_back({"classifier.bias", &classifier.bias});
    return out;
  }

  std::vector<std::pair<std::string, const Tensor<T>*>> parameters() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (auto& p : const_cast<Model*>(this)->parameters()) out.emplace_back(p.name, p.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& p : parameters()) n += p.second->size();
    return n;
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> m;
    m.config = config;
    auto conv = [](const Affine<T>& a) {
      return Affine<U>{a.weight.empty() ? Tensor<U>() : a.weight.template cast<U>(),
                       a.bias.empty() ? Tensor<U>() : a.bias.template cast<U>()};
    };
    for (auto& l : layers) m.layers.push_back(conv(l));
    for (auto& e : exits) m.exits.push_back({e.layer, conv(e.exclusion), conv(e.classifier)});
    m.classifier = conv(classifier);
    return m;
  }
};

/// Parameter shapes implied by a config, in Model::parameters() order.
inline std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& cfg) {
  cfg.validate();
  const auto shapes = cfg.layer_shapes();
  std::vector<std::pair<std::string, Shape>> out;
  Shape prev = cfg.input;
  for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
    const auto& s = cfg.backbone[i];
    const std::string p = "layer" + std::to_string(i);
    if (s.kind == LayerKind::conv) {
      out.push_back({p + ".weight", {s.units, prev[0], s.kernel, s.kernel}});
      out.push_back({p + ".bias", {s.units}});
    } else if (s.kind == LayerKind::dense) {
      out.push_back({p + ".weight", {s.units, shape_numel(prev)}});
      out.push_back({p + ".bias", {s.units}});
    }
    prev = shapes[i];
  }
  const auto convs = cfg.exit_layers();
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const std::string p = "exit" + std::to_string(i + 1);
    const std::size_t c = shapes[convs[i]][0];
    out.push_back({p + ".exclusion.weight", {cfg.num_classes, c}});
    out.push_back({p + ".exclusion.bias", {cfg.num_classes}});
    out.push_back({p + ".classifier.weight", {cfg.num_classes, c}});
    out.push_back({p + ".classifier.bias", {cfg.num_classes}});
  }
  out.push_back({"classifier.weight", {cfg.num_classes, shape_numel(shapes.empty() ? cfg.input : shapes.back())}});
  out.push_back({"classifier.bias", {cfg.num_classes}});
  return out;
}

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)) and zero biases, drawn
/// from one mt19937_64 stream in parameter order.
template <typename T = float>
Model<T> build(const ModelConfig& cfg, std::uint64_t seed) {
  const auto shapes = parameter_shapes(cfg);
  Model<T> m;
  m.config = cfg;
  m.layers.resize(cfg.backbone.size());
  for (auto li : cfg.exit_layers()) m.exits.push_back({li, {}, {}});

  std::mt19937_64 rng(seed);
  auto make = [&](const Shape& s, bool is_bias) {
    Tensor<T> t(s);
    if (is_bias) return t;
    const std::size_t fan_in = shape_numel(s) / s[0];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
  };

  std::size_t k = 0;
  for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
    if (cfg.backbone[i].kind == LayerKind::pool) continue;
    m.layers[i].weight = make(shapes[k++].second, false);
    m.layers[i].bias = make(shapes[k++].second, true);
  }
  for (auto& e : m.exits) {
    e.exclusion.weight = make(shapes[k++].second, false);
    e.exclusion.bias = make(shapes[k++].second, true);
    e.classifier.weight = make(shapes[k++].second, false);
    e.classifier.bias = make(shapes[k++].second, true);
  }
  m.classifier.weight = make(shapes[k++].second, false);
  m.classifier.bias = make(shapes[k++].second, true);
  return m;
}

template <typename T>
Tensor<T> apply_layer(const LayerSpec& s, const Affine<T>& p, const Tensor<T>& x) {
  Tensor<T> y;
  switch (s.kind) {
    case LayerKind::conv: y = ops::conv2d(x, p.weight, p.bias, s.stride, s.pad); break;
    case LayerKind::dense: y = ops::dense(x, p.weight, p.bias); break;
    case LayerKind::pool:
      return s.pool == PoolMode::max ? ops::max_pool2d(x, s.kernel, s.stride) : ops::avg_pool2d(x, s.kernel, s.stride);
  }
  return s.activation == Activation::relu ? ops::relu(y) : y;
}

template <typename T>
struct ExitOutput {
  Tensor<T> exclusion;   // sigmoid probability per class
  Tensor<T> classifier;  // softmax over classes
};

template <typename T>
struct FullOutput {
  Tensor<T> final_logits;
  std::vector<ExitOutput<T>> exits;
};

/// Walks the backbone one exit point at a time so callers can stop early
/// without executing deeper layers.
template <typename T = float>
class ForwardCursor {
 public:
  ForwardCursor(const Model<T>& model, Tensor<T> input) : model_(model), act_(std::move(input)) {
    if (act_.shape() != model.config.input)
      throw DimensionError("input shape " + shape_str(act_.shape()) + " does not match model input " +
                           shape_str(model.config.input));
  }

  std::size_t exits_done() const noexcept { return exits_done_; }
  std::size_t num_exits() const noexcept { return model_.exits.size(); }

  /// Runs layers through the next conv layer (with its activation) and
  /// returns the tapped feature map.
  const Tensor<T>& advance() {
    if (exits_done_ >= model_.exits.size()) throw ContractError("no exit points left");
    const std::size_t target = model_.exits[exits_done_].layer;
    while (next_layer_ <= target) step();
    ++exits_done_;
    gap_ = ops::global_avg_pool(act_);
    return act_;
  }

  /// Exclusion probabilities at the exit reached by the last advance().
  Tensor<T> exclusion_probs() const {
    const auto& h = current_exit().exclusion;
    return checked(ops::sigmoid(ops::dense(gap_, h.weight, h.bias)));
  }

  Tensor<T> classifier_probs() const {
    const auto& h = current_exit().classifier;
    return checked(ops::softmax(ops::dense(gap_, h.weight, h.bias)));
  }

  /// Runs the remaining backbone and the final classifier.
  Tensor<T> final_logits() {
    while (next_layer_ < model_.config.backbone.size()) step();
    exits_done_ = model_.exits.size();
    return checked(ops::dense(act_, model_.classifier.weight, model_.classifier.bias));
  }

 private:
  const ExitHeads<T>& current_exit() const {
    if (exits_done_ == 0) throw ContractError("advance() has not been called");
    return model_.exits[exits_done_ - 1];
  }

  void step() {
    act_ = checked(apply_layer(model_.config.backbone[next_layer_], model_.layers[next_layer_], act_));
    ++next_layer_;
  }

  static Tensor<T> checked(Tensor<T> t) {
    if (!t.all_finite()) throw NumericError("non-finite activation");
    return t;
  }

  const Model<T>& model_;
  Tensor<T> act_;
  Tensor<T> gap_;
  std::size_t next_layer_ = 0;
  std::size_t exits_done_ = 0;
};

/// Exit outputs for exits 1..upto_exit only; deeper layers are not executed.
template <typename T>
std::vector<ExitOutput<T>> forward_prefix(const Model<T>& model, const Tensor<T>& input, std::size_t upto_exit) {
  if (upto_exit < 1 || upto_exit > model.num_exits())
    throw ContractError("upto_exit " + std::to_string(upto_exit) + " outside [1, " +
                        std::to_string(model.num_exits()) + "]");
  ForwardCursor<T> cur(model, input);
  std::vector<ExitOutput<T>> out;
  for (std::size_t i = 0; i < upto_exit; ++i) {
    cur.advance();
    out.push_back({cur.exclusion_probs(), cur.classifier_probs()});
  }
  return out;
}

template <typename T>
FullOutput<T> forward_full(const Model<T>& model, const Tensor<T>& input) {
  ForwardCursor<T> cur(model, input);
  FullOutput<T> out;
  for (std::size_t i = 0; i < model.num_exits(); ++i) {
    cur.advance();
    out.exits.push_back({cur.exclusion_probs(), cur.classifier_probs()});
  }
  out.final_logits = cur.final_logits();
  return out;
}

/// Static inference: backbone plus final classifier, no exit heads.
template <typename T>
std::size_t static_predict(const Model<T>& model, const Tensor<T>& input) {
  ForwardCursor<T> cur(model, input);
  return ops::argmax(cur.final_logits());
}

/// Tape variables produced by a differentiable forward pass.
struct TapeForward {
  std::vector<Var> params;            // Model::parameters() order
  Var final_logits;
  std::vector<Var> exclusion_probs;   // one per exit
  std::vector<Var> classifier_logits; // one per exit, fed from detached GAP
};

/// Records the full forward pass on `tape`. Exit classifiers read a detached
/// copy of the pooled features, so their loss never reaches the backbone.
template <typename T>
TapeForward forward_tape(Tape<T>& tape, Model<T>& model, const Tensor<T>& input) {
  if (input.shape() != model.config.input) throw DimensionError("input shape mismatch");
  TapeForward f;
  for (auto& p : model.parameters()) f.params.push_back(tape.param(*p.tensor));

  std::vector<std::size_t> layer_param(model.layers.size(), 0);
  std::size_t k = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    layer_param[i] = k;
    if (model.config.backbone[i].kind != LayerKind::pool) k += 2;
  }
  const std::size_t exit_base = k;

  Var x = tape.leaf(input, false);
  std::size_t next_exit = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& s = model.config.backbone[i];
    const Var w = f.params[layer_param[i]];
    const Var b = f.params[layer_param[i] + 1];
    switch (s.kind) {
      case LayerKind::conv: x = ad::conv2d(tape, x, w, b, s.stride, s.pad); break;
      case LayerKind::dense: x = ad::dense(tape, x, w, b); break;
      case LayerKind::pool:
        x = s.pool == PoolMode::max ? ad::max_pool2d(tape, x, s.kernel, s.stride)
                                    : ad::avg_pool2d(tape, x, s.kernel, s.stride);
        break;
    }
    if (s.kind != LayerKind::pool && s.activation == Activation::relu) x = ad::relu(tape, x);
    if (next_exit < model.exits.size() && model.exits[next_exit].layer == i) {
      const std::size_t e = exit_base + 4 * next_exit;
      const Var gap = ad::global_avg_pool(tape, x);
      f.exclusion_probs.push_back(ad::sigmoid(tape, ad::dense(tape, gap, f.params[e], f.params[e + 1])));
      const Var frozen = ad::detach(tape, gap);
      f.classifier_logits.push_back(ad::dense(tape, frozen, f.params[e + 2], f.params[e + 3]));
      ++next_exit;
    }
  }
  const std::size_t c = exit_base + 4 * model.exits.size();
  f.final_logits = ad::dense(tape, x, f.params[c], f.params[c + 1]);
  return f;
}

}  // namespace eex
