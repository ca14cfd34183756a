#pragma once
// Exclusion-aware training: cross entropy on the final classifier plus a
// weighted binary cross entropy for every exclusion unit at every exit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "eex/autograd.hpp"
#include "eex/data.hpp"
#include "eex/model.hpp"

namespace eex {

class TrainingError : public NumericError {
 public:
  using NumericError::NumericError;
};

inline constexpr double kBceClamp = 1e-7;

struct LossConfig {
  double alpha = 36.0;
  bool exclusion_terms = true;  // false: plain cross entropy on the final classifier

  void validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be finite and >= 0");
  }
};

/// alpha / (N - i + 1) for 1-based exit i.
inline double head_coefficient(std::size_t exit, std::size_t num_exits, double alpha) {
  if (exit < 1 || exit > num_exits)
    throw ContractError("exit " + std::to_string(exit) + " outside [1, " + std::to_string(num_exits) + "]");
  return alpha / static_cast<double>(num_exits - exit + 1);
}

/// -(t log y + (1 - t) log(1 - y)) with y clamped to [1e-7, 1 - 1e-7].
inline double exit_bce(double y, double target) {
  const double yc = std::clamp(y, kBceClamp, 1.0 - kBceClamp);
  return -(target * std::log(yc) + (1.0 - target) * std::log(1.0 - yc));
}

inline double cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) throw ContractError("label out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double z : logits) s += std::exp(z - mx);
  return std::log(s) + mx - logits[label];
}

/// Scalar composite loss for one sample; exit_probs is N rows of M values.
inline double composite_loss(std::span<const double> final_logits, const std::vector<std::vector<double>>& exit_probs,
                             std::size_t label, const LossConfig& cfg) {
  cfg.validate();
  double loss = cross_entropy(final_logits, label);
  if (!cfg.exclusion_terms) return loss;
  const std::size_t n = exit_probs.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (exit_probs[i].size() != final_logits.size()) throw DimensionError("exit probability row has wrong width");
    const double coeff = head_coefficient(i + 1, n, cfg.alpha);
    for (std::size_t j = 0; j < exit_probs[i].size(); ++j)
      loss += coeff * exit_bce(exit_probs[i][j], j == label ? 1.0 : 0.0);
  }
  return loss;
}

/// Records the composite loss for one sample on the tape.
template <typename T>
Var composite_loss(Tape<T>& tape, const TapeForward& f, std::size_t label, const LossConfig& cfg) {
  cfg.validate();
  Var loss = ad::softmax_cross_entropy(tape, f.final_logits, label);
  if (!cfg.exclusion_terms) return loss;
  const std::size_t n = f.exclusion_probs.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t m = tape.value(f.exclusion_probs[i]).size();
    std::vector<T> targets(m, T{0});
    targets.at(label) = T{1};
    const auto coeff = static_cast<T>(head_coefficient(i + 1, n, cfg.alpha));
    loss = ad::add(tape, loss, ad::binary_cross_entropy(tape, f.exclusion_probs[i], std::move(targets), coeff,
                                                        static_cast<T>(kBceClamp)));
  }
  return loss;
}

enum class OptimizerKind { sgd, sgd_momentum, adam };

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t lr_step = 0;  // epochs between step decays, 0 disables
  double lr_gamma = 0.1;
  std::uint64_t seed = 0;
  double validation_split = 0.1;
  bool train_exit_classifiers = true;  // baseline softmax heads on detached features

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (!(validation_split >= 0.0 && validation_split < 1.0)) throw ConfigError("validation split must be in [0, 1)");
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;        // mean composite loss
  double train_accuracy = 0.0;
  double val_accuracy = -1.0;  // -1 when no validation set
  std::vector<double> exit_auc;  // per exit: P(score of true class > score of a wrong class)
};

/// Mann-Whitney AUC of exclusion scores, true class vs every other class,
/// pooled over samples. Ties count half.
inline double exclusion_auc(const std::vector<std::vector<double>>& probs, const std::vector<std::size_t>& labels) {
  std::vector<std::pair<double, bool>> s;
  for (std::size_t i = 0; i < probs.size(); ++i)
    for (std::size_t j = 0; j < probs[i].size(); ++j) s.emplace_back(probs[i][j], j == labels[i]);
  std::sort(s.begin(), s.end(), [](auto& a, auto& b) { return a.first < b.first; });
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < s.size();) {
    std::size_t k = i;
    while (k < s.size() && s[k].first == s[i].first) ++k;
    const double mid = 0.5 * static_cast<double>(i + 1 + k);  // average 1-based rank
    for (std::size_t q = i; q < k; ++q)
      if (s[q].second) {
        rank_sum += mid;
        ++pos;
      }
    neg += static_cast<double>(k - i);
    i = k;
  }
  neg -= pos;
  if (pos == 0 || neg == 0) return 0.5;
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

template <typename T>
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const std::vector<NamedParam<T>>& params) : cfg_(cfg) {
    for (auto& p : params) {
      m_.emplace_back(p.tensor->shape());
      if (cfg.optimizer == OptimizerKind::adam) v_.emplace_back(p.tensor->shape());
    }
  }

  void step(std::vector<NamedParam<T>>& params, const std::vector<Tensor<T>>& grads, double lr) {
    ++t_;
    const T wd = static_cast<T>(cfg_.weight_decay);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor<T>& w = *params[k].tensor;
      const Tensor<T>& g = grads[k];
      switch (cfg_.optimizer) {
        case OptimizerKind::sgd:
          for (std::size_t i = 0; i < w.size(); ++i) w[i] -= static_cast<T>(lr) * (g[i] + wd * w[i]);
          break;
        case OptimizerKind::sgd_momentum: {
          const T mu = static_cast<T>(cfg_.momentum);
          for (std::size_t i = 0; i < w.size(); ++i) {
            m_[k][i] = mu * m_[k][i] + g[i] + wd * w[i];
            w[i] -= static_cast<T>(lr) * m_[k][i];
          }
          break;
        }
        case OptimizerKind::adam: {
          constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
          const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
          const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
          for (std::size_t i = 0; i < w.size(); ++i) {
            const T gi = g[i] + wd * w[i];
            m_[k][i] = static_cast<T>(b1) * m_[k][i] + static_cast<T>(1 - b1) * gi;
            v_[k][i] = static_cast<T>(b2) * v_[k][i] + static_cast<T>(1 - b2) * gi * gi;
            const double mh = m_[k][i] / c1, vh = v_[k][i] / c2;
            w[i] -= static_cast<T>(lr * mh / (std::sqrt(vh) + eps));
          }
          break;
        }
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

/// Mean-reduced gradient of the batch loss; returns the summed loss and the
/// number of correct final predictions.
template <typename T>
std::pair<double, std::size_t> batch_gradients(Model<T>& model, const Dataset& data, std::span<const std::size_t> batch,
                                               const LossConfig& loss_cfg, bool exit_classifiers,
                                               std::vector<Tensor<T>>& grads) {
  for (auto& g : grads) g.fill(T{0});
  const T inv = T{1} / static_cast<T>(batch.size());
  double total = 0.0;
  std::size_t correct = 0;
  for (std::size_t idx : batch) {
    const std::size_t label = data.labels[idx];
    Tape<T> tape;
    const Tensor<T> x = [&] {
      if constexpr (std::is_same_v<T, float>) return data.image(idx);
      else return data.image(idx).template cast<T>();
    }();
    const TapeForward f = forward_tape(tape, model, x);
    Var loss = composite_loss(tape, f, label, loss_cfg);
    if (exit_classifiers)
      for (Var z : f.classifier_logits) loss = ad::add(tape, loss, ad::softmax_cross_entropy(tape, z, label));
    const double lv = static_cast<double>(tape.value(loss)[0]);
    if (!std::isfinite(lv))
      throw TrainingError("loss diverged (non-finite) on sample " + std::to_string(idx));
    total += lv;
    if (ops::argmax(tape.value(f.final_logits)) == label) ++correct;
    tape.backward(loss);
    for (std::size_t k = 0; k < grads.size(); ++k) {
      const Tensor<T> g = tape.grad(f.params[k]);
      for (std::size_t i = 0; i < g.size(); ++i) grads[k][i] += g[i] * inv;
    }
  }
  return {total, correct};
}

template <typename T>
double accuracy(const Model<T>& model, const Dataset& data) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (static_predict(model, data.image(i).template cast<T>()) == data.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

struct TrainResult {
  std::vector<EpochMetrics> history;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Minibatch training with a per-epoch shuffle seeded by cfg.seed + epoch.
template <typename T>
TrainResult train(Model<T>& model, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
                  const LossConfig& loss_cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  loss_cfg.validate();
  train_set.validate();
  if (train_set.num_classes != model.num_classes()) throw ConfigError("dataset class count does not match the model");
  if (train_set.sample_shape() != model.config.input) throw ConfigError("dataset sample shape does not match the model");

  auto params = model.parameters();
  std::vector<Tensor<T>> grads;
  for (auto& p : params) grads.emplace_back(p.tensor->shape());
  Optimizer<T> opt(cfg, params);

  std::vector<std::size_t> order(train_set.size());
  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(cfg.seed + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double lr = cfg.learning_rate;
    if (cfg.lr_step > 0) lr *= std::pow(cfg.lr_gamma, static_cast<double>(epoch / cfg.lr_step));

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      auto [l, c] = batch_gradients(model, train_set, std::span<const std::size_t>(order).subspan(start, len), loss_cfg,
                                    cfg.train_exit_classifiers, grads);
      loss_sum += l;
      correct += c;
      opt.step(params, grads, lr);
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.loss = loss_sum / static_cast<double>(train_set.size());
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_set.size());
    if (val_set && !val_set->empty()) {
      std::vector<std::vector<std::vector<double>>> per_exit(model.num_exits());
      std::size_t vc = 0;
      for (std::size_t i = 0; i < val_set->size(); ++i) {
        const auto out = forward_full(model, val_set->image(i).template cast<T>());
        if (ops::argmax(out.final_logits) == val_set->labels[i]) ++vc;
        for (std::size_t e = 0; e < out.exits.size(); ++e)
          per_exit[e].emplace_back(out.exits[e].exclusion.data().begin(), out.exits[e].exclusion.data().end());
      }
      m.val_accuracy = static_cast<double>(vc) / static_cast<double>(val_set->size());
      for (auto& probs : per_exit) m.exit_auc.push_back(exclusion_auc(probs, val_set->labels));
    }
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

}  // namespace eex
