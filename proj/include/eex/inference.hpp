#pragma once
// Class-exclusion dynamic inference and the confidence-threshold baseline.
//
// At every visited exit the engine first recovers the global argmax of the
// exclusion probabilities if an earlier exit removed it, then removes every
// remaining class whose probability is below beta * x, where x is the largest
// probability among the remaining classes. Inference stops as soon as one
// class remains.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eex/cost.hpp"
#include "eex/model.hpp"
#include "eex/trace.hpp"

namespace eex {

struct BetaSchedule {
  std::vector<double> beta;  // one coefficient per exit, each in [0, 1]

  static BetaSchedule zeros(std::size_t num_exits) { return {std::vector<double>(num_exits, 0.0)}; }

  std::size_t size() const noexcept { return beta.size(); }
  double operator[](std::size_t i) const { return beta.at(i); }

  void validate() const {
    for (std::size_t i = 0; i < beta.size(); ++i)
      if (!(beta[i] >= 0.0 && beta[i] <= 1.0))
        throw ContractError("beta[" + std::to_string(i) + "] = " + std::to_string(beta[i]) + " outside [0, 1]");
  }

  friend bool operator==(const BetaSchedule&, const BetaSchedule&) = default;
};

enum class ConfidenceCriterion { max_prob, entropy };

struct ConfidenceConfig {
  std::vector<double> thresholds;  // one per exit
  ConfidenceCriterion criterion = ConfidenceCriterion::max_prob;

  static ConfidenceConfig uniform(std::size_t num_exits, double t,
                                  ConfidenceCriterion c = ConfidenceCriterion::max_prob) {
    return {std::vector<double>(num_exits, t), c};
  }

  void validate() const {
    for (double t : thresholds)
      if (!std::isfinite(t) || t < 0.0) throw ContractError("confidence threshold must be finite and >= 0");
    if (criterion == ConfidenceCriterion::max_prob)
      for (double t : thresholds)
        if (t > 1.01) throw ContractError("max-prob threshold above 1.01");
  }
};

/// How the last exit decides when several classes are still in play.
enum class FinalDecision {
  restricted,   // argmax of final logits over remaining classes
  unrestricted  // plain argmax of final logits
};

/// Raised when inference hits a non-finite value; carries the partial trace.
class InferenceError : public NumericError {
 public:
  InferenceError(const std::string& what, InferenceTrace partial)
      : NumericError(what), partial_(std::move(partial)) {}
  const InferenceTrace& partial_trace() const noexcept { return partial_; }

 private:
  InferenceTrace partial_;
};

struct ExcludeResult {
  RemainingSet remaining;
  std::vector<std::size_t> excluded;
};

/// Removes every remaining class with p[j] < beta * x, x = max over the
/// remaining classes. Ties with the maximum always survive.
inline ExcludeResult exclude_step(std::span<const double> p, const RemainingSet& remaining, double beta) {
  if (remaining.empty()) throw ContractError("exclude_step on an empty remaining set");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("beta outside [0, 1]");
  if (p.size() != remaining.universe()) throw DimensionError("probability vector does not match class count");
  double x = -1.0;
  for (auto j : remaining.members()) x = std::max(x, p[j]);
  const double threshold = beta * x;
  ExcludeResult r{remaining, {}};
  for (auto j : remaining.members())
    if (p[j] < threshold) {
      r.remaining.erase(j);
      r.excluded.push_back(j);
    }
  return r;
}

struct RecoverResult {
  RemainingSet remaining;
  std::optional<std::size_t> recovered;
};

/// Puts the global argmax of `p` back into the remaining set when an earlier
/// exit removed it. At most one class comes back per exit.
inline RecoverResult recover_step(std::span<const double> p, const RemainingSet& remaining) {
  if (p.size() != remaining.universe()) throw DimensionError("probability vector does not match class count");
  const std::size_t g = ops::argmax(p);
  RecoverResult r{remaining, std::nullopt};
  if (!remaining.contains(g)) {
    r.remaining.insert(g);
    r.recovered = g;
  }
  return r;
}

namespace detail {
template <typename T>
std::vector<double> to_double(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}
}  // namespace detail

/// Exit outputs pulled lazily from a live model.
template <typename T = float>
class ModelSource {
 public:
  ModelSource(const Model<T>& model, const Tensor<T>& input) : model_(model), cursor_(model, input) {}

  std::size_t num_exits() const noexcept { return model_.num_exits(); }
  std::size_t num_classes() const noexcept { return model_.num_classes(); }

  std::vector<double> exclusion(std::size_t exit) {
    advance_to(exit);
    return detail::to_double(cursor_.exclusion_probs());
  }
  std::vector<double> classifier(std::size_t exit) {
    advance_to(exit);
    return detail::to_double(cursor_.classifier_probs());
  }
  std::vector<double> final_logits() { return detail::to_double(cursor_.final_logits()); }

 private:
  void advance_to(std::size_t exit) {
    while (cursor_.exits_done() < exit) cursor_.advance();
    if (cursor_.exits_done() != exit) throw ContractError("exits must be visited in order");
  }

  const Model<T>& model_;
  ForwardCursor<T> cursor_;
};

/// Every exit output for one sample, precomputed by a full forward pass.
/// Replaying a record gives the same decisions as running the model live.
struct SampleRecord {
  std::vector<std::vector<double>> exclusion;
  std::vector<std::vector<double>> classifier;
  std::vector<double> final_logits;
  std::size_t label = 0;
};

template <typename T>
SampleRecord record_sample(const Model<T>& model, const Tensor<T>& input, std::size_t label = 0) {
  const auto full = forward_full(model, input);
  SampleRecord r;
  for (auto& e : full.exits) {
    r.exclusion.push_back(detail::to_double(e.exclusion));
    r.classifier.push_back(detail::to_double(e.classifier));
  }
  r.final_logits = detail::to_double(full.final_logits);
  r.label = label;
  return r;
}

class RecordSource {
 public:
  explicit RecordSource(const SampleRecord& r) : r_(r) {}
  std::size_t num_exits() const noexcept { return r_.exclusion.size(); }
  std::size_t num_classes() const noexcept { return r_.final_logits.size(); }
  std::vector<double> exclusion(std::size_t exit) const { return r_.exclusion.at(exit - 1); }
  std::vector<double> classifier(std::size_t exit) const { return r_.classifier.at(exit - 1); }
  std::vector<double> final_logits() const { return r_.final_logits; }

 private:
  const SampleRecord& r_;
};

namespace detail {
inline void check_finite(const std::vector<double>& v, const InferenceTrace& partial) {
  for (double x : v)
    if (!std::isfinite(x)) throw InferenceError("non-finite exit output", partial);
}

template <typename Fn>
auto guarded(Fn&& fn, const InferenceTrace& partial) {
  try {
    return fn();
  } catch (const InferenceError&) {
    throw;
  } catch (const NumericError& e) {
    throw InferenceError(e.what(), partial);
  }
}
}  // namespace detail

/// Class-exclusion inference over any exit-output source.
template <typename Source>
InferenceTrace run_class_exclusion(Source& src, const BetaSchedule& betas, const CostModel& cost,
                                   FinalDecision final_rule = FinalDecision::restricted) {
  const std::size_t n = src.num_exits(), m = src.num_classes();
  if (betas.size() != n) throw ContractError("beta schedule length does not match exit count");
  if (cost.num_exits() != n) throw ContractError("cost model does not match exit count");
  betas.validate();

  InferenceTrace trace;
  trace.engine = Engine::class_exclusion;
  RemainingSet remaining = RemainingSet::all(m);
  for (std::size_t i = 1; i <= n; ++i) {
    const std::vector<double> p = detail::guarded([&] { return src.exclusion(i); }, trace);
    detail::check_finite(p, trace);
    ExitRecord rec;
    rec.exit = i;
    rec.probs = p;
    if (i > 1) {
      auto rr = recover_step(p, remaining);
      remaining = std::move(rr.remaining);
      rec.recovered = rr.recovered;
    }
    auto er = exclude_step(p, remaining, betas[i - 1]);
    remaining = std::move(er.remaining);
    rec.excluded = std::move(er.excluded);
    rec.max_prob = -1.0;
    for (auto j : remaining.members()) rec.max_prob = std::max(rec.max_prob, p[j]);
    rec.remaining = remaining.members();
    trace.exits.push_back(std::move(rec));
    trace.exit_layer = i;
    if (remaining.size() == 1) {
      trace.predicted_class = remaining.members().front();
      trace.reason = ExitReason::single_class;
      break;
    }
  }
  if (remaining.size() > 1) {
    const std::vector<double> z = detail::guarded([&] { return src.final_logits(); }, trace);
    detail::check_finite(z, trace);
    trace.reason = ExitReason::final_layer;
    if (final_rule == FinalDecision::unrestricted) {
      trace.predicted_class = ops::argmax(std::span<const double>(z));
    } else {
      std::size_t best = remaining.members().front();
      for (auto j : remaining.members())
        if (z[j] > z[best]) best = j;
      trace.predicted_class = best;
    }
  }
  trace.flops = flops_of_trace(trace, cost);
  trace.macs = macs_of_trace(trace, cost);
  return trace;
}

/// Early exit at the first exit whose classifier is confident enough.
template <typename Source>
InferenceTrace run_confidence(Source& src, const ConfidenceConfig& cfg, const CostModel& cost) {
  const std::size_t n = src.num_exits(), m = src.num_classes();
  if (cfg.thresholds.size() != n) throw ContractError("threshold count does not match exit count");
  if (cost.num_exits() != n) throw ContractError("cost model does not match exit count");
  cfg.validate();

  InferenceTrace trace;
  trace.engine = Engine::confidence;
  const auto everyone = RemainingSet::all(m).members();
  for (std::size_t i = 1; i <= n; ++i) {
    const std::vector<double> p = detail::guarded([&] { return src.classifier(i); }, trace);
    detail::check_finite(p, trace);
    ExitRecord rec;
    rec.exit = i;
    rec.probs = p;
    rec.max_prob = *std::max_element(p.begin(), p.end());
    rec.remaining = everyone;
    trace.exits.push_back(std::move(rec));
    trace.exit_layer = i;
    const bool confident = cfg.criterion == ConfidenceCriterion::max_prob
                               ? trace.exits.back().max_prob >= cfg.thresholds[i - 1]
                               : detail::entropy(p) <= cfg.thresholds[i - 1];
    if (confident) {
      trace.predicted_class = ops::argmax(std::span<const double>(p));
      trace.reason = ExitReason::confident;
      break;
    }
  }
  if (trace.reason != ExitReason::confident) {
    const std::vector<double> z = detail::guarded([&] { return src.final_logits(); }, trace);
    detail::check_finite(z, trace);
    trace.predicted_class = ops::argmax(std::span<const double>(z));
    trace.reason = ExitReason::final_layer;
  }
  trace.flops = flops_of_trace(trace, cost);
  trace.macs = macs_of_trace(trace, cost);
  return trace;
}

template <typename T>
InferenceTrace dynamic_infer(const Model<T>& model, const Tensor<T>& input, const BetaSchedule& betas,
                             const CostModel& cost, FinalDecision rule = FinalDecision::restricted) {
  ModelSource<T> src(model, input);
  return run_class_exclusion(src, betas, cost, rule);
}

template <typename T>
InferenceTrace dynamic_infer(const Model<T>& model, const Tensor<T>& input, const BetaSchedule& betas) {
  return dynamic_infer(model, input, betas, CostModel::from_config(model.config));
}

template <typename T>
InferenceTrace confidence_infer(const Model<T>& model, const Tensor<T>& input, const ConfidenceConfig& cfg,
                                const CostModel& cost) {
  ModelSource<T> src(model, input);
  return run_confidence(src, cfg, cost);
}

template <typename T>
InferenceTrace confidence_infer(const Model<T>& model, const Tensor<T>& input, const ConfidenceConfig& cfg) {
  return confidence_infer(model, input, cfg, CostModel::from_config(model.config));
}

}  // namespace eex
