#pragma once
// Greedy per-exit search for the exclusion coefficients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>
#include <vector>

#include "eex/cost.hpp"
#include "eex/evaluation.hpp"

namespace eex {

struct SearchConfig {
  double epsilon = 1.0;  // allowed accuracy drop, percentage points
  double step = 0.01;
  FinalDecision final_rule = FinalDecision::restricted;

  void validate() const {
    if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be >= 0");
    if (!(step > 0.0 && step <= 1.0)) throw ConfigError("step must be in (0, 1]");
  }
};

struct Probe {
  std::size_t exit = 0;  // 1-based
  double beta = 0.0;
  double val_accuracy = 0.0;
  bool accepted = false;

  friend bool operator==(const Probe&, const Probe&) = default;
};

struct SearchResult {
  BetaSchedule betas;
  std::vector<std::size_t> order;  // exits in search order
  std::vector<Probe> audit;
  double baseline_accuracy = 0.0;
  double final_accuracy = 0.0;
};

/// Exits sorted by the MAC count of their conv layer, largest first; equal
/// counts keep the shallower exit first.
inline std::vector<std::size_t> rank_exits_by_macs(const CostModel& cost) {
  if (cost.num_exits() == 0) throw ContractError("cost model has no exits");
  std::vector<std::size_t> order(cost.num_exits());
  std::iota(order.begin(), order.end(), std::size_t{1});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return cost.exit_layer_macs(a) > cost.exit_layer_macs(b); });
  return order;
}

/// beta values probed for one exit: 0, step, 2*step, ... while <= 1.
inline std::vector<double> beta_grid(double step) {
  std::vector<double> g;
  for (std::size_t k = 0;; ++k) {
    const double b = std::round(static_cast<double>(k) * step * 1e12) / 1e12;
    if (b > 1.0) break;
    g.push_back(b);
  }
  return g;
}

using AccuracyFn = std::function<double(const BetaSchedule&)>;

/// The search itself, over any accuracy oracle. Exits are visited in
/// `order`; unsearched exits stay at 0 and accepted ones stay fixed. A probe
/// is rejected once the drop from the all-zero accuracy exceeds epsilon,
/// and the exit keeps the last accepted beta.
inline SearchResult search_betas(const AccuracyFn& accuracy_of, std::size_t num_exits,
                                 const std::vector<std::size_t>& order, const SearchConfig& cfg) {
  cfg.validate();
  if (order.size() != num_exits) throw ContractError("search order must list every exit once");
  SearchResult r;
  r.order = order;
  r.betas = BetaSchedule::zeros(num_exits);
  r.baseline_accuracy = accuracy_of(r.betas);
  const auto grid = beta_grid(cfg.step);
  for (std::size_t exit : order) {
    double accepted = 0.0;
    for (double b : grid) {
      BetaSchedule trial = r.betas;
      trial.beta.at(exit - 1) = b;
      const double acc = accuracy_of(trial);
      const bool ok = (r.baseline_accuracy - acc) * 100.0 <= cfg.epsilon;
      r.audit.push_back({exit, b, acc, ok});
      if (!ok) break;
      accepted = b;
    }
    r.betas.beta[exit - 1] = accepted;
  }
  r.final_accuracy = accuracy_of(r.betas);
  return r;
}

inline SearchResult search_betas(const std::vector<SampleRecord>& valset, const SearchConfig& cfg,
                                 const CostModel& cost) {
  if (valset.empty()) throw ContractError("beta search needs a non-empty validation set");
  auto acc = [&](const BetaSchedule& b) { return evaluate_exclusion(valset, b, cost, cfg.final_rule).accuracy; };
  return search_betas(acc, cost.num_exits(), rank_exits_by_macs(cost), cfg);
}

template <typename T>
SearchResult search_betas(const Model<T>& model, const Dataset& valset, const SearchConfig& cfg,
                          const CostModel& cost) {
  if (valset.empty()) throw ContractError("beta search needs a non-empty validation set");
  return search_betas(record_dataset(model, valset), cfg, cost);
}

inline void write_audit_csv(std::ostream& os, const std::vector<Probe>& audit) {
  os << "exit_index,beta,val_accuracy,accepted\n";
  char buf[128];
  for (auto& p : audit) {
    std::snprintf(buf, sizeof buf, "%zu,%.6g,%.6f,%d\n", p.exit, p.beta, p.val_accuracy, p.accepted ? 1 : 0);
    os << buf;
  }
}

}  // namespace eex
