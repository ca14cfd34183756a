#pragma once
// Dataset-level evaluation of the static, class-exclusion and confidence
// pipelines. Every pipeline replays SampleRecords, so one forward pass per
// sample serves any number of beta or threshold settings.

#include <cstddef>
#include <vector>

#include "eex/cost.hpp"
#include "eex/data.hpp"
#include "eex/inference.hpp"

namespace eex {

template <typename T>
std::vector<SampleRecord> record_dataset(const Model<T>& model, const Dataset& data) {
  data.validate();
  std::vector<SampleRecord> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    out.push_back(record_sample(model, data.image(i).template cast<T>(), data.labels[i]));
  return out;
}

struct EvalSummary {
  double accuracy = 0.0;
  double mean_flops = 0.0;
  double mean_macs = 0.0;
  double reduction = 0.0;  // 1 - mean_flops / static flops
  std::vector<InferenceTrace> traces;
};

namespace detail {
inline EvalSummary summarize(std::vector<InferenceTrace> traces, const CostModel& cost, bool keep) {
  std::size_t correct = 0;
  for (auto& t : traces)
    if (t.label && t.predicted_class == *t.label) ++correct;
  EvalSummary s;
  const auto f = average_flops(traces, cost);
  s.accuracy = static_cast<double>(correct) / static_cast<double>(traces.size());
  s.mean_flops = f.mean_flops;
  s.mean_macs = f.mean_macs;
  s.reduction = f.reduction;
  if (keep) s.traces = std::move(traces);
  return s;
}
}  // namespace detail

inline EvalSummary evaluate_exclusion(const std::vector<SampleRecord>& records, const BetaSchedule& betas,
                                      const CostModel& cost, FinalDecision rule = FinalDecision::restricted,
                                      bool keep_traces = false) {
  if (records.empty()) throw ContractError("evaluation needs at least one sample");
  std::vector<InferenceTrace> traces;
  traces.reserve(records.size());
  for (auto& r : records) {
    RecordSource src(r);
    traces.push_back(run_class_exclusion(src, betas, cost, rule));
    traces.back().label = r.label;
  }
  return detail::summarize(std::move(traces), cost, keep_traces);
}

inline EvalSummary evaluate_confidence(const std::vector<SampleRecord>& records, const ConfidenceConfig& cfg,
                                       const CostModel& cost, bool keep_traces = false) {
  if (records.empty()) throw ContractError("evaluation needs at least one sample");
  std::vector<InferenceTrace> traces;
  traces.reserve(records.size());
  for (auto& r : records) {
    RecordSource src(r);
    traces.push_back(run_confidence(src, cfg, cost));
    traces.back().label = r.label;
  }
  return detail::summarize(std::move(traces), cost, keep_traces);
}

/// Plain backbone + final classifier, no exit heads.
inline EvalSummary evaluate_static(const std::vector<SampleRecord>& records, const CostModel& cost) {
  if (records.empty()) throw ContractError("evaluation needs at least one sample");
  std::size_t correct = 0;
  for (auto& r : records)
    if (ops::argmax(std::span<const double>(r.final_logits)) == r.label) ++correct;
  EvalSummary s;
  s.accuracy = static_cast<double>(correct) / static_cast<double>(records.size());
  s.mean_flops = static_cast<double>(cost.static_flops());
  s.mean_macs = static_cast<double>(cost.static_macs());
  s.reduction = 0.0;
  return s;
}

}  // namespace eex
