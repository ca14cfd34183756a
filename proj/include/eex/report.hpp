#pragma once
// Exit statistics recomputed from traces, the baseline comparison, and their
// CSV / JSON / SVG renderings.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "eex/evaluation.hpp"
#include "eex/serialize.hpp"

namespace eex {

struct Report {
  std::size_t num_exits = 0;
  std::size_t num_classes = 0;
  std::size_t total = 0;
  std::vector<std::size_t> exit_histogram;               // inputs finishing at each exit
  std::vector<std::vector<double>> class_exit_pct;       // [class][exit], % of that exit's inputs
  std::vector<double> mean_excluded;                     // cumulative mean excluded classes per exit
  std::vector<std::vector<double>> class_exclusion_pct;  // [class][exit], % of exclusions made at that exit
};

/// Classes are attributed by true label when the trace has one, otherwise
/// by prediction. After a trace stops, its excluded count is carried to the
/// deeper exits unchanged.
inline Report build_report(const std::vector<InferenceTrace>& traces, std::size_t num_exits, std::size_t num_classes) {
  if (traces.empty()) throw ContractError("report needs at least one trace");
  Report r;
  r.num_exits = num_exits;
  r.num_classes = num_classes;
  r.total = traces.size();
  r.exit_histogram.assign(num_exits, 0);
  r.class_exit_pct.assign(num_classes, std::vector<double>(num_exits, 0.0));
  r.class_exclusion_pct.assign(num_classes, std::vector<double>(num_exits, 0.0));
  r.mean_excluded.assign(num_exits, 0.0);

  std::vector<std::vector<std::size_t>> exit_counts(num_classes, std::vector<std::size_t>(num_exits, 0));
  std::vector<std::vector<std::size_t>> excl_counts(num_classes, std::vector<std::size_t>(num_exits, 0));
  std::vector<double> excluded_sum(num_exits, 0.0);
  for (const auto& t : traces) {
    if (t.exit_layer < 1 || t.exit_layer > num_exits || t.exits.size() != t.exit_layer)
      throw ContractError("trace does not fit the report dimensions");
    const std::size_t cls = t.label.value_or(t.predicted_class);
    if (cls >= num_classes) throw ContractError("trace class outside the class range");
    ++r.exit_histogram[t.exit_layer - 1];
    ++exit_counts[cls][t.exit_layer - 1];
    for (std::size_t i = 0; i < num_exits; ++i) {
      const auto& rec = t.exits[std::min(i, t.exit_layer - 1)];
      excluded_sum[i] += static_cast<double>(num_classes - rec.remaining.size());
    }
    for (const auto& rec : t.exits)
      for (auto c : rec.excluded) ++excl_counts.at(c)[rec.exit - 1];
  }
  for (std::size_t i = 0; i < num_exits; ++i) {
    r.mean_excluded[i] = excluded_sum[i] / static_cast<double>(traces.size());
    std::size_t excl_total = 0;
    for (std::size_t c = 0; c < num_classes; ++c) excl_total += excl_counts[c][i];
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (r.exit_histogram[i])
        r.class_exit_pct[c][i] = 100.0 * static_cast<double>(exit_counts[c][i]) / static_cast<double>(r.exit_histogram[i]);
      if (excl_total)
        r.class_exclusion_pct[c][i] = 100.0 * static_cast<double>(excl_counts[c][i]) / static_cast<double>(excl_total);
    }
  }
  return r;
}

struct PipelinePoint {
  double accuracy = 0.0;
  double mean_macs = 0.0;
  double mean_flops = 0.0;
};

inline PipelinePoint point_of(const EvalSummary& s) { return {s.accuracy, s.mean_macs, s.mean_flops}; }

struct BaselineMatch {
  double threshold = 0.0;
  ConfidenceCriterion criterion = ConfidenceCriterion::max_prob;
  EvalSummary summary;
  bool matched = false;  // accuracy within tolerance of the target
  std::vector<std::pair<double, PipelinePoint>> sweep;
};

/// Sweeps one threshold shared by every exit and keeps the setting whose
/// accuracy is closest to `target_accuracy`; ties go to the cheaper setting.
inline BaselineMatch match_confidence_baseline(const std::vector<SampleRecord>& records, const CostModel& cost,
                                               double target_accuracy, ConfidenceCriterion criterion,
                                               double grid_step = 0.01, double tolerance_points = 0.5) {
  if (records.empty()) throw ContractError("baseline sweep needs samples");
  std::vector<double> grid;
  if (criterion == ConfidenceCriterion::max_prob) {
    grid = beta_grid(grid_step);
    grid.push_back(1.01);
  } else {
    const double hmax = std::log(static_cast<double>(records.front().final_logits.size()));
    for (double g : beta_grid(grid_step)) grid.push_back(g * hmax);
  }
  BaselineMatch best;
  best.criterion = criterion;
  double best_gap = 1e300;
  for (double t : grid) {
    auto s = evaluate_confidence(records, ConfidenceConfig::uniform(cost.num_exits(), t, criterion), cost);
    best.sweep.emplace_back(t, point_of(s));
    const double gap = std::abs(s.accuracy - target_accuracy);
    if (gap < best_gap - 1e-12 || (std::abs(gap - best_gap) <= 1e-12 && s.mean_flops < best.summary.mean_flops)) {
      best_gap = gap;
      best.threshold = t;
      best.summary = s;
    }
  }
  best.matched = best_gap * 100.0 <= tolerance_points + 1e-9;
  return best;
}

struct Comparison {
  PipelinePoint original;
  PipelinePoint proposed;
  PipelinePoint baseline;
  double baseline_threshold = 0.0;
  bool matched = false;
  bool proposed_cheaper = false;  // proposed FLOPs <= baseline FLOPs
};

inline Comparison compare(const PipelinePoint& original, const PipelinePoint& proposed, const BaselineMatch& m) {
  Comparison c;
  c.original = original;
  c.proposed = proposed;
  c.baseline = point_of(m.summary);
  c.baseline_threshold = m.threshold;
  c.matched = m.matched;
  c.proposed_cheaper = proposed.mean_flops <= c.baseline.mean_flops;
  return c;
}

// ---- rendering -----------------------------------------------------------

namespace detail {
inline std::string fmt(double v, const char* f = "%.4f") {
  char b[64];
  std::snprintf(b, sizeof b, f, v);
  return b;
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
  if (!os) throw std::runtime_error("write failed for " + p.string());
}

inline std::string matrix_csv(const std::vector<std::vector<double>>& m, std::size_t cols) {
  std::ostringstream os;
  os << "class";
  for (std::size_t i = 1; i <= cols; ++i) os << ",exit" << i;
  os << '\n';
  for (std::size_t c = 0; c < m.size(); ++c) {
    os << c;
    for (double v : m[c]) os << ',' << fmt(v);
    os << '\n';
  }
  return os.str();
}

inline std::string bar_svg(const std::string& title, const std::vector<double>& values, const std::vector<std::string>& labels) {
  const double w = 60.0 * static_cast<double>(values.size()) + 80, h = 260, base = 220, top = 40;
  const double mx = std::max(1e-12, *std::max_element(values.begin(), values.end()));
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<text x=\"10\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double bh = (base - top) * values[i] / mx;
    const double x = 50 + 60.0 * static_cast<double>(i);
    os << "<rect x=\"" << x << "\" y=\"" << fmt(base - bh, "%.2f") << "\" width=\"40\" height=\"" << fmt(bh, "%.2f")
       << "\" fill=\"#3b7dd8\"/>\n";
    os << "<text x=\"" << x << "\" y=\"" << base + 16 << "\" font-family=\"sans-serif\" font-size=\"11\">" << labels[i]
       << "</text>\n";
    os << "<text x=\"" << x << "\" y=\"" << fmt(base - bh - 4, "%.2f")
       << "\" font-family=\"sans-serif\" font-size=\"10\">" << fmt(values[i], "%.4g") << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline std::string heatmap_svg(const std::string& title, const std::vector<std::vector<double>>& m) {
  const std::size_t rows = m.size(), cols = rows ? m[0].size() : 0;
  const double cell = 28;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 60 + cell * static_cast<double>(cols) << "\" height=\""
     << 60 + cell * static_cast<double>(rows) << "\">\n";
  os << "<text x=\"10\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = std::clamp(m[r][c] / 100.0, 0.0, 1.0);
      const int g = static_cast<int>(std::lround(255 - 155 * v));
      const int rb = static_cast<int>(std::lround(255 - 235 * v));
      os << "<rect x=\"" << 40 + cell * static_cast<double>(c) << "\" y=\"" << 40 + cell * static_cast<double>(r)
         << "\" width=\"" << cell - 1 << "\" height=\"" << cell - 1 << "\" fill=\"rgb(" << rb << ',' << g << ',' << rb
         << ")\"><title>class " << r << ", exit " << c + 1 << ": " << fmt(m[r][c], "%.2f") << "%</title></rect>\n";
    }
  os << "</svg>\n";
  return os.str();
}

inline std::vector<std::string> exit_labels(std::size_t n) {
  std::vector<std::string> l;
  for (std::size_t i = 1; i <= n; ++i) l.push_back("exit " + std::to_string(i));
  return l;
}
}  // namespace detail

inline json to_json(const Report& r) {
  return {{"num_exits", r.num_exits},
          {"num_classes", r.num_classes},
          {"total", r.total},
          {"exit_histogram", r.exit_histogram},
          {"class_exit_pct", r.class_exit_pct},
          {"mean_excluded", r.mean_excluded},
          {"class_exclusion_pct", r.class_exclusion_pct}};
}

inline json to_json(const PipelinePoint& p) {
  return {{"accuracy", p.accuracy}, {"mean_macs", p.mean_macs}, {"mean_flops", p.mean_flops}};
}

inline json to_json(const Comparison& c) {
  return {{"original", to_json(c.original)},
          {"proposed", to_json(c.proposed)},
          {"baseline", to_json(c.baseline)},
          {"baseline_threshold", c.baseline_threshold},
          {"matched", c.matched},
          {"proposed_cheaper", c.proposed_cheaper}};
}

/// Writes the exit statistics for `traces` under `out_dir`. Output is a pure
/// function of the traces.
inline Report emit_report(const std::vector<InferenceTrace>& traces, const CostModel& cost, std::size_t num_classes,
                          const std::filesystem::path& out_dir) {
  const Report r = build_report(traces, cost.num_exits(), num_classes);
  std::filesystem::create_directories(out_dir);

  std::ostringstream hist;
  hist << "exit,count\n";
  for (std::size_t i = 0; i < r.num_exits; ++i) hist << i + 1 << ',' << r.exit_histogram[i] << '\n';
  detail::write_file(out_dir / "exit_histogram.csv", hist.str());

  std::ostringstream excl;
  excl << "exit,mean_excluded\n";
  for (std::size_t i = 0; i < r.num_exits; ++i) excl << i + 1 << ',' << detail::fmt(r.mean_excluded[i]) << '\n';
  detail::write_file(out_dir / "mean_excluded.csv", excl.str());

  detail::write_file(out_dir / "class_exit_pct.csv", detail::matrix_csv(r.class_exit_pct, r.num_exits));
  detail::write_file(out_dir / "class_exclusion_pct.csv", detail::matrix_csv(r.class_exclusion_pct, r.num_exits));
  detail::write_file(out_dir / "report.json", to_json(r).dump(2) + "\n");

  std::ostringstream cost_csv;
  cost.write_csv(cost_csv);
  detail::write_file(out_dir / "cost.csv", cost_csv.str());

  std::vector<double> h(r.exit_histogram.begin(), r.exit_histogram.end());
  const auto labels = detail::exit_labels(r.num_exits);
  detail::write_file(out_dir / "exit_histogram.svg", detail::bar_svg("Inputs classified per exit", h, labels));
  detail::write_file(out_dir / "mean_excluded.svg",
                     detail::bar_svg("Mean excluded classes (cumulative)", r.mean_excluded, labels));
  detail::write_file(out_dir / "class_exit_pct.svg", detail::heatmap_svg("Class share of exits (%)", r.class_exit_pct));
  detail::write_file(out_dir / "class_exclusion_pct.svg",
                     detail::heatmap_svg("Class share of exclusions (%)", r.class_exclusion_pct));
  return r;
}

inline void emit_comparison(const Comparison& c, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ostringstream csv;
  csv << "pipeline,accuracy,mean_macs,mean_flops,relative_macs,relative_flops\n";
  auto row = [&](const char* name, const PipelinePoint& p) {
    csv << name << ',' << detail::fmt(p.accuracy, "%.6f") << ',' << detail::fmt(p.mean_macs, "%.1f") << ','
        << detail::fmt(p.mean_flops, "%.1f") << ',' << detail::fmt(p.mean_macs / c.original.mean_macs, "%.6f") << ','
        << detail::fmt(p.mean_flops / c.original.mean_flops, "%.6f") << '\n';
  };
  row("original", c.original);
  row("class_exclusion", c.proposed);
  row("confidence", c.baseline);
  detail::write_file(out_dir / "comparison.csv", csv.str());
  detail::write_file(out_dir / "comparison.json", to_json(c).dump(2) + "\n");
  detail::write_file(out_dir / "comparison.svg",
                     detail::bar_svg("Relative FLOPs: original / class-exclusion / confidence",
                                     {1.0, c.proposed.mean_flops / c.original.mean_flops,
                                      c.baseline.mean_flops / c.original.mean_flops},
                                     {"original", "exclusion", "confidence"}));
}

}  // namespace eex
