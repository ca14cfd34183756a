#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "eex/eex.hpp"

namespace fs = std::filesystem;
using namespace eex;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "eex_out";
  std::string checkpoint;  // defaults to <out>/model.eecx

  fs::path checkpoint_path() const { return checkpoint.empty() ? fs::path(out) / "model.eecx" : fs::path(checkpoint); }
};

RunConfig run_config(const Globals& g) {
  if (g.config.empty()) throw ConfigError("--config is required");
  return load_run_config(g.config, g.seed);
}

void print_line(const char* key, double value, const char* fmt = "%.4f") {
  std::printf("%-18s", (std::string(key) + ":").c_str());
  std::printf(fmt, value);
  std::printf("\n");
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream os(p);
  os << j.dump(2) << "\n";
  if (!os) throw std::runtime_error("cannot write " + p.string());
}

FinalDecision parse_rule(const std::string& s) {
  if (s == "restricted") return FinalDecision::restricted;
  if (s == "unrestricted") return FinalDecision::unrestricted;
  throw ConfigError("unknown final rule '" + s + "'");
}

int cmd_train(const Globals& g) {
  const auto cfg = run_config(g);
  const auto data = load_splits(cfg);
  const auto mc = cfg.model_config(data.train.sample_shape(), data.train.num_classes);
  auto model = build<float>(mc, cfg.seed);
  std::printf("model: %zu parameters, %zu exits, %zu classes\n", model.parameter_count(), mc.num_exits, mc.num_classes);
  std::printf("data: %zu train, %zu val, %zu test\n", data.train.size(), data.val.size(), data.test.size());
  const auto result = train(model, data.train, data.val.empty() ? nullptr : &data.val, cfg.train, cfg.loss,
                            [](const EpochMetrics& m) {
                              std::printf("epoch %zu  loss %.4f  train acc %.4f", m.epoch, m.loss, m.train_accuracy);
                              if (m.val_accuracy >= 0) std::printf("  val acc %.4f", m.val_accuracy);
                              std::printf("\n");
                              std::fflush(stdout);
                            });
  fs::create_directories(g.out);
  CheckpointMeta meta{cfg.loss, cfg.train, std::nullopt, result.history};
  save_checkpoint(g.checkpoint_path(), model, meta);
  json hist = json::array();
  for (auto& m : result.history) hist.push_back(to_json(m));
  write_json(fs::path(g.out) / "history.json", hist);
  print_line("test accuracy", accuracy(model, data.test));
  std::printf("checkpoint: %s\n", g.checkpoint_path().string().c_str());
  return 0;
}

int cmd_search(const Globals& g) {
  const auto cfg = run_config(g);
  const auto data = load_splits(cfg);
  if (data.val.empty()) throw ConfigError("beta search needs train.validation_split > 0");
  auto ck = load_checkpoint(g.checkpoint_path());
  const auto cost = CostModel::from_config(ck.model.config);
  const auto r = search_betas(record_dataset(ck.model, data.val), cfg.search, cost);

  fs::create_directories(g.out);
  {
    std::ofstream os(fs::path(g.out) / "audit.csv");
    write_audit_csv(os, r.audit);
  }
  write_json(fs::path(g.out) / "betas.json",
             {{"betas", r.betas.beta},
              {"order", r.order},
              {"epsilon", cfg.search.epsilon},
              {"baseline_val_accuracy", r.baseline_accuracy},
              {"final_val_accuracy", r.final_accuracy}});
  ck.meta.betas = r.betas;
  save_checkpoint(g.checkpoint_path(), ck.model, ck.meta);

  std::printf("search order:");
  for (auto e : r.order) std::printf(" %zu", e);
  std::printf("\nbetas:");
  for (double b : r.betas.beta) std::printf(" %.2f", b);
  std::printf("\n");
  print_line("val accuracy (0)", r.baseline_accuracy);
  print_line("val accuracy", r.final_accuracy);
  std::printf("probes: %zu\n", r.audit.size());
  return 0;
}

struct Loaded {
  RunConfig cfg;
  Splits data;
  Checkpoint ck;
  CostModel cost;
  BetaSchedule betas;
};

Loaded load_all(const Globals& g, bool zero_betas) {
  Loaded l{run_config(g), {}, load_checkpoint(g.checkpoint_path()), {}, {}};
  l.data = load_splits(l.cfg);
  l.cost = CostModel::from_config(l.ck.model.config);
  const auto n = l.ck.model.num_exits();
  l.betas = zero_betas || !l.ck.meta.betas ? BetaSchedule::zeros(n) : *l.ck.meta.betas;
  return l;
}

int cmd_eval(const Globals& g, bool zero_betas, const std::string& rule) {
  const auto l = load_all(g, zero_betas);
  const auto records = record_dataset(l.ck.model, l.data.test);
  const auto stat = evaluate_static(records, l.cost);
  const auto s = evaluate_exclusion(records, l.betas, l.cost, parse_rule(rule));
  std::printf("betas:");
  for (double b : l.betas.beta) std::printf(" %.2f", b);
  std::printf("\n");
  print_line("samples", static_cast<double>(records.size()), "%.0f");
  print_line("static accuracy", stat.accuracy, "%.6f");
  print_line("accuracy", s.accuracy, "%.6f");
  print_line("static FLOPs", stat.mean_flops, "%.0f");
  print_line("mean FLOPs", s.mean_flops, "%.1f");
  print_line("reduction", 100.0 * s.reduction, "%.2f%%");
  return 0;
}

int cmd_infer(const Globals& g, bool zero_betas, const std::string& rule, std::size_t limit) {
  const auto l = load_all(g, zero_betas);
  const std::size_t n = limit ? std::min(limit, l.data.test.size()) : l.data.test.size();
  std::vector<InferenceTrace> traces;
  for (std::size_t i = 0; i < n; ++i) {
    auto t = dynamic_infer(l.ck.model, l.data.test.image(i), l.betas, l.cost, parse_rule(rule));
    t.label = l.data.test.labels[i];
    traces.push_back(std::move(t));
  }
  fs::create_directories(g.out);
  const auto path = fs::path(g.out) / "traces.jsonl";
  std::ofstream os(path);
  write_trace_lines(os, traces);
  std::printf("wrote %zu traces to %s\n", traces.size(), path.string().c_str());
  return 0;
}

int cmd_compare(const Globals& g) {
  const auto l = load_all(g, false);
  if (!l.ck.meta.betas) std::printf("WARNING: checkpoint has no searched betas, using zeros\n");
  const auto records = record_dataset(l.ck.model, l.data.test);
  const auto orig = evaluate_static(records, l.cost);
  const auto prop = evaluate_exclusion(records, l.betas, l.cost, l.cfg.search.final_rule);
  const auto m = match_confidence_baseline(records, l.cost, prop.accuracy, l.cfg.baseline.criterion,
                                           l.cfg.baseline.step, l.cfg.baseline.tolerance);
  const auto c = compare(point_of(orig), point_of(prop), m);
  emit_comparison(c, fs::path(g.out) / "comparison");

  std::printf("%-16s %10s %14s %14s\n", "pipeline", "accuracy", "mean MACs", "mean FLOPs");
  auto row = [](const char* name, const PipelinePoint& p) {
    std::printf("%-16s %10.4f %14.1f %14.1f\n", name, p.accuracy, p.mean_macs, p.mean_flops);
  };
  row("original", c.original);
  row("class-exclusion", c.proposed);
  row("confidence", c.baseline);
  print_line("threshold", c.baseline_threshold);
  std::printf("matched: %s\n", c.matched ? "yes" : "no");
  if (!c.matched)
    std::printf("WARNING: no baseline threshold within %.2f points of the class-exclusion accuracy\n",
                l.cfg.baseline.tolerance);
  if (!c.proposed_cheaper) std::printf("WARNING: class-exclusion FLOPs exceed the confidence baseline\n");
  return 0;
}

int cmd_report(const Globals& g, const std::string& traces_path) {
  auto ck = load_checkpoint(g.checkpoint_path());
  const auto cost = CostModel::from_config(ck.model.config);
  std::vector<InferenceTrace> traces;
  if (!traces_path.empty()) {
    std::ifstream is(traces_path);
    if (!is) throw std::runtime_error("cannot open " + traces_path);
    traces = read_trace_lines(is);
  } else {
    const auto cfg = run_config(g);
    const auto data = load_splits(cfg);
    const auto betas = ck.meta.betas ? *ck.meta.betas : BetaSchedule::zeros(ck.model.num_exits());
    traces = evaluate_exclusion(record_dataset(ck.model, data.test), betas, cost, cfg.search.final_rule, true).traces;
  }
  const auto dir = fs::path(g.out) / "report";
  const auto r = emit_report(traces, cost, ck.model.num_classes(), dir);
  std::printf("exit histogram:");
  for (auto h : r.exit_histogram) std::printf(" %zu", h);
  std::printf("\nmean excluded:");
  for (double v : r.mean_excluded) std::printf(" %.3f", v);
  std::printf("\nreport: %s\n", dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-exclusion early-exit inference"};
  app.name("eex");
  app.fallthrough();
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "run configuration (JSON)");
  app.add_option("--seed", g.seed, "seed for initialization, shuffling and data");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--checkpoint", g.checkpoint, "checkpoint path (default <out>/model.eecx)");

  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  auto* search_cmd = app.add_subcommand("search-beta", "calibrate betas on the validation split");

  bool zero = false;
  std::string rule = "restricted";
  std::size_t limit = 0;
  auto* infer_cmd = app.add_subcommand("infer", "run dynamic inference on the test split, write traces");
  infer_cmd->add_flag("--zero-betas", zero, "ignore searched betas");
  infer_cmd->add_option("--rule", rule, "final decision: restricted | unrestricted");
  infer_cmd->add_option("--limit", limit, "number of test samples (0 = all)");

  auto* eval_cmd = app.add_subcommand("eval", "accuracy, mean FLOPs and reduction on the test split");
  eval_cmd->add_flag("--zero-betas", zero, "ignore searched betas");
  eval_cmd->add_option("--rule", rule, "final decision: restricted | unrestricted");

  auto* compare_cmd = app.add_subcommand("compare-baseline", "matched-accuracy comparison with confidence exits");

  std::string traces;
  auto* report_cmd = app.add_subcommand("report", "exit and exclusion statistics as CSV, JSON and SVG");
  report_cmd->add_option("--traces", traces, "JSON-lines traces (default: recompute on the test split)");

  if (argc < 2) {
    std::cerr << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(g);
    if (*search_cmd) return cmd_search(g);
    if (*infer_cmd) return cmd_infer(g, zero, rule, limit);
    if (*eval_cmd) return cmd_eval(g, zero, rule);
    if (*compare_cmd) return cmd_compare(g);
    if (*report_cmd) return cmd_report(g, traces);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
