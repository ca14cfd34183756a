#pragma once
// Run configuration: one JSON document naming the data source and the model,
// training, loss, search and baseline settings. A single seed drives model
// initialization, shuffling, splitting and synthetic data generation.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <tuple>
#include <string>
#include <vector>

#include "eex/data.hpp"
#include "eex/report.hpp"
#include "eex/serialize.hpp"

namespace eex {

struct DataConfig {
  std::string kind = "synthetic";  // synthetic | idx | cifar
  // synthetic
  std::size_t classes = 10;
  std::size_t count = 5000;
  double difficulty = 0.5;
  Shape shape{1, 16, 16};
  std::optional<std::uint64_t> seed;  // defaults to the run seed
  // held out for evaluation; synthetic and cifar without test files
  double test_split = 0.2;
  // idx
  std::string train_images, train_labels, test_images, test_labels;
  // cifar
  std::vector<std::string> train_files;
  std::string test_file;
};

struct BaselineConfig {
  ConfidenceCriterion criterion = ConfidenceCriterion::max_prob;
  double step = 0.01;
  double tolerance = 0.5;  // accuracy points
};

struct RunConfig {
  std::uint64_t seed = 0;
  json model;  // resolved against the data by model_config()
  DataConfig data;
  TrainConfig train;
  LossConfig loss;
  SearchConfig search;
  BaselineConfig baseline;

  /// input and num_classes may be left out of the model section; they are
  /// then taken from the data.
  ModelConfig model_config(const Shape& input, std::size_t num_classes) const {
    json m = model;
    if (!m.contains("input")) m["input"] = input;
    if (!m.contains("num_classes")) m["num_classes"] = num_classes;
    auto c = model_config_from_json(m);
    if (c.input != input) throw ConfigError("model input " + shape_str(c.input) + " does not match data " + shape_str(input));
    if (c.num_classes != num_classes) throw ConfigError("model class count does not match the data");
    return c;
  }
};

inline DataConfig data_config_from_json(const json& j) {
  DataConfig d;
  d.kind = j.value("kind", d.kind);
  d.classes = j.value("classes", d.classes);
  d.count = j.value("count", d.count);
  d.difficulty = j.value("difficulty", d.difficulty);
  d.shape = j.value("shape", d.shape);
  if (j.contains("seed")) d.seed = j.at("seed").get<std::uint64_t>();
  d.test_split = j.value("test_split", d.test_split);
  d.train_images = j.value("train_images", d.train_images);
  d.train_labels = j.value("train_labels", d.train_labels);
  d.test_images = j.value("test_images", d.test_images);
  d.test_labels = j.value("test_labels", d.test_labels);
  d.train_files = j.value("train_files", d.train_files);
  d.test_file = j.value("test_file", d.test_file);
  if (d.kind != "synthetic" && d.kind != "idx" && d.kind != "cifar")
    throw ConfigError("unknown data kind '" + d.kind + "'");
  if (!(d.test_split >= 0.0 && d.test_split < 1.0)) throw ConfigError("test_split must be in [0, 1)");
  return d;
}

inline BaselineConfig baseline_config_from_json(const json& j) {
  BaselineConfig b;
  const std::string c = j.value("criterion", std::string("max_prob"));
  if (c == "max_prob") b.criterion = ConfidenceCriterion::max_prob;
  else if (c == "entropy") b.criterion = ConfidenceCriterion::entropy;
  else throw ConfigError("unknown baseline criterion '" + c + "'");
  b.step = j.value("step", b.step);
  b.tolerance = j.value("tolerance", b.tolerance);
  if (!(b.step > 0.0 && b.step <= 1.0)) throw ConfigError("baseline step must be in (0, 1]");
  return b;
}

/// train.seed follows the run seed unless the train section sets its own.
inline RunConfig run_config_from_json(const json& j) {
  static const char* known[] = {"seed", "model", "data", "train", "loss", "search", "baseline"};
  for (auto& [k, v] : j.items())
    if (std::find_if(std::begin(known), std::end(known), [&](const char* s) { return k == s; }) == std::end(known))
      throw ConfigError("unknown config section '" + k + "'");
  RunConfig r;
  r.seed = j.value("seed", r.seed);
  r.model = j.at("model");
  r.data = data_config_from_json(j.value("data", json::object()));
  json train = j.value("train", json::object());
  if (!train.contains("seed")) train["seed"] = r.seed;
  r.train = train_config_from_json(train);
  r.loss = loss_config_from_json(j.value("loss", json::object()));
  r.search = search_config_from_json(j.value("search", json::object()));
  r.baseline = baseline_config_from_json(j.value("baseline", json::object()));
  return r;
}

inline RunConfig load_run_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed = {}) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (seed) j["seed"] = *seed;
  return run_config_from_json(j);
}

struct Splits {
  Dataset train, val, test;
};

namespace detail {
inline Dataset concat(const std::vector<Dataset>& parts) {
  if (parts.empty()) throw DataError("no input files");
  Dataset d;
  d.num_classes = parts.front().num_classes;
  std::vector<float> pixels;
  for (auto& p : parts) {
    if (p.sample_shape() != parts.front().sample_shape()) throw MismatchError("sample shapes differ between files");
    pixels.insert(pixels.end(), p.images.data().begin(), p.images.data().end());
    d.labels.insert(d.labels.end(), p.labels.begin(), p.labels.end());
  }
  Shape s{d.labels.size()};
  for (auto e : parts.front().sample_shape()) s.push_back(e);
  d.images = Tensor<float>(s, std::move(pixels));
  return d;
}
}  // namespace detail

/// Train/validation/test datasets for a run. The validation set is carved
/// from the training data by train.validation_split and is empty when that
/// fraction is 0.
inline Splits load_splits(const RunConfig& cfg) {
  const std::uint64_t split_seed = cfg.seed * 2654435761ull + 17;
  Dataset pool, test;
  const auto& d = cfg.data;
  if (d.kind == "synthetic") {
    auto all = synth_dataset(d.seed.value_or(cfg.seed), d.classes, d.count, d.difficulty, d.shape);
    std::tie(pool, test) = all.split_off(d.test_split, split_seed, "train", "test");
  } else if (d.kind == "idx") {
    pool = load_idx(d.train_images, d.train_labels);
    test = load_idx(d.test_images, d.test_labels, pool.num_classes);
    test.split = "test";
  } else {
    std::vector<Dataset> parts;
    for (auto& f : d.train_files) parts.push_back(load_cifar_binary(f));
    pool = detail::concat(parts);
    if (!d.test_file.empty()) {
      test = load_cifar_binary(d.test_file);
      test.split = "test";
    } else {
      std::tie(pool, test) = pool.split_off(d.test_split, split_seed, "train", "test");
    }
  }
  Splits s;
  if (cfg.train.validation_split > 0.0) {
    std::tie(s.train, s.val) = pool.split_off(cfg.train.validation_split, split_seed + 1, "train", "val");
  } else {
    s.train = std::move(pool);
  }
  s.test = std::move(test);
  return s;
}

}  // namespace eex
