#pragma once
// JSON forms of the configs and traces, and the EECX checkpoint container:
//
//   "EECX" | u32 version | u64 json length | json metadata | f32 tensors
//
// All integers and floats are little-endian; tensors follow the order and
// shapes listed under "tensors" in the metadata.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eex/calibration.hpp"
#include "eex/inference.hpp"
#include "eex/model.hpp"
#include "eex/training.hpp"

namespace eex {

using json = nlohmann::json;

// ---- configs -------------------------------------------------------------

inline json to_json(const LayerSpec& s) {
  const char* act = s.activation == Activation::relu ? "relu" : "none";
  switch (s.kind) {
    case LayerKind::conv:
      return {{"type", "conv"}, {"channels", s.units}, {"kernel", s.kernel}, {"stride", s.stride}, {"pad", s.pad},
              {"activation", act}};
    case LayerKind::dense: return {{"type", "dense"}, {"units", s.units}, {"activation", act}};
    case LayerKind::pool:
      return {{"type", "pool"}, {"mode", s.pool == PoolMode::max ? "max" : "avg"}, {"kernel", s.kernel},
              {"stride", s.stride}};
  }
  return {};
}

inline LayerSpec layer_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  auto act = [&](const char* dflt) {
    const std::string a = j.value("activation", std::string(dflt));
    if (a == "relu") return Activation::relu;
    if (a == "none") return Activation::none;
    throw ConfigError("unknown activation '" + a + "'");
  };
  if (type == "conv")
    return LayerSpec::conv(j.at("channels").get<std::size_t>(), j.value("kernel", std::size_t{3}),
                           j.value("stride", std::size_t{1}), j.value("pad", std::size_t{1}), act("relu"));
  if (type == "dense") return LayerSpec::dense(j.at("units").get<std::size_t>(), act("relu"));
  if (type == "pool") {
    const std::string mode = j.value("mode", std::string("max"));
    const auto k = j.value("kernel", std::size_t{2});
    const auto s = j.value("stride", k);
    if (mode == "max") return LayerSpec::max_pool(k, s);
    if (mode == "avg") return LayerSpec::avg_pool(k, s);
    throw ConfigError("unknown pool mode '" + mode + "'");
  }
  throw ConfigError("unknown layer type '" + type + "'");
}

inline json to_json(const ModelConfig& c) {
  json layers = json::array();
  for (auto& s : c.backbone) layers.push_back(to_json(s));
  return {{"input", c.input}, {"num_classes", c.num_classes}, {"num_exits", c.num_exits}, {"backbone", layers}};
}

/// num_exits may be omitted, in which case it is the conv layer count.
inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.input = j.value("input", c.input);
  c.num_classes = j.value("num_classes", c.num_classes);
  for (auto& l : j.at("backbone")) c.backbone.push_back(layer_from_json(l));
  c.num_exits = j.contains("num_exits") ? j.at("num_exits").get<std::size_t>() : c.exit_layers().size();
  c.validate();
  return c;
}

inline const char* to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::sgd_momentum: return "sgd_momentum";
    case OptimizerKind::adam: return "adam";
  }
  return "?";
}

inline json to_json(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate}, {"epochs", t.epochs},
          {"batch_size", t.batch_size},       {"optimizer", to_string(t.optimizer)},
          {"momentum", t.momentum},           {"weight_decay", t.weight_decay},
          {"lr_step", t.lr_step},             {"lr_gamma", t.lr_gamma},
          {"seed", t.seed},                   {"validation_split", t.validation_split},
          {"train_exit_classifiers", t.train_exit_classifiers}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig t;
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  const std::string opt = j.value("optimizer", std::string(to_string(t.optimizer)));
  if (opt == "sgd") t.optimizer = OptimizerKind::sgd;
  else if (opt == "sgd_momentum") t.optimizer = OptimizerKind::sgd_momentum;
  else if (opt == "adam") t.optimizer = OptimizerKind::adam;
  else throw ConfigError("unknown optimizer '" + opt + "'");
  t.momentum = j.value("momentum", t.momentum);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.lr_step = j.value("lr_step", t.lr_step);
  t.lr_gamma = j.value("lr_gamma", t.lr_gamma);
  t.seed = j.value("seed", t.seed);
  t.validation_split = j.value("validation_split", t.validation_split);
  t.train_exit_classifiers = j.value("train_exit_classifiers", t.train_exit_classifiers);
  t.validate();
  return t;
}

inline json to_json(const LossConfig& l) { return {{"alpha", l.alpha}, {"exclusion_terms", l.exclusion_terms}}; }

inline LossConfig loss_config_from_json(const json& j) {
  LossConfig l;
  l.alpha = j.value("alpha", l.alpha);
  l.exclusion_terms = j.value("exclusion_terms", l.exclusion_terms);
  l.validate();
  return l;
}

inline json to_json(const SearchConfig& s) {
  return {{"epsilon", s.epsilon},
          {"step", s.step},
          {"final_rule", s.final_rule == FinalDecision::restricted ? "restricted" : "unrestricted"}};
}

inline SearchConfig search_config_from_json(const json& j) {
  SearchConfig s;
  s.epsilon = j.value("epsilon", s.epsilon);
  s.step = j.value("step", s.step);
  const std::string rule = j.value("final_rule", std::string("restricted"));
  if (rule == "restricted") s.final_rule = FinalDecision::restricted;
  else if (rule == "unrestricted") s.final_rule = FinalDecision::unrestricted;
  else throw ConfigError("unknown final_rule '" + rule + "'");
  s.validate();
  return s;
}

inline json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch}, {"loss", m.loss}, {"train_accuracy", m.train_accuracy},
          {"val_accuracy", m.val_accuracy}, {"exit_auc", m.exit_auc}};
}

inline EpochMetrics epoch_metrics_from_json(const json& j) {
  EpochMetrics m;
  m.epoch = j.at("epoch").get<std::size_t>();
  m.loss = j.at("loss").get<double>();
  m.train_accuracy = j.at("train_accuracy").get<double>();
  m.val_accuracy = j.at("val_accuracy").get<double>();
  m.exit_auc = j.at("exit_auc").get<std::vector<double>>();
  return m;
}

// ---- traces --------------------------------------------------------------

inline json to_json(const InferenceTrace& t) {
  json events = json::array();
  for (auto& e : t.exits) {
    events.push_back({{"exit", e.exit},
                      {"probs", e.probs},
                      {"max_prob", e.max_prob},
                      {"recovered", e.recovered ? json(*e.recovered) : json(nullptr)},
                      {"excluded", e.excluded},
                      {"remaining", e.remaining}});
  }
  return {{"exit_layer", t.exit_layer},
          {"predicted_class", t.predicted_class},
          {"flops", t.flops},
          {"macs", t.macs},
          {"engine", to_string(t.engine)},
          {"exit_reason", to_string(t.reason)},
          {"label", t.label ? json(*t.label) : json(nullptr)},
          {"events", events}};
}

inline InferenceTrace trace_from_json(const json& j) {
  InferenceTrace t;
  t.exit_layer = j.at("exit_layer").get<std::size_t>();
  t.predicted_class = j.at("predicted_class").get<std::size_t>();
  t.flops = j.at("flops").get<std::uint64_t>();
  t.macs = j.value("macs", std::uint64_t{0});
  t.engine = j.value("engine", std::string("class-exclusion")) == "confidence" ? Engine::confidence
                                                                                 : Engine::class_exclusion;
  const std::string reason = j.value("exit_reason", std::string("final-layer"));
  t.reason = reason == "single-class" ? ExitReason::single_class
             : reason == "confident" ? ExitReason::confident
                                     : ExitReason::final_layer;
  if (j.contains("label") && !j.at("label").is_null()) t.label = j.at("label").get<std::size_t>();
  for (auto& e : j.at("events")) {
    ExitRecord r;
    r.exit = e.at("exit").get<std::size_t>();
    r.probs = e.at("probs").get<std::vector<double>>();
    r.max_prob = e.at("max_prob").get<double>();
    if (!e.at("recovered").is_null()) r.recovered = e.at("recovered").get<std::size_t>();
    r.excluded = e.at("excluded").get<std::vector<std::size_t>>();
    r.remaining = e.at("remaining").get<std::vector<std::size_t>>();
    t.exits.push_back(std::move(r));
  }
  return t;
}

/// One JSON object per line.
inline void write_trace_lines(std::ostream& os, const std::vector<InferenceTrace>& traces) {
  for (auto& t : traces) os << to_json(t).dump() << '\n';
}

inline std::vector<InferenceTrace> read_trace_lines(std::istream& is) {
  std::vector<InferenceTrace> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(trace_from_json(json::parse(line)));
  return out;
}

// ---- checkpoint ----------------------------------------------------------

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
/// Metadata and tensor payload disagree.
class CheckpointConsistencyError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr char kCheckpointMagic[4] = {'E', 'E', 'C', 'X'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  LossConfig loss;
  std::optional<TrainConfig> train;
  std::optional<BetaSchedule> betas;
  std::vector<EpochMetrics> history;
};

struct Checkpoint {
  Model<float> model;
  CheckpointMeta meta;
};

namespace detail {
template <typename U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& buf, std::size_t off) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  return v;
}
}  // namespace detail

inline void save_checkpoint(std::ostream& os, const Model<float>& model, const CheckpointMeta& meta) {
  json tensors = json::array();
  for (auto& [name, t] : model.parameters()) tensors.push_back({{"name", name}, {"shape", t->shape()}});
  json j = {{"model", to_json(model.config)}, {"loss", to_json(meta.loss)}, {"tensors", tensors}};
  if (meta.train) j["train"] = to_json(*meta.train);
  j["betas"] = meta.betas ? json(meta.betas->beta) : json(nullptr);
  json hist = json::array();
  for (auto& h : meta.history) hist.push_back(to_json(h));
  j["history"] = hist;

  const std::string text = j.dump();
  os.write(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (auto& [name, t] : model.parameters())
    for (float v : t->data()) detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
  if (!os) throw CheckpointError("checkpoint write failed");
}

inline void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const CheckpointMeta& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  save_checkpoint(os, model, meta);
}

inline Checkpoint load_checkpoint(std::istream& is) {
  const std::string buf(std::istreambuf_iterator<char>(is), {});
  if (buf.size() < 16 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointMagicError("not an EECX checkpoint");
  const auto version = detail::get_le<std::uint32_t>(buf, 4);
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::get_le<std::uint64_t>(buf, 8);
  if (16 + len > buf.size()) throw CheckpointConsistencyError("metadata runs past end of file");
  json j;
  try {
    j = json::parse(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::exception& e) {
    throw CheckpointConsistencyError(std::string("metadata is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.model = build<float>(model_config_from_json(j.at("model")), 0);
    ck.meta.loss = loss_config_from_json(j.at("loss"));
    if (j.contains("train")) ck.meta.train = train_config_from_json(j.at("train"));
    if (j.contains("betas") && !j.at("betas").is_null())
      ck.meta.betas = BetaSchedule{j.at("betas").get<std::vector<double>>()};
    for (auto& h : j.value("history", json::array())) ck.meta.history.push_back(epoch_metrics_from_json(h));
  } catch (const json::exception& e) {
    throw CheckpointConsistencyError(std::string("bad metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointConsistencyError(std::string("bad model config: ") + e.what());
  }

  auto params = ck.model.parameters();
  const json& listed = j.at("tensors");
  if (listed.size() != params.size()) throw CheckpointConsistencyError("tensor count does not match the model config");
  std::size_t off = 16 + len;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Shape s = listed[k].at("shape").get<Shape>();
    if (listed[k].at("name").get<std::string>() != params[k].name || s != params[k].tensor->shape())
      throw CheckpointConsistencyError("tensor " + params[k].name + " shape " + shape_str(s) +
                                       " does not match the model config " + shape_str(params[k].tensor->shape()));
    auto data = params[k].tensor->data();
    if (off + 4 * data.size() > buf.size()) throw CheckpointConsistencyError("tensor payload truncated");
    for (auto& v : data) {
      v = std::bit_cast<float>(detail::get_le<std::uint32_t>(buf, off));
      off += 4;
    }
  }
  if (off != buf.size()) throw CheckpointConsistencyError("trailing bytes after tensor payload");
  if (ck.meta.betas && ck.meta.betas->size() != ck.model.num_exits())
    throw CheckpointConsistencyError("beta schedule length does not match exit count");
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  return load_checkpoint(is);
}

}  // namespace eex
