#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "oracles.hpp"

using namespace eex;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / ("eex_" + std::string(info->test_suite_name()) + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
  std::vector<unsigned char> b;
  put_be32(b, 0x803);
  put_be32(b, n);
  put_be32(b, rows);
  put_be32(b, cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) b.push_back(static_cast<unsigned char>(i % 256));
  return b;
}

std::vector<unsigned char> idx_labels(std::uint32_t n) {
  std::vector<unsigned char> b;
  put_be32(b, 0x801);
  put_be32(b, n);
  for (std::uint32_t i = 0; i < n; ++i) b.push_back(static_cast<unsigned char>(i % 10));
  return b;
}

ModelConfig io_config() {
  ModelConfig c;
  c.input = {1, 8, 8};
  c.num_classes = 4;
  c.backbone = {LayerSpec::conv(3), LayerSpec::max_pool(), LayerSpec::conv(5, 3, 2, 1), LayerSpec::dense(6)};
  c.num_exits = 2;
  return c;
}

}  // namespace

TEST(Idx, MnistShapedHeaderParses) {
  TempDir dir;
  write_bytes(dir / "img", idx_images(60, 28, 28));
  write_bytes(dir / "lbl", idx_labels(60));
  const auto d = load_idx(dir / "img", dir / "lbl");
  EXPECT_EQ(d.images.shape(), (Shape{60, 1, 28, 28}));
  EXPECT_EQ(d.num_classes, 10u);
  EXPECT_EQ(d.labels[13], 3u);
  EXPECT_FLOAT_EQ(d.images[255], 1.0f);
  EXPECT_FLOAT_EQ(d.images[256], 0.0f);
}

TEST(Idx, DistinctErrors) {
  TempDir dir;
  auto img = idx_images(4, 3, 3);
  auto truncated = img;
  truncated.resize(truncated.size() - 1);
  write_bytes(dir / "trunc", truncated);
  EXPECT_THROW(load_idx_images(dir / "trunc"), TruncatedError);
  auto bad = img;
  bad[3] = 0x01;
  write_bytes(dir / "magic", bad);
  EXPECT_THROW(load_idx_images(dir / "magic"), FormatError);
  write_bytes(dir / "img", img);
  write_bytes(dir / "lbl", idx_labels(5));
  EXPECT_THROW(load_idx(dir / "img", dir / "lbl"), MismatchError);
  write_bytes(dir / "short", {0, 0, 8});
  EXPECT_THROW(load_idx_labels(dir / "short"), TruncatedError);
  EXPECT_THROW(load_idx_images(dir / "missing"), DataError);
}

TEST(Cifar, RecordCounts) {
  TempDir dir;
  std::vector<unsigned char> one(3073, 0);
  one[0] = 7;
  one[1] = 255;
  write_bytes(dir / "one.bin", one);
  const auto d = load_cifar_binary(dir / "one.bin");
  EXPECT_EQ(d.size(), 1u);
  EXPECT_EQ(d.images.shape(), (Shape{1, 3, 32, 32}));
  EXPECT_EQ(d.labels[0], 7u);
  EXPECT_FLOAT_EQ(d.images[0], 1.0f);

  std::vector<unsigned char> batch(3073 * 10000, 1);
  write_bytes(dir / "batch.bin", batch);
  EXPECT_EQ(load_cifar_binary(dir / "batch.bin").size(), 10000u);

  write_bytes(dir / "empty.bin", {});
  EXPECT_THROW(load_cifar_binary(dir / "empty.bin"), FormatError);
  write_bytes(dir / "odd.bin", std::vector<unsigned char>(3074, 0));
  EXPECT_THROW(load_cifar_binary(dir / "odd.bin"), FormatError);
}

TEST(Synth, DeterministicAndBalanced) {
  const auto a = synth_dataset(5, 2, 10, 0.3);
  const auto b = synth_dataset(5, 2, 10, 0.3);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(std::count(a.labels.begin(), a.labels.end(), 0u), 5);
  EXPECT_EQ(std::count(a.labels.begin(), a.labels.end(), 1u), 5);
  EXPECT_FALSE(synth_dataset(6, 2, 10, 0.3).images == a.images);
  for (float v : a.images.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(synth_dataset(1, 1, 10, 0.0), ContractError);
}

TEST(Synth, DifficultyZeroIsLearnedAlmostPerfectly) {
  const auto all = synth_dataset(21, 4, 400, 0.0, {1, 8, 8});
  auto [tr, te] = all.split_off(0.25, 3, "train", "test");
  ModelConfig c;
  c.input = {1, 8, 8};
  c.num_classes = 4;
  c.backbone = {LayerSpec::conv(6), LayerSpec::max_pool(), LayerSpec::conv(8)};
  c.num_exits = 2;
  auto m = build<float>(c, 2);
  TrainConfig tc;
  tc.epochs = 15;
  tc.batch_size = 16;
  tc.learning_rate = 0.01;
  train(m, tr, nullptr, tc, LossConfig{1.0, true});
  EXPECT_GE(accuracy(m, te), 0.99);
}

TEST(DatasetSplit, DisjointAndComplete) {
  const auto d = synth_dataset(1, 3, 30, 0.5, {1, 4, 4});
  auto [a, b] = d.split_off(0.2, 9, "train", "val");
  EXPECT_EQ(a.size(), 24u);
  EXPECT_EQ(b.size(), 6u);
  EXPECT_EQ(b.split, "val");
  EXPECT_THROW(d.split_off(0.0, 1, "a", "b"), DataError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  const auto cfg = io_config();
  auto m = build<float>(cfg, 77);
  CheckpointMeta meta;
  meta.loss = LossConfig{12.5, true};
  meta.train = TrainConfig{};
  meta.train->epochs = 3;
  meta.train->optimizer = OptimizerKind::adam;
  meta.betas = BetaSchedule{{0.13, 0.5}};
  meta.history.push_back({1, 0.5, 0.7, 0.65, {0.8, 0.9}});
  save_checkpoint(dir / "m.eecx", m, meta);
  const auto ck = load_checkpoint(dir / "m.eecx");
  EXPECT_EQ(ck.model.config, cfg);
  auto pa = m.parameters();
  auto pb = ck.model.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    ASSERT_EQ(pa[i].tensor->size(), pb[i].second->size());
    EXPECT_EQ(std::memcmp(pa[i].tensor->data().data(), pb[i].second->data().data(), 4 * pa[i].tensor->size()), 0);
  }
  EXPECT_EQ(ck.meta.loss.alpha, 12.5);
  ASSERT_TRUE(ck.meta.train);
  EXPECT_EQ(ck.meta.train->epochs, 3u);
  EXPECT_EQ(ck.meta.train->optimizer, OptimizerKind::adam);
  EXPECT_EQ(ck.meta.betas, meta.betas);
  ASSERT_EQ(ck.meta.history.size(), 1u);
  EXPECT_EQ(ck.meta.history[0].exit_auc, (std::vector<double>{0.8, 0.9}));
}

TEST(Checkpoint, HeaderLayout) {
  std::ostringstream os;
  save_checkpoint(os, build<float>(io_config(), 1), CheckpointMeta{});
  const std::string s = os.str();
  EXPECT_EQ(s.substr(0, 4), "EECX");
  EXPECT_EQ(s[4], 1);
  EXPECT_EQ(s[5], 0);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t{static_cast<unsigned char>(s[8 + i])} << (8 * i);
  const auto meta = json::parse(s.substr(16, len));
  EXPECT_TRUE(meta.contains("model"));
  EXPECT_TRUE(meta.contains("tensors"));
  EXPECT_EQ(s.size(), 16 + len + 4 * build<float>(io_config(), 1).parameter_count());
}

TEST(Checkpoint, CorruptionIsDetected) {
  std::ostringstream os;
  save_checkpoint(os, build<float>(io_config(), 1), CheckpointMeta{});
  const std::string good = os.str();

  std::string flipped = good;
  flipped[1] ^= 0x20;
  std::istringstream a(flipped);
  EXPECT_THROW(load_checkpoint(a), CheckpointMagicError);

  std::string version = good;
  version[4] = 2;
  std::istringstream b(version);
  EXPECT_THROW(load_checkpoint(b), CheckpointVersionError);

  // edit M in the metadata without touching the tensors
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t{static_cast<unsigned char>(good[8 + i])} << (8 * i);
  auto meta = json::parse(good.substr(16, len));
  meta["model"]["num_classes"] = 5;
  const std::string text = meta.dump();
  std::string edited = good.substr(0, 8);
  for (int i = 0; i < 8; ++i) edited.push_back(static_cast<char>((text.size() >> (8 * i)) & 0xFF));
  edited += text + good.substr(16 + len);
  std::istringstream c(edited);
  EXPECT_THROW(load_checkpoint(c), CheckpointConsistencyError);

  std::istringstream d(good.substr(0, good.size() - 4));
  EXPECT_THROW(load_checkpoint(d), CheckpointConsistencyError);
}

TEST(ConfigJson, RoundTrips) {
  const auto cfg = io_config();
  EXPECT_EQ(model_config_from_json(to_json(cfg)), cfg);
  TrainConfig t;
  t.learning_rate = 0.02;
  t.batch_size = 7;
  t.optimizer = OptimizerKind::sgd;
  const auto t2 = train_config_from_json(to_json(t));
  EXPECT_EQ(t2.learning_rate, 0.02);
  EXPECT_EQ(t2.batch_size, 7u);
  EXPECT_EQ(t2.optimizer, OptimizerKind::sgd);
  SearchConfig s;
  s.epsilon = 0.25;
  EXPECT_EQ(search_config_from_json(to_json(s)).epsilon, 0.25);
  EXPECT_THROW(layer_from_json(json{{"type", "lstm"}}), ConfigError);
}

TEST(TraceJson, LinesRoundTrip) {
  std::mt19937_64 rng(3);
  const auto cfg = io_config();
  auto m = build<float>(cfg, 4);
  std::vector<InferenceTrace> tr;
  for (int i = 0; i < 10; ++i) {
    auto t = dynamic_infer(m, oracle::random_tensor<float>(rng, cfg.input, 0, 1), BetaSchedule{{0.9, 0.95}});
    t.label = static_cast<std::size_t>(i % 4);
    tr.push_back(t);
  }
  tr.push_back(confidence_infer(m, oracle::random_tensor<float>(rng, cfg.input, 0, 1), ConfidenceConfig::uniform(2, 0.3)));
  std::stringstream ss;
  write_trace_lines(ss, tr);
  const std::string text = ss.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 11);
  const auto j = json::parse(text.substr(0, text.find('\n')));
  for (const char* k : {"exit_layer", "predicted_class", "flops", "events"}) EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(read_trace_lines(ss), tr);
}
