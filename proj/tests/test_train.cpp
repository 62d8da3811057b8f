#include <gtest/gtest.h>

#include <fstream>

#include "rgm/dataset.hpp"
#include "rgm/train.hpp"

using namespace rgm;
namespace fs = std::filesystem;

namespace {

config::Config small_config() {
  config::Config c;
  c.net.k = 6;
  c.net.feature_dim = 16;
  c.net.mlp = {8, 16};
  c.net.graph_dim = 12;
  c.net.heads = 2;
  c.net.ff_dim = 16;
  c.init_seed = 11;
  c.train.epochs = 2;
  c.train.lr = 1e-2;
  c.train.seed = 5;
  c.train.checkpoint_every = 0;
  return c;
}

std::vector<synth::RegistrationSample> small_data(std::size_t n, std::uint64_t seed = 1, std::size_t points = 40) {
  synth::ProtocolSettings s;
  s.n_points = points;
  s.seed = seed;
  return dataset::generate(s, synth::all_shapes(), n);
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("rgm_train_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Train, ZeroLearningRateLeavesWeightsUnchanged) {
  auto cfg = small_config();
  cfg.train.lr = 0.0;
  auto before = net::RgmWeights(cfg.net, cfg.init_seed).params().digest();
  auto w = train::train(cfg, small_data(3));
  EXPECT_EQ(w.params().digest(), before);
}

TEST(Train, NonzeroLearningRateMovesWeights) {
  auto cfg = small_config();
  auto before = net::RgmWeights(cfg.net, cfg.init_seed).params().digest();
  EXPECT_NE(train::train(cfg, small_data(3)).params().digest(), before);
}

TEST(Train, RunsAreByteIdentical) {
  auto cfg = small_config();
  cfg.train.checkpoint_every = 1;
  auto data = small_data(4);
  fs::path a = fresh_dir("a"), b = fresh_dir("b");
  train::train(cfg, data, {a, false, {}});
  train::train(cfg, data, {b, false, {}});
  for (const char* f : {"weights.bin", "train_log.jsonl", "model.toml", "checkpoints/epoch_0001.bin"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_EQ(slurp(a / "train_log.jsonl").find("wall_time"), std::string::npos);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Train, ShuffleSeedChangesResult) {
  auto cfg = small_config();
  auto data = small_data(4);
  auto d1 = train::train(cfg, data).params().digest();
  cfg.train.seed = 6;
  EXPECT_NE(train::train(cfg, data).params().digest(), d1);
}

TEST(Train, TimingAddsWallTime) {
  auto cfg = small_config();
  cfg.train.epochs = 1;
  fs::path d = fresh_dir("timing");
  train::TrainOptions opt{d, true, {}};
  train::train(cfg, small_data(2), opt);
  EXPECT_NE(slurp(d / "train_log.jsonl").find("wall_time"), std::string::npos);
  fs::remove_all(d);
}

TEST(Train, LogHasOneLinePerEpoch) {
  auto cfg = small_config();
  cfg.train.epochs = 3;
  std::vector<train::EpochRecord> log;
  std::size_t callbacks = 0;
  train::TrainOptions opt;
  opt.on_epoch = [&](const train::EpochRecord&) { ++callbacks; };
  train::train(cfg, small_data(2), opt, &log);
  ASSERT_EQ(log.size(), 3u);
  EXPECT_EQ(callbacks, 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(log[e].epoch, e + 1);
    EXPECT_TRUE(std::isfinite(log[e].mean_loss));
    EXPECT_GT(log[e].mean_loss, 0.0);
  }
}

TEST(Train, CheckpointsAndFinalWeights) {
  auto cfg = small_config();
  cfg.train.epochs = 3;
  cfg.train.checkpoint_every = 1;
  fs::path d = fresh_dir("ckpt");
  auto w = train::train(cfg, small_data(2), {d, false, {}});
  EXPECT_TRUE(fs::exists(d / "checkpoints/epoch_0001.bin"));
  EXPECT_TRUE(fs::exists(d / "checkpoints/epoch_0002.bin"));
  EXPECT_FALSE(fs::exists(d / "checkpoints/epoch_0003.bin"));
  auto mc = train::model_config(d / "weights.bin", std::nullopt);
  EXPECT_EQ(config::to_toml(mc), config::to_toml(cfg));
  auto loaded = train::load_model(d / "weights.bin", mc);
  EXPECT_EQ(loaded.params().digest(), w.params().digest());
  auto early = train::load_model(d / "checkpoints/epoch_0001.bin", mc);
  EXPECT_NE(early.params().digest(), w.params().digest());
  fs::remove_all(d);
}

TEST(Train, CheckpointRoundTripIsExact) {
  auto cfg = small_config();
  auto w = train::train(cfg, small_data(2));
  net::RgmWeights other(cfg.net, 999);
  fs::path d = fresh_dir("rt");
  fs::create_directories(d);
  train::checkpoint_roundtrip(w, d / "w.bin", other);
  EXPECT_EQ(other.params().digest(), w.params().digest());
  fs::remove_all(d);
}

TEST(Train, DamagedCheckpointsAreRejected) {
  auto cfg = small_config();
  net::RgmWeights w(cfg.net, 1);
  fs::path d = fresh_dir("bad");
  fs::create_directories(d);
  diff::save_weights(d / "w.bin", w.params());
  std::string bytes = slurp(d / "w.bin");

  std::string versioned = bytes;
  versioned[4] = 9;
  io::write_atomic(d / "v.bin", versioned);
  EXPECT_THROW(train::load_model(d / "v.bin", cfg), FormatError);

  io::write_atomic(d / "t.bin", bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(train::load_model(d / "t.bin", cfg), CorruptionError);

  auto wider = cfg;
  wider.net.graph_dim = 14;
  EXPECT_THROW(train::load_model(d / "w.bin", wider), FormatError);
  EXPECT_THROW(train::model_config(d / "w.bin", std::nullopt), IoError);
  EXPECT_THROW(train::load_model(d / "missing.bin", cfg), IoError);
  fs::remove_all(d);
}

TEST(Train, InvalidInputs) {
  auto cfg = small_config();
  EXPECT_THROW(train::train(cfg, {}), ParameterError);
  cfg.train.momentum = 1.0;
  EXPECT_THROW(train::train(cfg, small_data(1)), ParameterError);
}

TEST(Train, LossFallsOverFirstEpochs) {
  auto cfg = small_config();
  cfg.train.epochs = 5;
  cfg.train.lr = config::Config{}.train.lr;
  std::vector<train::EpochRecord> log;
  train::train(cfg, small_data(50, 3, 128), {}, &log);
  ASSERT_EQ(log.size(), 5u);
  for (std::size_t e = 1; e < log.size(); ++e) EXPECT_LT(log[e].mean_loss, log[e - 1].mean_loss) << "epoch " << e + 1;
}

TEST(Evaluate, OracleScoresPerfectly) {
  auto data = small_data(12);
  train::EvalOptions opt;
  opt.oracle = true;
  auto recs = train::evaluate(data, train::default_ids(data.size()), nullptr, opt);
  auto s = metrics::aggregate(recs);
  EXPECT_EQ(s.recall_pct, 100.0);
  EXPECT_EQ(s.mie_r, 0.0);
  for (const auto& r : recs) {
    EXPECT_TRUE(r.error.empty());
    EXPECT_EQ(r.metrics.inlier_ratio, 1.0);
  }
}

TEST(Evaluate, WeightsUntouchedAndThreadsAgree) {
  auto cfg = small_config();
  net::RgmWeights w(cfg.net, 3);
  auto digest = w.params().digest();
  auto data = small_data(5);
  auto ids = train::default_ids(data.size());
  train::EvalOptions one;
  one.threads = 1;
  train::EvalOptions many = one;
  many.threads = 3;
  auto a = train::evaluate(data, ids, &w, one);
  auto b = train::evaluate(data, ids, &w, many);
  EXPECT_EQ(w.params().digest(), digest);
  EXPECT_EQ(metrics::report_csv(a), metrics::report_csv(b));
}

TEST(Evaluate, RequiresWeightsOutsideOracleMode) {
  auto data = small_data(1);
  EXPECT_THROW(train::evaluate(data, train::default_ids(1), nullptr, {}), ParameterError);
  EXPECT_THROW(train::evaluate(data, {}, nullptr, {{}, true, 0}), ParameterError);
}

TEST(Dataset, WriteReadRoundTrip) {
  synth::ProtocolSettings s;
  s.n_points = 30;
  s.mode = synth::Mode::partial_noise;
  s.keep_fraction = synth::default_settings(s.mode).keep_fraction;
  s.seed = 4;
  fs::path d = fresh_dir("ds");
  dataset::write(d, s, {synth::Shape::torus, synth::Shape::helix}, 3);
  auto ds = dataset::read_manifest(d);
  ASSERT_EQ(ds.entries.size(), 3u);
  EXPECT_EQ(ds.entries[1].shape, synth::Shape::helix);
  auto loaded = dataset::load_all(ds);
  auto fresh = dataset::generate(s, {synth::Shape::torus, synth::Shape::helix}, 3);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(loaded[k].source.points(), fresh[k].source.points());
    EXPECT_EQ(loaded[k].target.points(), fresh[k].target.points());
    EXPECT_EQ(loaded[k].gt_correspondence.pairs(), fresh[k].gt_correspondence.pairs());
    EXPECT_EQ(loaded[k].gt_transform.to_array(), fresh[k].gt_transform.to_array());
  }
  EXPECT_THROW(dataset::read_manifest(d / "nothing"), IoError);
  io::write_atomic(d / "manifest.json", "{\"format\": \"other\"}");
  EXPECT_THROW(dataset::read_manifest(d), FormatError);
  fs::remove_all(d);
}
