#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rgm/config.hpp"
#include "rgm/dataset.hpp"
#include "rgm/metrics.hpp"
#include "rgm/net.hpp"
#include "rgm/solve.hpp"
#include "rgm/weights.hpp"

namespace rgm::train {

namespace fs = std::filesystem;
using nlohmann::json;

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0;
  double wall_time = 0;  // seconds, only filled when timing is requested
};

struct TrainOptions {
  std::optional<fs::path> out_dir;  // weights, model.toml, log and checkpoints go here
  bool timing = false;              // include wall_time in the log (makes it run-dependent)
  std::function<void(const EpochRecord&)> on_epoch;
};

inline std::string log_line(const EpochRecord& r, bool timing) {
  json j = {{"epoch", r.epoch}, {"mean_loss", r.mean_loss}};
  if (timing) j["wall_time"] = r.wall_time;
  return j.dump() + "\n";
}

inline std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return solve::splitmix64(seed ^ solve::splitmix64(0x5eedull + epoch));
}

/// Loss of one sample under the current weights, recorded on `tape`.
inline diff::Var sample_loss(diff::Tape& tape, net::RgmWeights& w, const synth::RegistrationSample& s,
                             const config::LossConfig& loss) {
  net::Bound p(tape, w.params(), true);
  auto out = net::rgm_forward(p, w, s.source, s.target);
  return net::focal_loss(out.soft, s.gt_correspondence.dense(), loss.alpha, loss.gamma);
}

inline void save_model(const fs::path& weights_path, const net::RgmWeights& w, const config::Config& cfg) {
  diff::save_weights(weights_path, w.params());
  io::write_atomic(weights_path.parent_path() / "model.toml", config::to_toml(cfg));
}

/// One SGD step per sample, samples visited in a seeded order each epoch.
inline net::RgmWeights train(const config::Config& cfg, const std::vector<synth::RegistrationSample>& data,
                             const TrainOptions& opt = {}, std::vector<EpochRecord>* log_out = nullptr) {
  config::validate(cfg);
  if (data.empty()) throw ParameterError("train: dataset is empty");
  net::RgmWeights w(cfg.net, cfg.init_seed);
  diff::Sgd sgd(cfg.train.lr, cfg.train.momentum);
  auto params = w.params().pointers();

  std::string log_text;
  if (opt.out_dir) fs::create_directories(*opt.out_dir);
  std::vector<std::size_t> order(data.size());
  for (std::size_t e = 1; e <= cfg.train.epochs; ++e) {
    auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    Rng rng(epoch_seed(cfg.train.seed, e));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t idx : order) {
      diff::Tape tape;
      diff::Var loss = sample_loss(tape, w, data[idx], cfg.loss);
      double value = loss.value()(0, 0);
      if (!std::isfinite(value)) {
        std::string msg = "non-finite loss at epoch " + std::to_string(e) + ", sample " + std::to_string(idx);
        if (opt.out_dir) {
          json dump = {{"epoch", e},
                       {"sample", idx},
                       {"loss", std::isnan(value) ? "nan" : (value > 0 ? "inf" : "-inf")},
                       {"weights_digest", w.params().digest()},
                       {"lr", cfg.train.lr},
                       {"momentum", cfg.train.momentum}};
          io::write_atomic(*opt.out_dir / "diagnostic.json", dump.dump(2) + "\n");
          diff::save_weights(*opt.out_dir / "diagnostic_weights.bin", w.params());
          msg += " (diagnostics written to " + (*opt.out_dir / "diagnostic.json").string() + ")";
        }
        throw NumericError(msg);
      }
      tape.backward(loss);
      sgd.step(params);
      total += value;
    }
    EpochRecord rec;
    rec.epoch = e;
    rec.mean_loss = total / static_cast<double>(data.size());
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log_out) log_out->push_back(rec);
    if (opt.on_epoch) opt.on_epoch(rec);
    if (opt.out_dir) {
      log_text += log_line(rec, opt.timing);
      io::write_atomic(*opt.out_dir / "train_log.jsonl", log_text);
      if (cfg.train.checkpoint_every > 0 && e % cfg.train.checkpoint_every == 0 && e != cfg.train.epochs) {
        std::string name = std::to_string(e);
        name = std::string(name.size() < 4 ? 4 - name.size() : 0, '0') + name;
        fs::create_directories(*opt.out_dir / "checkpoints");
        diff::save_weights(*opt.out_dir / "checkpoints" / ("epoch_" + name + ".bin"), w.params());
      }
    }
  }
  if (opt.out_dir) save_model(*opt.out_dir / "weights.bin", w, cfg);
  return w;
}

/// Model config from an explicit file, or model.toml beside the weights.
inline config::Config model_config(const fs::path& weights_path, const std::optional<fs::path>& config_path) {
  if (config_path) return config::load(*config_path);
  fs::path beside = weights_path.parent_path() / "model.toml";
  if (!fs::exists(beside))
    throw IoError(weights_path.string() + ": no model.toml beside the weights; pass --config");
  return config::load(beside);
}

inline net::RgmWeights load_model(const fs::path& weights_path, const config::Config& cfg) {
  net::RgmWeights w(cfg.net, cfg.init_seed);
  diff::load_weights_into(weights_path, w.params());
  return w;
}

inline void checkpoint_roundtrip(const net::RgmWeights& in, const fs::path& path, net::RgmWeights& out) {
  diff::save_weights(path, in.params());
  diff::load_weights_into(path, out.params());
}

struct EvalOptions {
  solve::RegisterOptions reg;
  bool oracle = false;  // score ground truth directly, bypassing the network
  std::size_t threads = 0;  // 0: hardware concurrency
};

inline metrics::SampleRecord evaluate_one(const synth::RegistrationSample& s, const std::string& id,
                                          const net::RgmWeights* w, const EvalOptions& opt) {
  metrics::SampleRecord r;
  r.id = id;
  try {
    if (opt.oracle) {
      r.metrics = metrics::evaluate_sample(s.gt_transform, s.gt_transform, s.source, s.target, s.gt_correspondence,
                                           s.gt_correspondence);
      r.correspondences = s.gt_correspondence.size();
      return r;
    }
    auto res = solve::register_clouds(s.source, s.target, *w, opt.reg);
    r.metrics = metrics::evaluate_sample(res.transform, s.gt_transform, s.source, s.target, s.gt_correspondence,
                                         res.correspondences.matches);
    r.correspondences = res.correspondences.matches.size();
    r.iterations_run = res.iterations_run;
    r.degraded = res.degraded;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  return r;
}

/// Registers and scores every sample; per-sample failures are recorded, not thrown.
/// Samples are split across threads, results keep dataset order.
inline std::vector<metrics::SampleRecord> evaluate(const std::vector<synth::RegistrationSample>& data,
                                                   const std::vector<std::string>& ids, const net::RgmWeights* w,
                                                   const EvalOptions& opt) {
  if (!opt.oracle && !w) throw ParameterError("evaluate: weights required unless in oracle mode");
  if (ids.size() != data.size()) throw ParameterError("evaluate: ids and samples differ in length");
  std::vector<metrics::SampleRecord> out(data.size());
  std::size_t threads = opt.threads ? opt.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, data.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < data.size(); ++i) out[i] = evaluate_one(data[i], ids[i], w, opt);
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < data.size(); i += threads) out[i] = evaluate_one(data[i], ids[i], w, opt);
    });
  for (auto& th : pool) th.join();
  return out;
}

inline std::vector<std::string> default_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(dataset::sample_id(i));
  return ids;
}

}  // namespace rgm::train
