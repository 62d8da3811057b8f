// rgm: synthesize registration problems, train the correspondence network, register,
// evaluate and export plot data.

#include <cstdlib>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "rgm/config.hpp"
#include "rgm/dataset.hpp"
#include "rgm/io.hpp"
#include "rgm/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rgm;

namespace {

enum class Level { quiet = 0, info = 1, debug = 2 };

Level log_level() {
  const char* v = std::getenv("RGM_LOG");
  if (!v) return Level::info;
  std::string s(v);
  if (s == "quiet" || s == "0") return Level::quiet;
  if (s == "debug" || s == "2") return Level::debug;
  return Level::info;
}

void log(Level lvl, const std::string& msg) {
  if (static_cast<int>(lvl) <= static_cast<int>(log_level())) std::cerr << msg << "\n";
}

constexpr int kExitUsage = 2, kExitIo = 3, kExitNumeric = 4;

std::uint64_t checked_seed(std::uint64_t s) {
  if (s > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()))
    throw ParameterError("--seed must be at most 9223372036854775807");
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string matrix_csv(const Eigen::MatrixXd& m) {
  std::string s;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) s += (j ? "," : "") + io::format_double(m(i, j));
    s += "\n";
  }
  return s;
}

json transform_json(const RigidTransform& T) {
  auto a = T.to_array();
  return json(std::vector<double>(a.begin(), a.end()));
}

// Options shared by the subcommands that read a model or a config.
struct Common {
  std::optional<std::string> config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c, bool out_required = true) {
  sub->add_option("--config", c.config, "TOML config; flags given on the command line take precedence")
      ;
  auto* o = sub->add_option("--out", c.out, "output directory");
  if (out_required) o->required();
  sub->add_option("--seed", c.seed, "random seed");
}

config::Config base_config(const Common& c) {
  return c.config ? config::load(*c.config) : config::Config{};
}

void echo_config(const config::Config& cfg) { log(Level::info, "effective config:\n" + config::to_toml(cfg)); }

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  Common common;
  std::optional<std::string> mode, shapes;
  std::optional<std::size_t> pairs, points;
  std::optional<double> rot_range, trans_range, keep, noise_sigma, noise_clip, max_corr_dist;
};

void setup_synth(CLI::App& app, SynthArgs& a) {
  auto* s = app.add_subcommand("synth", "write a synthetic dataset and its manifest");
  add_common(s, a.common);
  s->add_option("--mode", a.mode, "clean | noise | partial | partial_noise");
  s->add_option("--pairs", a.pairs, "number of samples");
  s->add_option("--points", a.points, "points per base cloud");
  s->add_option("--shapes", a.shapes, "comma-separated shape list");
  s->add_option("--rot-range", a.rot_range, "rotation range in degrees per axis");
  s->add_option("--trans-range", a.trans_range, "translation range per axis");
  s->add_option("--keep", a.keep, "kept fraction in partial modes");
  s->add_option("--noise-sigma", a.noise_sigma, "noise standard deviation");
  s->add_option("--noise-clip", a.noise_clip, "noise clip");
  s->add_option("--max-corr-dist", a.max_corr_dist, "distance limit for rebuilt correspondences");
}

int run_synth(const SynthArgs& a) {
  config::Config cfg = base_config(a.common);
  auto& s = cfg.synth.settings;
  if (a.mode) {
    s.mode = synth::mode_from_string(*a.mode);
    s.keep_fraction = synth::default_settings(s.mode).keep_fraction;
  }
  if (a.pairs) cfg.synth.pairs = *a.pairs;
  if (a.points) s.n_points = *a.points;
  if (a.shapes) {
    cfg.synth.shapes.clear();
    for (const auto& n : split_list(*a.shapes)) cfg.synth.shapes.push_back(synth::shape_from_string(n));
  }
  if (a.rot_range) s.rot_range_deg = *a.rot_range;
  if (a.trans_range) s.trans_range = *a.trans_range;
  if (a.keep) s.keep_fraction = *a.keep;
  if (a.noise_sigma) s.noise_sigma = *a.noise_sigma;
  if (a.noise_clip) s.noise_clip = *a.noise_clip;
  if (a.max_corr_dist) s.max_corr_dist = *a.max_corr_dist;
  if (a.common.seed) s.seed = checked_seed(*a.common.seed);
  config::validate(cfg);
  echo_config(cfg);
  fs::path manifest = dataset::write(a.common.out, s, cfg.synth.shapes, cfg.synth.pairs);
  log(Level::info, "wrote " + std::to_string(cfg.synth.pairs) + " samples, manifest " + manifest.string());
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  Common common;
  std::optional<std::string> data, preset, edge_mode, mlp;
  std::optional<std::size_t> epochs, checkpoint_every, feature_dim, graph_dim, ff_dim, k, blocks, heads;
  std::optional<double> lr, momentum, alpha, gamma;
  std::optional<std::uint64_t> init_seed;
  bool timing = false;
};

void setup_train(CLI::App& app, TrainArgs& a) {
  auto* t = app.add_subcommand("train", "train the network on a dataset");
  add_common(t, a.common);
  t->add_option("--data", a.data, "dataset manifest or directory");
  t->add_option("--epochs", a.epochs, "number of epochs");
  t->add_option("--lr", a.lr, "learning rate");
  t->add_option("--momentum", a.momentum, "SGD momentum");
  t->add_option("--preset", a.preset, "loss preset: ce-object | focal-scene");
  t->add_option("--alpha", a.alpha, "focal loss alpha");
  t->add_option("--gamma", a.gamma, "focal loss gamma");
  t->add_option("--checkpoint-every", a.checkpoint_every, "epochs between checkpoints (0: none)");
  t->add_option("--init-seed", a.init_seed, "weight initialisation seed (defaults to --seed)");
  t->add_option("--feature-dim", a.feature_dim, "local feature width V");
  t->add_option("--graph-dim", a.graph_dim, "graph feature width Q");
  t->add_option("--ff-dim", a.ff_dim, "transformer feed-forward width");
  t->add_option("--mlp", a.mlp, "comma-separated per-neighbour MLP widths");
  t->add_option("--k", a.k, "neighbourhood size");
  t->add_option("--blocks", a.blocks, "number of graph blocks");
  t->add_option("--heads", a.heads, "attention heads");
  t->add_option("--edge-mode", a.edge_mode, "transformer | full | radius");
  t->add_flag("--timing", a.timing, "record wall time per epoch in the log");
}

int run_train(const TrainArgs& a) {
  config::Config cfg = base_config(a.common);
  if (a.data) cfg.train.dataset = *a.data;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.lr) cfg.train.lr = *a.lr;
  if (a.momentum) cfg.train.momentum = *a.momentum;
  if (a.preset && !config::apply_preset(cfg.loss, *a.preset)) throw ParameterError("unknown loss preset '" + *a.preset + "'");
  if (a.alpha) cfg.loss.alpha = *a.alpha;
  if (a.gamma) cfg.loss.gamma = *a.gamma;
  if (a.checkpoint_every) cfg.train.checkpoint_every = *a.checkpoint_every;
  if (a.common.seed) {
    cfg.train.seed = checked_seed(*a.common.seed);
    cfg.init_seed = cfg.train.seed;
  }
  if (a.init_seed) cfg.init_seed = checked_seed(*a.init_seed);
  if (a.feature_dim) cfg.net.feature_dim = *a.feature_dim;
  if (a.graph_dim) cfg.net.graph_dim = *a.graph_dim;
  if (a.ff_dim) cfg.net.ff_dim = *a.ff_dim;
  if (a.mlp) {
    cfg.net.mlp.clear();
    for (const auto& w : split_list(*a.mlp)) cfg.net.mlp.push_back(static_cast<std::size_t>(std::stoul(w)));
  }
  if (a.k) cfg.net.k = *a.k;
  if (a.blocks) cfg.net.blocks = *a.blocks;
  if (a.heads) cfg.net.heads = *a.heads;
  if (a.edge_mode) cfg.net.edge_mode = net::edge_mode_from_string(*a.edge_mode);
  if (cfg.train.dataset.empty()) throw ParameterError("train: no dataset (pass --data or set train.dataset)");
  config::validate(cfg);
  echo_config(cfg);

  auto ds = dataset::read_manifest(cfg.train.dataset);
  auto data = dataset::load_all(ds);
  log(Level::info, "training on " + std::to_string(data.size()) + " samples");
  train::TrainOptions opt;
  opt.out_dir = fs::path(a.common.out);
  opt.timing = a.timing;
  opt.on_epoch = [](const train::EpochRecord& r) {
    log(Level::info, "epoch " + std::to_string(r.epoch) + " mean_loss " + io::format_double(r.mean_loss));
  };
  train::train(cfg, data, opt);
  log(Level::info, "wrote " + (fs::path(a.common.out) / "weights.bin").string());
  return 0;
}

// ---------------------------------------------------------------------------
// register / eval / export share the solver overrides

struct SolverArgs {
  std::string weights;
  std::optional<std::string> estimator;
  std::optional<std::size_t> iters, ransac_iters;
  std::optional<double> tau, ransac_thresh;
};

void add_solver(CLI::App* sub, SolverArgs& s, bool weights_required = true) {
  auto* w = sub->add_option("--weights", s.weights, "trained weights (model.toml beside it is read unless --config)");
  if (weights_required) w->required();
  sub->add_option("--estimator", s.estimator, "svd | ransac");
  sub->add_option("--iters", s.iters, "registration iterations");
  sub->add_option("--tau", s.tau, "row/column mass threshold for hard matches");
  sub->add_option("--ransac-iters", s.ransac_iters, "RANSAC hypotheses");
  sub->add_option("--ransac-thresh", s.ransac_thresh, "RANSAC inlier distance");
}

config::Config model_config(const Common& c, const SolverArgs& s) {
  config::Config cfg =
      train::model_config(s.weights, c.config ? std::optional<fs::path>(*c.config) : std::nullopt);
  if (s.estimator) cfg.solver.estimator = solve::estimator_from_string(*s.estimator);
  if (s.iters) cfg.solver.iterations = *s.iters;
  if (s.tau) cfg.solver.tau = *s.tau;
  if (s.ransac_iters) cfg.solver.ransac_iters = *s.ransac_iters;
  if (s.ransac_thresh) cfg.solver.ransac_thresh = *s.ransac_thresh;
  if (c.seed) cfg.solver.ransac_seed = checked_seed(*c.seed);
  config::validate(cfg);
  return cfg;
}

struct RegisterArgs {
  Common common;
  SolverArgs solver;
  std::string src, dst;
};

void setup_register(CLI::App& app, RegisterArgs& a) {
  auto* r = app.add_subcommand("register", "align one source cloud to a target cloud");
  add_common(r, a.common);
  add_solver(r, a.solver);
  r->add_option("--src", a.src, "source cloud (.ply or .xyz)")->required();
  r->add_option("--dst", a.dst, "target cloud (.ply or .xyz)")->required();
}

int run_register(const RegisterArgs& a) {
  config::Config cfg = model_config(a.common, a.solver);
  echo_config(cfg);
  net::RgmWeights w = train::load_model(a.solver.weights, cfg);
  PointCloud X = io::read_cloud(a.src), Y = io::read_cloud(a.dst);
  auto opt = cfg.solver.register_options();
  solve::RegistrationResult res = solve::register_clouds(X, Y, w, opt);
  if (res.degraded) log(Level::info, "warning: " + res.message);

  json per = json::array();
  for (const auto& T : res.per_iteration) per.push_back(transform_json(T));
  json out = {{"transform", transform_json(res.transform)},
              {"per_iteration", per},
              {"iterations_run", res.iterations_run},
              {"correspondences", res.correspondences.matches.size()},
              {"estimator", solve::to_string(opt.estimator)},
              {"seed", opt.ransac.seed},
              {"tau", opt.tau},
              {"degraded", res.degraded},
              {"message", res.message}};
  std::string ply = io::ply_string(apply_transform(res.transform, X));
  fs::path dir = a.common.out;
  fs::create_directories(dir);
  io::write_atomic(dir / "result.json", out.dump(2) + "\n");
  io::write_atomic(dir / "transformed.ply", ply);
  log(Level::info, "wrote " + (dir / "result.json").string());
  return 0;
}

struct EvalArgs {
  Common common;
  SolverArgs solver;
  std::string data;
  bool oracle = false;
  std::size_t threads = 0;
};

void setup_eval(CLI::App& app, EvalArgs& a) {
  auto* e = app.add_subcommand("eval", "register every sample of a dataset and write the metric report");
  add_common(e, a.common);
  add_solver(e, a.solver, false);
  e->add_option("--data", a.data, "dataset manifest or directory")->required();
  e->add_flag("--oracle", a.oracle, "score ground-truth transforms and correspondences directly");
  e->add_option("--threads", a.threads, "worker threads (0: all cores)");
}

int run_eval(const EvalArgs& a) {
  auto ds = dataset::read_manifest(a.data);
  auto data = dataset::load_all(ds);
  std::vector<std::string> ids;
  for (const auto& e : ds.entries) ids.push_back(e.id);
  train::EvalOptions opt;
  opt.oracle = a.oracle;
  opt.threads = a.threads;
  std::optional<net::RgmWeights> w;
  json context = {{"dataset", a.data}, {"oracle", a.oracle}};
  if (!a.oracle) {
    if (a.solver.weights.empty()) throw ParameterError("eval: --weights is required unless --oracle");
    config::Config cfg = model_config(a.common, a.solver);
    echo_config(cfg);
    w.emplace(train::load_model(a.solver.weights, cfg));
    opt.reg = cfg.solver.register_options();
    context["weights"] = a.solver.weights;
    context["estimator"] = solve::to_string(opt.reg.estimator);
    context["iterations"] = opt.reg.iterations;
    context["tau"] = opt.reg.tau;
    context["seed"] = opt.reg.ransac.seed;
  }
  auto records = train::evaluate(data, ids, w ? &*w : nullptr, opt);
  json report = metrics::report_json(records, context);
  fs::path dir = a.common.out;
  fs::create_directories(dir);
  io::write_atomic(dir / "report.json", report.dump(2) + "\n");
  io::write_atomic(dir / "report.csv", metrics::report_csv(records));
  const auto& s = report["summary"];
  log(Level::info, "recall " + s["recall_pct"].dump() + "%  mie_r " + s["mie_r"].dump() + "  failed " +
                       s["failed"].dump());
  return 0;
}

struct ExportArgs {
  Common common;
  SolverArgs solver;
  std::optional<std::string> src, dst, data, sample;
};

void setup_export(CLI::App& app, ExportArgs& a) {
  auto* x = app.add_subcommand("export", "write correspondences and soft-edge matrices for plotting");
  add_common(x, a.common);
  add_solver(x, a.solver);
  x->add_option("--src", a.src, "source cloud");
  x->add_option("--dst", a.dst, "target cloud");
  x->add_option("--data", a.data, "dataset manifest or directory (with --sample)");
  x->add_option("--sample", a.sample, "sample id within --data");
}

int run_export(const ExportArgs& a) {
  auto [X, Y] = [&]() -> std::pair<PointCloud, PointCloud> {
    if (a.data) {
      if (!a.sample) throw ParameterError("export: --data needs --sample");
      auto ds = dataset::read_manifest(*a.data);
      auto it = std::find_if(ds.entries.begin(), ds.entries.end(), [&](const auto& e) { return e.id == *a.sample; });
      if (it == ds.entries.end()) throw ParameterError("export: no sample '" + *a.sample + "' in " + *a.data);
      auto smp = dataset::load_sample(ds, *it);
      return {smp.source, smp.target};
    }
    if (a.src && a.dst) return {io::read_cloud(*a.src), io::read_cloud(*a.dst)};
    throw ParameterError("export: pass --src and --dst, or --data and --sample");
  }();
  config::Config cfg = model_config(a.common, a.solver);
  net::RgmWeights w = train::load_model(a.solver.weights, cfg);
  diff::Tape tape;
  net::Bound p(tape, w.params());
  auto fwd = net::rgm_forward(p, w, X, Y);
  Eigen::MatrixXd soft = fwd.soft.value();
  auto hard = solve::soft_to_hard(soft, X.size(), Y.size(), cfg.solver.tau);

  std::string corr = "i,j,score\n";
  const auto& pairs = hard.matches.pairs();
  for (std::size_t k = 0; k < pairs.size(); ++k)
    corr += std::to_string(pairs[k].first) + "," + std::to_string(pairs[k].second) + "," +
            io::format_double(hard.scores[k]) + "\n";
  fs::path dir = a.common.out;
  fs::create_directories(dir);
  io::write_atomic(dir / "correspondences.csv", corr);
  io::write_atomic(dir / "soft_correspondence.csv", matrix_csv(soft));
  for (std::size_t b = 0; b < fwd.edges_x.size(); ++b) {
    io::write_atomic(dir / ("edges_src_block" + std::to_string(b) + ".csv"), matrix_csv(fwd.edges_x[b].value()));
    io::write_atomic(dir / ("edges_dst_block" + std::to_string(b) + ".csv"), matrix_csv(fwd.edges_y[b].value()));
  }
  log(Level::info, "wrote " + std::to_string(pairs.size()) + " correspondences to " + dir.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rgm: deep graph matching point cloud registration"};
  app.require_subcommand(1, 1);
  SynthArgs synth_args;
  TrainArgs train_args;
  RegisterArgs register_args;
  EvalArgs eval_args;
  ExportArgs export_args;
  setup_synth(app, synth_args);
  setup_train(app, train_args);
  setup_register(app, register_args);
  setup_eval(app, eval_args);
  setup_export(app, export_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "synth") return run_synth(synth_args);
    if (name == "train") return run_train(train_args);
    if (name == "register") return run_register(register_args);
    if (name == "eval") return run_eval(eval_args);
    return run_export(export_args);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ParameterError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DegenerateError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
