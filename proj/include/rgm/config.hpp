#pragma once

// TOML experiment configuration. Every key is optional; missing keys take defaults.
//
//   [net]    k, feature_dim, mlp, graph_dim, blocks, heads, transformer_layers, ff_dim,
//            edge_mode, edge_radius, sinkhorn_iters, sinkhorn_tol, init_seed
//   [loss]   preset ("ce-object" | "focal-scene"), alpha, gamma
//   [train]  dataset, epochs, lr, momentum, checkpoint_every, seed
//   [solver] tau, estimator, iterations, ransac_iters, ransac_thresh, ransac_seed
//   [synth]  mode, pairs, points, shapes, rot_range_deg, trans_range, keep_fraction,
//            noise_sigma, noise_clip, max_corr_dist, seed

#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <toml.hpp>

#include "rgm/error.hpp"
#include "rgm/io.hpp"
#include "rgm/net.hpp"
#include "rgm/solve.hpp"
#include "rgm/synth.hpp"

namespace rgm::config {

struct LossConfig {
  std::string preset = "ce-object";
  double alpha = 0.5;
  double gamma = 0.0;
};

struct TrainSettings {
  std::string dataset;
  std::size_t epochs = 20;
  double lr = 1e-3;
  double momentum = 0.9;
  std::size_t checkpoint_every = 1;
  std::uint64_t seed = 0;
};

struct SolverConfig {
  double tau = 0.5;
  solve::Estimator estimator = solve::Estimator::svd;
  std::size_t iterations = 2;
  std::size_t ransac_iters = 1000;
  double ransac_thresh = 0.05;
  std::uint64_t ransac_seed = 0;

  solve::RegisterOptions register_options() const {
    solve::RegisterOptions o;
    o.estimator = estimator;
    o.iterations = iterations;
    o.tau = tau;
    o.ransac.iters = ransac_iters;
    o.ransac.inlier_thresh = ransac_thresh;
    o.ransac.seed = ransac_seed;
    return o;
  }
};

struct SynthConfig {
  synth::ProtocolSettings settings;
  std::size_t pairs = 100;
  std::vector<synth::Shape> shapes = synth::all_shapes();
};

struct Config {
  net::NetConfig net;
  std::uint64_t init_seed = 0;
  LossConfig loss;
  TrainSettings train;
  SolverConfig solver;
  SynthConfig synth;
};

/// Every problem found in a config, one message per key.
class ConfigError : public ParameterError {
 public:
  explicit ConfigError(std::vector<std::string> errors) : ParameterError(join(errors)), errors_(std::move(errors)) {}
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  static std::string join(const std::vector<std::string>& e) {
    std::string s = "invalid configuration:";
    for (const auto& m : e) s += "\n  " + m;
    return s;
  }
  std::vector<std::string> errors_;
};

/// Applies a loss preset; false if the name is unknown.
inline bool apply_preset(LossConfig& loss, const std::string& name) {
  if (name == "ce-object") {
    loss.alpha = 0.5;
    loss.gamma = 0.0;
  } else if (name == "focal-scene") {
    loss.alpha = 0.25;
    loss.gamma = 2.0;
  } else {
    return false;
  }
  loss.preset = name;
  return true;
}

namespace detail {

inline std::string num(double v) {
  std::string s = io::format_double(v);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

template <class T>
std::string range_msg(const std::string& key, T v, const std::string& range) {
  std::ostringstream os;
  os << key << " = " << v << ": out of range " << range;
  return os.str();
}

class Reader {
 public:
  explicit Reader(std::vector<std::string>& errors) : errors_(errors) {}

  void check_keys(const toml::table& t, const std::string& prefix, std::initializer_list<const char*> known) {
    for (auto&& [k, v] : t) {
      bool ok = false;
      for (const char* name : known) ok = ok || k.str() == name;
      if (!ok) errors_.push_back("unknown key '" + prefix + std::string(k.str()) + "'");
    }
  }

  template <class T>
  void get(const toml::table& t, const std::string& prefix, const char* key, T& out) {
    const toml::node* n = t.get(key);
    if (!n) return;
    const std::string path = prefix + key;
    if constexpr (std::is_same_v<T, double>) {
      if (auto v = n->value<double>(); v && (n->is_floating_point() || n->is_integer())) {
        out = *v;
        return;
      }
      errors_.push_back("'" + path + "' must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = n->value<std::string>()) {
        out = *v;
        return;
      }
      errors_.push_back("'" + path + "' must be a string");
    } else if constexpr (std::is_same_v<T, int>) {
      if (auto v = n->as_integer()) {
        out = static_cast<int>(v->get());
        return;
      }
      errors_.push_back("'" + path + "' must be an integer");
    } else {
      if (auto v = n->as_integer()) {
        if (v->get() < 0) {
          errors_.push_back(range_msg(path, v->get(), "[0, inf)"));
          return;
        }
        out = static_cast<T>(v->get());
        return;
      }
      errors_.push_back("'" + path + "' must be a non-negative integer");
    }
  }

  void get_sizes(const toml::table& t, const std::string& prefix, const char* key, std::vector<std::size_t>& out) {
    const toml::node* n = t.get(key);
    if (!n) return;
    const toml::array* a = n->as_array();
    std::vector<std::size_t> v;
    bool ok = a != nullptr;
    if (a)
      for (auto&& e : *a) {
        auto i = e.as_integer();
        if (!i || i->get() < 1) {
          ok = false;
          break;
        }
        v.push_back(static_cast<std::size_t>(i->get()));
      }
    if (!ok) {
      errors_.push_back("'" + prefix + key + "' must be an array of positive integers");
      return;
    }
    out = std::move(v);
  }

  void get_strings(const toml::table& t, const std::string& prefix, const char* key, std::vector<std::string>& out) {
    const toml::node* n = t.get(key);
    if (!n) return;
    const toml::array* a = n->as_array();
    std::vector<std::string> v;
    bool ok = a != nullptr;
    if (a)
      for (auto&& e : *a) {
        auto s = e.value<std::string>();
        if (!s) {
          ok = false;
          break;
        }
        v.push_back(*s);
      }
    if (!ok) {
      errors_.push_back("'" + prefix + key + "' must be an array of strings");
      return;
    }
    out = std::move(v);
  }

  const toml::table* section(const toml::table& root, const char* name) {
    const toml::node* n = root.get(name);
    if (!n) return nullptr;
    if (!n->is_table()) {
      errors_.push_back("'" + std::string(name) + "' must be a table");
      return nullptr;
    }
    return n->as_table();
  }

 private:
  std::vector<std::string>& errors_;
};

}  // namespace detail

/// Range checks; returns one message per violation naming the key and the accepted range.
inline std::vector<std::string> check(const Config& c) {
  using detail::range_msg;
  std::vector<std::string> e;
  const auto& n = c.net;
  if (n.k < 1) e.push_back(range_msg("net.k", n.k, "[1, inf)"));
  if (n.feature_dim < 1) e.push_back(range_msg("net.feature_dim", n.feature_dim, "[1, inf)"));
  if (n.graph_dim < 1) e.push_back(range_msg("net.graph_dim", n.graph_dim, "[1, inf)"));
  if (n.ff_dim < 1) e.push_back(range_msg("net.ff_dim", n.ff_dim, "[1, inf)"));
  if (n.mlp.empty()) e.push_back("net.mlp: must list at least one width");
  if (n.blocks < 1) e.push_back(range_msg("net.blocks", n.blocks, "[1, inf)"));
  if (n.heads < 1) {
    e.push_back(range_msg("net.heads", n.heads, "[1, inf)"));
  } else if (n.edge_mode == net::EdgeMode::transformer) {
    if (n.feature_dim % n.heads != 0 || (n.blocks > 1 && n.graph_dim % n.heads != 0))
      e.push_back("net.heads = " + std::to_string(n.heads) + ": must divide net.feature_dim and net.graph_dim");
    if (n.transformer_layers < 1) e.push_back(range_msg("net.transformer_layers", n.transformer_layers, "[1, inf)"));
  }
  if (!(n.edge_radius > 0.0)) e.push_back(range_msg("net.edge_radius", n.edge_radius, "(0, inf)"));
  if (n.sinkhorn_iters < 1) e.push_back(range_msg("net.sinkhorn_iters", n.sinkhorn_iters, "[1, inf)"));
  if (!(n.sinkhorn_tol >= 0.0)) e.push_back(range_msg("net.sinkhorn_tol", n.sinkhorn_tol, "[0, inf)"));

  if (!(c.loss.alpha >= 0.0 && c.loss.alpha <= 1.0)) e.push_back(range_msg("loss.alpha", c.loss.alpha, "[0, 1]"));
  if (!(c.loss.gamma >= 0.0)) e.push_back(range_msg("loss.gamma", c.loss.gamma, "[0, inf)"));

  if (c.train.epochs < 1) e.push_back(range_msg("train.epochs", c.train.epochs, "[1, inf)"));
  if (!(c.train.lr >= 0.0)) e.push_back(range_msg("train.lr", c.train.lr, "[0, inf)"));
  if (!(c.train.momentum >= 0.0 && c.train.momentum < 1.0))
    e.push_back(range_msg("train.momentum", c.train.momentum, "[0, 1)"));

  if (!(c.solver.tau >= 0.0 && c.solver.tau <= 1.0)) e.push_back(range_msg("solver.tau", c.solver.tau, "[0, 1]"));
  if (c.solver.iterations < 1) e.push_back(range_msg("solver.iterations", c.solver.iterations, "[1, inf)"));
  if (c.solver.ransac_iters < 1) e.push_back(range_msg("solver.ransac_iters", c.solver.ransac_iters, "[1, inf)"));
  if (!(c.solver.ransac_thresh > 0.0))
    e.push_back(range_msg("solver.ransac_thresh", c.solver.ransac_thresh, "(0, inf)"));

  const auto& s = c.synth.settings;
  if (c.synth.pairs < 1) e.push_back(range_msg("synth.pairs", c.synth.pairs, "[1, inf)"));
  if (s.n_points < 8) e.push_back(range_msg("synth.points", s.n_points, "[8, inf)"));
  if (c.synth.shapes.empty()) e.push_back("synth.shapes: must list at least one shape");
  if (!(s.rot_range_deg >= 0.0 && s.rot_range_deg <= 180.0))
    e.push_back(range_msg("synth.rot_range_deg", s.rot_range_deg, "[0, 180]"));
  if (!(s.trans_range >= 0.0)) e.push_back(range_msg("synth.trans_range", s.trans_range, "[0, inf)"));
  if (!(s.keep_fraction > 0.0 && s.keep_fraction <= 1.0))
    e.push_back(range_msg("synth.keep_fraction", s.keep_fraction, "(0, 1]"));
  if (!(s.noise_sigma >= 0.0)) e.push_back(range_msg("synth.noise_sigma", s.noise_sigma, "[0, inf)"));
  if (!(s.noise_clip >= 0.0)) e.push_back(range_msg("synth.noise_clip", s.noise_clip, "[0, inf)"));
  if (!(s.max_corr_dist > 0.0)) e.push_back(range_msg("synth.max_corr_dist", s.max_corr_dist, "(0, inf)"));
  return e;
}

inline void validate(const Config& c) {
  auto e = check(c);
  if (!e.empty()) throw ConfigError(std::move(e));
}

/// Parses TOML text on top of the defaults and validates the result.
inline Config parse(const std::string& text, const std::string& context = "config") {
  toml::table root;
  try {
    root = toml::parse(text, context);
  } catch (const toml::parse_error& err) {
    std::ostringstream os;
    os << context << ":" << err.source().begin.line << ":" << err.source().begin.column << ": "
       << err.description();
    throw ConfigError({os.str()});
  }
  Config c;
  std::vector<std::string> errors;
  detail::Reader rd(errors);
  rd.check_keys(root, "", {"net", "loss", "train", "solver", "synth"});

  if (auto* t = rd.section(root, "net")) {
    rd.check_keys(*t, "net.",
                  {"k", "feature_dim", "mlp", "graph_dim", "blocks", "heads", "transformer_layers", "ff_dim",
                   "edge_mode", "edge_radius", "sinkhorn_iters", "sinkhorn_tol", "init_seed"});
    rd.get(*t, "net.", "k", c.net.k);
    rd.get(*t, "net.", "feature_dim", c.net.feature_dim);
    rd.get_sizes(*t, "net.", "mlp", c.net.mlp);
    rd.get(*t, "net.", "graph_dim", c.net.graph_dim);
    rd.get(*t, "net.", "blocks", c.net.blocks);
    rd.get(*t, "net.", "heads", c.net.heads);
    rd.get(*t, "net.", "transformer_layers", c.net.transformer_layers);
    rd.get(*t, "net.", "ff_dim", c.net.ff_dim);
    std::string mode = net::to_string(c.net.edge_mode);
    rd.get(*t, "net.", "edge_mode", mode);
    try {
      c.net.edge_mode = net::edge_mode_from_string(mode);
    } catch (const ParameterError&) {
      errors.push_back("net.edge_mode = '" + mode + "': expected one of transformer, full, radius");
    }
    rd.get(*t, "net.", "edge_radius", c.net.edge_radius);
    rd.get(*t, "net.", "sinkhorn_iters", c.net.sinkhorn_iters);
    rd.get(*t, "net.", "sinkhorn_tol", c.net.sinkhorn_tol);
    rd.get(*t, "net.", "init_seed", c.init_seed);
  }

  if (auto* t = rd.section(root, "loss")) {
    rd.check_keys(*t, "loss.", {"preset", "alpha", "gamma"});
    std::string preset = c.loss.preset;
    rd.get(*t, "loss.", "preset", preset);
    if (!apply_preset(c.loss, preset))
      errors.push_back("loss.preset = '" + preset + "': expected one of ce-object, focal-scene");
    rd.get(*t, "loss.", "alpha", c.loss.alpha);
    rd.get(*t, "loss.", "gamma", c.loss.gamma);
  }

  if (auto* t = rd.section(root, "train")) {
    rd.check_keys(*t, "train.", {"dataset", "epochs", "lr", "momentum", "checkpoint_every", "seed"});
    rd.get(*t, "train.", "dataset", c.train.dataset);
    rd.get(*t, "train.", "epochs", c.train.epochs);
    rd.get(*t, "train.", "lr", c.train.lr);
    rd.get(*t, "train.", "momentum", c.train.momentum);
    rd.get(*t, "train.", "checkpoint_every", c.train.checkpoint_every);
    rd.get(*t, "train.", "seed", c.train.seed);
  }

  if (auto* t = rd.section(root, "solver")) {
    rd.check_keys(*t, "solver.", {"tau", "estimator", "iterations", "ransac_iters", "ransac_thresh", "ransac_seed"});
    rd.get(*t, "solver.", "tau", c.solver.tau);
    std::string est = solve::to_string(c.solver.estimator);
    rd.get(*t, "solver.", "estimator", est);
    try {
      c.solver.estimator = solve::estimator_from_string(est);
    } catch (const ParameterError&) {
      errors.push_back("solver.estimator = '" + est + "': expected one of svd, ransac");
    }
    rd.get(*t, "solver.", "iterations", c.solver.iterations);
    rd.get(*t, "solver.", "ransac_iters", c.solver.ransac_iters);
    rd.get(*t, "solver.", "ransac_thresh", c.solver.ransac_thresh);
    rd.get(*t, "solver.", "ransac_seed", c.solver.ransac_seed);
  }

  if (auto* t = rd.section(root, "synth")) {
    rd.check_keys(*t, "synth.",
                  {"mode", "pairs", "points", "shapes", "rot_range_deg", "trans_range", "keep_fraction", "noise_sigma",
                   "noise_clip", "max_corr_dist", "seed"});
    auto& s = c.synth.settings;
    std::string mode = synth::to_string(s.mode);
    rd.get(*t, "synth.", "mode", mode);
    try {
      s.mode = synth::mode_from_string(mode);
    } catch (const ParameterError&) {
      errors.push_back("synth.mode = '" + mode + "': expected one of clean, noise, partial, partial_noise");
    }
    rd.get(*t, "synth.", "pairs", c.synth.pairs);
    rd.get(*t, "synth.", "points", s.n_points);
    std::vector<std::string> names;
    rd.get_strings(*t, "synth.", "shapes", names);
    if (t->get("shapes")) {
      c.synth.shapes.clear();
      for (const auto& nme : names) {
        try {
          c.synth.shapes.push_back(synth::shape_from_string(nme));
        } catch (const ParameterError&) {
          errors.push_back("synth.shapes: unknown shape '" + nme + "'");
        }
      }
    }
    rd.get(*t, "synth.", "rot_range_deg", s.rot_range_deg);
    rd.get(*t, "synth.", "trans_range", s.trans_range);
    rd.get(*t, "synth.", "keep_fraction", s.keep_fraction);
    rd.get(*t, "synth.", "noise_sigma", s.noise_sigma);
    rd.get(*t, "synth.", "noise_clip", s.noise_clip);
    rd.get(*t, "synth.", "max_corr_dist", s.max_corr_dist);
    rd.get(*t, "synth.", "seed", s.seed);
  }

  auto range = check(c);
  errors.insert(errors.end(), range.begin(), range.end());
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return c;
}

inline Config load(const std::filesystem::path& path) { return parse(io::read_text(path), path.string()); }

/// Effective configuration as TOML; parse(to_toml(c)) reproduces c.
inline std::string to_toml(const Config& c) {
  using detail::num;
  std::ostringstream o;
  const auto& n = c.net;
  o << "[net]\n";
  o << "k = " << n.k << "\n";
  o << "feature_dim = " << n.feature_dim << "\n";
  o << "mlp = [";
  for (std::size_t i = 0; i < n.mlp.size(); ++i) o << (i ? ", " : "") << n.mlp[i];
  o << "]\n";
  o << "graph_dim = " << n.graph_dim << "\n";
  o << "blocks = " << n.blocks << "\n";
  o << "heads = " << n.heads << "\n";
  o << "transformer_layers = " << n.transformer_layers << "\n";
  o << "ff_dim = " << n.ff_dim << "\n";
  o << "edge_mode = \"" << net::to_string(n.edge_mode) << "\"\n";
  o << "edge_radius = " << num(n.edge_radius) << "\n";
  o << "sinkhorn_iters = " << n.sinkhorn_iters << "\n";
  o << "sinkhorn_tol = " << num(n.sinkhorn_tol) << "\n";
  o << "init_seed = " << c.init_seed << "\n\n";

  o << "[loss]\n";
  o << "preset = \"" << c.loss.preset << "\"\n";
  o << "alpha = " << num(c.loss.alpha) << "\n";
  o << "gamma = " << num(c.loss.gamma) << "\n\n";

  o << "[train]\n";
  o << "dataset = " << toml::value<std::string>(c.train.dataset) << "\n";
  o << "epochs = " << c.train.epochs << "\n";
  o << "lr = " << num(c.train.lr) << "\n";
  o << "momentum = " << num(c.train.momentum) << "\n";
  o << "checkpoint_every = " << c.train.checkpoint_every << "\n";
  o << "seed = " << c.train.seed << "\n\n";

  o << "[solver]\n";
  o << "tau = " << num(c.solver.tau) << "\n";
  o << "estimator = \"" << solve::to_string(c.solver.estimator) << "\"\n";
  o << "iterations = " << c.solver.iterations << "\n";
  o << "ransac_iters = " << c.solver.ransac_iters << "\n";
  o << "ransac_thresh = " << num(c.solver.ransac_thresh) << "\n";
  o << "ransac_seed = " << c.solver.ransac_seed << "\n\n";

  const auto& s = c.synth.settings;
  o << "[synth]\n";
  o << "mode = \"" << synth::to_string(s.mode) << "\"\n";
  o << "pairs = " << c.synth.pairs << "\n";
  o << "points = " << s.n_points << "\n";
  o << "shapes = [";
  for (std::size_t i = 0; i < c.synth.shapes.size(); ++i)
    o << (i ? ", " : "") << "\"" << synth::to_string(c.synth.shapes[i]) << "\"";
  o << "]\n";
  o << "rot_range_deg = " << num(s.rot_range_deg) << "\n";
  o << "trans_range = " << num(s.trans_range) << "\n";
  o << "keep_fraction = " << num(s.keep_fraction) << "\n";
  o << "noise_sigma = " << num(s.noise_sigma) << "\n";
  o << "noise_clip = " << num(s.noise_clip) << "\n";
  o << "max_corr_dist = " << num(s.max_corr_dist) << "\n";
  o << "seed = " << s.seed << "\n";
  return o.str();
}

}  // namespace rgm::config
