#pragma once

// Correspondence network: shared local feature extractor, transformer edge generator,
// L blocks of {soft edges -> intra-graph conv -> affinity / instance norm / Sinkhorn ->
// cross-graph conv}, and the focal correspondence loss.

#include <cmath>
#include <cstdint>
#include <random>
#include <tuple>
#include <string>
#include <vector>

#include "rgm/diff.hpp"
#include "rgm/error.hpp"
#include "rgm/geom.hpp"
#include "rgm/weights.hpp"

namespace rgm::net {

using diff::Index;
using diff::Matrix;
using diff::Tape;
using diff::Var;

enum class EdgeMode { transformer, full, radius };

inline std::string to_string(EdgeMode m) {
  switch (m) {
    case EdgeMode::transformer: return "transformer";
    case EdgeMode::full: return "full";
    case EdgeMode::radius: return "radius";
  }
  return "?";
}

inline EdgeMode edge_mode_from_string(const std::string& s) {
  for (EdgeMode m : {EdgeMode::transformer, EdgeMode::full, EdgeMode::radius})
    if (to_string(m) == s) return m;
  throw ParameterError("unknown edge mode '" + s + "'");
}

struct NetConfig {
  std::size_t k = 20;                        // neighbourhood size of the local descriptor
  std::size_t feature_dim = 1024;            // V
  std::vector<std::size_t> mlp = {64, 128, 256};
  std::size_t graph_dim = 1024;              // Q, width of intra/cross graph features
  std::size_t blocks = 2;                    // L
  std::size_t heads = 4;
  std::size_t transformer_layers = 1;
  std::size_t ff_dim = 1024;
  EdgeMode edge_mode = EdgeMode::transformer;
  double edge_radius = 0.2;
  int sinkhorn_iters = 20;
  double sinkhorn_tol = 1e-9;

  std::size_t block_input_dim(std::size_t b) const { return b == 0 ? feature_dim : graph_dim; }

  void validate() const {
    if (k < 1) throw ParameterError("net.k must be >= 1");
    if (feature_dim < 1 || graph_dim < 1 || ff_dim < 1) throw ParameterError("net widths must be >= 1");
    if (mlp.empty()) throw ParameterError("net.mlp must list at least one width");
    for (std::size_t w : mlp)
      if (w < 1) throw ParameterError("net.mlp widths must be >= 1");
    if (blocks < 1) throw ParameterError("net.blocks must be >= 1");
    if (heads < 1) throw ParameterError("net.heads must be >= 1");
    if (edge_mode == EdgeMode::transformer) {
      if (transformer_layers < 1) throw ParameterError("net.transformer_layers must be >= 1");
      for (std::size_t b = 0; b < blocks; ++b)
        if (block_input_dim(b) % heads != 0) throw ParameterError("net.heads must divide the transformer width");
    }
    if (!(edge_radius > 0.0)) throw ParameterError("net.edge_radius must be > 0");
    if (sinkhorn_iters < 1) throw ParameterError("net.sinkhorn_iters must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Parameter binding

/// Parameters of a ParameterSet bound as leaves of one tape: gradient leaves when
/// training, constants otherwise.
class Bound {
 public:
  Bound(Tape& tape, diff::ParameterSet& params, bool train) : tape_(tape) {
    vars_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      vars_.push_back(train ? tape.param(params[i]) : tape.constant(params[i].value));
  }
  Bound(Tape& tape, const diff::ParameterSet& params) : tape_(tape) {
    vars_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) vars_.push_back(tape.constant(params[i].value));
  }
  Var operator[](std::size_t i) const { return vars_[i]; }
  Tape& tape() const { return tape_; }

 private:
  Tape& tape_;
  std::vector<Var> vars_;
};

struct Linear {
  std::size_t w = 0, b = 0;
  Var operator()(const Bound& p, const Var& x) const { return diff::add_row(diff::matmul(x, p[w]), p[b]); }
};

struct LayerNorm {
  std::size_t gain = 0, bias = 0;
  Var operator()(const Bound& p, const Var& x) const { return diff::layer_norm(x, p[gain], p[bias]); }
};

struct Attention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  /// Multi-head scaled dot-product attention: rows of `query_src` attend over rows of `kv_src`.
  Var operator()(const Bound& p, const Var& query_src, const Var& kv_src) const {
    Var Q = q(p, query_src), K = k(p, kv_src), V = v(p, kv_src);
    Index width = Q.cols();
    Index dh = width / static_cast<Index>(heads);
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> outs;
    for (std::size_t h = 0; h < heads; ++h) {
      Index off = static_cast<Index>(h) * dh;
      Var qh = diff::slice_cols(Q, off, dh), kh = diff::slice_cols(K, off, dh), vh = diff::slice_cols(V, off, dh);
      Var att = diff::softmax_rows(diff::scale(diff::matmul_nt(qh, kh), scale));
      outs.push_back(diff::matmul(att, vh));
    }
    return o(p, heads == 1 ? outs.front() : diff::concat_cols(outs));
  }
};

struct FeedForward {
  Linear l1, l2;
  Var operator()(const Bound& p, const Var& x) const { return l2(p, diff::relu(l1(p, x))); }
};

/// Encoder (self-attention + MLP) then decoder (co-attention + MLP), pre-norm residual.
struct TransformerLayer {
  LayerNorm ln_self, ln_enc_ff, ln_cross, ln_dec_ff;
  Attention self_attn, cross_attn;
  FeedForward enc_ff, dec_ff;

  Var encode(const Bound& p, const Var& x) const {
    Var n = ln_self(p, x);
    Var h = diff::add(x, self_attn(p, n, n));
    return diff::add(h, enc_ff(p, ln_enc_ff(p, h)));
  }
  Var decode(const Bound& p, const Var& x, const Var& other) const {
    Var h = diff::add(x, cross_attn(p, ln_cross(p, x), ln_cross(p, other)));
    return diff::add(h, dec_ff(p, ln_dec_ff(p, h)));
  }
};

/// Stacked layers with a final LayerNorm applied to both embeddings.
struct Transformer {
  std::vector<TransformerLayer> layers;
  LayerNorm out;
};

struct FTheta {
  std::vector<Linear> mlp;
  Linear proj;
};

struct Block {
  Transformer transformer;
  Linear f_adj, f_self;
  std::size_t affinity = 0;         // Q x Q
  std::size_t norm_scale = 0, norm_shift = 0;
  Linear f_cross;
};

// ---------------------------------------------------------------------------
// Weights

namespace detail {

inline Matrix uniform_matrix(Index rows, Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = (2.0 * uniform01(rng) - 1.0) * bound;
  return m;
}

// fan-in scaling: sqrt(6 / fan_in) in front of ReLU, sqrt(3 / fan_in) otherwise
inline Linear make_linear(diff::ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, bool relu_after,
                          Rng& rng) {
  double bound = std::sqrt((relu_after ? 6.0 : 3.0) / static_cast<double>(in));
  Linear l;
  l.w = ps.add(name + ".w", uniform_matrix(static_cast<Index>(in), static_cast<Index>(out), bound, rng));
  l.b = ps.add(name + ".b", Matrix::Zero(1, static_cast<Index>(out)));
  return l;
}

inline LayerNorm make_layer_norm(diff::ParameterSet& ps, const std::string& name, std::size_t dim) {
  LayerNorm l;
  l.gain = ps.add(name + ".gain", Matrix::Ones(1, static_cast<Index>(dim)));
  l.bias = ps.add(name + ".bias", Matrix::Zero(1, static_cast<Index>(dim)));
  return l;
}

inline Attention make_attention(diff::ParameterSet& ps, const std::string& name, std::size_t dim, std::size_t heads,
                                Rng& rng) {
  Attention a;
  a.heads = heads;
  a.q = make_linear(ps, name + ".q", dim, dim, false, rng);
  a.k = make_linear(ps, name + ".k", dim, dim, false, rng);
  a.v = make_linear(ps, name + ".v", dim, dim, false, rng);
  a.o = make_linear(ps, name + ".o", dim, dim, false, rng);
  return a;
}

}  // namespace detail

/// Network configuration plus its named parameters. Blocks have independent weights.
class RgmWeights {
 public:
  RgmWeights(NetConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    std::size_t in = 6;
    for (std::size_t l = 0; l < config_.mlp.size(); ++l) {
      ftheta_.mlp.push_back(detail::make_linear(params_, "ftheta.mlp" + std::to_string(l), in, config_.mlp[l], true, rng));
      in = config_.mlp[l];
    }
    std::size_t concat = config_.mlp.back();
    for (std::size_t w : config_.mlp) concat += w;
    ftheta_.proj = detail::make_linear(params_, "ftheta.proj", concat, config_.feature_dim, false, rng);

    const std::size_t Q = config_.graph_dim;
    for (std::size_t b = 0; b < config_.blocks; ++b) {
      const std::string pre = "block" + std::to_string(b);
      const std::size_t D = config_.block_input_dim(b);
      Block blk;
      if (config_.edge_mode == EdgeMode::transformer) {
        for (std::size_t t = 0; t < config_.transformer_layers; ++t) {
          const std::string tp = pre + ".transformer" + std::to_string(t);
          TransformerLayer layer;
          layer.ln_self = detail::make_layer_norm(params_, tp + ".ln_self", D);
          layer.ln_enc_ff = detail::make_layer_norm(params_, tp + ".ln_enc_ff", D);
          layer.ln_cross = detail::make_layer_norm(params_, tp + ".ln_cross", D);
          layer.ln_dec_ff = detail::make_layer_norm(params_, tp + ".ln_dec_ff", D);
          layer.self_attn = detail::make_attention(params_, tp + ".self_attn", D, config_.heads, rng);
          layer.cross_attn = detail::make_attention(params_, tp + ".cross_attn", D, config_.heads, rng);
          layer.enc_ff.l1 = detail::make_linear(params_, tp + ".enc_ff1", D, config_.ff_dim, true, rng);
          layer.enc_ff.l2 = detail::make_linear(params_, tp + ".enc_ff2", config_.ff_dim, D, false, rng);
          layer.dec_ff.l1 = detail::make_linear(params_, tp + ".dec_ff1", D, config_.ff_dim, true, rng);
          layer.dec_ff.l2 = detail::make_linear(params_, tp + ".dec_ff2", config_.ff_dim, D, false, rng);
          blk.transformer.layers.push_back(layer);
        }
        blk.transformer.out = detail::make_layer_norm(params_, pre + ".transformer.ln_out", D);
      }
      blk.f_adj = detail::make_linear(params_, pre + ".f_adj", D, Q, true, rng);
      blk.f_self = detail::make_linear(params_, pre + ".f_self", D, Q, true, rng);
      // identity plus N(0, 0.01) noise
      Matrix W = Matrix::Identity(static_cast<Index>(Q), static_cast<Index>(Q));
      std::normal_distribution<double> noise(0.0, 0.01);
      for (Index k = 0; k < W.size(); ++k) W.data()[k] += noise(rng);
      blk.affinity = params_.add(pre + ".affinity", std::move(W));
      blk.norm_scale = params_.add(pre + ".inorm.scale", Matrix::Ones(1, 1));
      blk.norm_shift = params_.add(pre + ".inorm.shift", Matrix::Zero(1, 1));
      blk.f_cross = detail::make_linear(params_, pre + ".f_cross", 2 * Q, Q, false, rng);
      blocks_.push_back(std::move(blk));
    }
  }

  const NetConfig& config() const { return config_; }
  diff::ParameterSet& params() { return params_; }
  const diff::ParameterSet& params() const { return params_; }
  const FTheta& ftheta() const { return ftheta_; }
  const std::vector<Block>& blocks() const { return blocks_; }

 private:
  NetConfig config_;
  diff::ParameterSet params_;
  FTheta ftheta_;
  std::vector<Block> blocks_;
};

// ---------------------------------------------------------------------------
// Layers

/// (N*K) x 6 matrix; rows i*K .. i*K+K-1 hold (x_i, x_n) for the K nearest neighbours of x_i.
inline Matrix local_descriptor(const PointCloud& X, std::size_t K) {
  auto nn = knn_all(X, K);
  const Points& P = X.points();
  const Index N = static_cast<Index>(X.size());
  Matrix D(N * static_cast<Index>(K), 6);
  for (Index i = 0; i < N; ++i)
    for (std::size_t n = 0; n < K; ++n) {
      Index r = i * static_cast<Index>(K) + static_cast<Index>(n);
      D.block(r, 0, 1, 3) = P.row(i);
      D.block(r, 3, 1, 3) = P.row(static_cast<Index>(nn[static_cast<std::size_t>(i)][n]));
    }
  return D;
}

/// Shared per-neighbour MLP, max-pool over the K neighbours after every stage, a global
/// max-pool of the last stage, concatenation, and a linear map to V.
inline Var f_theta(const Bound& p, const FTheta& layer, const Var& descriptors, std::size_t K) {
  Var h = descriptors;
  std::vector<Var> pooled;
  for (const Linear& l : layer.mlp) {
    h = diff::relu(l(p, h));
    pooled.push_back(diff::segment_max_rows(h, static_cast<Index>(K)));
  }
  Index N = pooled.front().rows();
  pooled.push_back(diff::broadcast_rows(diff::max_rows(pooled.back()), N));
  return layer.proj(p, diff::concat_cols(pooled));
}

inline std::pair<Var, Var> transformer_embed(const Bound& p, const Transformer& tf, const Var& fx, const Var& fy) {
  if (fx.cols() != fy.cols()) throw ParameterError("transformer_embed: feature widths differ");
  Var x = fx, y = fy;
  for (const TransformerLayer& l : tf.layers) {
    Var ex = l.encode(p, x), ey = l.encode(p, y);
    x = l.decode(p, ex, ey);
    y = l.decode(p, ey, ex);
  }
  return {tf.out(p, x), tf.out(p, y)};
}

/// Row-softmax of the embedding inner products; N x N, rows sum to 1.
inline Var soft_edges(const Var& embedding) { return diff::softmax_rows(diff::matmul_nt(embedding, embedding)); }

/// Uniform weights over all points.
inline Matrix full_edges(Index n) { return Matrix::Constant(n, n, 1.0 / static_cast<double>(n)); }

/// Uniform weights over the points within `radius` (self included).
inline Matrix radius_edges(const PointCloud& X, double radius) {
  const Points& P = X.points();
  const Index n = P.rows();
  Matrix E = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j)
      if ((P.row(i) - P.row(j)).squaredNorm() <= radius * radius) E(i, j) = 1.0;
    E.row(i) /= E.row(i).sum();
  }
  return E;
}

/// F^corr = colnorm(E) * f_adj(F) + f_self(F), with f_adj / f_self linear + ReLU.
inline Var intra_graph_conv(const Bound& p, const Block& blk, const Var& F, const Var& E) {
  Var e_norm = diff::l1_normalize_cols(E);
  Var adj = diff::relu(blk.f_adj(p, F));
  Var self = diff::relu(blk.f_self(p, F));
  return diff::add(diff::matmul(e_norm, adj), self);
}

/// A_ij = fx_i^T W fy_j.
inline Var affinity(const Var& fx, const Var& fy, const Var& W) {
  if (W.rows() != W.cols() || fx.cols() != W.rows() || fy.cols() != W.cols())
    throw ParameterError("affinity: feature width does not match W");
  return diff::matmul_nt(diff::matmul(fx, W), fy);
}

inline constexpr double kExpClamp = 27.631021115928547;  // log(1e12)

/// instance norm -> exp -> Sinkhorn with slack row/column; (N+1) x (M+1).
inline Var ais(const Bound& p, const Block& blk, const Var& A, const diff::SinkhornOptions& opt) {
  Var normed = diff::instance_norm(A, p[blk.norm_scale], p[blk.norm_shift]);
  Var positive = diff::exp(diff::clamp(normed, -kExpClamp, kExpClamp));
  return diff::sinkhorn(positive, opt);
}

/// F'_x = f_cross([F^corr_x, C F^corr_y]) and F'_y = f_cross([F^corr_y, C^T F^corr_x]) over the
/// non-slack block C of the soft correspondence.
inline std::pair<Var, Var> cross_graph_conv(const Bound& p, const Block& blk, const Var& fx, const Var& fy,
                                            const Var& soft) {
  Index N = fx.rows(), M = fy.rows();
  if (soft.rows() < N || soft.cols() < M) throw ParameterError("cross_graph_conv: correspondence smaller than graphs");
  Var C = diff::slice(soft, 0, 0, N, M);
  Var agg_x = diff::matmul(C, fy);
  Var agg_y = diff::matmul_tn(C, fx);
  Var out_x = blk.f_cross(p, diff::concat_cols({fx, agg_x}));
  Var out_y = blk.f_cross(p, diff::concat_cols({fy, agg_y}));
  return {out_x, out_y};
}

struct ForwardOutput {
  Var soft;                  // (N+1) x (M+1)
  std::vector<Var> edges_x;  // per block, N x N
  std::vector<Var> edges_y;
};

inline ForwardOutput rgm_forward(const Bound& p, const RgmWeights& w, const PointCloud& X, const PointCloud& Y) {
  const NetConfig& cfg = w.config();
  if (cfg.k >= X.size() || cfg.k >= Y.size()) throw ParameterError("rgm_forward: K must be smaller than both clouds");
  Tape& tape = p.tape();
  Var fx = f_theta(p, w.ftheta(), tape.constant(local_descriptor(X, cfg.k)), cfg.k);
  Var fy = f_theta(p, w.ftheta(), tape.constant(local_descriptor(Y, cfg.k)), cfg.k);
  diff::SinkhornOptions opt;
  opt.iters = cfg.sinkhorn_iters;
  opt.tol = cfg.sinkhorn_tol;
  ForwardOutput out;
  for (std::size_t b = 0; b < w.blocks().size(); ++b) {
    const Block& blk = w.blocks()[b];
    Var ex, ey;
    switch (cfg.edge_mode) {
      case EdgeMode::transformer: {
        auto [tx, ty] = transformer_embed(p, blk.transformer, fx, fy);
        ex = soft_edges(tx);
        ey = soft_edges(ty);
        break;
      }
      case EdgeMode::full:
        ex = tape.constant(full_edges(fx.rows()));
        ey = tape.constant(full_edges(fy.rows()));
        break;
      case EdgeMode::radius:
        ex = tape.constant(radius_edges(X, cfg.edge_radius));
        ey = tape.constant(radius_edges(Y, cfg.edge_radius));
        break;
    }
    out.edges_x.push_back(ex);
    out.edges_y.push_back(ey);
    Var cx = intra_graph_conv(p, blk, fx, ex);
    Var cy = intra_graph_conv(p, blk, fy, ey);
    out.soft = ais(p, blk, affinity(cx, cy, p[blk.affinity]), opt);
    if (b + 1 < w.blocks().size()) std::tie(fx, fy) = cross_graph_conv(p, blk, cx, cy, out.soft);
  }
  return out;
}

/// Frozen-weight inference: the (N+1) x (M+1) soft correspondence.
inline Matrix soft_correspondence(const RgmWeights& w, const PointCloud& X, const PointCloud& Y) {
  Tape tape;
  Bound p(tape, w.params());
  return rgm_forward(p, w, X, Y).soft.value();
}

inline constexpr double kProbClamp = 1e-12;

/// Focal loss over the N x M non-slack block:
/// -sum( a (1-C)^g G log C + (1-a) C^g (1-G) log(1-C) ), C clamped to [1e-12, 1-1e-12].
inline Var focal_loss(const Var& soft, const Matrix& gt, double alpha, double gamma) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("focal_loss: alpha must lie in [0, 1]");
  if (!(gamma >= 0.0)) throw ParameterError("focal_loss: gamma must be >= 0");
  const Index N = gt.rows(), M = gt.cols();
  if (soft.rows() < N || soft.cols() < M || soft.rows() > N + 1 || soft.cols() > M + 1)
    throw ParameterError("focal_loss: shape mismatch between prediction and ground truth");
  Tape& t = soft.tape();
  Var c = diff::clamp(diff::slice(soft, 0, 0, N, M), kProbClamp, 1.0 - kProbClamp);
  Var one_minus = diff::add_scalar(diff::scale(c, -1.0), 1.0);
  Var pos = diff::mul(t.constant(gt * alpha), diff::log(c));
  Var neg = diff::mul(t.constant((Matrix::Ones(N, M) - gt) * (1.0 - alpha)), diff::log(one_minus));
  if (gamma != 0.0) {
    pos = diff::mul(pos, diff::pow_scalar(one_minus, gamma));
    neg = diff::mul(neg, diff::pow_scalar(c, gamma));
  }
  return diff::scale(diff::sum(diff::add(pos, neg)), -1.0);
}

}  // namespace rgm::net
