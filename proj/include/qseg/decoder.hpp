// Transformer decoder over superpoint features with masked cross-attention,
// per-layer prediction heads, and hierarchical query fusion: after each
// layer whose successor is one of the final D2 layers, the D1 input queries
// least represented in the layer's output (lowest max-IoU between binarized
// masks) are appended to the next layer's input.
//
// Layer structure (pre-norm residuals): masked cross-attention over
// superpoints, self-attention among queries, feed-forward; positions are
// advanced by a small MLP on the updated content, and enter attention as a
// Fourier bias on the cross-attention logits built from relative
// (superpoint - query) positions expanded through angle-difference
// identities so everything stays 2-D matrix algebra.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "qseg/agent_init.hpp"
#include "qseg/rng.hpp"
#include "qseg/scene.hpp"
#include "qseg/tape.hpp"

namespace qseg {

struct DecoderConfig {
  int num_layers = 6;
  int heads = 4;
  int hidden_dim = 64;
  int ffn_dim = 256;
  int d1 = 40;            // queries retained per fusion event
  int d2 = 3;             // number of final layers whose inputs are fused
  double mask_bin_threshold = 0.5;
  bool hqfd = true;
  int num_classes = 0;    // real classes; heads emit one extra no-object column
  int fourier_per_axis = 4;
  int pos_head_dim = 32;

  int head_dim() const { return hidden_dim / heads; }
  int fourier_dim() const { return 3 * fourier_per_axis; }

  void validate() const {
    if (num_layers < 2) throw std::invalid_argument("decoder: num_layers must be >= 2");
    if (heads < 1 || hidden_dim % heads != 0)
      throw std::invalid_argument("decoder: heads must divide hidden_dim");
    if (ffn_dim < 1) throw std::invalid_argument("decoder: ffn_dim must be positive");
    if (d1 < 1) throw std::invalid_argument("decoder: D1 must be >= 1");
    if (d2 < 1 || d2 > num_layers - 1)
      throw std::invalid_argument("decoder: D2 must satisfy 1 <= D2 <= num_layers - 1");
    if (mask_bin_threshold <= 0.0 || mask_bin_threshold >= 1.0)
      throw std::invalid_argument("decoder: mask_bin_threshold must be in (0,1)");
    if (num_classes < 1) throw std::invalid_argument("decoder: num_classes must be >= 1");
    if (fourier_per_axis < 1) throw std::invalid_argument("decoder: fourier_per_axis must be >= 1");
  }
};

struct LayerPredictionN {
  Node class_logits;  // S' x (num_classes + 1), last column = no-object
  Node mask_logits;   // S' x M over superpoints
  Node centers;       // S' x 3 meters (the query positions)
  Node scores;        // S' x 1 in (0,1)
  std::vector<int> lineage;
};

// ---------------------------------------------------------------------------
// Plain-value helpers shared by fusion, losses and evaluation.

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Mat binarize_mask_logits(const Mat& logits, double threshold) {
  Mat out(logits.rows, logits.cols);
  for (size_t k = 0; k < logits.size(); ++k)
    out.v[k] = stable_sigmoid(logits.v[k]) >= threshold ? 1.0 : 0.0;
  return out;
}

// IoU[i,j] between binary rows; an empty-vs-empty pair counts as identical
// masks, IoU 1.
inline Mat pairwise_mask_iou(const Mat& a, const Mat& b) {
  if (a.cols != b.cols) throw std::invalid_argument("pairwise_mask_iou: mask width mismatch");
  std::vector<double> asum(static_cast<size_t>(a.rows), 0.0), bsum(static_cast<size_t>(b.rows), 0.0);
  for (int i = 0; i < a.rows; ++i)
    for (int c = 0; c < a.cols; ++c) asum[static_cast<size_t>(i)] += a.at(i, c);
  for (int j = 0; j < b.rows; ++j)
    for (int c = 0; c < b.cols; ++c) bsum[static_cast<size_t>(j)] += b.at(j, c);
  Mat iou(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < b.rows; ++j) {
      double inter = 0.0;
      const double* ra = a.row(i);
      const double* rb = b.row(j);
      for (int c = 0; c < a.cols; ++c) inter += ra[c] * rb[c];
      const double uni = asum[static_cast<size_t>(i)] + bsum[static_cast<size_t>(j)] - inter;
      iou.at(i, j) = uni <= 0.0 ? 1.0 : inter / uni;
    }
  return iou;
}

inline std::vector<double> max_overlap(const Mat& iou) {
  if (iou.cols < 1) throw std::invalid_argument("max_overlap: needs at least one column");
  std::vector<double> u(static_cast<size_t>(iou.rows));
  for (int i = 0; i < iou.rows; ++i) {
    double best = iou.at(i, 0);
    for (int j = 1; j < iou.cols; ++j) best = std::max(best, iou.at(i, j));
    u[static_cast<size_t>(i)] = best;
  }
  return u;
}

// Indices of the k smallest values, ties to the smaller index, returned in
// ascending index order. k larger than the input returns every index.
inline std::vector<int> bottom_k(const std::vector<double>& u, int k) {
  if (k < 1) throw std::invalid_argument("bottom_k: k must be >= 1");
  std::vector<int> order(u.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (u[static_cast<size_t>(a)] != u[static_cast<size_t>(b)]) return u[static_cast<size_t>(a)] < u[static_cast<size_t>(b)];
    return a < b;
  });
  order.resize(std::min<size_t>(order.size(), static_cast<size_t>(k)));
  std::sort(order.begin(), order.end());
  return order;
}

// Per-layer input query counts implied by the fusion schedule, starting from
// s0 initial queries. The transition after layer l (1-based) fuses exactly
// when l >= num_layers - d2, i.e. its successor is one of the final d2 layers.
inline std::vector<int> fusion_schedule(int num_layers, int s0, int d1, int d2, bool enabled = true) {
  if (num_layers < 1) throw std::invalid_argument("fusion_schedule: num_layers must be >= 1");
  std::vector<int> counts(static_cast<size_t>(num_layers), s0);
  if (!enabled) return counts;
  for (int l = 1; l < num_layers; ++l) {
    const bool fused = l >= num_layers - d2;
    counts[static_cast<size_t>(l)] = counts[static_cast<size_t>(l - 1)] + (fused ? d1 : 0);
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Parameter creation. Weights are Xavier-uniform from the given rng; layer
// norms start at identity; the position-update output layer starts at zero
// so an untrained model keeps its query positions.

namespace detail {

inline void init_xavier(Mat& w, Rng& rng) {
  const double lim = std::sqrt(6.0 / static_cast<double>(w.rows + w.cols));
  for (double& x : w.v) x = rng.uniform(-lim, lim);
}

inline Parameter& make_linear(ParameterStore& ps, const std::string& w_name,
                              const std::string& b_name, int in, int out, Rng& rng) {
  Parameter& w = ps.create(w_name, in, out);
  init_xavier(w.value, rng);
  ps.create(b_name, 1, out);
  return w;
}

inline void make_layer_norm(ParameterStore& ps, const std::string& prefix, int dim) {
  Parameter& g = ps.create(prefix + ".g", 1, dim);
  std::fill(g.value.v.begin(), g.value.v.end(), 1.0);
  ps.create(prefix + ".b", 1, dim);
}

inline Node linear(Tape& t, ParameterStore& ps, const std::string& w_name,
                   const std::string& b_name, Node x) {
  return t.add(t.matmul(x, t.param(ps.get(w_name))), t.param(ps.get(b_name)));
}

inline Node layer_norm_affine(Tape& t, ParameterStore& ps, const std::string& prefix, Node x) {
  Node n = t.layer_norm_rows(x);
  return t.add(t.mul(n, t.param(ps.get(prefix + ".g"))), t.param(ps.get(prefix + ".b")));
}

inline void make_attention(ParameterStore& ps, const std::string& prefix, const DecoderConfig& cfg,
                           bool fourier, Rng& rng) {
  const int dh = cfg.head_dim();
  for (int h = 0; h < cfg.heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h);
    make_linear(ps, hp + ".wq", hp + ".bq", cfg.hidden_dim, dh, rng);
    make_linear(ps, hp + ".wk", hp + ".bk", cfg.hidden_dim, dh, rng);
    make_linear(ps, hp + ".wv", hp + ".bv", cfg.hidden_dim, dh, rng);
    Parameter& wo = ps.create(hp + ".wo", dh, cfg.hidden_dim);
    init_xavier(wo.value, rng);
    if (fourier) {
      Parameter& fs = ps.create(hp + ".fsin", 1, cfg.fourier_dim());
      Parameter& fc = ps.create(hp + ".fcos", 1, cfg.fourier_dim());
      for (double& x : fs.value.v) x = rng.normal(0.0, 0.05);
      for (double& x : fc.value.v) x = rng.normal(0.0, 0.05);
    }
  }
  ps.create(prefix + ".bo", 1, cfg.hidden_dim);
}

}  // namespace detail

inline void init_encoder_params(ParameterStore& ps, const DecoderConfig& cfg, Rng& rng) {
  detail::make_linear(ps, "enc.w1", "enc.b1", 9, cfg.hidden_dim, rng);
  detail::make_linear(ps, "enc.w2", "enc.b2", cfg.hidden_dim, cfg.hidden_dim, rng);
  detail::make_linear(ps, "enc.w3", "enc.b3", cfg.hidden_dim, cfg.hidden_dim, rng);
  detail::make_layer_norm(ps, "enc.ln", cfg.hidden_dim);
}

inline void init_layer_params(ParameterStore& ps, const DecoderConfig& cfg, int layer, Rng& rng) {
  const std::string lp = "l" + std::to_string(layer);
  detail::make_layer_norm(ps, lp + ".ln1", cfg.hidden_dim);
  detail::make_layer_norm(ps, lp + ".ln2", cfg.hidden_dim);
  detail::make_layer_norm(ps, lp + ".ln3", cfg.hidden_dim);
  detail::make_attention(ps, lp + ".cross", cfg, /*fourier=*/true, rng);
  detail::make_attention(ps, lp + ".self", cfg, /*fourier=*/false, rng);
  detail::make_linear(ps, lp + ".ffn.w1", lp + ".ffn.b1", cfg.hidden_dim, cfg.ffn_dim, rng);
  detail::make_linear(ps, lp + ".ffn.w2", lp + ".ffn.b2", cfg.ffn_dim, cfg.hidden_dim, rng);
  detail::make_linear(ps, lp + ".pos.w1", lp + ".pos.b1", cfg.hidden_dim, cfg.pos_head_dim, rng);
  Parameter& pw2 = ps.create(lp + ".pos.w2", cfg.pos_head_dim, 3);
  (void)pw2;  // zero-initialized: untrained layers leave positions unchanged
  ps.create(lp + ".pos.b2", 1, 3);
}

inline void init_head_params(ParameterStore& ps, const DecoderConfig& cfg, Rng& rng) {
  detail::make_layer_norm(ps, "head.ln", cfg.hidden_dim);
  detail::make_linear(ps, "head.cls.w1", "head.cls.b1", cfg.hidden_dim, cfg.hidden_dim, rng);
  detail::make_linear(ps, "head.cls.w2", "head.cls.b2", cfg.hidden_dim, cfg.num_classes + 1, rng);
  detail::make_linear(ps, "head.mask.w1", "head.mask.b1", cfg.hidden_dim, cfg.hidden_dim, rng);
  detail::make_linear(ps, "head.mask.w2", "head.mask.b2", cfg.hidden_dim, cfg.hidden_dim, rng);
  detail::make_linear(ps, "head.score.w1", "head.score.b1", cfg.hidden_dim, cfg.hidden_dim, rng);
  detail::make_linear(ps, "head.score.w2", "head.score.b2", cfg.hidden_dim, 1, rng);
}

// ---------------------------------------------------------------------------
// Forward pieces.

// Per-point features from position/color/normal through a 3-linear MLP with
// a final layer norm.
inline Node encode_points(Tape& t, ParameterStore& ps, const Scene& scene) {
  const int n = scene.num_points();
  Mat feat(n, 9);
  for (int i = 0; i < n; ++i) {
    double* d = feat.row(i);
    for (int k = 0; k < 3; ++k) {
      d[k] = scene.pos.at(i, k);
      d[3 + k] = scene.color.at(i, k);
      d[6 + k] = scene.normal.at(i, k);
    }
  }
  Node x = t.input(std::move(feat));
  Node h1 = t.relu(detail::linear(t, ps, "enc.w1", "enc.b1", x));
  Node h2 = t.relu(detail::linear(t, ps, "enc.w2", "enc.b2", h1));
  Node h3 = detail::linear(t, ps, "enc.w3", "enc.b3", h2);
  return detail::layer_norm_affine(t, ps, "enc.ln", h3);
}

// Superpoint-side context reused across layers: pooled features plus the
// Fourier angle tables of the (fixed) superpoint positions.
struct SupContext {
  Node feats;    // M x C
  Mat pos;       // M x 3 values
  Mat freq;      // 3 x F frequency matrix
  Node sin_sup;  // M x F constants
  Node cos_sup;
};

inline Mat fourier_frequencies(const DecoderConfig& cfg) {
  Mat freq(3, cfg.fourier_dim());
  for (int axis = 0; axis < 3; ++axis)
    for (int r = 0; r < cfg.fourier_per_axis; ++r)
      freq.at(axis, axis * cfg.fourier_per_axis + r) = std::pow(2.0, r);  // 1,2,4,... rad/m
  return freq;
}

inline SupContext make_sup_context(Tape& t, const DecoderConfig& cfg, Node sup_feats,
                                   const Mat& sup_pos) {
  SupContext ctx;
  ctx.feats = sup_feats;
  ctx.pos = sup_pos;
  ctx.freq = fourier_frequencies(cfg);
  const Mat angles = matmul(sup_pos, ctx.freq);
  Mat s(angles.rows, angles.cols), c(angles.rows, angles.cols);
  for (size_t k = 0; k < angles.size(); ++k) {
    s.v[k] = std::sin(angles.v[k]);
    c.v[k] = std::cos(angles.v[k]);
  }
  ctx.sin_sup = t.input(std::move(s));
  ctx.cos_sup = t.input(std::move(c));
  return ctx;
}

namespace detail {

// sum_j ws_j sin(b_sup_j - b_query_j) + wc_j cos(b_sup_j - b_query_j),
// expanded via angle-difference identities into two matmuls so the whole
// bias stays differentiable w.r.t. query positions and the per-head weights.
inline Node fourier_bias(Tape& t, ParameterStore& ps, const std::string& head_prefix,
                         const SupContext& sup, Node sin_q, Node cos_q) {
  Node ws = t.param(ps.get(head_prefix + ".fsin"));
  Node wc = t.param(ps.get(head_prefix + ".fcos"));
  Node r1 = t.add(t.mul(sup.sin_sup, ws), t.mul(sup.cos_sup, wc));           // M x F
  Node r2 = t.sub(t.mul(sup.sin_sup, wc), t.mul(sup.cos_sup, ws));           // M x F
  return t.add(t.matmul(cos_q, t.transpose(r1)), t.matmul(sin_q, t.transpose(r2)));
}

// Multi-head attention; per_head_bias (possibly empty) is added to each
// head's scaled logits before softmax.
inline Node attention(Tape& t, ParameterStore& ps, const std::string& prefix,
                      const DecoderConfig& cfg, Node q_src, Node kv_src,
                      const std::vector<Node>& per_head_bias) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  Node out;
  for (int h = 0; h < cfg.heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h);
    Node q = linear(t, ps, hp + ".wq", hp + ".bq", q_src);
    Node k = linear(t, ps, hp + ".wk", hp + ".bk", kv_src);
    Node v = linear(t, ps, hp + ".wv", hp + ".bv", kv_src);
    Node logits = t.affine(t.matmul(q, t.transpose(k)), scale, 0.0);
    if (!per_head_bias.empty()) logits = t.add(logits, per_head_bias[static_cast<size_t>(h)]);
    Node ctx = t.matmul(t.softmax_rows(logits), v);
    Node proj = t.matmul(ctx, t.param(ps.get(hp + ".wo")));
    out = h == 0 ? proj : t.add(out, proj);
  }
  return t.add(out, t.param(ps.get(prefix + ".bo")));
}

}  // namespace detail

// Additive attention-mask matrix from the previous layer's mask logits:
// 0 where the sigmoid probability clears the threshold, -1e30 elsewhere.
// A row with nothing above threshold falls back to all-zero (unmasked).
inline Mat attention_mask_bias(const Mat& prev_mask_logits, double threshold) {
  Mat bias(prev_mask_logits.rows, prev_mask_logits.cols);
  for (int i = 0; i < prev_mask_logits.rows; ++i) {
    bool any = false;
    for (int c = 0; c < prev_mask_logits.cols; ++c)
      if (stable_sigmoid(prev_mask_logits.at(i, c)) >= threshold) {
        any = true;
        break;
      }
    if (!any) continue;  // leave the row zero
    for (int c = 0; c < prev_mask_logits.cols; ++c)
      bias.at(i, c) = stable_sigmoid(prev_mask_logits.at(i, c)) >= threshold ? 0.0 : -1e30;
  }
  return bias;
}

// One decoder layer. prev_mask_logits (values) gates cross-attention;
// nullptr means unmasked.
inline QuerySetN decoder_layer(Tape& t, ParameterStore& ps, const DecoderConfig& cfg, int layer,
                               const QuerySetN& queries, const SupContext& sup,
                               const Mat* prev_mask_logits) {
  const std::string lp = "l" + std::to_string(layer);

  Node angles_q = t.matmul(queries.positions, t.input(sup.freq));
  Node sin_q = t.sin(angles_q);
  Node cos_q = t.cos(angles_q);

  Node mask_bias;
  if (prev_mask_logits != nullptr) {
    if (prev_mask_logits->rows != t.val(queries.content).rows)
      throw std::invalid_argument("decoder_layer: mask row count mismatch");
    mask_bias = t.input(attention_mask_bias(*prev_mask_logits, cfg.mask_bin_threshold));
  }

  std::vector<Node> bias(static_cast<size_t>(cfg.heads));
  for (int h = 0; h < cfg.heads; ++h) {
    Node fb = detail::fourier_bias(t, ps, lp + ".cross.h" + std::to_string(h), sup, sin_q, cos_q);
    bias[static_cast<size_t>(h)] = mask_bias.valid() ? t.add(fb, mask_bias) : fb;
  }

  Node c = queries.content;
  Node h1 = detail::layer_norm_affine(t, ps, lp + ".ln1", c);
  c = t.add(c, detail::attention(t, ps, lp + ".cross", cfg, h1, sup.feats, bias));
  Node h2 = detail::layer_norm_affine(t, ps, lp + ".ln2", c);
  c = t.add(c, detail::attention(t, ps, lp + ".self", cfg, h2, h2, {}));
  Node h3 = detail::layer_norm_affine(t, ps, lp + ".ln3", c);
  Node f = detail::linear(t, ps, lp + ".ffn.w2", lp + ".ffn.b2",
                          t.relu(detail::linear(t, ps, lp + ".ffn.w1", lp + ".ffn.b1", h3)));
  c = t.add(c, f);

  Node dp = detail::linear(t, ps, lp + ".pos.w2", lp + ".pos.b2",
                           t.relu(detail::linear(t, ps, lp + ".pos.w1", lp + ".pos.b1", c)));

  QuerySetN out;
  out.content = c;
  out.positions = t.add(queries.positions, dp);
  out.lineage = queries.lineage;
  return out;
}

inline LayerPredictionN predict(Tape& t, ParameterStore& ps, const DecoderConfig& cfg,
                                const QuerySetN& queries, Node sup_feats) {
  Node h = detail::layer_norm_affine(t, ps, "head.ln", queries.content);
  LayerPredictionN p;
  p.class_logits = detail::linear(t, ps, "head.cls.w2", "head.cls.b2",
                                  t.relu(detail::linear(t, ps, "head.cls.w1", "head.cls.b1", h)));
  Node emb = detail::linear(t, ps, "head.mask.w2", "head.mask.b2",
                            t.relu(detail::linear(t, ps, "head.mask.w1", "head.mask.b1", h)));
  p.mask_logits = t.matmul(emb, t.transpose(sup_feats));
  p.centers = queries.positions;
  p.scores = t.sigmoid(detail::linear(t, ps, "head.score.w2", "head.score.b2",
                                      t.relu(detail::linear(t, ps, "head.score.w1", "head.score.b1", h))));
  p.lineage = queries.lineage;
  return p;
}

inline QuerySetN fuse_query_sets(Tape& t, const QuerySetN& curr, const QuerySetN& prev,
                                 const std::vector<int>& retained) {
  if (retained.empty()) return curr;
  QuerySetN out;
  out.positions = t.concat_rows(curr.positions, t.gather_rows(prev.positions, retained));
  out.content = t.concat_rows(curr.content, t.gather_rows(prev.content, retained));
  out.lineage = curr.lineage;
  for (int r : retained) out.lineage.push_back(prev.lineage[static_cast<size_t>(r)]);
  return out;
}

struct RunDecoderResult {
  std::vector<LayerPredictionN> layers;  // one per decoder layer, in order
  QuerySetN final_queries;
};

inline RunDecoderResult run_decoder(Tape& t, ParameterStore& ps, const DecoderConfig& cfg,
                                    const QuerySetN& init, const SupContext& sup) {
  cfg.validate();
  RunDecoderResult res;
  QuerySetN q_in = init;
  Mat in_masks;  // mask logits attached to the current input rows
  bool have_in_masks = false;

  for (int l = 0; l < cfg.num_layers; ++l) {
    QuerySetN out = decoder_layer(t, ps, cfg, l, q_in, sup, have_in_masks ? &in_masks : nullptr);
    LayerPredictionN pred = predict(t, ps, cfg, out, sup.feats);
    const Mat out_masks = t.val(pred.mask_logits);  // copy: later pushes may move node storage
    res.layers.push_back(pred);

    if (l == cfg.num_layers - 1) {
      res.final_queries = out;
      break;
    }
    // 1-based transition after layer (l+1) fuses when l+1 >= num_layers - d2.
    const bool fused = cfg.hqfd && (l + 1) >= cfg.num_layers - cfg.d2;
    if (!fused) {
      q_in = out;
      in_masks = out_masks;
      have_in_masks = true;
      continue;
    }
    if (!have_in_masks) {
      // Only reachable when the very first transition fuses (d2 = layers-1):
      // the init queries need mask predictions for the IoU.
      in_masks = t.val(predict(t, ps, cfg, q_in, sup.feats).mask_logits);
      have_in_masks = true;
    }
    const Mat bin_in = binarize_mask_logits(in_masks, cfg.mask_bin_threshold);
    const Mat bin_out = binarize_mask_logits(out_masks, cfg.mask_bin_threshold);
    const std::vector<double> u = max_overlap(pairwise_mask_iou(bin_in, bin_out));
    const std::vector<int> retained = bottom_k(u, cfg.d1);

    QuerySetN fused_q = fuse_query_sets(t, out, q_in, retained);
    Mat fused_masks(out_masks.rows + static_cast<int>(retained.size()), out_masks.cols);
    std::copy(out_masks.v.begin(), out_masks.v.end(), fused_masks.v.begin());
    for (size_t r = 0; r < retained.size(); ++r)
      std::copy(in_masks.row(retained[r]), in_masks.row(retained[r]) + in_masks.cols,
                fused_masks.row(out_masks.rows + static_cast<int>(r)));
    q_in = fused_q;
    in_masks = std::move(fused_masks);
    have_in_masks = true;
  }
  return res;
}

}  // namespace qseg
