// Inference post-processing and evaluation: instance extraction from decoder
// outputs, class-wise mask NMS, average precision and recall, per-layer
// diagnostics, the FPS-to-center drift diagnostic, and the metrics CSV / SVG
// chart writers.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "qseg/matching.hpp"
#include "qseg/matrix.hpp"
#include "qseg/text_io.hpp"

namespace qseg {

struct FinalInstance {
  int class_id = 0;
  std::vector<uint8_t> mask;  // binary, over scene points
  double score = 0.0;
};

struct EvalGt {
  int class_id = 0;
  std::vector<uint8_t> mask;
};

inline double mask_iou_u8(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("mask_iou_u8: length mismatch");
  long inter = 0, uni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const int x = a[i] ? 1 : 0, y = b[i] ? 1 : 0;
    inter += x & y;
    uni += x | y;
  }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

// Superpoint mask -> point mask, through any point->superpoint index map.
inline std::vector<uint8_t> broadcast_mask(const std::vector<uint8_t>& sup_mask,
                                           const std::vector<int>& sup_of_point) {
  std::vector<uint8_t> out(sup_of_point.size(), 0);
  for (size_t p = 0; p < sup_of_point.size(); ++p) {
    const int s = sup_of_point[p];
    if (s < 0 || s >= static_cast<int>(sup_mask.size()))
      throw std::invalid_argument("broadcast_mask: point maps outside the superpoint set");
    out[p] = sup_mask[static_cast<size_t>(s)];
  }
  return out;
}

// One instance candidate per query: the most likely foreground class, a
// combined confidence (class posterior times mask score head), and the
// thresholded mask broadcast to points. Queries whose binarized mask is empty
// or whose confidence falls below the floor are dropped.
inline std::vector<FinalInstance> instances_from_prediction(const PredictionValues& pred,
                                                            const std::vector<int>& sup_of_point,
                                                            double bin_threshold,
                                                            double score_floor) {
  const int nq = pred.class_logits.rows;
  const int ncls = pred.class_logits.cols;  // foreground classes + no-object
  if (ncls < 2) throw std::invalid_argument("instances_from_prediction: needs >= 1 foreground class");
  const Mat hard = binarize_mask_logits(pred.mask_logits, bin_threshold);
  std::vector<FinalInstance> out;
  for (int q = 0; q < nq; ++q) {
    const double* lg = pred.class_logits.row(q);
    double mx = lg[0];
    for (int c = 1; c < ncls; ++c) mx = std::max(mx, lg[c]);
    double z = 0.0;
    for (int c = 0; c < ncls; ++c) z += std::exp(lg[c] - mx);
    int best = 0;
    double best_p = std::exp(lg[0] - mx) / z;
    for (int c = 1; c < ncls - 1; ++c) {
      const double p = std::exp(lg[c] - mx) / z;
      if (p > best_p) {
        best_p = p;
        best = c;
      }
    }
    FinalInstance inst;
    inst.class_id = best;
    inst.score = best_p * pred.scores.at(q, 0);
    std::vector<uint8_t> sup(static_cast<size_t>(hard.cols));
    bool any = false;
    for (int c = 0; c < hard.cols; ++c) {
      sup[static_cast<size_t>(c)] = hard.at(q, c) > 0.5 ? 1 : 0;
      any = any || sup[static_cast<size_t>(c)];
    }
    if (!any || inst.score < score_floor) continue;
    inst.mask = broadcast_mask(sup, sup_of_point);
    out.push_back(std::move(inst));
  }
  return out;
}

// Greedy class-wise NMS. Scan by descending score (ties keep the smaller
// original index first); an instance survives iff its IoU with every kept
// instance of the same class stays at or below the threshold.
inline std::vector<FinalInstance> nms(const std::vector<FinalInstance>& insts,
                                      double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0))
    throw std::invalid_argument("nms: threshold must lie in (0, 1]");
  std::vector<int> order(insts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return insts[static_cast<size_t>(a)].score > insts[static_cast<size_t>(b)].score;
  });
  std::vector<FinalInstance> kept;
  for (int idx : order) {
    const FinalInstance& cand = insts[static_cast<size_t>(idx)];
    bool ok = true;
    for (const FinalInstance& k : kept) {
      if (k.class_id != cand.class_id) continue;
      if (mask_iou_u8(k.mask, cand.mask) > iou_threshold) {
        ok = false;
        break;
      }
    }
    if (ok) kept.push_back(cand);
  }
  return kept;
}

// Per-class greedy matching by score order, then area under the monotone
// envelope of the precision-recall points. Classes without ground truth are
// excluded from the class average.
inline double average_precision(const std::vector<FinalInstance>& preds,
                                const std::vector<EvalGt>& gts, double iou_threshold) {
  std::vector<int> classes;
  for (const EvalGt& g : gts) classes.push_back(g.class_id);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.empty()) return 0.0;

  double ap_sum = 0.0;
  for (int cls : classes) {
    std::vector<int> gidx;
    for (size_t g = 0; g < gts.size(); ++g)
      if (gts[g].class_id == cls) gidx.push_back(static_cast<int>(g));
    std::vector<int> pidx;
    for (size_t p = 0; p < preds.size(); ++p)
      if (preds[p].class_id == cls) pidx.push_back(static_cast<int>(p));
    std::stable_sort(pidx.begin(), pidx.end(), [&](int a, int b) {
      return preds[static_cast<size_t>(a)].score > preds[static_cast<size_t>(b)].score;
    });

    std::vector<char> gt_used(gidx.size(), 0);
    std::vector<char> is_tp(pidx.size(), 0);
    for (size_t pi = 0; pi < pidx.size(); ++pi) {
      const FinalInstance& pr = preds[static_cast<size_t>(pidx[pi])];
      int best_g = -1;
      double best_iou = iou_threshold;
      for (size_t gi = 0; gi < gidx.size(); ++gi) {
        if (gt_used[gi]) continue;
        const double iou = mask_iou_u8(pr.mask, gts[static_cast<size_t>(gidx[gi])].mask);
        if (iou > best_iou || (iou == best_iou && iou >= iou_threshold && best_g == -1)) {
          best_iou = iou;
          best_g = static_cast<int>(gi);
        }
      }
      if (best_g >= 0) {
        gt_used[static_cast<size_t>(best_g)] = 1;
        is_tp[pi] = 1;
      }
    }

    // Precision at each prediction rank, then the monotone envelope.
    const double npos = static_cast<double>(gidx.size());
    std::vector<double> prec(pidx.size()), rec(pidx.size());
    int tp = 0;
    for (size_t i = 0; i < pidx.size(); ++i) {
      tp += is_tp[i];
      prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
      rec[i] = static_cast<double>(tp) / npos;
    }
    for (int i = static_cast<int>(prec.size()) - 2; i >= 0; --i)
      prec[static_cast<size_t>(i)] = std::max(prec[static_cast<size_t>(i)], prec[static_cast<size_t>(i) + 1]);
    double ap = 0.0;
    double prev_rec = 0.0;
    for (size_t i = 0; i < pidx.size(); ++i) {
      if (rec[i] > prev_rec) ap += (rec[i] - prev_rec) * prec[i];
      prev_rec = rec[i];
    }
    ap_sum += ap;
  }
  return ap_sum / static_cast<double>(classes.size());
}

inline double mean_ap_50_95(const std::vector<FinalInstance>& preds,
                            const std::vector<EvalGt>& gts) {
  double acc = 0.0;
  for (int k = 0; k < 10; ++k) acc += average_precision(preds, gts, (50 + 5 * k) / 100.0);
  return acc / 10.0;
}

// Fraction of ground-truth instances covered by at least one prediction with
// IoU at or above the threshold (and the right class, unless class_agnostic).
inline double recall_at(const std::vector<FinalInstance>& preds, const std::vector<EvalGt>& gts,
                        double iou_threshold = 0.5, bool class_agnostic = false) {
  if (gts.empty()) return 0.0;
  int hit = 0;
  for (const EvalGt& g : gts) {
    for (const FinalInstance& p : preds) {
      if (!class_agnostic && p.class_id != g.class_id) continue;
      if (mask_iou_u8(p.mask, g.mask) >= iou_threshold) {
        ++hit;
        break;
      }
    }
  }
  return static_cast<double>(hit) / static_cast<double>(gts.size());
}

struct LayerMetricsRow {
  int layer = 0;        // 1-based decoder layer
  int query_count = 0;  // queries entering the prediction head at this layer
  double recall50 = 0.0;
  double ap25 = 0.0;
  double ap50 = 0.0;
  double map = 0.0;
};

// Metrics per layer on already post-processed instance lists. query_counts
// comes from the decoder run so the table reflects the fusion schedule.
inline std::vector<LayerMetricsRow> per_layer_diagnostics(
    const std::vector<std::vector<FinalInstance>>& per_layer_preds,
    const std::vector<int>& query_counts, const std::vector<EvalGt>& gts) {
  if (per_layer_preds.empty()) throw std::invalid_argument("per_layer_diagnostics: no layers");
  if (per_layer_preds.size() != query_counts.size())
    throw std::invalid_argument("per_layer_diagnostics: layer/count size mismatch");
  std::vector<LayerMetricsRow> rows;
  for (size_t l = 0; l < per_layer_preds.size(); ++l) {
    LayerMetricsRow r;
    r.layer = static_cast<int>(l) + 1;
    r.query_count = query_counts[l];
    r.recall50 = recall_at(per_layer_preds[l], gts, 0.5);
    r.ap25 = average_precision(per_layer_preds[l], gts, 0.25);
    r.ap50 = average_precision(per_layer_preds[l], gts, 0.50);
    r.map = mean_ap_50_95(per_layer_preds[l], gts);
    rows.push_back(r);
  }
  return rows;
}

// Mean absolute per-axis offset between each prediction's center and the FPS
// sample its lineage id points back to.
inline std::array<double, 3> fps_center_distance(const Mat& fps_points, const Mat& centers,
                                                 const std::vector<int>& lineage) {
  if (centers.rows != static_cast<int>(lineage.size()))
    throw std::invalid_argument("fps_center_distance: lineage length mismatch");
  if (fps_points.cols != 3 || centers.cols != 3)
    throw std::invalid_argument("fps_center_distance: expected 3-column coordinates");
  std::array<double, 3> acc = {0.0, 0.0, 0.0};
  if (centers.rows == 0) return acc;
  for (int p = 0; p < centers.rows; ++p) {
    const int src = lineage[static_cast<size_t>(p)];
    if (src < 0 || src >= fps_points.rows)
      throw std::invalid_argument("fps_center_distance: lineage id outside the FPS set");
    for (int k = 0; k < 3; ++k) acc[static_cast<size_t>(k)] += std::fabs(fps_points.at(src, k) - centers.at(p, k));
  }
  for (double& x : acc) x /= centers.rows;
  return acc;
}

struct SceneLayerMetrics {
  std::string scene;
  LayerMetricsRow row;
};

// CSV with one row per (scene, layer) plus an ALL row per layer holding the
// column means over scenes.
inline void write_metrics_csv(std::ostream& os, const std::vector<SceneLayerMetrics>& rows) {
  os << "scene,layer,query_count,recall50,ap25,ap50,map\n";
  std::vector<int> layers;
  for (const SceneLayerMetrics& r : rows) layers.push_back(r.row.layer);
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  for (const SceneLayerMetrics& r : rows) {
    os << r.scene << ',' << r.row.layer << ',' << r.row.query_count << ','
       << fmt_g(r.row.recall50, 17) << ',' << fmt_g(r.row.ap25, 17) << ','
       << fmt_g(r.row.ap50, 17) << ',' << fmt_g(r.row.map, 17) << '\n';
  }
  for (int layer : layers) {
    double n = 0.0, qc = 0.0, rec = 0.0, a25 = 0.0, a50 = 0.0, m = 0.0;
    for (const SceneLayerMetrics& r : rows) {
      if (r.row.layer != layer) continue;
      n += 1.0;
      qc += r.row.query_count;
      rec += r.row.recall50;
      a25 += r.row.ap25;
      a50 += r.row.ap50;
      m += r.row.map;
    }
    os << "ALL," << layer << ',' << fmt_g(qc / n, 17) << ',' << fmt_g(rec / n, 17) << ','
       << fmt_g(a25 / n, 17) << ',' << fmt_g(a50 / n, 17) << ',' << fmt_g(m / n, 17) << '\n';
  }
}

// Minimal self-contained line chart of recall against decoder layer.
inline void write_recall_chart_svg(std::ostream& os, const std::vector<double>& recall_per_layer) {
  const int w = 480, h = 320, ml = 50, mr = 20, mt = 20, mb = 40;
  const int pw = w - ml - mr, ph = h - mt - mb;
  const size_t n = recall_per_layer.size();
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" viewBox=\"0 0 " << w << ' ' << h << "\">\n";
  os << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
     << mt + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
     << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = tick / 4.0;
    const double y = mt + ph - v * ph;
    os << "<text x=\"" << ml - 8 << "\" y=\"" << y + 4
       << "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">" << fmt_g(v, 3)
       << "</text>\n";
  }
  if (n >= 1) {
    os << "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < n; ++i) {
      const double x = n == 1 ? ml + pw / 2.0 : ml + (pw * static_cast<double>(i)) / (n - 1);
      const double y = mt + ph - std::clamp(recall_per_layer[i], 0.0, 1.0) * ph;
      os << x << ',' << y << (i + 1 < n ? " " : "");
    }
    os << "\"/>\n";
    for (size_t i = 0; i < n; ++i) {
      const double x = n == 1 ? ml + pw / 2.0 : ml + (pw * static_cast<double>(i)) / (n - 1);
      const double y = mt + ph - std::clamp(recall_per_layer[i], 0.0, 1.0) * ph;
      os << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"3\" fill=\"#1f6fb2\"/>\n";
      os << "<text x=\"" << x << "\" y=\"" << mt + ph + 16
         << "\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">" << (i + 1)
         << "</text>\n";
    }
  }
  os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << h - 8
     << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">decoder layer</text>\n";
  os << "<text x=\"14\" y=\"" << mt + ph / 2
     << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 14 "
     << mt + ph / 2 << ")\">recall@50</text>\n";
  os << "</svg>\n";
}

}  // namespace qseg
