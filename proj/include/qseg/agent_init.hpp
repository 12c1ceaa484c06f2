// Query initialization by agent interpolation: a set of L trainable agents
// (normalized positions + content) is refined into scene coordinates, each
// farthest-point-sampled scene point pulls content from its K nearest agents
// with inverse-distance weights, and the query positions take the sampled
// coordinates in the forward pass while routing gradient to the agents via
// the interpolated position (straight-through).
//
// The KNN weights and indices are constants on the tape: gradient reaches
// the agent positions only through the straight-through path, which is the
// whole point of that construction.
#pragma once

#include <numeric>
#include <vector>

#include "qseg/sampling.hpp"
#include "qseg/tape.hpp"

namespace qseg {

// A query set as tape nodes: positions in meters (S' x 3), content (S' x C),
// and per-row lineage ids tracing which sample (or fusion event) produced
// each row.
struct QuerySetN {
  Node positions;
  Node content;
  std::vector<int> lineage;

  int count(const Tape& t) const { return t.val(positions).rows; }
};

// out = positions_norm * (p_max - p_min) + p_min, rows in meters.
inline Node refine_agent_positions(Tape& t, Node positions_norm, const double p_min[3],
                                   const double p_max[3]) {
  Mat range(1, 3), lo(1, 3);
  for (int k = 0; k < 3; ++k) {
    if (p_max[k] < p_min[k]) throw std::invalid_argument("refine_agent_positions: p_max < p_min");
    range.at(0, k) = p_max[k] - p_min[k];
    lo.at(0, k) = p_min[k];
  }
  return t.add(t.mul(positions_norm, t.input(std::move(range))), t.input(std::move(lo)));
}

// W[i,j] = (dis[i,j] + eps)^-1, normalized per row. Plain values.
inline Mat interpolation_weights(const Mat& dis, double eps = 1e-8) {
  Mat w(dis.rows, dis.cols);
  for (int i = 0; i < dis.rows; ++i) {
    const double* d = dis.row(i);
    double* wr = w.row(i);
    double sum = 0.0;
    for (int j = 0; j < dis.cols; ++j) {
      if (d[j] < 0.0) throw std::invalid_argument("interpolation_weights: negative distance");
      wr[j] = 1.0 / (d[j] + eps);
      sum += wr[j];
    }
    for (int j = 0; j < dis.cols; ++j) wr[j] /= sum;
  }
  return w;
}

inline Node interpolate_content(Tape& t, Node agent_content, const Mat& w,
                                const std::vector<int>& idx) {
  return t.scatter_weighted_sum(agent_content, w, idx);
}

// Forward: the sampled coordinates, bit for bit. Backward: gradient flows
// into `refined` through phi = sum_j W[i,j] * refined[idx[i,j]].
inline Node straight_through_positions(Tape& t, const Mat& sampled, Node refined, const Mat& w,
                                       const std::vector<int>& idx) {
  Node phi = t.scatter_weighted_sum(refined, w, idx);
  return t.straight_through(t.input(sampled), phi);
}

struct InitQueriesResult {
  QuerySetN queries;
  std::vector<int> fps_indices;  // into scene positions
  Mat sampled;                   // S' x 3, the FPS coordinates
  Mat weights;                   // S' x K
  std::vector<int> knn_idx;      // S' x K row-major, into agents
};

// Full initialization for one scene. `scene_positions` are the (already
// downsampled) scene coordinates; bounds for Eq-style refinement are their
// componentwise min/max.
inline InitQueriesResult init_queries(Tape& t, const Mat& scene_positions, Parameter& positions_norm,
                                      Parameter& content, int S, int K, uint64_t seed) {
  InitQueriesResult res;
  res.fps_indices = fps(scene_positions, S, seed);
  const int s_actual = static_cast<int>(res.fps_indices.size());
  res.sampled = Mat(s_actual, 3);
  for (int i = 0; i < s_actual; ++i) {
    const double* p = scene_positions.row(res.fps_indices[static_cast<size_t>(i)]);
    for (int k = 0; k < 3; ++k) res.sampled.at(i, k) = p[k];
  }

  double lo[3], hi[3];
  for (int k = 0; k < 3; ++k) {
    lo[k] = scene_positions.at(0, k);
    hi[k] = scene_positions.at(0, k);
  }
  for (int i = 1; i < scene_positions.rows; ++i)
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::min(lo[k], scene_positions.at(i, k));
      hi[k] = std::max(hi[k], scene_positions.at(i, k));
    }

  Node pos_node = t.param(positions_norm);
  Node refined = refine_agent_positions(t, pos_node, lo, hi);

  // Neighbour search runs on the current refined agent coordinates as plain
  // values; distances and weights are constants on the tape by design.
  const KnnResult nn = knn(res.sampled, t.val(refined), K);
  res.knn_idx = nn.idx;
  res.weights = interpolation_weights(nn.dist);

  res.queries.content = interpolate_content(t, t.param(content), res.weights, res.knn_idx);
  res.queries.positions = straight_through_positions(t, res.sampled, refined, res.weights, res.knn_idx);
  res.queries.lineage.resize(static_cast<size_t>(s_actual));
  std::iota(res.queries.lineage.begin(), res.queries.lineage.end(), 0);
  return res;
}

}  // namespace qseg
