// Hungarian matching between per-layer predictions and ground truth with the
// four-term cost (class CE, dice, BCE, center L1).
//
// The assignment is the exact cost minimum over injective maps from the
// smaller side into the larger, with ties resolved to the lexicographically
// smallest (query, gt) pair list. Implementation: square-pad with zero-cost
// dummies, solve by shortest augmenting paths with dual potentials, then
// refine within the tight-edge graph (every perfect matching of which is
// optimal) by fixing, query by query, the smallest gt that still admits a
// completion. Generic costs have a single tight candidate per query, so the
// refinement does no extra work outside deliberate ties.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "qseg/decoder.hpp"
#include "qseg/matrix.hpp"

namespace qseg {

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (query, gt), ascending query index
  double total_cost = 0.0;
};

namespace detail {

// Shortest-augmenting-path LAP on a square cost matrix. Returns row->col
// matching and dual potentials with c[i][j] - u[i] - v[j] >= 0 (within
// rounding) and equality on matched edges.
struct SquareLap {
  std::vector<int> match_col;  // per row
  std::vector<double> u, v;
};

inline SquareLap solve_square_lap(const Mat& c) {
  const int n = c.rows;
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(n) + 1, 0);  // col -> row (1-based)
  std::vector<int> way(static_cast<size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n) + 1, std::numeric_limits<double>::infinity());
    std::vector<char> used(static_cast<size_t>(n) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = p[static_cast<size_t>(j0)];
      double delta = std::numeric_limits<double>::infinity();
      int j1 = -1;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = c.at(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  SquareLap res;
  res.match_col.assign(static_cast<size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[static_cast<size_t>(j)] >= 1) res.match_col[static_cast<size_t>(p[static_cast<size_t>(j)]) - 1] = j - 1;
  res.u.assign(u.begin() + 1, u.end());
  res.v.assign(v.begin() + 1, v.end());
  return res;
}

// Alternating-path search in the tight graph for the lexicographic
// refinement: row `start` needs a new column, never touching fixed rows or
// columns, rows currently matched elsewhere get reassigned recursively.
struct TightGraph {
  int n = 0;
  std::vector<std::vector<int>> adj;  // per row, ascending column ids
};

inline bool try_augment(const TightGraph& g, int row, std::vector<int>& row_col,
                        std::vector<int>& col_row, const std::vector<char>& row_fixed,
                        const std::vector<char>& col_fixed, std::vector<char>& visited) {
  for (int col : g.adj[static_cast<size_t>(row)]) {
    if (col_fixed[static_cast<size_t>(col)] || visited[static_cast<size_t>(col)]) continue;
    visited[static_cast<size_t>(col)] = 1;
    const int owner = col_row[static_cast<size_t>(col)];
    if (owner == -1 ||
        (!row_fixed[static_cast<size_t>(owner)] &&
         try_augment(g, owner, row_col, col_row, row_fixed, col_fixed, visited))) {
      row_col[static_cast<size_t>(row)] = col;
      col_row[static_cast<size_t>(col)] = row;
      return true;
    }
  }
  return false;
}

}  // namespace detail

// cost: queries x gts, both sides nonempty. Matches min(S', G) pairs.
inline Assignment hungarian(const Mat& cost) {
  const int nq = cost.rows, ng = cost.cols;
  if (nq < 1 || ng < 1) throw std::invalid_argument("hungarian: empty cost matrix");
  double cmax = 0.0;
  for (double x : cost.v) {
    if (!std::isfinite(x)) throw std::invalid_argument("hungarian: non-finite cost entry");
    cmax = std::max(cmax, std::fabs(x));
  }

  // Square padding: rows = queries (+ dummies), cols = gts (+ dummies),
  // dummy entries cost 0. Real-real edges of any optimal square assignment
  // form an optimal rectangular assignment and vice versa.
  const int n = std::max(nq, ng);
  Mat sq(n, n, 0.0);
  for (int i = 0; i < nq; ++i)
    for (int j = 0; j < ng; ++j) sq.at(i, j) = cost.at(i, j);

  const detail::SquareLap lap = detail::solve_square_lap(sq);
  const double tol = 1e-9 * (1.0 + cmax);

  // Tight graph: exactly the edges usable by some optimal square assignment.
  detail::TightGraph tg;
  tg.n = n;
  tg.adj.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (sq.at(i, j) - lap.u[static_cast<size_t>(i)] - lap.v[static_cast<size_t>(j)] <= tol)
        tg.adj[static_cast<size_t>(i)].push_back(j);

  std::vector<int> row_col = lap.match_col;
  std::vector<int> col_row(static_cast<size_t>(n), -1);
  for (int i = 0; i < n; ++i) col_row[static_cast<size_t>(row_col[static_cast<size_t>(i)])] = i;

  std::vector<char> row_fixed(static_cast<size_t>(n), 0), col_fixed(static_cast<size_t>(n), 0);

  // Fix queries in index order to the smallest gt that still completes to a
  // perfect tight matching; a query stays unmatched (dummy column) only when
  // no real gt is feasible, which is exactly when lex order wants it.
  for (int q = 0; q < nq; ++q) {
    const int cur = row_col[static_cast<size_t>(q)];
    int chosen = -1;
    for (int g : tg.adj[static_cast<size_t>(q)]) {
      if (g >= ng) break;  // adjacency is ascending; dummies all lie past ng
      if (col_fixed[static_cast<size_t>(g)]) continue;
      if (g == cur) {
        chosen = g;  // current matching already proves feasibility
        break;
      }
      // Probe: force (q, g), let the displaced owner re-augment.
      const int owner = col_row[static_cast<size_t>(g)];
      std::vector<int> rc = row_col, cr = col_row;
      rc[static_cast<size_t>(q)] = g;
      cr[static_cast<size_t>(g)] = q;
      if (cur != -1) cr[static_cast<size_t>(cur)] = -1;
      bool ok = true;
      if (owner != -1 && owner != q) {
        rc[static_cast<size_t>(owner)] = -1;
        std::vector<char> visited(static_cast<size_t>(n), 0);
        std::vector<char> rfix = row_fixed, cfix = col_fixed;
        rfix[static_cast<size_t>(q)] = 1;
        cfix[static_cast<size_t>(g)] = 1;
        ok = detail::try_augment(tg, owner, rc, cr, rfix, cfix, visited);
      }
      if (ok) {
        row_col = std::move(rc);
        col_row = std::move(cr);
        chosen = g;
        break;
      }
    }
    if (chosen != -1) {
      row_fixed[static_cast<size_t>(q)] = 1;
      col_fixed[static_cast<size_t>(chosen)] = 1;
    }
    // No real gt feasible: q keeps its dummy column; nothing to fix since
    // dummy columns are interchangeable and never compete with real ones.
  }

  Assignment out;
  for (int q = 0; q < nq; ++q) {
    const int g = row_col[static_cast<size_t>(q)];
    if (g < ng) {
      out.pairs.emplace_back(q, g);
      out.total_cost += cost.at(q, g);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

struct GroundTruthInstance {
  int class_id = 0;
  std::vector<uint8_t> sup_mask;  // over M superpoints
  double center[3] = {0.0, 0.0, 0.0};
};

struct LossWeights {
  double ce = 0.5;
  double bce = 1.0;
  double dice = 1.0;
  double center = 0.5;
  double score = 0.5;
};

// Plain-value prediction snapshot used by matching and by inference.
struct PredictionValues {
  Mat class_logits;  // S' x (C+1)
  Mat mask_logits;   // S' x M
  Mat centers;       // S' x 3
  Mat scores;        // S' x 1
  std::vector<int> lineage;
};

inline PredictionValues prediction_values(const Tape& t, const LayerPredictionN& p) {
  return {t.val(p.class_logits), t.val(p.mask_logits), t.val(p.centers), t.val(p.scores), p.lineage};
}

// Matching cost. The dice term uses the squared-denominator form
// 1 - 2*sum(p q)/(sum p^2 + sum q^2 + eps), and the weight order follows the
// loss weights as (class, then the two mask weights in loss order, then
// center), so `bce` scales the dice term and `dice` scales the BCE term.
inline Mat cost_matrix(const PredictionValues& pred, const std::vector<GroundTruthInstance>& gts,
                       const LossWeights& lw) {
  const int nq = pred.class_logits.rows;
  const int ng = static_cast<int>(gts.size());
  if (ng < 1) throw std::invalid_argument("cost_matrix: no ground truth instances");
  const int m = pred.mask_logits.cols;
  const int ncls = pred.class_logits.cols;
  constexpr double kDiceEps = 1e-6;

  // Per-query log-softmax and mask probabilities, computed once.
  Mat logp(nq, ncls);
  for (int q = 0; q < nq; ++q) {
    const double* src = pred.class_logits.row(q);
    double mx = src[0];
    for (int c = 1; c < ncls; ++c) mx = std::max(mx, src[c]);
    double sum = 0.0;
    for (int c = 0; c < ncls; ++c) sum += std::exp(src[c] - mx);
    const double lse = mx + std::log(sum);
    for (int c = 0; c < ncls; ++c) logp.at(q, c) = src[c] - lse;
  }
  Mat prob(nq, m), p2sum(nq, 1);
  for (int q = 0; q < nq; ++q) {
    double acc = 0.0;
    for (int c = 0; c < m; ++c) {
      const double p = stable_sigmoid(pred.mask_logits.at(q, c));
      prob.at(q, c) = p;
      acc += p * p;
    }
    p2sum.at(q, 0) = acc;
  }

  Mat cost(nq, ng);
  for (int g = 0; g < ng; ++g) {
    const GroundTruthInstance& gt = gts[static_cast<size_t>(g)];
    if (static_cast<int>(gt.sup_mask.size()) != m)
      throw std::invalid_argument("cost_matrix: gt mask width mismatch");
    double qsum = 0.0;
    for (uint8_t b : gt.sup_mask) qsum += b;
    for (int q = 0; q < nq; ++q) {
      const double ce = -logp.at(q, gt.class_id);
      double inter = 0.0, bce = 0.0;
      for (int c = 0; c < m; ++c) {
        const double p = prob.at(q, c);
        const double tgt = gt.sup_mask[static_cast<size_t>(c)];
        inter += p * tgt;
        const double logit = pred.mask_logits.at(q, c);
        // log(1+e^x) - t*x, the stable binary cross entropy on logits
        bce += (logit > 0.0 ? logit : 0.0) + std::log1p(std::exp(-std::fabs(logit))) - tgt * logit;
      }
      bce /= m;
      const double dice = 1.0 - 2.0 * inter / (p2sum.at(q, 0) + qsum + kDiceEps);
      double l1 = 0.0;
      for (int k = 0; k < 3; ++k) l1 += std::fabs(pred.centers.at(q, k) - gt.center[k]);
      cost.at(q, g) = lw.ce * ce + lw.bce * dice + lw.dice * bce + lw.center * l1;
    }
  }
  return cost;
}

}  // namespace qseg
