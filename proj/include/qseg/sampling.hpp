// Farthest point sampling and brute-force k-nearest-neighbour lookup.
// Both are exact and deterministic: maximin comparisons use squared
// distances (monotone in the Euclidean distance) and every tie breaks
// toward the smaller index.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "qseg/matrix.hpp"

namespace qseg {

inline double dist2_row(const double* a, const double* b, int dim) {
  double acc = 0.0;
  for (int k = 0; k < dim; ++k) {
    const double d = a[k] - b[k];
    acc += d * d;
  }
  return acc;
}

// Greedy farthest point sampling over positions (N x 3). The first pick is
// seed mod N; each later pick maximizes the distance to the chosen set.
// Asking for more samples than points returns all N picks in chosen order.
inline std::vector<int> fps(const Mat& positions, int count, uint64_t seed) {
  const int n = positions.rows;
  if (n <= 0) throw std::invalid_argument("fps: empty point set");
  if (count <= 0) throw std::invalid_argument("fps: count must be positive");
  const int take = std::min(count, n);

  std::vector<int> picks;
  picks.reserve(static_cast<size_t>(take));
  std::vector<double> best(static_cast<size_t>(n), std::numeric_limits<double>::infinity());

  int cur = static_cast<int>(seed % static_cast<uint64_t>(n));
  picks.push_back(cur);
  for (int round = 1; round < take; ++round) {
    const double* p = positions.row(cur);
    for (int i = 0; i < n; ++i) {
      const double d2 = dist2_row(positions.row(i), p, positions.cols);
      if (d2 < best[static_cast<size_t>(i)]) best[static_cast<size_t>(i)] = d2;
    }
    int arg = -1;
    double far = -1.0;
    for (int i = 0; i < n; ++i) {
      if (best[static_cast<size_t>(i)] > far) {  // strict: ties keep the smaller index
        far = best[static_cast<size_t>(i)];
        arg = i;
      }
    }
    cur = arg;
    picks.push_back(cur);
  }
  return picks;
}

struct KnnResult {
  std::vector<int> idx;  // row-major Q x K
  Mat dist;              // Q x K, true Euclidean distances

  int at(int q, int k, int K) const { return idx[static_cast<size_t>(q) * K + k]; }
};

// Exact brute-force KNN of each query row against the reference rows,
// neighbours ordered by ascending distance, ties by smaller reference index.
inline KnnResult knn(const Mat& queries, const Mat& refs, int k) {
  if (queries.cols != refs.cols) throw std::invalid_argument("knn: dimension mismatch");
  if (k <= 0) throw std::invalid_argument("knn: k must be positive");
  if (k > refs.rows)
    throw std::invalid_argument("knn: k=" + std::to_string(k) + " exceeds reference count " +
                                std::to_string(refs.rows));
  const int q = queries.rows, L = refs.rows;
  KnnResult res;
  res.idx.assign(static_cast<size_t>(q) * k, -1);
  res.dist = Mat(q, k);
  std::vector<std::pair<double, int>> cand(static_cast<size_t>(L));
  for (int i = 0; i < q; ++i) {
    const double* qp = queries.row(i);
    for (int j = 0; j < L; ++j)
      cand[static_cast<size_t>(j)] = {dist2_row(qp, refs.row(j), refs.cols), j};
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (int t = 0; t < k; ++t) {
      res.idx[static_cast<size_t>(i) * k + t] = cand[static_cast<size_t>(t)].second;
      res.dist.at(i, t) = std::sqrt(cand[static_cast<size_t>(t)].first);
    }
  }
  return res;
}

}  // namespace qseg
