// Point-cloud scene container, its on-disk text format, voxel-grid
// downsampling and grid superpoint construction.
//
// File layout (whitespace separated, floats at 9 significant digits):
//   line 1:            N I C
//   next I lines:      instance_id class_id          (ids are exactly 0..I-1)
//   next N lines:      x y z r g b nx ny nz instance_id   (-1 = background)
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <unordered_map>
#include <vector>

#include "qseg/matrix.hpp"
#include "qseg/text_io.hpp"

namespace qseg {

struct Scene {
  Mat pos;     // N x 3, meters
  Mat color;   // N x 3, in [0, 1]
  Mat normal;  // N x 3, unit length
  std::vector<int> instance_id;     // N, -1 for background
  std::vector<int> instance_class;  // indexed by instance id, values in [0, num_classes)
  int num_classes = 0;

  int num_points() const { return pos.rows; }
  int num_instances() const { return static_cast<int>(instance_class.size()); }
};

inline void save_scene(const Scene& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << s.num_points() << ' ' << s.num_instances() << ' ' << s.num_classes << '\n';
  for (int i = 0; i < s.num_instances(); ++i) out << i << ' ' << s.instance_class[i] << '\n';
  for (int i = 0; i < s.num_points(); ++i) {
    const double* p = s.pos.row(i);
    const double* c = s.color.row(i);
    const double* n = s.normal.row(i);
    out << fmt_g(p[0], 9) << ' ' << fmt_g(p[1], 9) << ' ' << fmt_g(p[2], 9) << ' '
        << fmt_g(c[0], 9) << ' ' << fmt_g(c[1], 9) << ' ' << fmt_g(c[2], 9) << ' '
        << fmt_g(n[0], 9) << ' ' << fmt_g(n[1], 9) << ' ' << fmt_g(n[2], 9) << ' '
        << s.instance_id[i] << '\n';
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

inline Scene load_scene(const std::string& path) {
  LineReader rd(path);
  std::string line;
  if (!rd.next(line)) rd.fail("empty file, expected header");
  auto toks = split_ws(line);
  if (toks.size() != 3) rd.fail("header must be 'N I C'");
  bool ok0, ok1, ok2;
  const long long n = parse_int(toks[0], ok0);
  const long long ninst = parse_int(toks[1], ok1);
  const long long ncls = parse_int(toks[2], ok2);
  if (!ok0 || !ok1 || !ok2) rd.fail("header must contain three integers");
  if (n < 0 || ninst < 0 || ncls < 0) rd.fail("negative count in header");

  Scene s;
  s.num_classes = static_cast<int>(ncls);
  s.instance_class.assign(static_cast<size_t>(ninst), -1);
  std::vector<bool> seen(static_cast<size_t>(ninst), false);
  for (long long i = 0; i < ninst; ++i) {
    if (!rd.next(line)) rd.fail("unexpected end of file in instance table");
    toks = split_ws(line);
    if (toks.size() != 2) rd.fail("instance line must be 'instance_id class_id'");
    const long long id = parse_int(toks[0], ok0);
    const long long cls = parse_int(toks[1], ok1);
    if (!ok0 || !ok1) rd.fail("instance line must contain two integers");
    if (id < 0 || id >= ninst) rd.fail("instance id " + std::to_string(id) + " out of range");
    if (seen[static_cast<size_t>(id)]) rd.fail("duplicate instance id " + std::to_string(id));
    if (cls < 0 || cls >= ncls) rd.fail("class id " + std::to_string(cls) + " out of range");
    seen[static_cast<size_t>(id)] = true;
    s.instance_class[static_cast<size_t>(id)] = static_cast<int>(cls);
  }

  s.pos = Mat(static_cast<int>(n), 3);
  s.color = Mat(static_cast<int>(n), 3);
  s.normal = Mat(static_cast<int>(n), 3);
  s.instance_id.assign(static_cast<size_t>(n), -1);
  for (long long i = 0; i < n; ++i) {
    if (!rd.next(line)) rd.fail("unexpected end of file in point list");
    toks = split_ws(line);
    if (toks.size() != 10) rd.fail("point line must have 10 fields");
    double f[9];
    for (int k = 0; k < 9; ++k) {
      bool ok;
      f[k] = parse_double(toks[static_cast<size_t>(k)], ok);
      if (!ok || !std::isfinite(f[k])) rd.fail("bad numeric field '" + toks[static_cast<size_t>(k)] + "'");
    }
    bool ok;
    const long long id = parse_int(toks[9], ok);
    if (!ok) rd.fail("bad instance id '" + toks[9] + "'");
    if (id != -1 && (id < 0 || id >= ninst))
      rd.fail("point references instance " + std::to_string(id) + " with no table entry");
    const int r = static_cast<int>(i);
    for (int k = 0; k < 3; ++k) {
      s.pos.at(r, k) = f[k];
      s.color.at(r, k) = f[3 + k];
      s.normal.at(r, k) = f[6 + k];
    }
    for (int k = 0; k < 3; ++k)
      if (s.color.at(r, k) < 0.0 || s.color.at(r, k) > 1.0) rd.fail("color out of [0,1]");
    const double nn = std::sqrt(f[6] * f[6] + f[7] * f[7] + f[8] * f[8]);
    if (std::fabs(nn - 1.0) > 1e-6) rd.fail("normal is not unit length");
    s.instance_id[static_cast<size_t>(i)] = static_cast<int>(id);
  }
  if (rd.next(line)) {
    if (!split_ws(line).empty()) rd.fail("trailing content after point list");
  }
  return s;
}

// ---------------------------------------------------------------------------

struct VoxelKey {
  int64_t x, y, z;
  bool operator<(const VoxelKey& o) const {
    if (x != o.x) return x < o.x;
    if (y != o.y) return y < o.y;
    return z < o.z;
  }
  bool operator==(const VoxelKey& o) const { return x == o.x && y == o.y && z == o.z; }
};

inline VoxelKey grid_key(const double* p, double cell) {
  return {static_cast<int64_t>(std::floor(p[0] / cell)),
          static_cast<int64_t>(std::floor(p[1] / cell)),
          static_cast<int64_t>(std::floor(p[2] / cell))};
}

struct VoxelizeResult {
  Scene scene;
  std::vector<int> point_to_voxel;  // maps input point index -> output row
};

// Averages position/color/normal per occupied cell; the instance id is the
// majority vote with ties to the smaller id. Output rows are ordered by
// lexicographic cell key so the result does not depend on hash iteration.
inline VoxelizeResult voxelize_with_map(const Scene& s, double voxel_size) {
  if (voxel_size <= 0.0) throw std::invalid_argument("voxelize: voxel_size must be positive");
  const int n = s.num_points();
  std::vector<std::pair<VoxelKey, int>> keyed(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) keyed[static_cast<size_t>(i)] = {grid_key(s.pos.row(i), voxel_size), i};
  std::stable_sort(keyed.begin(), keyed.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });

  VoxelizeResult res;
  res.point_to_voxel.assign(static_cast<size_t>(n), -1);
  Scene& out = res.scene;
  out.num_classes = s.num_classes;
  out.instance_class = s.instance_class;

  std::vector<std::array<double, 9>> acc;  // pos, color, normal sums
  std::vector<int> counts;
  std::vector<int> ids;
  size_t i = 0;
  while (i < keyed.size()) {
    size_t j = i;
    std::array<double, 9> a{};
    std::map<int, int> votes;
    while (j < keyed.size() && keyed[j].first == keyed[i].first) {
      const int src = keyed[j].second;
      const double* p = s.pos.row(src);
      const double* c = s.color.row(src);
      const double* nr = s.normal.row(src);
      for (int k = 0; k < 3; ++k) {
        a[static_cast<size_t>(k)] += p[k];
        a[static_cast<size_t>(3 + k)] += c[k];
        a[static_cast<size_t>(6 + k)] += nr[k];
      }
      ++votes[s.instance_id[static_cast<size_t>(src)]];
      res.point_to_voxel[static_cast<size_t>(src)] = static_cast<int>(acc.size());
      ++j;
    }
    int best_id = -1, best_votes = -1;
    for (const auto& [id, cnt] : votes) {  // ascending id, so ties keep the smaller
      if (cnt > best_votes) {
        best_votes = cnt;
        best_id = id;
      }
    }
    acc.push_back(a);
    counts.push_back(static_cast<int>(j - i));
    ids.push_back(best_id);
    i = j;
  }

  const int m = static_cast<int>(acc.size());
  out.pos = Mat(m, 3);
  out.color = Mat(m, 3);
  out.normal = Mat(m, 3);
  out.instance_id = ids;
  for (int r = 0; r < m; ++r) {
    const double inv = 1.0 / counts[static_cast<size_t>(r)];
    const auto& a = acc[static_cast<size_t>(r)];
    for (int k = 0; k < 3; ++k) {
      out.pos.at(r, k) = a[static_cast<size_t>(k)] * inv;
      out.color.at(r, k) = std::min(1.0, std::max(0.0, a[static_cast<size_t>(3 + k)] * inv));
    }
    double nx = a[6] * inv, ny = a[7] * inv, nz = a[8] * inv;
    const double nn = std::sqrt(nx * nx + ny * ny + nz * nz);
    if (nn < 1e-12) {
      nx = 0.0; ny = 0.0; nz = 1.0;  // members cancelled out; any unit vector works
    } else {
      nx /= nn; ny /= nn; nz /= nn;
    }
    out.normal.at(r, 0) = nx;
    out.normal.at(r, 1) = ny;
    out.normal.at(r, 2) = nz;
  }
  return res;
}

inline Scene voxelize(const Scene& s, double voxel_size) {
  return voxelize_with_map(s, voxel_size).scene;
}

// ---------------------------------------------------------------------------

struct Partition {
  std::vector<int> assign;  // per point, superpoint id in [0, count)
  int count = 0;

  std::vector<int> sizes() const {
    std::vector<int> sz(static_cast<size_t>(count), 0);
    for (int a : assign) ++sz[static_cast<size_t>(a)];
    return sz;
  }
};

struct VoxelKeyHash {
  size_t operator()(const VoxelKey& k) const {
    uint64_t h = 1469598103934665603ULL;
    for (int64_t c : {k.x, k.y, k.z}) {
      h ^= static_cast<uint64_t>(c);
      h *= 1099511628211ULL;
    }
    return static_cast<size_t>(h);
  }
};

// Grid superpoints: one segment per occupied cell, ids dense in [0, count)
// in order of first appearance along the point list.
inline Partition build_superpoints(const Scene& s, double grid_size) {
  if (grid_size <= 0.0) throw std::invalid_argument("build_superpoints: grid_size must be positive");
  Partition part;
  part.assign.assign(static_cast<size_t>(s.num_points()), -1);
  std::unordered_map<VoxelKey, int, VoxelKeyHash> table;
  table.reserve(static_cast<size_t>(s.num_points()));
  for (int i = 0; i < s.num_points(); ++i) {
    const VoxelKey k = grid_key(s.pos.row(i), grid_size);
    auto [it, inserted] = table.try_emplace(k, part.count);
    if (inserted) ++part.count;
    part.assign[static_cast<size_t>(i)] = it->second;
  }
  return part;
}

// Mean-pools rows of x into one row per superpoint. Plain-value version; the
// differentiable twin lives on the tape.
inline Mat pool_rows(const Mat& x, const Partition& part) {
  if (x.rows != static_cast<int>(part.assign.size()))
    throw std::invalid_argument("pool_rows: row count does not match partition");
  Mat out(part.count, x.cols);
  const auto sz = part.sizes();
  for (int i = 0; i < x.rows; ++i) {
    const int g = part.assign[static_cast<size_t>(i)];
    double* d = out.row(g);
    const double* src = x.row(i);
    for (int c = 0; c < x.cols; ++c) d[c] += src[c];
  }
  for (int g = 0; g < part.count; ++g) {
    if (sz[static_cast<size_t>(g)] == 0)
      throw std::invalid_argument("pool_rows: empty superpoint " + std::to_string(g));
    const double inv = 1.0 / sz[static_cast<size_t>(g)];
    double* d = out.row(g);
    for (int c = 0; c < x.cols; ++c) d[c] *= inv;
  }
  return out;
}

inline Mat broadcast_rows(const Mat& pooled, const Partition& part) {
  Mat out(static_cast<int>(part.assign.size()), pooled.cols);
  for (int i = 0; i < out.rows; ++i) {
    const double* src = pooled.row(part.assign[static_cast<size_t>(i)]);
    double* d = out.row(i);
    for (int c = 0; c < pooled.cols; ++c) d[c] = src[c];
  }
  return out;
}

}  // namespace qseg
