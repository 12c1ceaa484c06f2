// Synthetic scene generation: boxes, spheres, and thin panels placed with
// disjoint axis-aligned supports, surface-sampled points with exact normals,
// uniform background clutter, and classes balanced over the dataset by a
// shuffled class deck instead of independent draws.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "qseg/checkpoint.hpp"
#include "qseg/config.hpp"
#include "qseg/rng.hpp"
#include "qseg/scene.hpp"

namespace qseg {

namespace detail {

struct InstanceShape {
  int shape = 0;   // 0 box, 1 sphere, 2 panel
  int bucket = 0;  // 0 small, 1 large
  double center[3] = {0, 0, 0};
  double half[3] = {0, 0, 0};  // AABB half extents; panel has 0 along its normal axis
  int panel_axis = 0;          // horizontal normal axis for panels
  double radius = 0.0;         // spheres
};

inline void draw_shape_size(InstanceShape& inst, Rng& rng) {
  switch (inst.shape) {
    case 0:
      for (int a = 0; a < 3; ++a)
        inst.half[a] = inst.bucket ? rng.uniform(0.30, 0.50) : rng.uniform(0.12, 0.22);
      break;
    case 1:
      inst.radius = inst.bucket ? rng.uniform(0.28, 0.45) : rng.uniform(0.12, 0.20);
      for (int a = 0; a < 3; ++a) inst.half[a] = inst.radius;
      break;
    default: {
      const double w = inst.bucket ? rng.uniform(0.60, 1.00) : rng.uniform(0.25, 0.45);
      const double h = inst.bucket ? rng.uniform(0.60, 1.00) : rng.uniform(0.25, 0.45);
      inst.panel_axis = rng.uniform_int(2);
      inst.half[inst.panel_axis] = 0.0;
      inst.half[1 - inst.panel_axis] = w / 2.0;
      inst.half[2] = h / 2.0;
      break;
    }
  }
}

inline bool aabb_gap_ok(const InstanceShape& a, const InstanceShape& b, double gap) {
  for (int ax = 0; ax < 3; ++ax)
    if (std::fabs(a.center[ax] - b.center[ax]) >= a.half[ax] + b.half[ax] + gap) return true;
  return false;
}

// Surface point with exact unit normal, in instance-local coordinates.
inline void sample_surface(const InstanceShape& inst, Rng& rng, double p[3], double n[3]) {
  if (inst.shape == 1) {
    const double z = 1.0 - 2.0 * rng.uniform();
    const double phi = 2.0 * 3.14159265358979323846 * rng.uniform();
    const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
    n[0] = s * std::cos(phi);
    n[1] = s * std::sin(phi);
    n[2] = z;
    for (int a = 0; a < 3; ++a) p[a] = inst.radius * n[a];
    return;
  }
  if (inst.shape == 2) {
    const int na = inst.panel_axis, ta = 1 - inst.panel_axis;
    p[na] = 0.0;
    p[ta] = rng.uniform(-inst.half[ta], inst.half[ta]);
    p[2] = rng.uniform(-inst.half[2], inst.half[2]);
    n[0] = n[1] = n[2] = 0.0;
    n[na] = rng.uniform() < 0.5 ? 1.0 : -1.0;
    return;
  }
  // Box: choose a face pair proportionally to its area, then a sign.
  const double ax = inst.half[1] * inst.half[2];
  const double ay = inst.half[0] * inst.half[2];
  const double az = inst.half[0] * inst.half[1];
  const double total = ax + ay + az;
  const double pick = rng.uniform(0.0, total);
  const int face = pick < ax ? 0 : (pick < ax + ay ? 1 : 2);
  const double sign = rng.uniform() < 0.5 ? 1.0 : -1.0;
  n[0] = n[1] = n[2] = 0.0;
  n[face] = sign;
  for (int a = 0; a < 3; ++a)
    p[a] = a == face ? sign * inst.half[a] : rng.uniform(-inst.half[a], inst.half[a]);
}

}  // namespace detail

// One scene: the class of each instance is supplied by the caller so the
// dataset-level class mixture can be balanced.
inline Scene make_scene(const SyntheticSpec& spec, const std::vector<int>& classes, Rng& rng) {
  constexpr double kGap = 0.08;
  constexpr double kWallMargin = 0.05;

  std::vector<detail::InstanceShape> placed;
  std::vector<int> placed_class;
  for (int cls : classes) {
    detail::InstanceShape inst;
    if (spec.num_classes == 6) {
      inst.shape = cls / 2;
      inst.bucket = cls % 2;
    } else {
      inst.shape = cls;
      inst.bucket = rng.uniform_int(2);
    }
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      detail::draw_shape_size(inst, rng);
      ok = true;
      for (int a = 0; a < 3 && ok; ++a) {
        const double lo = inst.half[a] + kWallMargin;
        const double hi = spec.extent[a] - inst.half[a] - kWallMargin;
        if (lo > hi) {
          ok = false;
          break;
        }
        inst.center[a] = rng.uniform(lo, hi);
      }
      for (const detail::InstanceShape& other : placed)
        if (ok && !detail::aabb_gap_ok(inst, other, kGap)) ok = false;
    }
    if (!ok) break;  // scene is full; keep the instances that fit
    placed.push_back(inst);
    placed_class.push_back(cls);
  }
  if (placed.empty()) throw std::runtime_error("make_scene: extent too small for any instance");

  Scene s;
  s.num_classes = spec.num_classes;
  s.instance_class = placed_class;

  auto push_point = [&](const double p[3], const double c[3], const double n[3], int id) {
    const int r = s.pos.rows;
    s.pos.v.insert(s.pos.v.end(), {p[0], p[1], p[2]});
    s.pos.rows = r + 1;
    s.color.v.insert(s.color.v.end(), {c[0], c[1], c[2]});
    s.color.rows = r + 1;
    s.normal.v.insert(s.normal.v.end(), {n[0], n[1], n[2]});
    s.normal.rows = r + 1;
    s.instance_id.push_back(id);
  };
  s.pos.cols = s.color.cols = s.normal.cols = 3;

  int surface_points = 0;
  for (size_t i = 0; i < placed.size(); ++i) {
    const detail::InstanceShape& inst = placed[i];
    const int npts = spec.min_points + rng.uniform_int(spec.max_points - spec.min_points + 1);
    double base[3];
    for (double& b : base) b = rng.uniform(0.15, 0.9);
    for (int k = 0; k < npts; ++k) {
      double p[3], n[3], c[3];
      detail::sample_surface(inst, rng, p, n);
      for (int a = 0; a < 3; ++a) {
        p[a] += inst.center[a];
        c[a] = std::clamp(base[a] + rng.normal(0.0, 0.03), 0.0, 1.0);
      }
      push_point(p, c, n, static_cast<int>(i));
    }
    surface_points += npts;
  }

  const int nclutter = static_cast<int>(std::lround(
      surface_points * spec.clutter_fraction / (1.0 - spec.clutter_fraction)));
  for (int k = 0; k < nclutter; ++k) {
    double p[3], n[3], c[3];
    for (int a = 0; a < 3; ++a) {
      p[a] = rng.uniform(0.0, spec.extent[a]);
      c[a] = rng.uniform();
    }
    const double z = 1.0 - 2.0 * rng.uniform();
    const double phi = 2.0 * 3.14159265358979323846 * rng.uniform();
    const double sxy = std::sqrt(std::max(0.0, 1.0 - z * z));
    n[0] = sxy * std::cos(phi);
    n[1] = sxy * std::sin(phi);
    n[2] = z;
    push_point(p, c, n, -1);
  }
  return s;
}

// Deterministic dataset: scene i is generated from (seed, i); instance
// classes cycle through a reshuffled full deck so every class appears with
// near-equal frequency across the dataset.
inline std::vector<std::string> generate_synthetic(const SyntheticSpec& spec, uint64_t seed,
                                                   const std::string& out_dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + out_dir + ": " + ec.message());

  Rng deck_rng(mix_seed(seed, 0x6465636bULL));  // deck state shared across scenes
  std::vector<int> deck;
  size_t deck_pos = 0;
  auto next_class = [&]() {
    if (deck_pos >= deck.size()) {
      deck.resize(static_cast<size_t>(spec.num_classes));
      for (int c = 0; c < spec.num_classes; ++c) deck[static_cast<size_t>(c)] = c;
      deck_rng.shuffle(deck);
      deck_pos = 0;
    }
    return deck[deck_pos++];
  };

  std::vector<std::string> paths;
  for (int i = 0; i < spec.scenes; ++i) {
    Rng rng(mix_seed(seed, 0x7363656eULL + static_cast<uint64_t>(i)));
    const int count = spec.min_instances + rng.uniform_int(spec.max_instances - spec.min_instances + 1);
    std::vector<int> classes;
    for (int k = 0; k < count; ++k) classes.push_back(next_class());
    const Scene scene = make_scene(spec, classes, rng);

    char name[32];
    std::snprintf(name, sizeof(name), "scene_%04d.txt", i);
    const std::string path = (std::filesystem::path(out_dir) / name).string();
    save_scene(scene, path);
    paths.push_back(path);
  }
  return paths;
}

inline std::vector<std::string> list_scene_files(const std::string& dir) {
  if (!std::filesystem::is_directory(dir))
    throw std::runtime_error("dataset directory not found: " + dir);
  std::vector<std::string> paths;
  for (const auto& ent : std::filesystem::directory_iterator(dir))
    if (ent.is_regular_file() && ent.path().extension() == ".txt")
      paths.push_back(ent.path().string());
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw std::runtime_error("no scene files (*.txt) in " + dir);
  return paths;
}

// Order-independent content checksum over a dataset directory.
inline std::string dataset_checksum(const std::string& dir) {
  uint64_t h = 1469598103934665603ULL;
  for (const std::string& path : list_scene_files(dir)) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    const std::string body = buf.str();
    const std::string name = std::filesystem::path(path).filename().string();
    h = fnv1a64(name, h);
    h = fnv1a64(body, h);
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return std::string(out);
}

}  // namespace qseg
