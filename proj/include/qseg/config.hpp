// Line-oriented `key = value` configuration files for the pipeline and the
// synthetic scene generator. Unknown keys, duplicates, and out-of-range
// values are rejected with line numbers.
#pragma once

#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "qseg/decoder.hpp"
#include "qseg/matching.hpp"
#include "qseg/text_io.hpp"

namespace qseg {

enum class InitMode { kAgent, kFpsZero, kLearnable };

inline const char* init_mode_name(InitMode m) {
  switch (m) {
    case InitMode::kAgent: return "agent";
    case InitMode::kFpsZero: return "fps_zero";
    case InitMode::kLearnable: return "learnable";
  }
  return "?";
}

namespace detail {

struct KeyValueFile {
  // insertion-ordered keys for deterministic error reporting
  std::map<std::string, std::pair<std::string, int>> entries;  // key -> (value, line)
  std::set<std::string> consumed;
  std::string path;

  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  void parse(std::istream& is, const std::string& label) {
    path = label;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      const size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty())
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": empty key");
      if (value.empty())
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": empty value for '" + key + "'");
      if (entries.count(key))
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
      entries.emplace(key, std::make_pair(value, line_no));
    }
  }

  bool has(const std::string& key) const { return entries.count(key) != 0; }

  std::string raw(const std::string& key) {
    consumed.insert(key);
    return entries.at(key).first;
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    const int line = entries.count(key) ? entries.at(key).second : 0;
    throw std::runtime_error(path + ":" + std::to_string(line) + ": key '" + key + "' " + msg);
  }

  double get_double(const std::string& key, double def, double lo, double hi) {
    if (!has(key)) return def;
    bool ok = false;
    const double v = parse_double(raw(key), ok);
    if (!ok) fail(key, "is not a number");
    if (!(v >= lo && v <= hi))
      fail(key, "out of range [" + fmt_g(lo, 6) + ", " + fmt_g(hi, 6) + "]");
    return v;
  }

  long long get_int(const std::string& key, long long def, long long lo, long long hi) {
    if (!has(key)) return def;
    bool ok = false;
    const long long v = parse_int(raw(key), ok);
    if (!ok) fail(key, "is not an integer");
    if (v < lo || v > hi)
      fail(key, "out of range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return v;
  }

  bool get_switch(const std::string& key, bool def) {
    if (!has(key)) return def;
    const std::string v = raw(key);
    if (v == "on") return true;
    if (v == "off") return false;
    fail(key, "must be on or off");
  }

  std::string get_string(const std::string& key, const std::string& def) {
    return has(key) ? raw(key) : def;
  }

  void reject_unknown() const {
    for (const auto& [key, ent] : entries)
      if (!consumed.count(key))
        throw std::runtime_error(path + ":" + std::to_string(ent.second) + ": unknown key '" + key + "'");
  }
};

}  // namespace detail

struct Config {
  // model
  int num_layers = 4;
  int num_heads = 4;
  int hidden_dim = 64;
  int ffn_dim = 256;
  int fourier_per_axis = 4;
  int pos_head_dim = 32;
  int num_queries = 32;  // sampled per scene
  int num_agents = 32;   // shared trainable pool
  int knn = 3;           // agents interpolated per query
  int d1 = 4;            // queries retained per fused transition
  int d2 = 2;            // fused transitions at the tail of the decoder
  double mask_bin_threshold = 0.5;
  int num_classes = 6;  // foreground classes
  // loss
  double lambda_ce = 0.5;
  double lambda_bce = 1.0;
  double lambda_dice = 1.0;
  double lambda_center = 0.5;
  double lambda_score = 0.5;
  // data
  double voxel_size = 0.06;
  double grid_size = 0.25;
  std::string train_dir;
  std::string eval_dir;
  // training
  int epochs = 200;
  double learning_rate = 1e-3;
  uint64_t seed = 0;
  // inference
  double nms_threshold = 0.5;
  double score_floor = 0.0;
  // ablation toggles
  InitMode init_mode = InitMode::kAgent;
  bool hqfd = true;
  bool use_nms = true;
  bool use_coe = false;

  DecoderConfig decoder() const {
    DecoderConfig d;
    d.num_layers = num_layers;
    d.heads = num_heads;
    d.hidden_dim = hidden_dim;
    d.ffn_dim = ffn_dim;
    d.d1 = d1;
    d.d2 = d2;
    d.mask_bin_threshold = mask_bin_threshold;
    d.hqfd = hqfd;
    d.num_classes = num_classes;
    d.fourier_per_axis = fourier_per_axis;
    d.pos_head_dim = pos_head_dim;
    return d;
  }

  LossWeights loss_weights() const {
    return {lambda_ce, lambda_bce, lambda_dice, lambda_center, lambda_score};
  }

  void validate() const {
    decoder().validate();
    if (num_queries < 1) throw std::runtime_error("config: num_queries must be >= 1");
    if (num_agents < 1) throw std::runtime_error("config: num_agents must be >= 1");
    if (knn < 1 || knn > num_agents) throw std::runtime_error("config: knn must lie in [1, num_agents]");
    if (epochs < 1) throw std::runtime_error("config: epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw std::runtime_error("config: learning_rate must be > 0");
    if (!(voxel_size > 0.0)) throw std::runtime_error("config: voxel_size must be > 0");
    if (!(grid_size > 0.0)) throw std::runtime_error("config: grid_size must be > 0");
    if (!(nms_threshold > 0.0 && nms_threshold <= 1.0))
      throw std::runtime_error("config: nms_threshold must lie in (0, 1]");
    if (score_floor < 0.0) throw std::runtime_error("config: score_floor must be >= 0");
    if (lambda_ce < 0.0 || lambda_bce < 0.0 || lambda_dice < 0.0 || lambda_center < 0.0 ||
        lambda_score < 0.0)
      throw std::runtime_error("config: loss weights must be >= 0");
  }
};

inline Config parse_config(std::istream& is, const std::string& label) {
  detail::KeyValueFile kv;
  kv.parse(is, label);
  Config c;
  c.num_layers = static_cast<int>(kv.get_int("num_layers", c.num_layers, 2, 64));
  c.num_heads = static_cast<int>(kv.get_int("num_heads", c.num_heads, 1, 64));
  c.hidden_dim = static_cast<int>(kv.get_int("hidden_dim", c.hidden_dim, 1, 4096));
  c.ffn_dim = static_cast<int>(kv.get_int("ffn_dim", c.ffn_dim, 1, 16384));
  c.fourier_per_axis = static_cast<int>(kv.get_int("fourier_per_axis", c.fourier_per_axis, 1, 64));
  c.pos_head_dim = static_cast<int>(kv.get_int("pos_head_dim", c.pos_head_dim, 1, 4096));
  c.num_queries = static_cast<int>(kv.get_int("num_queries", c.num_queries, 1, 100000));
  c.num_agents = static_cast<int>(kv.get_int("num_agents", c.num_agents, 1, 100000));
  c.knn = static_cast<int>(kv.get_int("knn", c.knn, 1, 100000));
  c.d1 = static_cast<int>(kv.get_int("d1", c.d1, 1, 100000));
  c.d2 = static_cast<int>(kv.get_int("d2", c.d2, 1, 63));
  c.mask_bin_threshold = kv.get_double("mask_bin_threshold", c.mask_bin_threshold, 1e-9, 1.0 - 1e-9);
  c.num_classes = static_cast<int>(kv.get_int("num_classes", c.num_classes, 1, 1000));
  c.lambda_ce = kv.get_double("lambda_ce", c.lambda_ce, 0.0, 1e6);
  c.lambda_bce = kv.get_double("lambda_bce", c.lambda_bce, 0.0, 1e6);
  c.lambda_dice = kv.get_double("lambda_dice", c.lambda_dice, 0.0, 1e6);
  c.lambda_center = kv.get_double("lambda_center", c.lambda_center, 0.0, 1e6);
  c.lambda_score = kv.get_double("lambda_score", c.lambda_score, 0.0, 1e6);
  c.voxel_size = kv.get_double("voxel_size", c.voxel_size, 1e-6, 1e6);
  c.grid_size = kv.get_double("grid_size", c.grid_size, 1e-6, 1e6);
  c.train_dir = kv.get_string("train_dir", c.train_dir);
  c.eval_dir = kv.get_string("eval_dir", c.eval_dir);
  c.epochs = static_cast<int>(kv.get_int("epochs", c.epochs, 1, 1000000));
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate, 1e-12, 1e3);
  c.seed = static_cast<uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed), 0,
                                            std::numeric_limits<long long>::max()));
  c.nms_threshold = kv.get_double("nms_threshold", c.nms_threshold, 1e-9, 1.0);
  c.score_floor = kv.get_double("score_floor", c.score_floor, 0.0, 1.0);
  if (kv.has("init_mode")) {
    const std::string v = kv.raw("init_mode");
    if (v == "agent") c.init_mode = InitMode::kAgent;
    else if (v == "fps_zero") c.init_mode = InitMode::kFpsZero;
    else if (v == "learnable") c.init_mode = InitMode::kLearnable;
    else kv.fail("init_mode", "must be agent, fps_zero, or learnable");
  }
  c.hqfd = kv.get_switch("hqfd", c.hqfd);
  c.use_nms = kv.get_switch("use_nms", c.use_nms);
  c.use_coe = kv.get_switch("use_coe", c.use_coe);
  kv.reject_unknown();
  c.validate();
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  return parse_config(f, path);
}

// Scene generator parameters: shapes are boxes, spheres, and thin panels;
// classes come from shape type, optionally split by a size bucket.
struct SyntheticSpec {
  int scenes = 50;
  int min_instances = 5;
  int max_instances = 7;
  int min_points = 350;
  int max_points = 650;
  double clutter_fraction = 0.05;
  double extent[3] = {5.0, 5.0, 2.5};
  int num_classes = 6;  // 3 = shape only, 6 = shape x size bucket

  void validate() const {
    if (scenes < 1) throw std::runtime_error("spec: scenes must be >= 1");
    if (min_instances < 1 || max_instances < min_instances)
      throw std::runtime_error("spec: instance range invalid");
    if (min_points < 8 || max_points < min_points)
      throw std::runtime_error("spec: points-per-instance range invalid");
    if (clutter_fraction < 0.0 || clutter_fraction >= 1.0)
      throw std::runtime_error("spec: clutter_fraction must lie in [0, 1)");
    for (double e : extent)
      if (!(e > 0.0)) throw std::runtime_error("spec: extents must be > 0");
    if (num_classes != 3 && num_classes != 6)
      throw std::runtime_error("spec: num_classes must be 3 or 6");
  }
};

inline SyntheticSpec parse_synthetic_spec(std::istream& is, const std::string& label) {
  detail::KeyValueFile kv;
  kv.parse(is, label);
  SyntheticSpec s;
  s.scenes = static_cast<int>(kv.get_int("scenes", s.scenes, 1, 1000000));
  s.min_instances = static_cast<int>(kv.get_int("min_instances", s.min_instances, 1, 10000));
  s.max_instances = static_cast<int>(kv.get_int("max_instances", s.max_instances, 1, 10000));
  s.min_points = static_cast<int>(kv.get_int("min_points", s.min_points, 8, 10000000));
  s.max_points = static_cast<int>(kv.get_int("max_points", s.max_points, 8, 10000000));
  s.clutter_fraction = kv.get_double("clutter_fraction", s.clutter_fraction, 0.0, 0.999);
  s.extent[0] = kv.get_double("extent_x", s.extent[0], 1e-3, 1e4);
  s.extent[1] = kv.get_double("extent_y", s.extent[1], 1e-3, 1e4);
  s.extent[2] = kv.get_double("extent_z", s.extent[2], 1e-3, 1e4);
  s.num_classes = static_cast<int>(kv.get_int("num_classes", s.num_classes, 3, 6));
  kv.reject_unknown();
  s.validate();
  return s;
}

inline SyntheticSpec load_synthetic_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open generator spec file: " + path);
  return parse_synthetic_spec(f, path);
}

}  // namespace qseg
