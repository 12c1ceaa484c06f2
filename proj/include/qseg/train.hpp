// Training loop, evaluation driver, and the ablation grid runner. One scene
// per optimizer step, polynomial learning-rate decay, seeded per-epoch
// shuffles, text checkpoints with optimizer state so runs resume exactly.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "qseg/checkpoint.hpp"
#include "qseg/eval.hpp"
#include "qseg/loss.hpp"
#include "qseg/model.hpp"
#include "qseg/optim.hpp"
#include "qseg/synthetic.hpp"

namespace qseg {

inline std::vector<PreparedScene> load_dataset(const std::string& dir, const Config& cfg) {
  std::vector<PreparedScene> scenes;
  for (const std::string& path : list_scene_files(dir))
    scenes.push_back(load_prepared_scene(path, cfg));
  return scenes;
}

// Training-time jitter: rotation about the vertical axis through the scene
// centroid, optional x/y mirrors, a bounded global translation, and a global
// color shift. Labels are untouched. There is deliberately no scaling (object
// size carries class information) and no tilt (so do normal statistics), and
// the color move is a shared shift so points of one instance keep matching
// each other. Draw order from rng is fixed: angle, mirrors, translation,
// color.
inline Scene augment_scene(const Scene& in, Rng& rng) {
  Scene out = in;
  const int n = in.num_points();
  double c[3] = {0, 0, 0};
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) c[a] += in.pos.at(i, a);
  for (double& v : c) v /= std::max(1, n);

  const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  const bool mirror_x = rng.uniform() < 0.5;
  const bool mirror_y = rng.uniform() < 0.5;
  const double tr[3] = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.25, 0.25)};
  const double cshift[3] = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                            rng.uniform(-0.05, 0.05)};

  const double ca = std::cos(angle), sa = std::sin(angle);
  for (int i = 0; i < n; ++i) {
    double x = in.pos.at(i, 0) - c[0], y = in.pos.at(i, 1) - c[1];
    double nx = in.normal.at(i, 0), ny = in.normal.at(i, 1);
    double rx = ca * x - sa * y, ry = sa * x + ca * y;
    double rnx = ca * nx - sa * ny, rny = sa * nx + ca * ny;
    if (mirror_x) {
      rx = -rx;
      rnx = -rnx;
    }
    if (mirror_y) {
      ry = -ry;
      rny = -rny;
    }
    out.pos.at(i, 0) = rx + c[0] + tr[0];
    out.pos.at(i, 1) = ry + c[1] + tr[1];
    out.pos.at(i, 2) = in.pos.at(i, 2) + tr[2];
    out.normal.at(i, 0) = rnx;
    out.normal.at(i, 1) = rny;
    for (int a = 0; a < 3; ++a)
      out.color.at(i, a) = std::clamp(in.color.at(i, a) + cshift[a], 0.0, 1.0);
  }
  return out;
}

struct TrainResult {
  int epochs_run = 0;  // completed epochs recorded in the checkpoint
  double final_epoch_loss = 0.0;
  std::string checkpoint_path;
  std::string log_path;
};

// Trains cfg.epochs epochs over cfg.train_dir. With resume_checkpoint the
// parameters, optimizer moments, and epoch counter are restored and training
// continues to the same cfg.epochs target; the log holds only the epochs this
// call ran. A positive stop_after_epochs checkpoints and returns after that
// many epochs of this call while the learning-rate schedule keeps targeting
// cfg.epochs, so a later resume lands exactly where an uninterrupted run
// would. The written log is bitwise reproducible for a fixed (seed, config,
// dataset).
inline TrainResult train_model(const Config& cfg, const std::string& out_dir,
                               const std::string& resume_checkpoint = "",
                               int stop_after_epochs = 0) {
  cfg.validate();
  std::vector<Scene> raws;
  std::vector<std::string> names;
  for (const std::string& path : list_scene_files(cfg.train_dir)) {
    raws.push_back(load_scene(path));
    names.push_back(std::filesystem::path(path).filename().stem().string());
  }
  const int nscenes = static_cast<int>(raws.size());
  const int64_t total_steps = static_cast<int64_t>(cfg.epochs) * nscenes;

  ParameterStore ps;
  build_params(ps, cfg, cfg.seed);
  Adam opt;
  int64_t start_epoch = 0;
  if (!resume_checkpoint.empty()) {
    const CheckpointMeta meta = load_checkpoint(resume_checkpoint, ps, &opt);
    start_epoch = meta.epoch;
    if (start_epoch > cfg.epochs)
      throw std::runtime_error("resume checkpoint already has " + std::to_string(start_epoch) +
                               " epochs, config target is " + std::to_string(cfg.epochs));
    if (opt.steps_taken() != start_epoch * nscenes)
      throw std::runtime_error("resume checkpoint step count does not match the dataset size");
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir + ": " + ec.message());
  const std::string log_path = (std::filesystem::path(out_dir) / "train_log.csv").string();
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error("cannot open " + log_path + " for writing");
  log << "epoch,loss,ce,bce,dice,center,score,lr\n";

  int64_t end_epoch = cfg.epochs;
  if (stop_after_epochs > 0) end_epoch = std::min<int64_t>(cfg.epochs, start_epoch + stop_after_epochs);

  const LossWeights lw = cfg.loss_weights();
  double last_epoch_loss = 0.0;
  for (int64_t epoch = start_epoch; epoch < end_epoch; ++epoch) {
    std::vector<int> order(static_cast<size_t>(nscenes));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(cfg.seed, 0x65706f6368ULL + static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double sum_loss = 0.0, sum_ce = 0.0, sum_bce = 0.0, sum_dice = 0.0, sum_center = 0.0,
           sum_score = 0.0;
    double lr = cfg.learning_rate;
    for (int k = 0; k < nscenes; ++k) {
      const int idx = order[static_cast<size_t>(k)];
      // jitter seeded by absolute epoch and original scene index, so resumed
      // runs and reshuffled orders see identical transforms
      Rng aug_rng(mix_seed(mix_seed(cfg.seed, 0x6a6974746572ULL + static_cast<uint64_t>(epoch)),
                           static_cast<uint64_t>(idx)));
      const PreparedScene sc = prepare_scene(augment_scene(raws[static_cast<size_t>(idx)], aug_rng),
                                             cfg, names[static_cast<size_t>(idx)]);
      Tape t;
      t.check_finite = false;  // divergence is reported with scene context below
      ForwardResult fw = forward(t, ps, cfg, sc);
      const auto diverged = [&]() {
        throw std::runtime_error("training diverged: non-finite loss on scene " + sc.name +
                                 " in epoch " + std::to_string(epoch + 1));
      };
      const auto all_finite = [&](Node n) {
        for (double x : t.val(n).v)
          if (!std::isfinite(x)) return false;
        return true;
      };
      // Matching would otherwise reject a non-finite cost matrix with a
      // message that lacks the scene; catch bad outputs before it runs.
      for (const LayerPredictionN& lp : fw.dec.layers)
        if (!all_finite(lp.class_logits) || !all_finite(lp.mask_logits) ||
            !all_finite(lp.centers) || !all_finite(lp.scores))
          diverged();
      TotalLoss tl = total_loss(t, fw.dec.layers, sc.gts, lw);
      const double loss = t.val(tl.total).at(0, 0);
      if (!std::isfinite(loss)) diverged();
      ps.zero_grads();
      t.backward(tl.total);
      lr = poly_lr(cfg.learning_rate, opt.steps_taken(), total_steps);
      opt.step(ps, lr);
      for (const char* pname : {"agents.positions_norm", "learned.positions_norm"})
        for (double& x : ps.get(pname).value.v) x = std::clamp(x, 0.0, 1.0);

      sum_loss += loss;
      for (const LossBreakdown& lb : tl.layers) {
        sum_ce += lb.ce;
        sum_bce += lb.bce;
        sum_dice += lb.dice;
        sum_center += lb.center;
        sum_score += lb.score;
      }
    }
    last_epoch_loss = sum_loss / nscenes;
    log << (epoch + 1) << ',' << fmt_g(last_epoch_loss, 17) << ',' << fmt_g(sum_ce / nscenes, 17)
        << ',' << fmt_g(sum_bce / nscenes, 17) << ',' << fmt_g(sum_dice / nscenes, 17) << ','
        << fmt_g(sum_center / nscenes, 17) << ',' << fmt_g(sum_score / nscenes, 17) << ','
        << fmt_g(lr, 17) << '\n';
    log.flush();
  }
  if (!log) throw std::runtime_error("write failed for " + log_path);

  TrainResult res;
  res.epochs_run = static_cast<int>(end_epoch);
  res.final_epoch_loss = last_epoch_loss;
  res.log_path = log_path;
  res.checkpoint_path = (std::filesystem::path(out_dir) / "checkpoint.txt").string();
  CheckpointMeta meta;
  meta.step = opt.steps_taken();
  meta.epoch = end_epoch;
  save_checkpoint(res.checkpoint_path, ps, &opt, meta);
  return res;
}

struct EvalOptions {
  bool per_layer = false;
  bool use_nms = true;
  bool use_coe = false;
};

struct MetricsReport {
  std::vector<int> layers;        // 1-based decoder layers diagnosed
  std::vector<int> query_counts;  // queries feeding each diagnosed layer's head
  std::vector<double> recall50, ap25, ap50, map;  // means over scenes, per layer
  std::array<double, 3> fps_center_dist = {0, 0, 0};  // final layer, mean over scenes
  std::vector<SceneLayerMetrics> rows;                // per (scene, layer)
};

// Runs the model over a dataset and aggregates per-layer metrics. COE mode
// replaces the final output with all layers' instances concatenated and then
// suppressed, reported under the final layer's index.
inline MetricsReport evaluate_model(const Config& cfg, ParameterStore& ps,
                                    const std::string& data_dir, const EvalOptions& opts) {
  cfg.validate();
  const std::vector<PreparedScene> scenes = load_dataset(data_dir, cfg);
  const int nlayers = cfg.num_layers;
  std::vector<int> eval_layers;
  if (opts.per_layer)
    for (int l = 1; l <= nlayers; ++l) eval_layers.push_back(l);
  else
    eval_layers.push_back(nlayers);

  MetricsReport rep;
  rep.layers = eval_layers;
  rep.query_counts.assign(eval_layers.size(), 0);
  rep.recall50.assign(eval_layers.size(), 0.0);
  rep.ap25.assign(eval_layers.size(), 0.0);
  rep.ap50.assign(eval_layers.size(), 0.0);
  rep.map.assign(eval_layers.size(), 0.0);

  for (const PreparedScene& sc : scenes) {
    Tape t;
    t.check_finite = false;  // inference: bad values surface in the metrics themselves
    ForwardResult fw = forward(t, ps, cfg, sc);
    std::vector<PredictionValues> vals;
    for (const LayerPredictionN& lp : fw.dec.layers) vals.push_back(prediction_values(t, lp));

    for (size_t li = 0; li < eval_layers.size(); ++li) {
      const int layer = eval_layers[li];
      std::vector<FinalInstance> insts;
      if (opts.use_coe && layer == nlayers) {
        for (const PredictionValues& pv : vals) {
          std::vector<FinalInstance> part = instances_from_prediction(
              pv, sc.sup_of_raw, cfg.mask_bin_threshold, cfg.score_floor);
          insts.insert(insts.end(), part.begin(), part.end());
        }
        insts = nms(insts, cfg.nms_threshold);
      } else {
        insts = instances_from_prediction(vals[static_cast<size_t>(layer - 1)], sc.sup_of_raw,
                                          cfg.mask_bin_threshold, cfg.score_floor);
        if (opts.use_nms) insts = nms(insts, cfg.nms_threshold);
      }

      LayerMetricsRow row;
      row.layer = layer;
      row.query_count = static_cast<int>(vals[static_cast<size_t>(layer - 1)].lineage.size());
      row.recall50 = recall_at(insts, sc.eval_gts, 0.5);
      row.ap25 = average_precision(insts, sc.eval_gts, 0.25);
      row.ap50 = average_precision(insts, sc.eval_gts, 0.50);
      row.map = mean_ap_50_95(insts, sc.eval_gts);
      rep.rows.push_back({sc.name, row});
      rep.query_counts[li] = row.query_count;
      rep.recall50[li] += row.recall50;
      rep.ap25[li] += row.ap25;
      rep.ap50[li] += row.ap50;
      rep.map[li] += row.map;
    }

    const PredictionValues& last = vals.back();
    const std::array<double, 3> d =
        fps_center_distance(fw.init_positions, last.centers, last.lineage);
    for (int a = 0; a < 3; ++a) rep.fps_center_dist[static_cast<size_t>(a)] += d[static_cast<size_t>(a)];
  }

  const double n = static_cast<double>(scenes.size());
  for (size_t li = 0; li < eval_layers.size(); ++li) {
    rep.recall50[li] /= n;
    rep.ap25[li] /= n;
    rep.ap50[li] /= n;
    rep.map[li] /= n;
  }
  for (double& x : rep.fps_center_dist) x /= n;
  return rep;
}

// Full toggle grid {init_mode x hqfd x nms} plus one COE row. Cells sharing
// (init_mode, hqfd) share one trained model; every cell shares the generator
// data and the initial parameter checksum (all modes build all parameters).
struct AblationRow {
  std::string init_mode;
  bool hqfd = true;
  bool nms_on = true;
  bool coe = false;
  std::string dataset_checksum;
  std::string init_param_checksum;
  double map = 0.0, ap50 = 0.0, ap25 = 0.0, recall50 = 0.0;
};

inline std::vector<AblationRow> ablate_model(const Config& base, const std::string& out_dir) {
  base.validate();
  if (base.eval_dir.empty()) throw std::runtime_error("ablate: config needs eval_dir");
  const std::string data_sum = dataset_checksum(base.train_dir);

  const InitMode modes[] = {InitMode::kAgent, InitMode::kFpsZero, InitMode::kLearnable};
  std::vector<AblationRow> rows;
  for (InitMode mode : modes) {
    for (bool hqfd : {true, false}) {
      Config cfg = base;
      cfg.init_mode = mode;
      cfg.hqfd = hqfd;
      ParameterStore init_ps;
      build_params(init_ps, cfg, cfg.seed);
      const std::string init_sum = param_checksum(init_ps);

      const std::string cell = std::string(init_mode_name(mode)) + (hqfd ? "_hqfd" : "_plain");
      const std::string cell_dir = (std::filesystem::path(out_dir) / cell).string();
      const TrainResult tr = train_model(cfg, cell_dir);

      ParameterStore ps;
      build_params(ps, cfg, cfg.seed);
      Adam opt;
      load_checkpoint(tr.checkpoint_path, ps, &opt);
      for (bool nms_on : {true, false}) {
        EvalOptions opts;
        opts.use_nms = nms_on;
        const MetricsReport rep = evaluate_model(cfg, ps, cfg.eval_dir, opts);
        AblationRow row;
        row.init_mode = init_mode_name(mode);
        row.hqfd = hqfd;
        row.nms_on = nms_on;
        row.dataset_checksum = data_sum;
        row.init_param_checksum = init_sum;
        row.map = rep.map.back();
        row.ap50 = rep.ap50.back();
        row.ap25 = rep.ap25.back();
        row.recall50 = rep.recall50.back();
        rows.push_back(std::move(row));
      }
      if (mode == base.init_mode && hqfd == base.hqfd) {
        EvalOptions opts;
        opts.use_coe = true;
        const MetricsReport rep = evaluate_model(cfg, ps, cfg.eval_dir, opts);
        AblationRow row;
        row.init_mode = init_mode_name(mode);
        row.hqfd = hqfd;
        row.nms_on = true;
        row.coe = true;
        row.dataset_checksum = data_sum;
        row.init_param_checksum = init_sum;
        row.map = rep.map.back();
        row.ap50 = rep.ap50.back();
        row.ap25 = rep.ap25.back();
        row.recall50 = rep.recall50.back();
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "init_mode,hqfd,nms,coe,dataset_checksum,init_param_checksum,map,ap50,ap25,recall50\n";
  for (const AblationRow& r : rows)
    os << r.init_mode << ',' << (r.hqfd ? "on" : "off") << ',' << (r.nms_on ? "on" : "off") << ','
       << (r.coe ? "on" : "off") << ',' << r.dataset_checksum << ',' << r.init_param_checksum
       << ',' << fmt_g(r.map, 17) << ',' << fmt_g(r.ap50, 17) << ',' << fmt_g(r.ap25, 17) << ','
       << fmt_g(r.recall50, 17) << '\n';
}

}  // namespace qseg
