// qseg command line: synthetic dataset generation, training, evaluation, and
// the ablation grid. Every subcommand exits nonzero on error and removes the
// output files it was producing.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "qseg/config.hpp"
#include "qseg/eval.hpp"
#include "qseg/model.hpp"
#include "qseg/synthetic.hpp"
#include "qseg/train.hpp"

namespace fs = std::filesystem;

namespace {

// Removes the paths a failed command may have left half-written. Directories
// are removed recursively only when this run created them.
struct OutputGuard {
  std::vector<fs::path> files;
  std::vector<fs::path> created_dirs;
  bool armed = true;

  void track_dir(const fs::path& dir) {
    if (!fs::exists(dir)) created_dirs.push_back(dir);
  }
  void track_file(const fs::path& f) { files.push_back(f); }
  void disarm() { armed = false; }

  ~OutputGuard() {
    if (!armed) return;
    std::error_code ec;
    for (const fs::path& f : files) fs::remove(f, ec);
    for (auto it = created_dirs.rbegin(); it != created_dirs.rend(); ++it)
      fs::remove_all(*it, ec);
  }
};

int cmd_generate(const std::string& spec_path, const std::string& out_dir, uint64_t seed) {
  const qseg::SyntheticSpec spec = qseg::load_synthetic_spec(spec_path);
  OutputGuard guard;
  guard.track_dir(out_dir);
  const std::vector<std::string> paths = qseg::generate_synthetic(spec, seed, out_dir);
  for (const std::string& p : paths) guard.track_file(p);
  guard.disarm();
  std::cout << "wrote " << paths.size() << " scenes to " << out_dir << " (checksum "
            << qseg::dataset_checksum(out_dir) << ")\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& resume, int stop_after) {
  const qseg::Config cfg = qseg::load_config(config_path);
  if (cfg.train_dir.empty()) throw std::runtime_error("config: train_dir is required for train");
  OutputGuard guard;
  guard.track_dir(out_dir);
  guard.track_file(fs::path(out_dir) / "train_log.csv");
  guard.track_file(fs::path(out_dir) / "checkpoint.txt");
  const qseg::TrainResult res = qseg::train_model(cfg, out_dir, resume, stop_after);
  guard.disarm();
  std::cout << "trained " << res.epochs_run << " epochs, final epoch mean loss "
            << qseg::fmt_g(res.final_epoch_loss, 17) << "\n"
            << "checkpoint: " << res.checkpoint_path << "\nlog: " << res.log_path << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& config_path, const std::string& out_dir, bool per_layer,
             bool no_nms, bool coe) {
  const qseg::Config cfg = qseg::load_config(config_path);
  qseg::ParameterStore ps;
  qseg::build_params(ps, cfg, cfg.seed);
  qseg::load_checkpoint(checkpoint, ps, nullptr);

  qseg::EvalOptions opts;
  opts.per_layer = per_layer;
  opts.use_nms = !no_nms;
  opts.use_coe = coe;

  OutputGuard guard;
  guard.track_dir(out_dir);
  const fs::path metrics_path = fs::path(out_dir) / "metrics.csv";
  const fs::path chart_path = fs::path(out_dir) / "recall_chart.svg";
  guard.track_file(metrics_path);
  guard.track_file(chart_path);

  const qseg::MetricsReport rep = qseg::evaluate_model(cfg, ps, data_dir, opts);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir + ": " + ec.message());
  {
    std::ofstream f(metrics_path);
    if (!f) throw std::runtime_error("cannot open " + metrics_path.string());
    qseg::write_metrics_csv(f, rep.rows);
    if (!f) throw std::runtime_error("write failed for " + metrics_path.string());
  }
  {
    std::ofstream f(chart_path);
    if (!f) throw std::runtime_error("cannot open " + chart_path.string());
    qseg::write_recall_chart_svg(f, rep.recall50);
    if (!f) throw std::runtime_error("write failed for " + chart_path.string());
  }
  guard.disarm();

  for (size_t i = 0; i < rep.layers.size(); ++i)
    std::cout << "layer " << rep.layers[i] << ": queries=" << rep.query_counts[i]
              << " recall50=" << qseg::fmt_g(rep.recall50[i], 6)
              << " ap25=" << qseg::fmt_g(rep.ap25[i], 6)
              << " ap50=" << qseg::fmt_g(rep.ap50[i], 6)
              << " map=" << qseg::fmt_g(rep.map[i], 6) << "\n";
  std::cout << "fps-center distance (m): x=" << qseg::fmt_g(rep.fps_center_dist[0], 6)
            << " y=" << qseg::fmt_g(rep.fps_center_dist[1], 6)
            << " z=" << qseg::fmt_g(rep.fps_center_dist[2], 6) << "\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir) {
  const qseg::Config cfg = qseg::load_config(config_path);
  if (cfg.train_dir.empty() || cfg.eval_dir.empty())
    throw std::runtime_error("config: ablate needs train_dir and eval_dir");
  OutputGuard guard;
  guard.track_dir(out_dir);
  const fs::path csv_path = fs::path(out_dir) / "ablation.csv";
  guard.track_file(csv_path);
  const char* cells[] = {"agent_hqfd", "agent_plain", "fps_zero_hqfd", "fps_zero_plain",
                         "learnable_hqfd", "learnable_plain"};
  for (const char* c : cells) guard.track_dir(fs::path(out_dir) / c);

  const std::vector<qseg::AblationRow> rows = qseg::ablate_model(cfg, out_dir);
  std::ofstream f(csv_path);
  if (!f) throw std::runtime_error("cannot open " + csv_path.string());
  qseg::write_ablation_csv(f, rows);
  if (!f) throw std::runtime_error("write failed for " + csv_path.string());
  guard.disarm();
  std::cout << "wrote " << rows.size() << " ablation rows to " << csv_path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"point cloud instance segmentation pipeline"};
  app.require_subcommand(1);

  std::string spec_path, out_dir, config_path, checkpoint, data_dir, resume;
  uint64_t seed = 0;
  int stop_after = 0;
  bool per_layer = false, no_nms = false, coe = false;

  CLI::App* gen = app.add_subcommand("generate", "generate a synthetic scene dataset");
  gen->add_option("--spec", spec_path, "generator spec file")->required();
  gen->add_option("--out", out_dir, "output dataset directory")->required();
  gen->add_option("--seed", seed, "generator seed")->required();

  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--out", out_dir, "output directory for checkpoint and log")->required();
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_option("--stop-after", stop_after,
                    "checkpoint and stop after this many epochs; resume later")
      ->check(CLI::PositiveNumber);

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--config", config_path, "config file")->required();
  ev->add_option("--out", out_dir, "output directory for metrics")->required();
  ev->add_flag("--per-layer", per_layer, "emit diagnostics for every decoder layer");
  ev->add_flag("--no-nms", no_nms, "skip non-maximum suppression");
  ev->add_flag("--coe", coe, "concatenate all layers' outputs before NMS");

  CLI::App* ab = app.add_subcommand("ablate", "run the init/fusion/nms toggle grid");
  ab->add_option("--config", config_path, "base config file")->required();
  ab->add_option("--out", out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(spec_path, out_dir, seed);
    if (train->parsed()) return cmd_train(config_path, out_dir, resume, stop_after);
    if (ev->parsed()) return cmd_eval(checkpoint, data_dir, config_path, out_dir, per_layer, no_nms, coe);
    if (ab->parsed()) return cmd_ablate(config_path, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
