// End-to-end model assembly: parameter construction, per-scene preprocessing
// (voxelize, superpoints, ground-truth masks), and the forward pass from raw
// points to per-layer predictions under each query initialization mode.
#pragma once

#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "qseg/agent_init.hpp"
#include "qseg/config.hpp"
#include "qseg/decoder.hpp"
#include "qseg/eval.hpp"
#include "qseg/matching.hpp"
#include "qseg/scene.hpp"

namespace qseg {

// Every mode's parameters are created regardless of the active init_mode, in
// one fixed order, so ablation cells with the same seed start from identical
// parameter checksums.
inline void build_params(ParameterStore& ps, const Config& cfg, uint64_t seed) {
  const DecoderConfig d = cfg.decoder();
  Rng rng(mix_seed(seed, 0x706172616dULL));
  init_encoder_params(ps, d, rng);
  for (int l = 0; l < d.num_layers; ++l) init_layer_params(ps, d, l, rng);
  init_head_params(ps, d, rng);

  Parameter& apos = ps.create("agents.positions_norm", cfg.num_agents, 3);
  for (double& x : apos.value.v) x = rng.uniform();
  Parameter& acontent = ps.create("agents.content", cfg.num_agents, cfg.hidden_dim);
  for (double& x : acontent.value.v) x = rng.normal(0.0, 0.02);

  Parameter& lpos = ps.create("learned.positions_norm", cfg.num_queries, 3);
  for (double& x : lpos.value.v) x = rng.uniform();
  Parameter& lcontent = ps.create("learned.content", cfg.num_queries, cfg.hidden_dim);
  for (double& x : lcontent.value.v) x = rng.normal(0.0, 0.02);
}

struct PreparedScene {
  std::string name;
  Scene raw;
  Scene vox;
  std::vector<int> sup_of_raw;  // raw point -> superpoint
  Partition sup;                // over voxelized points
  Mat sup_pos;                  // mean position per superpoint
  double pmin[3] = {0, 0, 0};
  double pmax[3] = {0, 0, 0};
  std::vector<GroundTruthInstance> gts;  // superpoint-level supervision
  std::vector<EvalGt> eval_gts;          // raw-point-level evaluation masks
};

inline PreparedScene prepare_scene(Scene raw, const Config& cfg, std::string name) {
  if (raw.num_classes != cfg.num_classes)
    throw std::runtime_error(name + ": scene has " + std::to_string(raw.num_classes) +
                             " classes but the config expects " + std::to_string(cfg.num_classes));
  PreparedScene sc;
  sc.name = std::move(name);
  sc.raw = std::move(raw);

  VoxelizeResult vr = voxelize_with_map(sc.raw, cfg.voxel_size);
  sc.vox = std::move(vr.scene);
  sc.sup = build_superpoints(sc.vox, cfg.grid_size);
  sc.sup_of_raw.resize(static_cast<size_t>(sc.raw.num_points()));
  for (int p = 0; p < sc.raw.num_points(); ++p)
    sc.sup_of_raw[static_cast<size_t>(p)] =
        sc.sup.assign[static_cast<size_t>(vr.point_to_voxel[static_cast<size_t>(p)])];
  sc.sup_pos = pool_rows(sc.vox.pos, sc.sup);

  for (int a = 0; a < 3; ++a) {
    sc.pmin[a] = sc.vox.pos.at(0, a);
    sc.pmax[a] = sc.vox.pos.at(0, a);
  }
  for (int i = 1; i < sc.vox.num_points(); ++i)
    for (int a = 0; a < 3; ++a) {
      sc.pmin[a] = std::min(sc.pmin[a], sc.vox.pos.at(i, a));
      sc.pmax[a] = std::max(sc.pmax[a], sc.vox.pos.at(i, a));
    }

  // Majority instance id per superpoint (background -1 votes too, ties to the
  // smaller id), mirroring the voxel-level label rule.
  std::vector<int> sup_majority(static_cast<size_t>(sc.sup.count), -1);
  {
    std::vector<std::map<int, int>> votes(static_cast<size_t>(sc.sup.count));
    for (int p = 0; p < sc.vox.num_points(); ++p)
      ++votes[static_cast<size_t>(sc.sup.assign[static_cast<size_t>(p)])]
             [sc.vox.instance_id[static_cast<size_t>(p)]];
    for (int s = 0; s < sc.sup.count; ++s) {
      int best_id = -1, best_votes = -1;
      for (const auto& [id, nv] : votes[static_cast<size_t>(s)])
        if (nv > best_votes) {
          best_votes = nv;
          best_id = id;
        }
      sup_majority[static_cast<size_t>(s)] = best_id;
    }
  }

  const int ninst = sc.raw.num_instances();
  for (int i = 0; i < ninst; ++i) {
    GroundTruthInstance gt;
    gt.class_id = sc.raw.instance_class[static_cast<size_t>(i)];
    gt.sup_mask.resize(static_cast<size_t>(sc.sup.count));
    for (int s = 0; s < sc.sup.count; ++s)
      gt.sup_mask[static_cast<size_t>(s)] = sup_majority[static_cast<size_t>(s)] == i ? 1 : 0;
    double acc[3] = {0, 0, 0};
    int npts = 0;
    EvalGt eg;
    eg.class_id = gt.class_id;
    eg.mask.resize(static_cast<size_t>(sc.raw.num_points()), 0);
    for (int p = 0; p < sc.raw.num_points(); ++p)
      if (sc.raw.instance_id[static_cast<size_t>(p)] == i) {
        eg.mask[static_cast<size_t>(p)] = 1;
        for (int a = 0; a < 3; ++a) acc[a] += sc.raw.pos.at(p, a);
        ++npts;
      }
    for (int a = 0; a < 3; ++a) gt.center[a] = npts > 0 ? acc[a] / npts : 0.0;
    sc.gts.push_back(std::move(gt));
    sc.eval_gts.push_back(std::move(eg));
  }
  return sc;
}

inline PreparedScene load_prepared_scene(const std::string& path, const Config& cfg) {
  return prepare_scene(load_scene(path), cfg,
                       std::filesystem::path(path).filename().stem().string());
}

struct ForwardResult {
  RunDecoderResult dec;
  Mat init_positions;            // query positions entering layer 1
  std::vector<int> fps_indices;  // empty in learnable mode
};

inline ForwardResult forward(Tape& t, ParameterStore& ps, const Config& cfg,
                             const PreparedScene& sc) {
  const DecoderConfig d = cfg.decoder();
  const Node point_feats = encode_points(t, ps, sc.vox);
  const Node sup_feats = t.pool_rows(point_feats, sc.sup);
  const SupContext ctx = make_sup_context(t, d, sup_feats, sc.sup_pos);

  ForwardResult out;
  QuerySetN init;
  switch (cfg.init_mode) {
    case InitMode::kAgent: {
      InitQueriesResult ir = init_queries(t, sc.vox.pos, ps.get("agents.positions_norm"),
                                          ps.get("agents.content"), cfg.num_queries, cfg.knn,
                                          cfg.seed);
      init = ir.queries;
      out.init_positions = ir.sampled;
      out.fps_indices = std::move(ir.fps_indices);
      break;
    }
    case InitMode::kFpsZero: {
      out.fps_indices = fps(sc.vox.pos, cfg.num_queries, cfg.seed);
      const int s = static_cast<int>(out.fps_indices.size());
      Mat sampled(s, 3);
      for (int i = 0; i < s; ++i)
        for (int a = 0; a < 3; ++a) sampled.at(i, a) = sc.vox.pos.at(out.fps_indices[static_cast<size_t>(i)], a);
      init.positions = t.input(sampled);
      init.content = t.input(Mat(s, cfg.hidden_dim, 0.0));
      init.lineage.resize(static_cast<size_t>(s));
      std::iota(init.lineage.begin(), init.lineage.end(), 0);
      out.init_positions = std::move(sampled);
      break;
    }
    case InitMode::kLearnable: {
      init.positions = refine_agent_positions(t, t.param(ps.get("learned.positions_norm")),
                                              sc.pmin, sc.pmax);
      init.content = t.param(ps.get("learned.content"));
      init.lineage.resize(static_cast<size_t>(cfg.num_queries));
      std::iota(init.lineage.begin(), init.lineage.end(), 0);
      out.init_positions = t.val(init.positions);  // copy; the tape keeps growing
      break;
    }
  }
  out.dec = run_decoder(t, ps, d, init, ctx);
  return out;
}

}  // namespace qseg
