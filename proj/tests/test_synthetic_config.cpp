// Config parsing (defaults, overrides, rejection with line numbers) and the
// synthetic scene generator (determinism, surface geometry, placement gaps,
// clutter budget, class balance, dataset listing and checksums).
#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "qseg/config.hpp"
#include "qseg/scene.hpp"
#include "qseg/synthetic.hpp"

using namespace qseg;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("qseg_" + tag + "_" + std::to_string(static_cast<long>(::getpid())));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string str() const { return path_.string(); }
  std::string sub(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

Config parse_text(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is, "test.cfg");
}

std::string parse_error(const std::string& text) {
  std::istringstream is(text);
  try {
    parse_config(is, "test.cfg");
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

SyntheticSpec tiny_spec() {
  SyntheticSpec spec;
  spec.scenes = 2;
  spec.min_instances = 2;
  spec.max_instances = 3;
  spec.min_points = 40;
  spec.max_points = 60;
  spec.clutter_fraction = 0.05;
  return spec;
}

}  // namespace

TEST(ConfigParse, EmptyStreamYieldsDefaults) {
  const Config c = parse_text("");
  EXPECT_EQ(c.num_layers, 4);
  EXPECT_EQ(c.num_queries, 32);
  EXPECT_EQ(c.num_agents, 32);
  EXPECT_EQ(c.knn, 3);
  EXPECT_DOUBLE_EQ(c.lambda_ce, 0.5);
  EXPECT_DOUBLE_EQ(c.lambda_bce, 1.0);
  EXPECT_DOUBLE_EQ(c.lambda_dice, 1.0);
  EXPECT_DOUBLE_EQ(c.lambda_center, 0.5);
  EXPECT_DOUBLE_EQ(c.lambda_score, 0.5);
  EXPECT_DOUBLE_EQ(c.voxel_size, 0.06);
  EXPECT_DOUBLE_EQ(c.grid_size, 0.25);
  EXPECT_EQ(c.epochs, 200);
  EXPECT_EQ(c.init_mode, InitMode::kAgent);
  EXPECT_TRUE(c.hqfd);
  EXPECT_TRUE(c.use_nms);
  EXPECT_FALSE(c.use_coe);
}

TEST(ConfigParse, FullFileOverridesEveryField) {
  const Config c = parse_text(
      "num_layers = 6\n"
      "num_heads = 8\n"
      "hidden_dim = 128\n"
      "ffn_dim = 512\n"
      "fourier_per_axis = 2\n"
      "pos_head_dim = 16\n"
      "num_queries = 400\n"
      "num_agents = 100\n"
      "knn = 5\n"
      "d1 = 40\n"
      "d2 = 3\n"
      "mask_bin_threshold = 0.4\n"
      "num_classes = 3\n"
      "lambda_ce = 0.25\n"
      "lambda_bce = 2\n"
      "lambda_dice = 3\n"
      "lambda_center = 0.75\n"
      "lambda_score = 0.125\n"
      "voxel_size = 0.02\n"
      "grid_size = 0.5\n"
      "train_dir = data/train\n"
      "eval_dir = data/eval\n"
      "epochs = 10\n"
      "learning_rate = 0.005\n"
      "seed = 42\n"
      "nms_threshold = 0.6\n"
      "score_floor = 0.05\n"
      "init_mode = learnable\n"
      "hqfd = off\n"
      "use_nms = off\n"
      "use_coe = on\n");
  EXPECT_EQ(c.num_layers, 6);
  EXPECT_EQ(c.num_heads, 8);
  EXPECT_EQ(c.hidden_dim, 128);
  EXPECT_EQ(c.num_queries, 400);
  EXPECT_EQ(c.knn, 5);
  EXPECT_EQ(c.d1, 40);
  EXPECT_EQ(c.d2, 3);
  EXPECT_DOUBLE_EQ(c.mask_bin_threshold, 0.4);
  EXPECT_EQ(c.num_classes, 3);
  EXPECT_DOUBLE_EQ(c.lambda_bce, 2.0);
  EXPECT_EQ(c.train_dir, "data/train");
  EXPECT_EQ(c.eval_dir, "data/eval");
  EXPECT_EQ(c.epochs, 10);
  EXPECT_DOUBLE_EQ(c.learning_rate, 0.005);
  EXPECT_EQ(c.seed, 42u);
  EXPECT_DOUBLE_EQ(c.nms_threshold, 0.6);
  EXPECT_DOUBLE_EQ(c.score_floor, 0.05);
  EXPECT_EQ(c.init_mode, InitMode::kLearnable);
  EXPECT_FALSE(c.hqfd);
  EXPECT_FALSE(c.use_nms);
  EXPECT_TRUE(c.use_coe);
}

TEST(ConfigParse, CommentsAndSpacingAreTolerated) {
  const Config c = parse_text(
      "# full-line comment\n"
      "\n"
      "   epochs   =   7   # trailing comment\n"
      "\tseed\t=\t3\n");
  EXPECT_EQ(c.epochs, 7);
  EXPECT_EQ(c.seed, 3u);
}

TEST(ConfigParse, RejectionsCarryLineNumbers) {
  EXPECT_NE(parse_error("epochs = 5\nbogus_key = 1\n").find("test.cfg:2"), std::string::npos);
  EXPECT_NE(parse_error("epochs = 5\nbogus_key = 1\n").find("bogus_key"), std::string::npos);
  const std::string dup = parse_error("epochs = 5\n\nepochs = 6\n");
  EXPECT_NE(dup.find("test.cfg:3"), std::string::npos);
  EXPECT_NE(dup.find("duplicate"), std::string::npos);
  EXPECT_NE(parse_error("epochs\n").find("expected key = value"), std::string::npos);
  EXPECT_NE(parse_error("epochs =\n").find("empty value"), std::string::npos);
  EXPECT_NE(parse_error("epochs = zero\n").find("not an integer"), std::string::npos);
  EXPECT_NE(parse_error("epochs = 0\n").find("out of range"), std::string::npos);
  EXPECT_NE(parse_error("init_mode = banana\n").find("init_mode"), std::string::npos);
  EXPECT_NE(parse_error("hqfd = yes\n").find("must be on or off"), std::string::npos);
  EXPECT_NE(parse_error("learning_rate = fast\n").find("not a number"), std::string::npos);
}

TEST(ConfigParse, CrossFieldValidation) {
  EXPECT_THROW(parse_text("knn = 50\nnum_agents = 10\n"), std::runtime_error);
  EXPECT_THROW(parse_text("d2 = 4\nnum_layers = 4\n"), std::invalid_argument);
  EXPECT_THROW(parse_text("hidden_dim = 30\nnum_heads = 4\n"), std::invalid_argument);
}

TEST(ConfigParse, LoadFromMissingFileFails) {
  EXPECT_THROW(load_config("/nonexistent/path/q.cfg"), std::runtime_error);
}

TEST(SpecParse, DefaultsAndOverrides) {
  std::istringstream empty("");
  const SyntheticSpec d = parse_synthetic_spec(empty, "spec");
  EXPECT_EQ(d.scenes, 50);
  EXPECT_EQ(d.min_instances, 5);
  EXPECT_EQ(d.max_instances, 7);
  EXPECT_DOUBLE_EQ(d.clutter_fraction, 0.05);
  EXPECT_DOUBLE_EQ(d.extent[2], 2.5);
  EXPECT_EQ(d.num_classes, 6);

  std::istringstream full(
      "scenes = 10\nmin_instances = 2\nmax_instances = 4\nmin_points = 50\n"
      "max_points = 80\nclutter_fraction = 0.1\nextent_x = 4\nextent_y = 3\n"
      "extent_z = 2\nnum_classes = 3\n");
  const SyntheticSpec s = parse_synthetic_spec(full, "spec");
  EXPECT_EQ(s.scenes, 10);
  EXPECT_EQ(s.num_classes, 3);
  EXPECT_DOUBLE_EQ(s.extent[0], 4.0);

  std::istringstream bad_cls("num_classes = 4\n");
  EXPECT_THROW(parse_synthetic_spec(bad_cls, "spec"), std::runtime_error);
  std::istringstream bad_rng("min_instances = 5\nmax_instances = 2\n");
  EXPECT_THROW(parse_synthetic_spec(bad_rng, "spec"), std::runtime_error);
}

TEST(SurfaceSampling, BoxPointsSitOnFacesWithMatchingNormals) {
  detail::InstanceShape box;
  box.shape = 0;
  box.half[0] = 0.2;
  box.half[1] = 0.3;
  box.half[2] = 0.1;
  Rng rng(91);
  for (int k = 0; k < 500; ++k) {
    double p[3], n[3];
    detail::sample_surface(box, rng, p, n);
    int face = -1;
    for (int a = 0; a < 3; ++a) {
      if (std::fabs(n[a]) == 1.0) {
        ASSERT_EQ(face, -1);
        face = a;
      } else {
        EXPECT_DOUBLE_EQ(n[a], 0.0);
      }
    }
    ASSERT_NE(face, -1);
    EXPECT_DOUBLE_EQ(p[face], n[face] * box.half[face]);
    for (int a = 0; a < 3; ++a) {
      EXPECT_LE(std::fabs(p[a]), box.half[a] + 1e-12);
    }
  }
}

TEST(SurfaceSampling, SpherePointsHaveRadialUnitNormals) {
  detail::InstanceShape sph;
  sph.shape = 1;
  sph.radius = 0.25;
  for (int a = 0; a < 3; ++a) sph.half[a] = sph.radius;
  Rng rng(92);
  for (int k = 0; k < 500; ++k) {
    double p[3], n[3];
    detail::sample_surface(sph, rng, p, n);
    const double r = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    const double nl = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    EXPECT_NEAR(r, sph.radius, 1e-12);
    EXPECT_NEAR(nl, 1.0, 1e-12);
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(p[a], sph.radius * n[a], 1e-15);
  }
}

TEST(SurfaceSampling, PanelPointsStayInPlane) {
  detail::InstanceShape panel;
  panel.shape = 2;
  panel.panel_axis = 1;
  panel.half[0] = 0.4;
  panel.half[1] = 0.0;
  panel.half[2] = 0.3;
  Rng rng(93);
  bool saw_plus = false, saw_minus = false;
  for (int k = 0; k < 200; ++k) {
    double p[3], n[3];
    detail::sample_surface(panel, rng, p, n);
    EXPECT_DOUBLE_EQ(p[1], 0.0);
    EXPECT_LE(std::fabs(p[0]), 0.4);
    EXPECT_LE(std::fabs(p[2]), 0.3);
    EXPECT_DOUBLE_EQ(n[0], 0.0);
    EXPECT_DOUBLE_EQ(n[2], 0.0);
    EXPECT_DOUBLE_EQ(std::fabs(n[1]), 1.0);
    saw_plus = saw_plus || n[1] > 0;
    saw_minus = saw_minus || n[1] < 0;
  }
  EXPECT_TRUE(saw_plus);
  EXPECT_TRUE(saw_minus);
}

TEST(MakeScene, ClutterBudgetIsExact) {
  SyntheticSpec spec = tiny_spec();
  spec.clutter_fraction = 0.2;
  spec.min_points = 100;
  spec.max_points = 100;
  Rng rng(94);
  const Scene s = make_scene(spec, {0, 1, 2}, rng);
  int clutter = 0, surface = 0;
  for (int id : s.instance_id) (id < 0 ? clutter : surface) += 1;
  EXPECT_EQ(surface, 300);
  EXPECT_EQ(clutter, 75);  // round(300 * 0.2 / 0.8)
  EXPECT_EQ(s.instance_class, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(s.num_classes, 6);
}

TEST(MakeScene, InstancesKeepTheirGapAndNormalsAreUnit) {
  SyntheticSpec spec = tiny_spec();
  spec.min_instances = 5;
  spec.max_instances = 5;
  Rng rng(95);
  const Scene s = make_scene(spec, {0, 2, 4, 1, 3}, rng);
  const int ninst = static_cast<int>(s.instance_class.size());
  ASSERT_GE(ninst, 2);

  // per-instance AABB over the sampled points
  std::vector<std::array<double, 6>> box(static_cast<size_t>(ninst),
                                         {1e9, 1e9, 1e9, -1e9, -1e9, -1e9});
  for (int i = 0; i < s.num_points(); ++i) {
    const double nl = std::sqrt(s.normal.at(i, 0) * s.normal.at(i, 0) +
                                s.normal.at(i, 1) * s.normal.at(i, 1) +
                                s.normal.at(i, 2) * s.normal.at(i, 2));
    EXPECT_NEAR(nl, 1.0, 1e-9);
    for (int a = 0; a < 3; ++a) {
      EXPECT_GE(s.color.at(i, a), 0.0);
      EXPECT_LE(s.color.at(i, a), 1.0);
    }
    const int id = s.instance_id[static_cast<size_t>(i)];
    if (id < 0) continue;
    auto& b = box[static_cast<size_t>(id)];
    for (int a = 0; a < 3; ++a) {
      b[static_cast<size_t>(a)] = std::min(b[static_cast<size_t>(a)], s.pos.at(i, a));
      b[static_cast<size_t>(a) + 3] = std::max(b[static_cast<size_t>(a) + 3], s.pos.at(i, a));
    }
  }
  for (int i = 0; i < ninst; ++i)
    for (int j = i + 1; j < ninst; ++j) {
      double best_gap = -1e9;
      for (int a = 0; a < 3; ++a) {
        const double lo_i = box[static_cast<size_t>(i)][static_cast<size_t>(a)];
        const double hi_i = box[static_cast<size_t>(i)][static_cast<size_t>(a) + 3];
        const double lo_j = box[static_cast<size_t>(j)][static_cast<size_t>(a)];
        const double hi_j = box[static_cast<size_t>(j)][static_cast<size_t>(a) + 3];
        best_gap = std::max(best_gap, std::max(lo_j - hi_i, lo_i - hi_j));
      }
      EXPECT_GE(best_gap, 0.08 - 1e-9) << "instances " << i << " and " << j;
    }
}

TEST(Generator, ByteIdenticalRerunsAndSeedSensitivity) {
  TempDir a("gen_a"), b("gen_b"), c("gen_c");
  const SyntheticSpec spec = tiny_spec();
  const auto pa = generate_synthetic(spec, 7, a.str());
  const auto pb = generate_synthetic(spec, 7, b.str());
  ASSERT_EQ(pa.size(), 2u);
  ASSERT_EQ(pb.size(), 2u);
  for (size_t i = 0; i < pa.size(); ++i) {
    std::ifstream fa(pa[i]), fb(pb[i]);
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    EXPECT_EQ(sa.str(), sb.str()) << pa[i];
    EXPECT_FALSE(sa.str().empty());
  }
  EXPECT_EQ(dataset_checksum(a.str()), dataset_checksum(b.str()));
  generate_synthetic(spec, 8, c.str());
  EXPECT_NE(dataset_checksum(a.str()), dataset_checksum(c.str()));
}

TEST(Generator, SingleInstanceSceneHasExactlyOneForegroundId) {
  TempDir dir("gen_single");
  SyntheticSpec spec = tiny_spec();
  spec.scenes = 1;
  spec.min_instances = 1;
  spec.max_instances = 1;
  spec.clutter_fraction = 0.0;
  const auto paths = generate_synthetic(spec, 3, dir.str());
  ASSERT_EQ(paths.size(), 1u);
  const Scene s = load_scene(paths[0]);
  ASSERT_EQ(s.instance_class.size(), 1u);
  for (int id : s.instance_id) EXPECT_EQ(id, 0);
  EXPECT_GE(s.num_points(), spec.min_points);
  EXPECT_LE(s.num_points(), spec.max_points);
}

TEST(Generator, ClassHistogramStaysNearUniform) {
  TempDir dir("gen_hist");
  SyntheticSpec spec;
  spec.scenes = 12;
  spec.min_points = 40;
  spec.max_points = 60;
  const auto paths = generate_synthetic(spec, 11, dir.str());
  std::map<int, int> hist;
  int total = 0;
  for (const std::string& p : paths)
    for (int cls : load_scene(p).instance_class) {
      hist[cls] += 1;
      total += 1;
    }
  ASSERT_EQ(hist.size(), 6u);
  const double mean = total / 6.0;
  for (const auto& [cls, count] : hist) {
    EXPECT_GE(count, 0.8 * mean) << "class " << cls;
    EXPECT_LE(count, 1.2 * mean) << "class " << cls;
  }
}

TEST(Generator, ListingIsSortedAndChecksumTracksContent) {
  TempDir dir("gen_list");
  SyntheticSpec spec = tiny_spec();
  spec.scenes = 3;
  generate_synthetic(spec, 5, dir.str());
  const auto files = list_scene_files(dir.str());
  ASSERT_EQ(files.size(), 3u);
  EXPECT_TRUE(std::is_sorted(files.begin(), files.end()));
  EXPECT_NE(files[0].find("scene_0000.txt"), std::string::npos);

  const std::string before = dataset_checksum(dir.str());
  EXPECT_EQ(before.size(), 16u);
  {
    std::ofstream f(files[1], std::ios::app);
    f << "# tweak\n";
  }
  EXPECT_NE(dataset_checksum(dir.str()), before);

  EXPECT_THROW(list_scene_files(dir.sub("missing")), std::runtime_error);
  std::filesystem::create_directories(dir.sub("empty"));
  EXPECT_THROW(list_scene_files(dir.sub("empty")), std::runtime_error);
}
