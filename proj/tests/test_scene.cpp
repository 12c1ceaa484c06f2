// Scene file round-trips, loader validation, voxel-grid downsampling, and
// superpoint pooling.
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "qseg/rng.hpp"
#include "qseg/scene.hpp"

using namespace qseg;
namespace fs = std::filesystem;

namespace {

Scene tiny_scene() {
  Scene s;
  s.num_classes = 2;
  s.instance_class = {0, 1};
  s.pos = Mat(4, 3);
  s.color = Mat(4, 3);
  s.normal = Mat(4, 3);
  const double pos[4][3] = {{0.1, 0.2, 0.3}, {1.5, 0.25, 0.33}, {0.11, 0.21, 0.29}, {2.0, 2.0, 2.0}};
  for (int i = 0; i < 4; ++i) {
    for (int a = 0; a < 3; ++a) {
      s.pos.at(i, a) = pos[i][a];
      s.color.at(i, a) = 0.25 * (a + 1);
      s.normal.at(i, a) = a == 2 ? 1.0 : 0.0;
    }
  }
  s.instance_id = {0, 1, 0, -1};
  return s;
}

std::string file_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::string write_temp(const std::string& body, const char* name) {
  const std::string path = (fs::temp_directory_path() / name).string();
  std::ofstream f(path, std::ios::binary);
  f << body;
  return path;
}

}  // namespace

TEST(SceneIO, RoundTripIsByteStable) {
  const Scene s = tiny_scene();
  const std::string p1 = (fs::temp_directory_path() / "scene_rt1.txt").string();
  const std::string p2 = (fs::temp_directory_path() / "scene_rt2.txt").string();
  save_scene(s, p1);
  const Scene loaded = load_scene(p1);
  save_scene(loaded, p2);
  EXPECT_EQ(file_text(p1), file_text(p2));
  EXPECT_EQ(loaded.num_points(), 4);
  EXPECT_EQ(loaded.num_instances(), 2);
  EXPECT_EQ(loaded.instance_id, s.instance_id);
}

TEST(SceneIO, RoundTripSurvivesRandomCoordinates) {
  Rng rng(99);
  Scene s;
  s.num_classes = 3;
  s.instance_class = {2};
  const int n = 50;
  s.pos = Mat(n, 3);
  s.color = Mat(n, 3);
  s.normal = Mat(n, 3);
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) {
      s.pos.at(i, a) = rng.uniform(-50.0, 50.0);
      s.color.at(i, a) = rng.uniform();
    }
    // random unit normal
    double v[3], nn = 0.0;
    for (double& x : v) {
      x = rng.normal(0.0, 1.0);
    }
    nn = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    for (int a = 0; a < 3; ++a) s.normal.at(i, a) = v[a] / nn;
    s.instance_id.push_back(i % 2 == 0 ? 0 : -1);
  }
  const std::string p1 = (fs::temp_directory_path() / "scene_rr1.txt").string();
  const std::string p2 = (fs::temp_directory_path() / "scene_rr2.txt").string();
  save_scene(s, p1);
  save_scene(load_scene(p1), p2);
  EXPECT_EQ(file_text(p1), file_text(p2));
}

TEST(SceneIO, LoaderRejectsMalformedFiles) {
  // header not three ints
  EXPECT_THROW(load_scene(write_temp("4 2\n", "bad_header.txt")), std::runtime_error);
  // instance id out of range
  EXPECT_THROW(load_scene(write_temp("1 1 2\n5 0\n0 0 0 0 0 0 0 0 1 0\n", "bad_inst.txt")),
               std::runtime_error);
  // class out of range
  EXPECT_THROW(load_scene(write_temp("1 1 2\n0 7\n0 0 0 0 0 0 0 0 1 0\n", "bad_cls.txt")),
               std::runtime_error);
  // point line with 9 fields
  EXPECT_THROW(load_scene(write_temp("1 1 2\n0 0\n0 0 0 0 0 0 0 0 1\n", "bad_fields.txt")),
               std::runtime_error);
  // color out of range
  EXPECT_THROW(load_scene(write_temp("1 1 2\n0 0\n0 0 0 2.0 0 0 0 0 1 0\n", "bad_color.txt")),
               std::runtime_error);
  // non-unit normal
  EXPECT_THROW(load_scene(write_temp("1 1 2\n0 0\n0 0 0 0 0 0 0 0 0.5 0\n", "bad_normal.txt")),
               std::runtime_error);
  // point references unknown instance
  EXPECT_THROW(load_scene(write_temp("1 1 2\n0 0\n0 0 0 0 0 0 0 0 1 3\n", "bad_ref.txt")),
               std::runtime_error);
  // trailing content
  EXPECT_THROW(load_scene(write_temp("1 1 2\n0 0\n0 0 0 0 0 0 0 0 1 0\nextra\n", "bad_tail.txt")),
               std::runtime_error);
  // truncated points
  EXPECT_THROW(load_scene(write_temp("2 1 2\n0 0\n0 0 0 0 0 0 0 0 1 0\n", "bad_trunc.txt")),
               std::runtime_error);
  // duplicate instance row
  EXPECT_THROW(load_scene(write_temp("1 2 2\n0 0\n0 1\n0 0 0 0 0 0 0 0 1 0\n", "bad_dup.txt")),
               std::runtime_error);
}

TEST(SceneIO, LoaderErrorsCarryLineNumbers) {
  const std::string path = write_temp("1 1 2\n0 0\n0 0 0 2.0 0 0 0 0 1 0\n", "line_no.txt");
  try {
    load_scene(path);
    FAIL() << "expected a throw";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
}

TEST(Voxelize, HandCase) {
  // Three points in one cell (majority id 1), one point alone (id -1). Cell
  // keys sort lexicographically, so the (0,0,0) cell precedes (1,2,2).
  Scene s = tiny_scene();
  s.pos.at(1, 0) = 0.12;  // move point 1 into the first cell
  s.pos.at(1, 1) = 0.22;
  s.pos.at(1, 2) = 0.31;
  s.instance_id = {1, 1, 0, -1};
  const VoxelizeResult vr = voxelize_with_map(s, 1.0);
  ASSERT_EQ(vr.scene.num_points(), 2);
  // first cell mean position
  EXPECT_NEAR(vr.scene.pos.at(0, 0), (0.1 + 0.12 + 0.11) / 3.0, 1e-15);
  EXPECT_NEAR(vr.scene.pos.at(0, 1), (0.2 + 0.22 + 0.21) / 3.0, 1e-15);
  // majority vote: id 1 appears twice, id 0 once
  EXPECT_EQ(vr.scene.instance_id[0], 1);
  EXPECT_EQ(vr.scene.instance_id[1], -1);
  // map: points 0..2 -> voxel 0, point 3 -> voxel 1
  EXPECT_EQ(vr.point_to_voxel, (std::vector<int>{0, 0, 0, 1}));
  // instance table carried over
  EXPECT_EQ(vr.scene.num_instances(), 2);
}

TEST(Voxelize, MajorityTieGoesToSmallerId) {
  Scene s = tiny_scene();
  s.pos.at(1, 0) = 0.12;
  s.pos.at(1, 1) = 0.22;
  s.pos.at(1, 2) = 0.31;
  s.pos.at(3, 0) = 0.13;  // all four points in one cell now
  s.pos.at(3, 1) = 0.23;
  s.pos.at(3, 2) = 0.32;
  s.instance_id = {0, 1, 0, 1};  // 2 votes each
  const VoxelizeResult vr = voxelize_with_map(s, 1.0);
  ASSERT_EQ(vr.scene.num_points(), 1);
  EXPECT_EQ(vr.scene.instance_id[0], 0);
}

TEST(Voxelize, NegativeCoordinatesFloorCorrectly) {
  Scene s = tiny_scene();
  s.pos.at(0, 0) = -0.1;  // cell -1 along x, splitting away from point 2
  const VoxelizeResult vr = voxelize_with_map(s, 1.0);
  EXPECT_EQ(vr.scene.num_points(), 4);
  // lexicographic key order puts the negative cell first
  EXPECT_NEAR(vr.scene.pos.at(0, 0), -0.1, 1e-15);
}

TEST(Voxelize, NormalsRenormalizedAndColorsClamped) {
  Scene s = tiny_scene();
  // two opposing normals in one cell average to zero -> fallback (0,0,1)
  s.pos = Mat(2, 3);
  s.color = Mat(2, 3, 0.5);
  s.normal = Mat(2, 3);
  s.normal.at(0, 2) = 1.0;
  s.normal.at(1, 2) = -1.0;
  s.instance_id = {0, 0};
  s.instance_class = {0};
  const VoxelizeResult vr = voxelize_with_map(s, 5.0);
  ASSERT_EQ(vr.scene.num_points(), 1);
  EXPECT_DOUBLE_EQ(vr.scene.normal.at(0, 2), 1.0);
  double nn = 0.0;
  for (int a = 0; a < 3; ++a) nn += vr.scene.normal.at(0, a) * vr.scene.normal.at(0, a);
  EXPECT_NEAR(nn, 1.0, 1e-12);
}

TEST(Voxelize, DeterministicAcrossCalls) {
  Rng rng(5);
  Scene s;
  s.num_classes = 1;
  s.instance_class = {0};
  const int n = 300;
  s.pos = Mat(n, 3);
  s.color = Mat(n, 3, 0.5);
  s.normal = Mat(n, 3);
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) s.pos.at(i, a) = rng.uniform(-2.0, 2.0);
    s.normal.at(i, 2) = 1.0;
    s.instance_id.push_back(i % 3 == 0 ? 0 : -1);
  }
  const VoxelizeResult a = voxelize_with_map(s, 0.3);
  const VoxelizeResult b = voxelize_with_map(s, 0.3);
  EXPECT_EQ(a.scene.pos.v, b.scene.pos.v);
  EXPECT_EQ(a.scene.instance_id, b.scene.instance_id);
  EXPECT_EQ(a.point_to_voxel, b.point_to_voxel);
  EXPECT_LE(a.scene.num_points(), n);
  EXPECT_GE(a.scene.num_points(), 1);
  // every input point maps to a voxel whose cell contains it
  for (int i = 0; i < n; ++i) {
    const int v = a.point_to_voxel[static_cast<size_t>(i)];
    ASSERT_GE(v, 0);
    ASSERT_LT(v, a.scene.num_points());
  }
}

TEST(Superpoints, FirstOccurrenceDenseIds) {
  Scene s = tiny_scene();
  const Partition part = build_superpoints(s, 1.0);
  // point order: 0 -> cell A (id 0), 1 -> cell B (id 1), 2 -> cell A, 3 -> cell C
  EXPECT_EQ(part.count, 3);
  EXPECT_EQ(part.assign, (std::vector<int>{0, 1, 0, 2}));
  EXPECT_EQ(part.sizes(), (std::vector<int>{2, 1, 1}));
}

TEST(Superpoints, PoolRowsIsGroupMean) {
  Partition part;
  part.count = 2;
  part.assign = {0, 1, 0};
  Mat x(3, 2);
  x.at(0, 0) = 1.0;
  x.at(0, 1) = 2.0;
  x.at(1, 0) = 10.0;
  x.at(1, 1) = 20.0;
  x.at(2, 0) = 3.0;
  x.at(2, 1) = 4.0;
  const Mat pooled = pool_rows(x, part);
  EXPECT_DOUBLE_EQ(pooled.at(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(pooled.at(0, 1), 3.0);
  EXPECT_DOUBLE_EQ(pooled.at(1, 0), 10.0);
  const Mat back = broadcast_rows(pooled, part);
  EXPECT_DOUBLE_EQ(back.at(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(back.at(2, 1), 3.0);
  EXPECT_DOUBLE_EQ(back.at(1, 1), 20.0);
}

TEST(Superpoints, PoolRejectsMismatchedRows) {
  Partition part;
  part.count = 1;
  part.assign = {0, 0};
  EXPECT_THROW(pool_rows(Mat(3, 2), part), std::invalid_argument);
}

TEST(Superpoints, PoolThenBroadcastFixedPoint) {
  Rng rng(17);
  Partition part;
  part.count = 5;
  Mat x(40, 3);
  for (int i = 0; i < 40; ++i) {
    part.assign.push_back(i % 5);
    for (int a = 0; a < 3; ++a) x.at(i, a) = rng.uniform(-1.0, 1.0);
  }
  const Mat once = broadcast_rows(pool_rows(x, part), part);
  const Mat twice = broadcast_rows(pool_rows(once, part), part);
  for (size_t k = 0; k < once.size(); ++k) EXPECT_NEAR(once.v[k], twice.v[k], 1e-12);
}
