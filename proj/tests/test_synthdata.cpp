#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "caspr/synthdata.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace caspr;
using namespace caspr::synth;
using caspr::testing::max_abs_diff;

namespace {

const ShapeKind kAllKinds[] = {ShapeKind::box_composite, ShapeKind::superellipsoid, ShapeKind::winged,
                               ShapeKind::legged};

Eigen::Vector3d row3(const Tensor& t, std::size_t r) { return {t.at(r, 0), t.at(r, 1), t.at(r, 2)}; }

bool same_tensor(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

bool same_record(const SequenceRecord& a, const SequenceRecord& b) {
  if (a.instance_id != b.instance_id || a.split != b.split || a.kind != b.kind) return false;
  if (a.raw_times != b.raw_times || a.canon_times != b.canon_times || a.labels != b.labels) return false;
  if (a.frame_count() != b.frame_count() || a.rest.size() != b.rest.size()) return false;
  for (std::size_t k = 0; k < a.frame_count(); ++k) {
    if (!same_tensor(a.world[k], b.world[k]) || !same_tensor(a.nocs[k], b.nocs[k])) return false;
    if (a.poses[k].scale != b.poses[k].scale || a.poses[k].rotation != b.poses[k].rotation ||
        a.poses[k].translation != b.poses[k].translation)
      return false;
  }
  for (std::size_t k = 0; k < a.rest.size(); ++k)
    if (!same_tensor(a.rest[k], b.rest[k])) return false;
  return true;
}

SequenceOptions small_options() {
  SequenceOptions o;
  o.n_points = 256;
  return o;
}

}  // namespace

TEST_CASE("shapes are deterministic and normalized") {
  for (ShapeKind kind : kAllKinds) {
    const ShapeModel a = sample_shape(kind, 11);
    const ShapeModel b = sample_shape(kind, 11);
    CHECK(a.params == b.params);
    REQUIRE(a.triangles.size() == b.triangles.size());
    CHECK(a.part_count >= 3);
    CHECK(sample_shape(kind, 12).params != a.params);

    std::mt19937_64 rng(3);
    const SurfaceSamples s = a.sample(20000, rng);
    double lo = 1.0, hi = 0.0;
    for (std::size_t i = 0; i < s.points.size(); ++i) {
      lo = std::min(lo, s.points[i]);
      hi = std::max(hi, s.points[i]);
    }
    CHECK(lo >= 0.0);
    CHECK(hi <= 1.0);
    std::set<int> parts(s.labels.begin(), s.labels.end());
    CHECK(parts.size() == 3);
  }
}

TEST_CASE("sample normals and parameterization agree with the mesh") {
  const ShapeModel shape = sample_shape(ShapeKind::superellipsoid, 4);
  std::mt19937_64 rng(1);
  const SurfaceSamples s = shape.sample(500, rng);
  for (std::size_t i = 0; i < 500; ++i) {
    const Eigen::Vector3d p = row3(s.points, i);
    CHECK((shape.point_at(s.triangle[i], s.barycentric[i]) - p).norm() < 1e-12);
    // Convex shape about its center: outward normals point away from it.
    CHECK(row3(s.normals, i).dot(p - Eigen::Vector3d::Constant(0.5)) > 0.0);
    CHECK(std::abs(row3(s.normals, i).norm() - 1.0) < 1e-12);
  }
}

TEST_CASE("area-weighted sampling matches analytic part areas") {
  // Legged shapes are built from boxes only, so part areas have closed forms
  // in the raw parameters: width, depth, leg height, back height, leg half size.
  const ShapeModel shape = sample_shape(ShapeKind::legged, 21);
  const double w = shape.params[0], d = shape.params[1], lh = shape.params[2], bh = shape.params[3],
               leg = shape.params[4], t = 0.05;
  const double seat = 2 * (w * d + w * t + d * t);
  const double back = 2 * (w * bh + w * t + bh * t);
  const double legs = 4 * (8 * leg * lh + 8 * leg * leg);
  const double total = seat + back + legs;
  const double expected[3] = {seat / total, back / total, legs / total};

  const auto areas = shape.part_areas();
  for (int p = 0; p < 3; ++p) CHECK(areas[p] / shape.area() == doctest::Approx(expected[p]).epsilon(1e-9));

  std::mt19937_64 rng(5);
  const std::size_t n = 100000;
  const SurfaceSamples s = shape.sample(n, rng);
  std::size_t counts[3] = {0, 0, 0};
  for (int l : s.labels) ++counts[l];
  for (int p = 0; p < 3; ++p) CHECK(std::abs(double(counts[p]) / n - expected[p]) < 0.02);
}

TEST_CASE("trajectory examples") {
  const TrajectoryLimits limits;
  SUBCASE("static camera") {
    const CameraTrajectory traj = make_trajectory({30, 10, 2}, {0, 0, 0}, 10, limits);
    for (std::size_t k = 1; k < 10; ++k) {
      CHECK(traj.position(k) == traj.position(0));
      CHECK(traj.rotation(k) == traj.rotation(0));
    }
  }
  SUBCASE("latitude reflects at the limit") {
    const CameraTrajectory traj = make_trajectory({0, 60, 2}, {10, 5, 0}, 4, limits);
    CHECK(traj.states[1].lat_deg == doctest::Approx(55));
    CHECK(traj.states[2].lat_deg == doctest::Approx(50));
    CHECK(traj.states[1].lon_deg == doctest::Approx(10));
  }
  SUBCASE("radius reflects at the limit") {
    const CameraTrajectory traj = make_trajectory({0, 0, 2.95}, {0, 0, 0.1}, 3, limits);
    CHECK(traj.states[1].radius == doctest::Approx(2.95));
    CHECK(traj.states[2].radius == doctest::Approx(2.85));
  }
  SUBCASE("random trajectories stay in bounds and look at the center") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const CameraTrajectory traj = gen_trajectory(seed, 10, limits, seed % 2 == 0);
      REQUIRE(traj.states.size() == 10);
      for (std::size_t k = 0; k < 10; ++k) {
        const auto& st = traj.states[k];
        CHECK(st.lat_deg >= limits.lat_min_deg);
        CHECK(st.lat_deg <= limits.lat_max_deg);
        CHECK(st.radius >= limits.radius_min);
        CHECK(st.radius <= limits.radius_max);
        const Eigen::Vector3d p = traj.position(k);
        CHECK(std::abs(p.norm() - st.radius) < 1e-9);
        const Eigen::Matrix3d r = traj.rotation(k);
        CHECK((r * r.transpose() - Eigen::Matrix3d::Identity()).norm() < 1e-9);
        CHECK(r.determinant() == doctest::Approx(1.0));
        CHECK((r.row(2).transpose() + p / p.norm()).norm() < 1e-9);
        // The canonical center sits on the optical axis at the camera distance.
        const geo::SimilarityPose pose = camera_pose(traj, k, 0.8);
        const Eigen::Vector3d c = pose.apply(Eigen::Vector3d::Constant(0.5));
        CHECK(std::abs(c.x()) < 1e-9);
        CHECK(std::abs(c.y()) < 1e-9);
        CHECK(std::abs(c.z() - st.radius) < 1e-9);
      }
    }
  }
}

TEST_CASE("directional trajectories always advance in longitude") {
  const TrajectoryLimits limits;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const CameraTrajectory traj = gen_trajectory(seed, 10, limits, true);
    for (std::size_t k = 1; k < 10; ++k) {
      double step = traj.states[k].lon_deg - traj.states[k - 1].lon_deg;
      if (step < 0) step += 360.0;
      CHECK(step >= limits.lon_speed_min_deg - 1e-9);
      CHECK(step <= limits.lon_speed_max_deg + 1e-9);
    }
  }
}

TEST_CASE("partial rendering") {
  const ShapeModel shape = sample_shape(ShapeKind::superellipsoid, 2);
  const TrajectoryLimits limits;
  const CameraTrajectory front = make_trajectory({0, 0, 2}, {0, 0, 0}, 2, limits);
  const CameraTrajectory back = make_trajectory({180, 0, 2}, {0, 0, 0}, 2, limits);
  std::mt19937_64 rng(8);
  const geo::SimilarityPose pose_a = camera_pose(front, 0, 1.0);
  const RenderResult a = render_partial(shape, pose_a, 1024, rng);
  REQUIRE(a.world.rows() == 1024);
  CHECK(a.labels.size() == 1024);
  CHECK(a.visible >= 1024);

  SUBCASE("visible points face the camera") {
    for (std::size_t i = 0; i < 1024; ++i) {
      const Eigen::Vector3d n = pose_a.rotation * row3(a.normals, i);
      CHECK(n.dot(row3(a.world, i)) < 0.0);
    }
  }
  SUBCASE("world equals posed canonical points") { CHECK(max_abs_diff(pose_a.apply(a.nocs), a.world) <= 1e-12); }
  SUBCASE("opposite views cover more together") {
    const RenderResult b = render_partial(shape, camera_pose(back, 0, 1.0), 1024, rng);
    const Tensor dense = shape.sample(4096, rng).points;
    const Tensor both = stack_rows({a.nocs, b.nocs}, 3);
    const double ca = geo::chamfer(a.nocs, dense), cb = geo::chamfer(b.nocs, dense);
    const double cu = geo::chamfer(both, dense);
    CHECK(cu < ca);
    CHECK(cu < cb);
  }
  SUBCASE("object behind the camera is an error") {
    geo::SimilarityPose behind = pose_a;
    behind.translation.z() = -behind.translation.z();
    CHECK_THROWS_AS(render_partial(shape, behind, 16, rng), Error);
  }
}

TEST_CASE("rigid sequence generation") {
  const ShapeModel shape = sample_shape(ShapeKind::box_composite, 5);
  const CameraTrajectory traj = gen_trajectory(9, 10);
  SequenceOptions opts;
  opts.object_scale = 1.2;
  std::mt19937_64 rng(1);
  const SequenceRecord rec = gen_sequence(shape, traj, opts, rng);
  REQUIRE(rec.frame_count() == 10);
  CHECK(rec.raw_times.front() == 0.0);
  CHECK(rec.raw_times.back() == 5.0);
  for (std::size_t k = 0; k < 10; ++k) {
    CHECK(rec.world[k].rows() == 4096);
    CHECK(rec.canon_times[k] == rec.raw_times[k] / 5.0);
    CHECK(rec.raw_times[k] == doctest::Approx(5.0 * k / 9.0));
    CHECK(max_abs_diff(rec.poses[k].apply(rec.nocs[k]), rec.world[k]) <= 1e-12);
    CHECK(rec.poses[k].scale == 1.2);
  }
  const TNocsSequence gt = rec.gt();
  CHECK(gt.frames[3].at(17, 3) == rec.canon_times[3]);
  CHECK(gt.frames[3].at(17, 1) == rec.nocs[3].at(17, 1));
  const RawSequence raw = rec.raw();
  CHECK_NOTHROW(raw.validate());
  CHECK(raw.frames[9].time == 5.0);
}

TEST_CASE("warp examples") {
  const ShapeModel shape = sample_shape(ShapeKind::box_composite, 6);
  const WarpParams warp = random_warp(shape, 77);
  std::mt19937_64 rng(2);
  const SurfaceSamples s = shape.sample(10000, rng);

  CHECK(same_tensor(warp_points(s.points, warp, 0.0), s.points));
  CHECK(warp.displacement_bound() > 0.0);

  double worst = 0.0;
  for (double t : {0.1, 0.25, 0.5, 0.75, 1.0}) {
    const Tensor moved = warp_points(s.points, warp, t);
    for (std::size_t i = 0; i < moved.size(); ++i) {
      CHECK(moved[i] >= 0.0);
      CHECK(moved[i] <= 1.0);
    }
    for (std::size_t i = 0; i < moved.rows(); ++i) worst = std::max(worst, (row3(moved, i) - row3(s.points, i)).norm());
  }
  CHECK(worst > 0.0);
  CHECK(worst <= warp.displacement_bound());

  // Nearest-neighbor ties go to the lowest index, so any coincident pair
  // makes some point's nearest neighbor differ from itself.
  const Tensor moved = warp_points(s.points, warp, 0.6);
  geo::PointGrid grid(moved, 0.02);
  std::size_t collisions = 0;
  for (std::size_t i = 0; i < moved.rows(); ++i) {
    const double q[3] = {moved.at(i, 0), moved.at(i, 1), moved.at(i, 2)};
    if (grid.nearest(q).index != i) ++collisions;
  }
  CHECK(collisions == 0);
}

TEST_CASE("deforming sequences") {
  const ShapeModel shape = sample_shape(ShapeKind::superellipsoid, 3);
  const WarpParams warp = random_warp(shape, 5);
  std::mt19937_64 rng(4);
  const SequenceRecord rec = gen_deforming_sequence(shape, warp, small_options(), rng);
  REQUIRE(rec.rest.size() == 10);
  for (std::size_t k = 0; k < 10; ++k) {
    CHECK(same_tensor(rec.world[k], rec.nocs[k]));
    CHECK(same_tensor(warp_points(rec.rest[k], warp, rec.canon_times[k]), rec.nocs[k]));
  }
  CHECK(same_tensor(rec.rest[0], rec.nocs[0]));
}

TEST_CASE("training views") {
  DatasetOptions dopts;
  dopts.sequence = small_options();
  const SequenceRecord rec = generate_one(dopts, 3);

  SUBCASE("full selection is the record up to the time shift") {
    const TrainingView v = subsample_training_view(rec, 10, 256, 1);
    REQUIRE(v.raw.frames.size() == 10);
    for (std::size_t k = 0; k < 10; ++k) {
      CHECK(same_tensor(v.raw.frames[k].points, rec.world[k]));
      CHECK(v.raw.frames[k].time == rec.raw_times[k]);
      CHECK(same_tensor(v.gt.frames[k], rec.gt().frames[k]));
      CHECK(v.labels[k] == rec.labels[k]);
    }
  }
  SUBCASE("subsets are sorted, shifted, aligned and deterministic") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const TrainingView v = subsample_training_view(rec, 5, 64, seed);
      const TrainingView w = subsample_training_view(rec, 5, 64, seed);
      REQUIRE(v.frames.size() == 5);
      CHECK(std::is_sorted(v.frames.begin(), v.frames.end()));
      CHECK(v.frames == w.frames);
      CHECK(v.raw.frames.front().time == 0.0);
      for (std::size_t j = 0; j < 5; ++j) {
        const std::size_t k = v.frames[j];
        CHECK(v.raw.frames[j].points.rows() == 64);
        CHECK(same_tensor(v.raw.frames[j].points, w.raw.frames[j].points));
        CHECK(v.raw.frames[j].time == doctest::Approx(rec.raw_times[k] - rec.raw_times[v.frames[0]]));
        const Tensor spatial = v.gt.spatial(j);
        CHECK(max_abs_diff(rec.poses[k].apply(spatial), v.raw.frames[j].points) <= 1e-12);
      }
    }
  }
  SUBCASE("invalid frame counts") { CHECK_THROWS_AS(subsample_training_view(rec, 11, 10, 0), Error); }
}

TEST_CASE("time reversal") {
  DatasetOptions dopts;
  dopts.sequence = small_options();
  const SequenceRecord rec = generate_one(dopts, 0);
  const SequenceRecord rev = time_reversed(rec);
  CHECK(rev.raw_times.front() == 0.0);
  CHECK(rev.raw_times.back() == 5.0);
  CHECK(same_tensor(rev.world[0], rec.world[9]));
  CHECK(same_tensor(rev.nocs[2], rec.nocs[7]));
  CHECK(same_record(time_reversed(rev), rec));
}

TEST_CASE("dataset splits and determinism") {
  const std::size_t count = 200;
  std::size_t train = 0, val = 0, test = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string s = split_of(i, count, 42);
    train += s == "train";
    val += s == "val";
    test += s == "test";
  }
  CHECK(train == 160);
  CHECK(val == 20);
  CHECK(test == 20);

  DatasetOptions dopts;
  dopts.count = 6;
  dopts.seed = 42;
  dopts.sequence = small_options();
  const auto a = generate_dataset(dopts);
  const auto b = generate_dataset(dopts);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(same_record(a[i], b[i]));
    ids.insert(a[i].instance_id);
  }
  CHECK(ids.size() == a.size());
  dopts.seed = 43;
  CHECK_FALSE(same_record(generate_one(dopts, 0), a[0]));
}

TEST_CASE("single-shape directional datasets") {
  DatasetOptions dopts;
  dopts.count = 4;
  dopts.seed = 5;
  dopts.sequence = small_options();
  dopts.directional = true;
  dopts.single_shape = true;
  const TrajectoryLimits limits;
  const double radius = 0.5 * (limits.radius_min + limits.radius_max);
  const Eigen::Vector3d center = Eigen::Vector3d::Constant(0.5);
  for (const SequenceRecord& rec : generate_dataset(dopts)) {
    const Eigen::Vector3d first = rec.poses[0].apply(center);
    for (std::size_t k = 0; k < rec.frame_count(); ++k) {
      CHECK(rec.poses[k].scale == 1.0);
      const Eigen::Vector3d c = rec.poses[k].apply(center);
      CHECK(std::abs(c.norm() - radius) < 1e-9);
      CHECK((c - first).norm() < 1e-9);
    }
  }
}

TEST_CASE("sequence files round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "caspr_test_synthdata";
  std::filesystem::remove_all(dir);
  DatasetOptions dopts;
  dopts.count = 10;
  dopts.sequence = small_options();
  auto records = generate_dataset(dopts);
  dopts.deforming = true;
  records.push_back(generate_one(dopts, 9));
  records.back().instance_id += "_warp";
  write_dataset(dir, records);

  const auto manifest = read_manifest(dir);
  REQUIRE(manifest.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(manifest[i].split == records[i].split);
    CHECK(same_record(read_sequence(manifest[i].path), records[i]));
  }
  std::size_t total = 0;
  for (const char* split : {"train", "val", "test"}) total += read_split(dir, split).size();
  CHECK(total == records.size());

  Tensor colors = Tensor::zeros(records[0].nocs[0].rows(), 3);
  write_ply(dir / "frame.ply", records[0].nocs[0], colors);
  std::ifstream ply(dir / "frame.ply");
  std::string line;
  std::getline(ply, line);
  CHECK(line == "ply");
  std::getline(ply, line);
  std::getline(ply, line);
  CHECK(line == "element vertex 256");
  CHECK_THROWS_AS(read_sequence(dir / "missing.seq"), Error);
  std::filesystem::remove_all(dir);
}
