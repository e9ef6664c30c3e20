#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include <Eigen/Geometry>

#include "caspr/geometry.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace caspr;
using namespace caspr::geo;
using caspr::testing::random_tensor;

namespace {

double brute_chamfer(const Tensor& a, const Tensor& b) {
  auto one_way = [](const Tensor& x, const Tensor& y) {
    double acc = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double best = INFINITY;
      for (std::size_t j = 0; j < y.rows(); ++j) {
        double d = 0;
        for (int c = 0; c < 3; ++c) d += (x.at(i, c) - y.at(j, c)) * (x.at(i, c) - y.at(j, c));
        best = std::min(best, d);
      }
      acc += best;
    }
    return acc / x.rows();
  };
  return one_way(a, b) + one_way(b, a);
}

double brute_emd(const Tensor& a, const Tensor& b) {
  std::vector<std::size_t> perm(a.rows());
  std::iota(perm.begin(), perm.end(), 0);
  double best = INFINITY;
  do {
    double total = 0;
    for (std::size_t i = 0; i < perm.size(); ++i)
      for (int c = 0; c < 3; ++c) total += std::pow(a.at(i, c) - b.at(perm[i], c), 2);
    best = std::min(best, total / a.rows());
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Eigen::Matrix3d rot_z(double deg) {
  return Eigen::AngleAxisd(deg * std::numbers::pi / 180.0, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

}  // namespace

TEST_CASE("chamfer examples") {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor(40, 3, rng);
  CHECK(chamfer(x, x) == 0.0);
  CHECK(chamfer(Tensor::row({0, 0, 0}), Tensor::row({1, 0, 0})) == 2.0);
  for (std::size_t n : {1, 17, 128, 256}) {
    Tensor a = random_tensor(n, 3, rng), b = random_tensor(n + 5, 3, rng, -1, 3);
    CHECK(std::abs(chamfer(a, b) - brute_chamfer(a, b)) < 1e-12);
    CHECK(chamfer(a, b) == chamfer(b, a));
  }
  CHECK_THROWS_AS(chamfer(Tensor::zeros(0, 3), x), Error);
}

TEST_CASE("chamfer is zero only for equal multisets") {
  Tensor a = Tensor::matrix(3, 3, {0, 0, 0, 1, 0, 0, 0, 1, 0});
  Tensor b = Tensor::matrix(3, 3, {0, 1, 0, 0, 0, 0, 1, 0, 0});
  CHECK(chamfer(a, b) == 0.0);
  Tensor c = b;
  c.at(0, 2) = 1e-3;
  CHECK(chamfer(a, c) > 0.0);
}

TEST_CASE("grid nearest neighbor equals brute force") {
  std::mt19937_64 rng(2);
  for (double cell : {0.01, 0.05, 0.3, 2.0}) {
    Tensor pts = random_tensor(300, 3, rng, 0, 1);
    // Duplicates to exercise tie-breaking.
    for (int c = 0; c < 3; ++c) pts.at(250, c) = pts.at(10, c);
    PointGrid grid(pts, cell);
    Tensor queries = random_tensor(200, 3, rng, -0.5, 1.5);
    for (std::size_t q = 0; q < queries.rows(); ++q) {
      auto g = grid.nearest(&queries.storage()[q * 3]);
      auto b = nearest_brute(pts, &queries.storage()[q * 3]);
      CHECK(g.index == b.index);
      CHECK(g.sq_dist == b.sq_dist);
    }
    auto self = grid.nearest(&pts.storage()[250 * 3]);
    CHECK(self.index == 10);
  }
}

TEST_CASE("emd examples") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor(30, 3, rng);
  CHECK(emd(x, x, EmdMode::exact) == 0.0);
  CHECK(emd(x, x, EmdMode::auction) == 0.0);
  CHECK(emd(Tensor::row({0, 0, 0}), Tensor::row({0, 0, 2}), EmdMode::exact) == 4.0);
  CHECK(emd(Tensor::row({0, 0, 0}), Tensor::row({0, 0, 2}), EmdMode::auction) == 4.0);
  CHECK_THROWS_AS(emd(x, random_tensor(31, 3, rng)), ShapeError);
  CHECK_THROWS_AS(emd(random_tensor(513, 3, rng), random_tensor(513, 3, rng), EmdMode::exact), Error);
}

TEST_CASE("hungarian matches exhaustive search") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + trial % 7;
    Tensor a = random_tensor(n, 3, rng), b = random_tensor(n, 3, rng);
    CHECK(std::abs(emd(a, b, EmdMode::exact) - brute_emd(a, b)) < 1e-12);
  }
}

TEST_CASE("auction is close to exact and never below it") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = random_tensor(64, 3, rng), b = random_tensor(64, 3, rng, -1, 2);
    const double exact = emd(a, b, EmdMode::exact);
    const double approx = emd(a, b, EmdMode::auction);
    CHECK(approx >= exact);
    CHECK(approx <= exact * 1.01);
  }
}

TEST_CASE("canonicalization error") {
  TNocsSequence gt;
  std::mt19937_64 rng(6);
  gt.frames = {random_tensor(10, 4, rng, 0, 1), random_tensor(7, 4, rng, 0, 1)};
  auto same = canonicalization_error(gt, gt);
  CHECK(same.spatial == std::vector<double>{0, 0});
  CHECK(same.temporal == std::vector<double>{0, 0});
  TNocsSequence moved = gt;
  for (auto& f : moved.frames)
    for (std::size_t r = 0; r < f.rows(); ++r) f.at(r, 0) += 0.1;
  auto off = canonicalization_error(moved, gt);
  for (double s : off.spatial) CHECK(std::abs(s - 0.1) < 1e-12);
  for (double t : off.temporal) CHECK(t == 0.0);
  TNocsSequence short_seq = gt;
  short_seq.frames.pop_back();
  CHECK_THROWS_AS(canonicalization_error(short_seq, gt), ShapeError);
}

TEST_CASE("umeyama examples") {
  std::mt19937_64 rng(7);
  Tensor src = random_tensor(20, 3, rng);
  SimilarityPose id = umeyama_fit(src, src);
  CHECK(std::abs(id.scale - 1.0) < 1e-12);
  CHECK((id.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(id.translation.norm() < 1e-12);

  SimilarityPose truth;
  truth.scale = 2.0;
  truth.rotation = rot_z(90);
  truth.translation = {1, 2, 3};
  SimilarityPose fit = umeyama_fit(src, truth.apply(src));
  CHECK(std::abs(fit.scale - 2.0) < 1e-9);
  CHECK((fit.rotation - truth.rotation).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((fit.translation - truth.translation).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(((fit.rotation.transpose() * fit.rotation) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-9);

  // Minimal and rigid cases.
  for (std::size_t n : {3, 4, 50}) {
    Tensor s = random_tensor(n, 3, rng);
    SimilarityPose p;
    p.scale = 1.0;
    p.rotation = random_rotation(rng);
    p.translation = {0.3, -0.2, 0.9};
    SimilarityPose f = umeyama_fit(s, p.apply(s));
    CHECK(std::abs(f.scale - 1.0) < 1e-9);
    CHECK((f.rotation - p.rotation).cwiseAbs().maxCoeff() < 1e-9);
  }

  Tensor colinear = Tensor::matrix(4, 3, {0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3});
  CHECK_THROWS_AS(umeyama_fit(colinear, colinear), Error);
}

TEST_CASE("umeyama with noise") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> noise(0.0, 0.01);
  Tensor src = random_tensor(200, 3, rng, 0, 1);
  SimilarityPose truth;
  truth.scale = 1.7;
  truth.rotation = random_rotation(rng);
  truth.translation = {0.5, 0.1, -2};
  Tensor dst = truth.apply(src);
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += noise(rng);
  SimilarityPose fit = umeyama_fit(src, dst);
  Tensor back = fit.apply(src);
  double sq = 0;
  for (std::size_t i = 0; i < dst.size(); ++i) sq += std::pow(back[i] - dst[i], 2);
  CHECK(std::sqrt(sq / src.rows()) <= 0.02);
}

TEST_CASE("ransac with outliers") {
  std::mt19937_64 rng(9);
  Tensor canon = random_tensor(300, 3, rng, 0, 1);
  SimilarityPose truth;
  truth.scale = 1.3;
  truth.rotation = random_rotation(rng);
  truth.translation = {0.2, -0.4, 1.5};
  Tensor world = truth.apply(canon);
  RansacResult clean = ransac_pose(world, canon);
  CHECK(clean.inlier_count == 300);
  CHECK((clean.pose.rotation - truth.rotation).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((clean.pose.translation - truth.translation).cwiseAbs().maxCoeff() < 1e-9);

  std::uniform_real_distribution<double> u(-1, 2);
  std::normal_distribution<double> noise(0, 0.002);
  for (std::size_t i = 0; i < world.size(); ++i) world[i] += noise(rng);
  for (std::size_t r = 0; r < 90; ++r)
    for (int c = 0; c < 3; ++c) world.at(r * 3 + 1, c) = u(rng);
  RansacOptions opts;
  opts.seed = 3;
  RansacResult noisy = ransac_pose(world, canon, opts);
  CHECK(rotation_angle_deg(noisy.pose.rotation, truth.rotation) < 1.0);
  CHECK((noisy.pose.translation - truth.translation).norm() < 0.01);
  RansacResult again = ransac_pose(world, canon, opts);
  CHECK(again.pose.rotation == noisy.pose.rotation);
  CHECK(again.inliers == noisy.inliers);

  CHECK_THROWS_AS(ransac_pose(world.rows() ? Tensor::zeros(3, 3) : world, Tensor::zeros(3, 3)), Error);
}

TEST_CASE("pose error examples") {
  std::mt19937_64 rng(10);
  Tensor canon = random_tensor(25, 3, rng, 0, 1);
  SimilarityPose gt;
  gt.scale = 0.8;
  gt.rotation = random_rotation(rng);
  gt.translation = {1, 0, 0};
  Tensor world = gt.apply(canon);
  PoseError same = pose_error(gt, gt, canon, world);
  CHECK(same.translation == 0.0);
  CHECK(same.rotation_deg < 1e-12);
  CHECK(same.point < 1e-12);
  SimilarityPose turned = gt;
  turned.rotation = gt.rotation * rot_z(10);
  CHECK(std::abs(pose_error(turned, gt, canon, world).rotation_deg - 10.0) < 1e-9);
}

TEST_CASE("union aggregation") {
  TNocsSequence seq;
  std::mt19937_64 rng(11);
  seq.frames = {random_tensor(10, 4, rng), random_tensor(10, 4, rng)};
  CHECK(aggregate_union(seq).rows() == 20);
  seq.frames[1] = seq.frames[0];
  Tensor u = aggregate_union(seq);
  for (std::size_t r = 0; r < 10; ++r)
    for (int c = 0; c < 3; ++c) CHECK(u.at(r, c) == u.at(r + 10, c));
}

TEST_CASE("label propagation") {
  std::mt19937_64 rng(12);
  Tensor labeled = random_tensor(400, 3, rng, 0, 1);
  std::vector<int> labels(400);
  for (std::size_t i = 0; i < 400; ++i) labels[i] = static_cast<int>(i % 5);
  CHECK(propagate_labels(labeled, labels, labeled) == labels);

  Tensor far = Tensor::row({0.06, 0, 0});
  CHECK(propagate_labels(Tensor::row({0, 0, 0}), {3}, far)[0] == kUnknownLabel);
  CHECK(propagate_labels(Tensor::row({0, 0, 0}), {3}, Tensor::row({0.04, 0, 0}))[0] == 3);

  Tensor target = random_tensor(500, 3, rng, -0.1, 1.1);
  CHECK(propagate_labels(labeled, labels, target) == propagate_labels_brute(labeled, labels, target));
}

TEST_CASE("metric report") {
  MetricReport report;
  report.add("seq_a", 0, "cd", 1.5);
  report.add("seq_a", 1, "cd", 0.5);
  report.add("seq_b", 0, "cd", 2.0);
  report.add("seq_b", 0, "emd", 1.0 / 3.0);
  Summary s = report.summary("cd");
  CHECK(s.count == 3);
  CHECK(s.median == 1.5);
  CHECK(std::abs(s.mean - 4.0 / 3.0) < 1e-15);
  CHECK(summarize({1, 2, 3, 4}).median == 2.5);
  std::stringstream ss;
  report.write(ss);
  CHECK(ss.str().find("summary cd 3") != std::string::npos);
  MetricReport back = MetricReport::read(ss);
  CHECK(back == report);
}
