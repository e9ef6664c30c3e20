#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "caspr/sequence.hpp"

namespace caspr::geo {

/// Uniform hash grid over an n x 3 point set for exact nearest-neighbor
/// queries. Ties resolve to the lowest point index, as brute force does.
class PointGrid {
 public:
  PointGrid(const Tensor& points, double cell);

  struct Hit {
    std::size_t index = 0;
    double sq_dist = 0.0;
  };
  Hit nearest(const double* q) const;
  // Nearest point strictly closer than `radius`; false if none.
  bool nearest_within(const double* q, double radius, Hit& hit) const;

 private:
  std::int64_t key(std::int64_t x, std::int64_t y, std::int64_t z) const;
  void cell_of(const double* p, std::int64_t out[3]) const;
  void scan_cell(std::int64_t x, std::int64_t y, std::int64_t z, const double* q, Hit& best, bool& found) const;

  const Tensor& points_;
  double cell_;
  std::int64_t lo_[3] = {0, 0, 0};
  std::int64_t hi_[3] = {0, 0, 0};
  std::unordered_map<std::int64_t, std::vector<std::uint32_t>> cells_;
};

// Brute-force nearest neighbor (lowest index on ties).
PointGrid::Hit nearest_brute(const Tensor& points, const double* q);

/// Mean squared nearest-neighbor distance in each direction, summed.
double chamfer(const Tensor& a, const Tensor& b);

enum class EmdMode { auction, exact };
inline constexpr std::size_t kExactEmdLimit = 512;

/// Minimum over bijections of the mean squared distance.
double emd(const Tensor& a, const Tensor& b, EmdMode mode = EmdMode::auction);

/// Optimal assignment for a square row-major cost matrix (Hungarian method).
std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t n);
/// Epsilon-scaling auction; the result's total cost is within n * eps_final of
/// the optimum.
std::vector<std::size_t> auction(const std::vector<double>& cost, std::size_t n);

struct CanonError {
  std::vector<double> spatial;
  std::vector<double> temporal;
};

/// Per-frame mean Euclidean spatial error and mean absolute time error.
CanonError canonicalization_error(const TNocsSequence& pred, const TNocsSequence& gt);

/// x_world = scale * R * x_canonical + t
struct SimilarityPose {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return scale * (rotation * x) + translation; }
  Tensor apply(const Tensor& points) const;
  SimilarityPose inverse() const;
};

SimilarityPose umeyama_fit(const Tensor& src, const Tensor& dst);

struct RansacOptions {
  int iterations = 256;
  double inlier_threshold = 0.015;
  std::size_t sample_size = 4;
  std::uint64_t seed = 0;
};

struct RansacResult {
  SimilarityPose pose;
  std::vector<bool> inliers;
  std::size_t inlier_count = 0;
};

/// Hypothesizes similarity poses from random minimal samples of canonical ->
/// world correspondences and refits once on the best inlier set.
RansacResult ransac_pose(const Tensor& world, const Tensor& canonical, const RansacOptions& opts = {});

struct PoseError {
  double translation = 0.0;
  double rotation_deg = 0.0;
  double point = 0.0;
};

PoseError pose_error(const SimilarityPose& pred, const SimilarityPose& gt, const Tensor& canon_gt,
                     const Tensor& world);
double rotation_angle_deg(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b);

/// All frames' spatial canonical points stacked (no deduplication).
Tensor aggregate_union(const TNocsSequence& seq);

inline constexpr int kUnknownLabel = -1;

std::vector<int> propagate_labels(const Tensor& labeled, const std::vector<int>& labels, const Tensor& target,
                                  double radius = 0.05);
std::vector<int> propagate_labels_brute(const Tensor& labeled, const std::vector<int>& labels, const Tensor& target,
                                        double radius = 0.05);

struct Summary {
  std::size_t count = 0;
  double median = 0.0;
  double mean = 0.0;
  double stddev = 0.0;
};

Summary summarize(std::vector<double> values);

/// Line-delimited per-frame metric records with per-metric summaries.
class MetricReport {
 public:
  struct Record {
    std::string sequence;
    int frame = 0;
    std::string metric;
    double value = 0.0;
  };

  void add(std::string sequence, int frame, std::string metric, double value);
  const std::vector<Record>& records() const noexcept { return records_; }
  std::vector<std::string> metrics() const;
  std::vector<double> values(const std::string& metric) const;
  Summary summary(const std::string& metric) const;

  // Records as "record <seq> <frame> <metric> <value>" lines, then
  // "summary <metric> <count> <median> <mean> <std>" lines.
  void write(std::ostream& os) const;
  static MetricReport read(std::istream& is);
  // Human-readable table of the summaries.
  void write_table(std::ostream& os) const;

  bool operator==(const MetricReport& o) const;

 private:
  std::vector<Record> records_;
};

}  // namespace caspr::geo
