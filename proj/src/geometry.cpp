#include "caspr/geometry.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>
#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>

namespace caspr::geo {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_points(const Tensor& t, const char* what) {
  if (t.rank() != 2 || t.cols() != 3) throw ShapeError(std::string(what) + ": expected n x 3 points");
}

inline double sq_dist(const double* a, const double* b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

inline bool better(double d, std::size_t i, const PointGrid::Hit& best, bool found) {
  return !found || d < best.sq_dist || (d == best.sq_dist && i < best.index);
}

Eigen::Vector3d row3(const Tensor& t, std::size_t r) { return {t.at(r, 0), t.at(r, 1), t.at(r, 2)}; }

double auto_cell(const Tensor& pts) {
  double lo[3] = {kInf, kInf, kInf};
  double hi[3] = {-kInf, -kInf, -kInf};
  for (std::size_t r = 0; r < pts.rows(); ++r)
    for (int c = 0; c < 3; ++c) {
      lo[c] = std::min(lo[c], pts.at(r, c));
      hi[c] = std::max(hi[c], pts.at(r, c));
    }
  double extent = 0.0;
  for (int c = 0; c < 3; ++c) extent = std::max(extent, hi[c] - lo[c]);
  const double per_axis = std::cbrt(static_cast<double>(std::max<std::size_t>(pts.rows(), 1)));
  return std::max(extent / per_axis, 1e-9);
}

double mean_nearest_sq(const Tensor& from, const Tensor& to) {
  PointGrid grid(to, auto_cell(to));
  double acc = 0.0;
  for (std::size_t r = 0; r < from.rows(); ++r) acc += grid.nearest(&from.storage()[r * 3]).sq_dist;
  return acc / static_cast<double>(from.rows());
}

std::vector<double> cost_matrix(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows();
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = sq_dist(&a.storage()[i * 3], &b.storage()[j * 3]);
  return cost;
}

}  // namespace

PointGrid::PointGrid(const Tensor& points, double cell) : points_(points), cell_(cell) {
  require_points(points, "PointGrid");
  if (!(cell > 0.0)) throw Error("PointGrid: cell size must be positive");
  for (int c = 0; c < 3; ++c) {
    lo_[c] = std::numeric_limits<std::int64_t>::max();
    hi_[c] = std::numeric_limits<std::int64_t>::min();
  }
  std::vector<std::array<std::int64_t, 3>> ids(points.rows());
  for (std::size_t r = 0; r < points.rows(); ++r) {
    cell_of(&points.storage()[r * 3], ids[r].data());
    for (int c = 0; c < 3; ++c) {
      lo_[c] = std::min(lo_[c], ids[r][c]);
      hi_[c] = std::max(hi_[c], ids[r][c]);
    }
  }
  for (std::size_t r = 0; r < points.rows(); ++r) {
    cells_[key(ids[r][0], ids[r][1], ids[r][2])].push_back(static_cast<std::uint32_t>(r));
  }
}

void PointGrid::cell_of(const double* p, std::int64_t out[3]) const {
  for (int c = 0; c < 3; ++c) out[c] = static_cast<std::int64_t>(std::floor(p[c] / cell_));
}

std::int64_t PointGrid::key(std::int64_t x, std::int64_t y, std::int64_t z) const {
  const std::int64_t ny = hi_[1] - lo_[1] + 1;
  const std::int64_t nz = hi_[2] - lo_[2] + 1;
  return ((x - lo_[0]) * ny + (y - lo_[1])) * nz + (z - lo_[2]);
}

void PointGrid::scan_cell(std::int64_t x, std::int64_t y, std::int64_t z, const double* q, Hit& best,
                          bool& found) const {
  auto it = cells_.find(key(x, y, z));
  if (it == cells_.end()) return;
  for (std::uint32_t i : it->second) {
    const double d = sq_dist(q, &points_.storage()[static_cast<std::size_t>(i) * 3]);
    if (better(d, i, best, found)) {
      best = {i, d};
      found = true;
    }
  }
}

namespace {

// Visits cells at Chebyshev distance exactly r from c, clipped to [lo, hi].
template <class F>
void for_ring(const std::int64_t c[3], std::int64_t r, const std::int64_t lo[3], const std::int64_t hi[3], F&& f) {
  const std::int64_t x0 = std::max(c[0] - r, lo[0]), x1 = std::min(c[0] + r, hi[0]);
  const std::int64_t y0 = std::max(c[1] - r, lo[1]), y1 = std::min(c[1] + r, hi[1]);
  const std::int64_t z0 = std::max(c[2] - r, lo[2]), z1 = std::min(c[2] + r, hi[2]);
  for (std::int64_t x = x0; x <= x1; ++x) {
    for (std::int64_t y = y0; y <= y1; ++y) {
      const bool edge = std::abs(x - c[0]) == r || std::abs(y - c[1]) == r;
      if (edge) {
        for (std::int64_t z = z0; z <= z1; ++z) f(x, y, z);
      } else {
        if (c[2] - r >= lo[2] && c[2] - r <= hi[2]) f(x, y, c[2] - r);
        if (r > 0 && c[2] + r >= lo[2] && c[2] + r <= hi[2]) f(x, y, c[2] + r);
      }
    }
  }
}

}  // namespace

PointGrid::Hit PointGrid::nearest(const double* q) const {
  if (points_.rows() == 0) throw Error("nearest neighbor query on an empty set");
  std::int64_t c[3];
  cell_of(q, c);
  // Rings closer than this contain no cells.
  std::int64_t start = 0, stop = 0;
  for (int d = 0; d < 3; ++d) {
    start = std::max({start, lo_[d] - c[d], c[d] - hi_[d]});
    stop = std::max({stop, c[d] - lo_[d], hi_[d] - c[d]});
  }
  Hit best;
  bool found = false;
  for (std::int64_t r = start; r <= stop; ++r) {
    for_ring(c, r, lo_, hi_, [&](std::int64_t x, std::int64_t y, std::int64_t z) { scan_cell(x, y, z, q, best, found); });
    // Unvisited points are at least r cells away.
    const double bound = static_cast<double>(r) * cell_;
    if (found && best.sq_dist < bound * bound) break;
  }
  return best;
}

bool PointGrid::nearest_within(const double* q, double radius, Hit& hit) const {
  std::int64_t c[3];
  cell_of(q, c);
  const auto rings = static_cast<std::int64_t>(std::ceil(radius / cell_));
  Hit best;
  bool found = false;
  for (std::int64_t r = 0; r <= rings; ++r) {
    for_ring(c, r, lo_, hi_, [&](std::int64_t x, std::int64_t y, std::int64_t z) { scan_cell(x, y, z, q, best, found); });
  }
  if (!found || !(best.sq_dist < radius * radius)) return false;
  hit = best;
  return true;
}

PointGrid::Hit nearest_brute(const Tensor& points, const double* q) {
  PointGrid::Hit best;
  bool found = false;
  for (std::size_t i = 0; i < points.rows(); ++i) {
    const double d = sq_dist(q, &points.storage()[i * 3]);
    if (better(d, i, best, found)) {
      best = {i, d};
      found = true;
    }
  }
  if (!found) throw Error("nearest neighbor query on an empty set");
  return best;
}

double chamfer(const Tensor& a, const Tensor& b) {
  require_points(a, "chamfer");
  require_points(b, "chamfer");
  if (a.rows() == 0 || b.rows() == 0) throw Error("chamfer: empty point set");
  return mean_nearest_sq(a, b) + mean_nearest_sq(b, a);
}

std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw ShapeError("hungarian: cost matrix is not n x n");
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assign(n);
  for (std::size_t j = 1; j <= n; ++j) assign[p[j] - 1] = j - 1;
  return assign;
}

std::vector<std::size_t> auction(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw ShapeError("auction: cost matrix is not n x n");
  std::vector<std::size_t> assign(n);
  for (std::size_t i = 0; i < n; ++i) assign[i] = i;
  if (n <= 1) return assign;
  double max_cost = 0.0, mean_cost = 0.0;
  for (double c : cost) {
    max_cost = std::max(max_cost, c);
    mean_cost += c;
  }
  mean_cost /= static_cast<double>(cost.size());
  if (max_cost == 0.0) return assign;

  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<double> price(n, 0.0);
  std::vector<std::size_t> owner(n);
  const double eps_final = 1e-6 * mean_cost;
  double eps = max_cost / 8.0;
  while (true) {
    std::fill(assign.begin(), assign.end(), kNone);
    std::fill(owner.begin(), owner.end(), kNone);
    std::vector<std::size_t> queue(n);
    for (std::size_t i = 0; i < n; ++i) queue[i] = n - 1 - i;
    while (!queue.empty()) {
      const std::size_t i = queue.back();
      queue.pop_back();
      const double* row = &cost[i * n];
      double best = kInf, second = kInf;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double w = row[j] + price[j];
        if (w < best) {
          second = best;
          best = w;
          best_j = j;
        } else if (w < second) {
          second = w;
        }
      }
      price[best_j] += (second - best) + eps;
      if (owner[best_j] != kNone) {
        assign[owner[best_j]] = kNone;
        queue.push_back(owner[best_j]);
      }
      owner[best_j] = i;
      assign[i] = best_j;
    }
    if (eps < eps_final) break;
    eps /= 4.0;
  }
  return assign;
}

double emd(const Tensor& a, const Tensor& b, EmdMode mode) {
  require_points(a, "emd");
  require_points(b, "emd");
  if (a.rows() != b.rows()) throw ShapeError("emd: point sets differ in size");
  const std::size_t n = a.rows();
  if (n == 0) throw Error("emd: empty point set");
  if (mode == EmdMode::exact && n > kExactEmdLimit) {
    throw Error("emd: exact mode is limited to " + std::to_string(kExactEmdLimit) + " points");
  }
  const auto cost = cost_matrix(a, b);
  const auto assign = mode == EmdMode::exact ? hungarian(cost, n) : auction(cost, n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + assign[i]];
  return total / static_cast<double>(n);
}

CanonError canonicalization_error(const TNocsSequence& pred, const TNocsSequence& gt) {
  if (pred.frames.size() != gt.frames.size()) throw ShapeError("canonicalization_error: frame count mismatch");
  CanonError out;
  for (std::size_t k = 0; k < gt.frames.size(); ++k) {
    const Tensor& p = pred.frames[k];
    const Tensor& g = gt.frames[k];
    if (p.shape() != g.shape() || g.cols() != 4) throw ShapeError("canonicalization_error: misaligned frame");
    if (g.rows() == 0) throw Error("canonicalization_error: empty frame");
    double spatial = 0.0, temporal = 0.0;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      spatial += std::sqrt(sq_dist(&p.storage()[r * 4], &g.storage()[r * 4]));
      temporal += std::abs(p.at(r, 3) - g.at(r, 3));
    }
    out.spatial.push_back(spatial / static_cast<double>(g.rows()));
    out.temporal.push_back(temporal / static_cast<double>(g.rows()));
  }
  return out;
}

Tensor SimilarityPose::apply(const Tensor& points) const {
  require_points(points, "SimilarityPose::apply");
  Tensor out = Tensor::zeros(points.rows(), 3);
  for (std::size_t r = 0; r < points.rows(); ++r) {
    const Eigen::Vector3d y = apply(row3(points, r));
    for (int c = 0; c < 3; ++c) out.at(r, c) = y[c];
  }
  return out;
}

SimilarityPose SimilarityPose::inverse() const {
  SimilarityPose inv;
  inv.scale = 1.0 / scale;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation) / scale;
  return inv;
}

SimilarityPose umeyama_fit(const Tensor& src, const Tensor& dst) {
  require_points(src, "umeyama_fit");
  require_points(dst, "umeyama_fit");
  if (src.rows() != dst.rows()) throw ShapeError("umeyama_fit: point counts differ");
  const std::size_t n = src.rows();
  if (n < 3) throw Error("umeyama_fit: need at least 3 correspondences");
  Eigen::Vector3d mx = Eigen::Vector3d::Zero(), my = Eigen::Vector3d::Zero();
  for (std::size_t r = 0; r < n; ++r) {
    mx += row3(src, r);
    my += row3(dst, r);
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  double var_x = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const Eigen::Vector3d x = row3(src, r) - mx;
    const Eigen::Vector3d y = row3(dst, r) - my;
    cov += y * x.transpose();
    var_x += x.squaredNorm();
  }
  cov /= static_cast<double>(n);
  var_x /= static_cast<double>(n);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d d = svd.singularValues();
  if (var_x <= 0.0 || d[1] <= 1e-12 * std::max(d[0], 1e-300)) {
    throw Error("umeyama_fit: degenerate configuration");
  }
  Eigen::Vector3d s(1.0, 1.0, 1.0);
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s[2] = -1.0;
  SimilarityPose pose;
  pose.rotation = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  pose.scale = d.dot(s) / var_x;
  pose.translation = my - pose.scale * (pose.rotation * mx);
  return pose;
}

RansacResult ransac_pose(const Tensor& world, const Tensor& canonical, const RansacOptions& opts) {
  require_points(world, "ransac_pose");
  require_points(canonical, "ransac_pose");
  if (world.rows() != canonical.rows()) throw ShapeError("ransac_pose: point counts differ");
  const std::size_t n = world.rows();
  if (opts.sample_size < 3 || n < opts.sample_size) throw Error("ransac_pose: not enough correspondences");
  std::mt19937_64 rng(opts.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  const double thresh_sq = opts.inlier_threshold * opts.inlier_threshold;

  auto inliers_of = [&](const SimilarityPose& pose, std::vector<bool>& mask) {
    std::size_t count = 0;
    mask.assign(n, false);
    for (std::size_t r = 0; r < n; ++r) {
      if ((pose.apply(row3(canonical, r)) - row3(world, r)).squaredNorm() < thresh_sq) {
        mask[r] = true;
        ++count;
      }
    }
    return count;
  };

  RansacResult best;
  std::vector<bool> mask;
  Tensor src = Tensor::zeros(opts.sample_size, 3), dst = Tensor::zeros(opts.sample_size, 3);
  for (int it = 0; it < opts.iterations; ++it) {
    std::vector<std::size_t> idx;
    while (idx.size() < opts.sample_size) {
      const std::size_t i = pick(rng);
      if (std::find(idx.begin(), idx.end(), i) == idx.end()) idx.push_back(i);
    }
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (int c = 0; c < 3; ++c) {
        src.at(k, c) = canonical.at(idx[k], c);
        dst.at(k, c) = world.at(idx[k], c);
      }
    SimilarityPose pose;
    try {
      pose = umeyama_fit(src, dst);
    } catch (const Error&) {
      continue;
    }
    const std::size_t count = inliers_of(pose, mask);
    if (count > best.inlier_count) {
      best.inlier_count = count;
      best.pose = pose;
      best.inliers = mask;
    }
  }
  if (best.inlier_count < opts.sample_size) throw Error("ransac_pose: no hypothesis reached the minimum inlier count");

  Tensor in_src = Tensor::zeros(best.inlier_count, 3), in_dst = Tensor::zeros(best.inlier_count, 3);
  std::size_t k = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!best.inliers[r]) continue;
    for (int c = 0; c < 3; ++c) {
      in_src.at(k, c) = canonical.at(r, c);
      in_dst.at(k, c) = world.at(r, c);
    }
    ++k;
  }
  try {
    best.pose = umeyama_fit(in_src, in_dst);
    best.inlier_count = inliers_of(best.pose, best.inliers);
  } catch (const Error&) {
    // Keep the hypothesis pose when the inlier set is degenerate.
  }
  return best;
}

double rotation_angle_deg(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  const Eigen::Matrix3d r = a * b.transpose();
  const Eigen::Vector3d axis(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const double angle = std::atan2(0.5 * axis.norm(), 0.5 * (r.trace() - 1.0));
  return angle * 180.0 / std::numbers::pi;
}

PoseError pose_error(const SimilarityPose& pred, const SimilarityPose& gt, const Tensor& canon_gt,
                     const Tensor& world) {
  require_points(canon_gt, "pose_error");
  require_points(world, "pose_error");
  if (canon_gt.rows() != world.rows()) throw ShapeError("pose_error: point counts differ");
  PoseError e;
  e.translation = (pred.translation - gt.translation).norm();
  e.rotation_deg = rotation_angle_deg(pred.rotation, gt.rotation);
  std::vector<double> d(world.rows());
  for (std::size_t r = 0; r < world.rows(); ++r) d[r] = (pred.apply(row3(canon_gt, r)) - row3(world, r)).norm();
  e.point = d.empty() ? 0.0 : summarize(d).median;
  return e;
}

Tensor aggregate_union(const TNocsSequence& seq) {
  std::vector<Tensor> parts;
  for (std::size_t k = 0; k < seq.frames.size(); ++k) parts.push_back(seq.spatial(k));
  return stack_rows(parts, 3);
}

std::vector<int> propagate_labels(const Tensor& labeled, const std::vector<int>& labels, const Tensor& target,
                                  double radius) {
  require_points(labeled, "propagate_labels");
  require_points(target, "propagate_labels");
  if (labeled.rows() == 0) throw Error("propagate_labels: empty labeled set");
  if (labels.size() != labeled.rows()) throw ShapeError("propagate_labels: label count mismatch");
  PointGrid grid(labeled, radius);
  std::vector<int> out(target.rows(), kUnknownLabel);
  for (std::size_t r = 0; r < target.rows(); ++r) {
    PointGrid::Hit hit;
    if (grid.nearest_within(&target.storage()[r * 3], radius, hit)) out[r] = labels[hit.index];
  }
  return out;
}

std::vector<int> propagate_labels_brute(const Tensor& labeled, const std::vector<int>& labels, const Tensor& target,
                                        double radius) {
  std::vector<int> out(target.rows(), kUnknownLabel);
  for (std::size_t r = 0; r < target.rows(); ++r) {
    const auto hit = nearest_brute(labeled, &target.storage()[r * 3]);
    if (hit.sq_dist < radius * radius) out[r] = labels[hit.index];
  }
  return out;
}

Summary summarize(std::vector<double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  s.median = n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(n));
  return s;
}

void MetricReport::add(std::string sequence, int frame, std::string metric, double value) {
  records_.push_back({std::move(sequence), frame, std::move(metric), value});
}

std::vector<std::string> MetricReport::metrics() const {
  std::vector<std::string> out;
  for (const auto& r : records_) {
    if (std::find(out.begin(), out.end(), r.metric) == out.end()) out.push_back(r.metric);
  }
  return out;
}

std::vector<double> MetricReport::values(const std::string& metric) const {
  std::vector<double> out;
  for (const auto& r : records_)
    if (r.metric == metric) out.push_back(r.value);
  return out;
}

Summary MetricReport::summary(const std::string& metric) const { return summarize(values(metric)); }

void MetricReport::write(std::ostream& os) const {
  const auto old = os.precision(17);
  for (const auto& r : records_) os << "record " << r.sequence << ' ' << r.frame << ' ' << r.metric << ' ' << r.value << '\n';
  for (const auto& m : metrics()) {
    const Summary s = summary(m);
    os << "summary " << m << ' ' << s.count << ' ' << s.median << ' ' << s.mean << ' ' << s.stddev << '\n';
  }
  os.precision(old);
}

MetricReport MetricReport::read(std::istream& is) {
  MetricReport report;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag != "record") continue;
    Record r;
    if (!(ls >> r.sequence >> r.frame >> r.metric >> r.value)) throw Error("malformed metric record: " + line);
    report.records_.push_back(std::move(r));
  }
  return report;
}

void MetricReport::write_table(std::ostream& os) const {
  os << std::left << std::setw(28) << "metric" << std::right << std::setw(8) << "count" << std::setw(14) << "median"
     << std::setw(14) << "mean" << std::setw(14) << "std" << '\n';
  for (const auto& m : metrics()) {
    const Summary s = summary(m);
    os << std::left << std::setw(28) << m << std::right << std::setw(8) << s.count << std::setw(14) << s.median
       << std::setw(14) << s.mean << std::setw(14) << s.stddev << '\n';
  }
}

bool MetricReport::operator==(const MetricReport& o) const {
  if (records_.size() != o.records_.size()) return false;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& a = records_[i];
    const auto& b = o.records_[i];
    if (a.sequence != b.sequence || a.frame != b.frame || a.metric != b.metric || a.value != b.value) return false;
  }
  return true;
}

}  // namespace caspr::geo
