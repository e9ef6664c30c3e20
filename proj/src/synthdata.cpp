#include "caspr/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace caspr::synth {
namespace {

using Vec3 = Eigen::Vector3d;

constexpr double kPi = std::numbers::pi;
constexpr double kDeg = kPi / 180.0;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Appends a triangle oriented so its normal points away from `inside`.
void add_tri(std::vector<Triangle>& tris, const Vec3& a, const Vec3& b, const Vec3& c, int part, const Vec3& inside) {
  Triangle t{a, b, c, part};
  if (t.area() < 1e-14) return;
  const Vec3 centroid = (a + b + c) / 3.0;
  if (t.normal().dot(centroid - inside) < 0.0) std::swap(t.b, t.c);
  tris.push_back(t);
}

void add_quad(std::vector<Triangle>& tris, const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d, int part,
              const Vec3& inside) {
  add_tri(tris, a, b, c, part, inside);
  add_tri(tris, a, c, d, part, inside);
}

void add_box(std::vector<Triangle>& tris, const Vec3& center, const Vec3& half, int part) {
  auto corner = [&](int i) {
    return Vec3(center.x() + ((i & 1) ? half.x() : -half.x()), center.y() + ((i & 2) ? half.y() : -half.y()),
                center.z() + ((i & 4) ? half.z() : -half.z()));
  };
  const int faces[6][4] = {{0, 1, 3, 2}, {4, 5, 7, 6}, {0, 1, 5, 4}, {2, 3, 7, 6}, {0, 2, 6, 4}, {1, 3, 7, 5}};
  for (const auto& f : faces) add_quad(tris, corner(f[0]), corner(f[1]), corner(f[2]), corner(f[3]), part, center);
}

// Closed cylinder along coordinate axis `axis`.
void add_cylinder(std::vector<Triangle>& tris, const Vec3& center, int axis, double radius, double half_len, int part,
                  int segments = 16) {
  const int u = (axis + 1) % 3;
  const int v = (axis + 2) % 3;
  auto ring = [&](int i, double h) {
    const double a = 2.0 * kPi * i / segments;
    Vec3 p = center;
    p[axis] += h;
    p[u] += radius * std::cos(a);
    p[v] += radius * std::sin(a);
    return p;
  };
  Vec3 top = center, bottom = center;
  top[axis] += half_len;
  bottom[axis] -= half_len;
  for (int i = 0; i < segments; ++i) {
    const Vec3 a0 = ring(i, -half_len), a1 = ring(i + 1, -half_len);
    const Vec3 b0 = ring(i, half_len), b1 = ring(i + 1, half_len);
    add_quad(tris, a0, a1, b1, b0, part, center);
    add_tri(tris, bottom, a0, a1, part, center);
    add_tri(tris, top, b0, b1, part, center);
  }
}

double signed_pow(double x, double e) { return (x < 0 ? -1.0 : 1.0) * std::pow(std::abs(x), e); }

void add_superellipsoid(std::vector<Triangle>& tris, const Vec3& radii, double e1, double e2) {
  const int rows = 24, cols = 48;
  auto point = [&](int i, int j) {
    const double eta = -kPi / 2 + kPi * i / rows;
    const double omega = -kPi + 2 * kPi * j / cols;
    const double ce = signed_pow(std::cos(eta), e1);
    return Vec3(radii.x() * ce * signed_pow(std::cos(omega), e2), radii.y() * signed_pow(std::sin(eta), e1),
                radii.z() * ce * signed_pow(std::sin(omega), e2));
  };
  const Vec3 origin = Vec3::Zero();
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      const Vec3 a = point(i, j), b = point(i, j + 1), c = point(i + 1, j + 1), d = point(i + 1, j);
      const double y = (a.y() + c.y()) / 2.0;
      const int part = y < -radii.y() / 3.0 ? 0 : (y > radii.y() / 3.0 ? 2 : 1);
      add_quad(tris, a, b, c, d, part, origin);
    }
  }
}

void normalize(ShapeModel& shape) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& t : shape.triangles) {
    for (const Vec3* p : {&t.a, &t.b, &t.c}) {
      lo = lo.cwiseMin(*p);
      hi = hi.cwiseMax(*p);
    }
  }
  const double diag = (hi - lo).norm();
  const Vec3 mid = (lo + hi) / 2.0;
  const Vec3 target = Vec3::Constant(0.5);
  for (auto& t : shape.triangles) {
    for (Vec3* p : {&t.a, &t.b, &t.c}) *p = (*p - mid) / diag + target;
  }
}

Vec3 row(const Tensor& t, std::size_t r) { return {t.at(r, 0), t.at(r, 1), t.at(r, 2)}; }
void set_row(Tensor& t, std::size_t r, const Vec3& v) {
  for (int c = 0; c < 3; ++c) t.at(r, c) = v[c];
}

Vec3 half_extent(const ShapeModel& shape) {
  Vec3 h = Vec3::Zero();
  for (const auto& t : shape.triangles)
    for (const Vec3* p : {&t.a, &t.b, &t.c}) h = h.cwiseMax((*p - Vec3::Constant(0.5)).cwiseAbs());
  return h;
}

void reflect(double& x, double& v, double lo, double hi) {
  x += v;
  if (x > hi) {
    x = 2 * hi - x;
    v = -v;
  } else if (x < lo) {
    x = 2 * lo - x;
    v = -v;
  }
}

std::string pad(std::size_t i) {
  std::ostringstream os;
  os << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

std::string kind_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::box_composite:
      return "box_composite";
    case ShapeKind::superellipsoid:
      return "superellipsoid";
    case ShapeKind::winged:
      return "winged";
    case ShapeKind::legged:
      return "legged";
  }
  return "unknown";
}

ShapeKind parse_kind(const std::string& name) {
  for (ShapeKind k : {ShapeKind::box_composite, ShapeKind::superellipsoid, ShapeKind::winged, ShapeKind::legged}) {
    if (kind_name(k) == name) return k;
  }
  throw Error("unknown shape kind: " + name);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word.
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t sequence_seed(std::uint64_t master, std::uint64_t instance, std::uint64_t sequence) {
  return mix_seed(mix_seed(master, instance), sequence);
}

double ShapeModel::area() const {
  double a = 0.0;
  for (const auto& t : triangles) a += t.area();
  return a;
}

std::vector<double> ShapeModel::part_areas() const {
  std::vector<double> out(part_count, 0.0);
  for (const auto& t : triangles) out[t.part] += t.area();
  return out;
}

Eigen::Vector3d ShapeModel::point_at(std::uint32_t tri, const Eigen::Vector2d& bary) const {
  const Triangle& t = triangles.at(tri);
  return t.a * (1.0 - bary.x() - bary.y()) + t.b * bary.x() + t.c * bary.y();
}

SurfaceSamples ShapeModel::sample(std::size_t n, std::mt19937_64& rng) const {
  std::vector<double> cumulative(triangles.size());
  double total = 0.0;
  for (std::size_t i = 0; i < triangles.size(); ++i) {
    total += triangles[i].area();
    cumulative[i] = total;
  }
  SurfaceSamples s;
  s.points = Tensor::zeros(n, 3);
  s.normals = Tensor::zeros(n, 3);
  s.labels.resize(n);
  s.triangle.resize(n);
  s.barycentric.resize(n);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double pick = u01(rng) * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    const auto tri = static_cast<std::uint32_t>(std::min<std::size_t>(it - cumulative.begin(), triangles.size() - 1));
    const double root = std::sqrt(u01(rng));
    const double r2 = u01(rng);
    const Eigen::Vector2d bary(root * (1.0 - r2), root * r2);
    s.triangle[i] = tri;
    s.barycentric[i] = bary;
    set_row(s.points, i, point_at(tri, bary));
    set_row(s.normals, i, triangles[tri].normal());
    s.labels[i] = triangles[tri].part;
  }
  return s;
}

ShapeModel sample_shape(ShapeKind kind, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(kind)));
  ShapeModel shape;
  shape.kind = kind;
  shape.seed = seed;
  shape.part_count = 3;
  auto draw = [&](double lo, double hi) {
    const double v = uniform(rng, lo, hi);
    shape.params.push_back(v);
    return v;
  };
  auto& tris = shape.triangles;
  switch (kind) {
    case ShapeKind::box_composite: {
      const double L = draw(0.8, 1.0), H = draw(0.18, 0.3), W = draw(0.35, 0.45);
      const double r = draw(0.08, 0.12);
      const double cab_len = L * draw(0.35, 0.6), cab_h = draw(0.12, 0.22), cab_off = draw(-0.15, 0.1);
      add_box(tris, Vec3(0, r + H / 2, 0), Vec3(L / 2, H / 2, W / 2), 0);
      add_box(tris, Vec3(cab_off * L, r + H + cab_h / 2, 0), Vec3(cab_len / 2, cab_h / 2, 0.42 * W), 1);
      for (double sx : {-1.0, 1.0})
        for (double sz : {-1.0, 1.0}) add_cylinder(tris, Vec3(sx * 0.33 * L, r, sz * W / 2), 2, r, 0.04, 2);
      break;
    }
    case ShapeKind::superellipsoid: {
      const Vec3 radii(draw(0.3, 0.6), draw(0.3, 0.6), draw(0.3, 0.6));
      add_superellipsoid(tris, radii, draw(0.3, 1.2), draw(0.3, 1.2));
      break;
    }
    case ShapeKind::winged: {
      const double len = 1.0, rad = draw(0.05, 0.08), span = draw(0.8, 1.1), chord = draw(0.15, 0.25);
      const double wing_x = draw(-0.1, 0.1), tail_span = draw(0.25, 0.4), fin_h = draw(0.12, 0.2);
      add_cylinder(tris, Vec3(0, 0, 0), 0, rad, len / 2, 0);
      add_box(tris, Vec3(wing_x, 0, 0), Vec3(chord / 2, 0.012, span / 2), 1);
      add_box(tris, Vec3(-0.43 * len, 0, 0), Vec3(0.05, 0.01, tail_span / 2), 2);
      add_box(tris, Vec3(-0.43 * len, rad + fin_h / 2, 0), Vec3(0.05, fin_h / 2, 0.01), 2);
      break;
    }
    case ShapeKind::legged: {
      const double w = draw(0.4, 0.6), d = draw(0.4, 0.6), leg_h = draw(0.35, 0.5), back_h = draw(0.4, 0.7);
      const double leg = draw(0.03, 0.05), seat_t = 0.05;
      add_box(tris, Vec3(0, leg_h + seat_t / 2, 0), Vec3(w / 2, seat_t / 2, d / 2), 0);
      add_box(tris, Vec3(0, leg_h + seat_t + back_h / 2, -d / 2 + 0.025), Vec3(w / 2, back_h / 2, 0.025), 1);
      for (double sx : {-1.0, 1.0})
        for (double sz : {-1.0, 1.0})
          add_box(tris, Vec3(sx * (w / 2 - leg), leg_h / 2, sz * (d / 2 - leg)), Vec3(leg, leg_h / 2, leg), 2);
      break;
    }
  }
  normalize(shape);
  return shape;
}

Eigen::Vector3d CameraTrajectory::position(std::size_t k) const {
  const CameraState& s = states.at(k);
  const double lon = s.lon_deg * kDeg, lat = s.lat_deg * kDeg;
  return s.radius * Vec3(std::cos(lat) * std::sin(lon), std::sin(lat), std::cos(lat) * std::cos(lon));
}

Eigen::Matrix3d CameraTrajectory::rotation(std::size_t k) const {
  const Vec3 forward = -position(k).normalized();
  const Vec3 up(0, 1, 0);
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 down = forward.cross(right);
  Eigen::Matrix3d r;
  r.row(0) = right;
  r.row(1) = down;
  r.row(2) = forward;
  return r;
}

CameraTrajectory make_trajectory(const CameraState& start, const CameraState& velocity, std::size_t K,
                                 const TrajectoryLimits& limits) {
  if (K < 2) throw Error("trajectory needs at least 2 steps");
  CameraTrajectory traj;
  CameraState s = start;
  CameraState v = velocity;
  traj.states.push_back(s);
  for (std::size_t k = 1; k < K; ++k) {
    s.lon_deg = std::fmod(s.lon_deg + v.lon_deg, 360.0);
    reflect(s.lat_deg, v.lat_deg, limits.lat_min_deg, limits.lat_max_deg);
    reflect(s.radius, v.radius, limits.radius_min, limits.radius_max);
    traj.states.push_back(s);
  }
  return traj;
}

CameraTrajectory gen_trajectory(std::uint64_t seed, std::size_t K, const TrajectoryLimits& limits, bool directional) {
  std::mt19937_64 rng(seed);
  CameraState start{uniform(rng, 0.0, 360.0), uniform(rng, limits.lat_min_deg, limits.lat_max_deg),
                    uniform(rng, limits.radius_min, limits.radius_max)};
  double lon_speed = uniform(rng, limits.lon_speed_min_deg, limits.lon_speed_max_deg);
  const bool flip = uniform(rng, 0.0, 1.0) < 0.5;
  if (!directional && flip) lon_speed = -lon_speed;
  CameraState vel{lon_speed, uniform(rng, -limits.lat_speed_max_deg, limits.lat_speed_max_deg),
                  uniform(rng, -limits.radius_speed_max, limits.radius_speed_max)};
  return make_trajectory(start, vel, K, limits);
}

geo::SimilarityPose camera_pose(const CameraTrajectory& traj, std::size_t k, double object_scale) {
  // scene = s (x - c); camera = R (scene - p)
  geo::SimilarityPose pose;
  pose.scale = object_scale;
  pose.rotation = traj.rotation(k);
  pose.translation = -(pose.rotation * (object_scale * Vec3::Constant(0.5) + traj.position(k)));
  return pose;
}

RenderResult render_partial(const ShapeModel& shape, const geo::SimilarityPose& pose, std::size_t n_points,
                            std::mt19937_64& rng, int image_res) {
  if (image_res <= 0) throw Error("render_partial: image resolution must be positive");
  const std::size_t n_cand = kCandidateFactor * std::max<std::size_t>(n_points, 1);
  SurfaceSamples cand = shape.sample(n_cand, rng);

  struct Projected {
    std::size_t index;
    double x, y, z;
  };
  std::vector<Projected> front;
  double lo[2] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  double hi[2] = {-lo[0], -lo[1]};
  for (std::size_t i = 0; i < n_cand; ++i) {
    const Vec3 p = pose.apply(row(cand.points, i));
    const Vec3 n = pose.rotation * row(cand.normals, i);
    if (p.z() <= 1e-9 || n.dot(p) >= 0.0) continue;
    const double x = p.x() / p.z(), y = p.y() / p.z();
    front.push_back({i, x, y, p.z()});
    lo[0] = std::min(lo[0], x);
    hi[0] = std::max(hi[0], x);
    lo[1] = std::min(lo[1], y);
    hi[1] = std::max(hi[1], y);
  }
  if (front.empty()) throw Error("render_partial: no surface faces the camera");

  // Square crop around the projected extent of the front-facing surface.
  const double cx = 0.5 * (lo[0] + hi[0]), cy = 0.5 * (lo[1] + hi[1]);
  const double half = 0.5 * std::max({hi[0] - lo[0], hi[1] - lo[1], 1e-12}) * 1.001;
  auto pixel = [&](const Projected& q, int res) {
    const auto px = std::clamp(static_cast<int>((q.x - cx) / (2 * half) * res + 0.5 * res), 0, res - 1);
    const auto py = std::clamp(static_cast<int>((q.y - cy) / (2 * half) * res + 0.5 * res), 0, res - 1);
    return static_cast<std::size_t>(py) * res + px;
  };

  // Occlusion from a depth map at the base resolution.
  const std::size_t base_pixels = static_cast<std::size_t>(image_res) * image_res;
  std::vector<double> depth(base_pixels, std::numeric_limits<double>::infinity());
  for (const auto& q : front) depth[pixel(q, image_res)] = std::min(depth[pixel(q, image_res)], q.z);
  std::vector<Projected> seen;
  for (const auto& q : front) {
    const double footprint = q.z * 2 * half / image_res;
    if (q.z <= depth[pixel(q, image_res)] + 0.02 * pose.scale + 3 * footprint) seen.push_back(q);
  }

  // Nearest visible candidate per pixel; the output grid is refined until it
  // holds enough points.
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> visible;
  int res = image_res;
  for (;;) {
    const std::size_t pixels = static_cast<std::size_t>(res) * res;
    std::vector<double> best(pixels, std::numeric_limits<double>::infinity());
    std::vector<std::size_t> owner(pixels, kNone);
    for (const auto& q : seen) {
      const std::size_t pix = pixel(q, res);
      if (q.z < best[pix]) {
        best[pix] = q.z;
        owner[pix] = q.index;
      }
    }
    visible.clear();
    for (std::size_t o : owner)
      if (o != kNone) visible.push_back(o);
    if (visible.size() >= n_points || visible.size() == seen.size() || res >= kMaxRenderRes) break;
    res = std::min(2 * res, kMaxRenderRes);
  }
  if (visible.size() < n_points) {
    throw Error("render_partial: only " + std::to_string(visible.size()) + " visible pixels for " +
                std::to_string(n_points) + " points");
  }
  for (std::size_t i = 0; i < n_points; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, visible.size() - 1);
    std::swap(visible[i], visible[pick(rng)]);
  }
  RenderResult out;
  out.visible = visible.size();
  out.resolution = res;
  out.nocs = Tensor::zeros(n_points, 3);
  out.normals = Tensor::zeros(n_points, 3);
  out.labels.resize(n_points);
  for (std::size_t i = 0; i < n_points; ++i) {
    const std::size_t c = visible[i];
    set_row(out.nocs, i, row(cand.points, c));
    set_row(out.normals, i, row(cand.normals, c));
    out.labels[i] = cand.labels[c];
  }
  out.world = pose.apply(out.nocs);
  return out;
}

RawSequence SequenceRecord::raw() const {
  RawSequence seq;
  seq.instance_id = instance_id;
  for (std::size_t k = 0; k < world.size(); ++k) seq.frames.push_back({world[k], raw_times[k]});
  return seq;
}

TNocsSequence SequenceRecord::gt() const {
  TNocsSequence seq;
  for (std::size_t k = 0; k < nocs.size(); ++k) {
    Tensor f = Tensor::zeros(nocs[k].rows(), 4);
    for (std::size_t r = 0; r < f.rows(); ++r) {
      for (int c = 0; c < 3; ++c) f.at(r, c) = nocs[k].at(r, c);
      f.at(r, 3) = canon_times[k];
    }
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

namespace {

void fill_times(SequenceRecord& rec, std::size_t K, double duration) {
  rec.raw_times.resize(K);
  rec.canon_times.resize(K);
  for (std::size_t k = 0; k < K; ++k) rec.raw_times[k] = duration * static_cast<double>(k) / static_cast<double>(K - 1);
  for (std::size_t k = 0; k < K; ++k) rec.canon_times[k] = rec.raw_times[k] / rec.raw_times[K - 1];
}

}  // namespace

SequenceRecord gen_sequence(const ShapeModel& shape, const CameraTrajectory& traj, const SequenceOptions& opts,
                            std::mt19937_64& rng) {
  if (opts.K < 2 || traj.states.size() < opts.K) throw Error("gen_sequence: trajectory shorter than K");
  SequenceRecord rec;
  rec.kind = shape.kind;
  fill_times(rec, opts.K, opts.duration);
  for (std::size_t k = 0; k < opts.K; ++k) {
    const geo::SimilarityPose pose = camera_pose(traj, k, opts.object_scale);
    RenderResult r = render_partial(shape, pose, opts.n_points, rng, opts.image_res);
    rec.poses.push_back(pose);
    rec.world.push_back(std::move(r.world));
    rec.nocs.push_back(std::move(r.nocs));
    rec.labels.push_back(std::move(r.labels));
  }
  return rec;
}

Eigen::Vector3d WarpParams::apply(const Eigen::Vector3d& x, double t) const {
  const double s = std::sin(kPi * freq * t);
  if (s == 0.0) return x;
  const Vec3 c = Vec3::Constant(0.5);
  Vec3 y = c + (Vec3::Ones() + s * scale_amp).cwiseProduct(x - c);
  const double q = (x.x() - 0.5) / std::max(half_extent.x(), 1e-9);
  y.y() += bend_amp * s * q * q;
  return y;
}

double WarpParams::displacement_bound() const {
  return scale_amp.cwiseAbs().cwiseProduct(half_extent).norm() + std::abs(bend_amp);
}

WarpParams random_warp(const ShapeModel& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  WarpParams w;
  w.half_extent = half_extent(shape);
  w.freq = uniform(rng, 0.5, 1.0);
  const double margin = 0.49;
  for (int i = 0; i < 3; ++i) {
    double a = uniform(rng, -0.2, 0.2);
    const double limit = std::max(0.0, margin / std::max(w.half_extent[i], 1e-9) - 1.0);
    if (a > limit) a = limit;
    w.scale_amp[i] = a;
  }
  const double b = uniform(rng, 0.06, 0.12) * (uniform(rng, 0, 1) < 0.5 ? -1.0 : 1.0);
  const double b_limit = std::max(0.0, margin - (1.0 + std::abs(w.scale_amp.y())) * w.half_extent.y());
  w.bend_amp = std::clamp(b, -b_limit, b_limit);
  return w;
}

Tensor warp_points(const Tensor& points, const WarpParams& warp, double t) {
  Tensor out = Tensor::zeros(points.rows(), 3);
  for (std::size_t r = 0; r < points.rows(); ++r) set_row(out, r, warp.apply(row(points, r), t));
  return out;
}

SequenceRecord gen_deforming_sequence(const ShapeModel& shape, const WarpParams& warp, const SequenceOptions& opts,
                                      std::mt19937_64& rng) {
  if (opts.K < 2) throw Error("gen_deforming_sequence: K must be at least 2");
  SequenceRecord rec;
  rec.kind = shape.kind;
  fill_times(rec, opts.K, opts.duration);
  for (std::size_t k = 0; k < opts.K; ++k) {
    SurfaceSamples s = shape.sample(opts.n_points, rng);
    Tensor moved = warp_points(s.points, warp, rec.canon_times[k]);
    rec.poses.emplace_back();
    rec.world.push_back(moved);
    rec.nocs.push_back(std::move(moved));
    rec.labels.push_back(std::move(s.labels));
    rec.rest.push_back(std::move(s.points));
  }
  return rec;
}

TrainingView select_view(const SequenceRecord& rec, const std::vector<std::size_t>& frames, std::size_t n_points,
                         std::uint64_t seed) {
  if (frames.empty()) throw Error("select_view: no frames selected");
  std::mt19937_64 rng(seed);
  TrainingView view;
  view.frames = frames;
  view.raw.instance_id = rec.instance_id;
  const double s0 = rec.raw_times.at(frames.front());
  const double sK = rec.raw_times.back() - rec.raw_times.front();
  for (std::size_t f : frames) {
    const Tensor& world = rec.world.at(f);
    const std::size_t count = world.rows();
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), 0);
    const std::size_t take = std::min(n_points, count);
    if (take < count) {
      for (std::size_t i = 0; i < take; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, count - 1);
        std::swap(idx[i], idx[pick(rng)]);
      }
      idx.resize(take);
    }
    const double s = rec.raw_times[f] - s0;
    const double tbar = s / sK;
    Tensor pts = Tensor::zeros(take, 3), gt = Tensor::zeros(take, 4), rest;
    if (!rec.rest.empty()) rest = Tensor::zeros(take, 3);
    std::vector<int> labels(take);
    for (std::size_t i = 0; i < take; ++i) {
      for (int c = 0; c < 3; ++c) {
        pts.at(i, c) = world.at(idx[i], c);
        gt.at(i, c) = rec.nocs[f].at(idx[i], c);
        if (!rec.rest.empty()) rest.at(i, c) = rec.rest[f].at(idx[i], c);
      }
      gt.at(i, 3) = tbar;
      labels[i] = rec.labels[f][idx[i]];
    }
    view.raw.frames.push_back({std::move(pts), s});
    view.gt.frames.push_back(std::move(gt));
    view.labels.push_back(std::move(labels));
    if (!rec.rest.empty()) view.rest.push_back(std::move(rest));
  }
  return view;
}

TrainingView subsample_training_view(const SequenceRecord& rec, std::size_t n_frames, std::size_t n_points,
                                     std::uint64_t seed) {
  const std::size_t K = rec.frame_count();
  if (n_frames == 0 || n_frames > K) throw Error("subsample_training_view: invalid frame count");
  std::mt19937_64 rng(mix_seed(seed, 0x5eed));
  std::vector<std::size_t> all(K);
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t i = 0; i < n_frames; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, K - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(n_frames);
  std::sort(all.begin(), all.end());
  return select_view(rec, all, n_points, seed);
}

SequenceRecord time_reversed(const SequenceRecord& rec) {
  SequenceRecord out = rec;
  const std::size_t K = rec.frame_count();
  const double sK = rec.raw_times.back();
  const double tol = 1e-12 * std::max(1.0, std::abs(sK));
  for (std::size_t j = 0; j < K; ++j) {
    const std::size_t src = K - 1 - j;
    double s = sK - rec.raw_times[src];
    // Snap onto the existing grid so flipping twice is exact.
    for (double g : rec.raw_times) {
      if (std::abs(g - s) <= tol) {
        s = g;
        break;
      }
    }
    out.raw_times[j] = s;
    out.canon_times[j] = s / sK;
    out.poses[j] = rec.poses[src];
    out.world[j] = rec.world[src];
    out.nocs[j] = rec.nocs[src];
    out.labels[j] = rec.labels[src];
    if (!rec.rest.empty()) out.rest[j] = rec.rest[src];
  }
  return out;
}

std::string split_of(std::size_t instance, std::size_t count, std::uint64_t seed) {
  if (instance >= count) throw Error("split_of: instance out of range");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0x5b1175));
  for (std::size_t i = count; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  const std::size_t pos = static_cast<std::size_t>(std::find(order.begin(), order.end(), instance) - order.begin());
  const std::size_t n_train = (count * 8 + 5) / 10;
  const std::size_t n_val = (count + 5) / 10;
  if (pos < n_train) return "train";
  if (pos < n_train + n_val) return "val";
  return "test";
}

WarpParams dataset_warp(const DatasetOptions& opts, std::size_t instance) {
  const std::uint64_t seed = sequence_seed(opts.seed, instance, 0);
  return random_warp(sample_shape(opts.kind, mix_seed(seed, 1)), mix_seed(seed, 2));
}

SequenceRecord generate_one(const DatasetOptions& opts, std::size_t instance) {
  const std::uint64_t seed = sequence_seed(opts.seed, instance, 0);
  std::mt19937_64 rng(seed);
  ShapeModel shape = sample_shape(opts.kind, mix_seed(opts.single_shape ? opts.seed : seed, 1));
  SequenceRecord rec;
  if (opts.deforming) {
    rec = gen_deforming_sequence(shape, random_warp(shape, mix_seed(seed, 2)), opts.sequence, rng);
  } else {
    SequenceOptions so = opts.sequence;
    so.object_scale = uniform(rng, 0.7, 1.3);
    TrajectoryLimits limits;
    if (opts.single_shape) {
      so.object_scale = 1.0;
      limits.radius_min = limits.radius_max = 0.5 * (limits.radius_min + limits.radius_max);
      limits.lat_speed_max_deg = 0.0;
      limits.radius_speed_max = 0.0;
    }
    CameraTrajectory traj = gen_trajectory(mix_seed(seed, 3), so.K, limits, opts.directional);
    rec = gen_sequence(shape, traj, so, rng);
  }
  rec.instance_id = kind_name(opts.kind) + "_" + pad(instance);
  rec.split = split_of(instance, opts.count, opts.seed);
  return rec;
}

std::vector<SequenceRecord> generate_dataset(const DatasetOptions& opts) {
  std::vector<SequenceRecord> out;
  out.reserve(opts.count);
  for (std::size_t i = 0; i < opts.count; ++i) out.push_back(generate_one(opts, i));
  return out;
}

void write_sequence(const std::filesystem::path& path, const SequenceRecord& rec) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write sequence file: " + path.string());
  os << std::setprecision(17);
  const bool has_rest = !rec.rest.empty();
  os << "caspr-sequence 1\n";
  os << "instance " << rec.instance_id << "\n";
  os << "kind " << kind_name(rec.kind) << "\n";
  os << "split " << rec.split << "\n";
  os << "frames " << rec.frame_count() << "\n";
  os << "rest " << (has_rest ? 1 : 0) << "\n";
  for (std::size_t k = 0; k < rec.frame_count(); ++k) {
    const auto& p = rec.poses[k];
    os << "frame " << k << ' ' << rec.world[k].rows() << ' ' << rec.raw_times[k] << ' ' << rec.canon_times[k] << ' '
       << p.scale;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) os << ' ' << p.rotation(r, c);
    for (int c = 0; c < 3; ++c) os << ' ' << p.translation[c];
    os << '\n';
  }
  os << "points\n";
  for (std::size_t k = 0; k < rec.frame_count(); ++k) {
    for (std::size_t i = 0; i < rec.world[k].rows(); ++i) {
      os << k;
      for (int c = 0; c < 3; ++c) os << ' ' << rec.world[k].at(i, c);
      for (int c = 0; c < 3; ++c) os << ' ' << rec.nocs[k].at(i, c);
      os << ' ' << rec.labels[k][i];
      if (has_rest)
        for (int c = 0; c < 3; ++c) os << ' ' << rec.rest[k].at(i, c);
      os << '\n';
    }
  }
  if (!os) throw Error("failed writing sequence file: " + path.string());
}

SequenceRecord read_sequence(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open sequence file: " + path.string());
  auto expect = [&](const std::string& word) {
    std::string w;
    if (!(is >> w) || w != word) throw Error("sequence file " + path.string() + ": expected '" + word + "'");
  };
  SequenceRecord rec;
  int version = 0;
  expect("caspr-sequence");
  is >> version;
  if (version != 1) throw Error("unsupported sequence file version");
  std::string kind;
  std::size_t K = 0;
  int has_rest = 0;
  expect("instance");
  is >> rec.instance_id;
  expect("kind");
  is >> kind;
  rec.kind = parse_kind(kind);
  expect("split");
  is >> rec.split;
  expect("frames");
  is >> K;
  expect("rest");
  is >> has_rest;
  std::vector<std::size_t> counts(K);
  rec.raw_times.resize(K);
  rec.canon_times.resize(K);
  rec.poses.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t idx = 0;
    expect("frame");
    is >> idx >> counts[k] >> rec.raw_times[k] >> rec.canon_times[k] >> rec.poses[k].scale;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) is >> rec.poses[k].rotation(r, c);
    for (int c = 0; c < 3; ++c) is >> rec.poses[k].translation[c];
    if (!is || idx != k) throw Error("sequence file " + path.string() + ": malformed frame header");
  }
  expect("points");
  for (std::size_t k = 0; k < K; ++k) {
    rec.world.push_back(Tensor::zeros(counts[k], 3));
    rec.nocs.push_back(Tensor::zeros(counts[k], 3));
    rec.labels.emplace_back(counts[k]);
    if (has_rest) rec.rest.push_back(Tensor::zeros(counts[k], 3));
    for (std::size_t i = 0; i < counts[k]; ++i) {
      std::size_t frame = 0;
      is >> frame;
      for (int c = 0; c < 3; ++c) is >> rec.world[k].at(i, c);
      for (int c = 0; c < 3; ++c) is >> rec.nocs[k].at(i, c);
      is >> rec.labels[k][i];
      if (has_rest)
        for (int c = 0; c < 3; ++c) is >> rec.rest[k].at(i, c);
      if (!is || frame != k) throw Error("sequence file " + path.string() + ": malformed point row");
    }
  }
  return rec;
}

void write_dataset(const std::filesystem::path& root, const std::vector<SequenceRecord>& records) {
  std::filesystem::create_directories(root);
  std::ofstream manifest(root / "manifest.txt");
  if (!manifest) throw Error("cannot write manifest in " + root.string());
  for (const auto& rec : records) {
    const std::filesystem::path rel = std::filesystem::path(rec.split) / (rec.instance_id + ".seq");
    std::filesystem::create_directories(root / rec.split);
    write_sequence(root / rel, rec);
    manifest << rec.split << ' ' << rel.generic_string() << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root) {
  std::ifstream is(root / "manifest.txt");
  if (!is) throw Error("cannot open manifest in " + root.string());
  std::vector<ManifestEntry> out;
  std::string split, rel;
  while (is >> split >> rel) out.push_back({split, root / rel});
  return out;
}

std::vector<SequenceRecord> read_split(const std::filesystem::path& root, const std::string& split) {
  std::vector<SequenceRecord> out;
  for (const auto& e : read_manifest(root))
    if (e.split == split) out.push_back(read_sequence(e.path));
  return out;
}

void write_ply(const std::filesystem::path& path, const Tensor& points, const Tensor& colors) {
  if (points.rows() > 0 && (points.cols() != 3 || colors.rows() != points.rows() || colors.cols() != 3)) {
    throw ShapeError("write_ply: expected matching n x 3 points and colors");
  }
  std::ofstream os(path);
  if (!os) throw Error("cannot write PLY file: " + path.string());
  os << "ply\nformat ascii 1.0\nelement vertex " << points.rows()
     << "\nproperty float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  os << std::setprecision(9);
  for (std::size_t r = 0; r < points.rows(); ++r) {
    os << points.at(r, 0) << ' ' << points.at(r, 1) << ' ' << points.at(r, 2);
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(colors.at(r, c), 0.0, 1.0);
      os << ' ' << static_cast<int>(std::lround(255.0 * v));
    }
    os << '\n';
  }
}

}  // namespace caspr::synth
