#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "caspr/geometry.hpp"
#include "caspr/sequence.hpp"

namespace caspr::synth {

enum class ShapeKind { box_composite, superellipsoid, winged, legged };

std::string kind_name(ShapeKind kind);
ShapeKind parse_kind(const std::string& name);

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t sequence_seed(std::uint64_t master, std::uint64_t instance, std::uint64_t sequence);

struct Triangle {
  Eigen::Vector3d a, b, c;
  int part = 0;

  double area() const { return 0.5 * (b - a).cross(c - a).norm(); }
  Eigen::Vector3d normal() const { return (b - a).cross(c - a).normalized(); }
};

struct SurfaceSamples {
  Tensor points;   // n x 3 canonical
  Tensor normals;  // n x 3 outward unit normals
  std::vector<int> labels;
  // Surface parameterization: triangle index and barycentric (u, v).
  std::vector<std::uint32_t> triangle;
  std::vector<Eigen::Vector2d> barycentric;
};

/// Procedural triangle-mesh shape normalized so its bounding-box diagonal is 1
/// and the box center is (0.5, 0.5, 0.5).
struct ShapeModel {
  ShapeKind kind = ShapeKind::box_composite;
  std::uint64_t seed = 0;
  std::vector<double> params;
  std::vector<Triangle> triangles;
  int part_count = 0;

  double area() const;
  std::vector<double> part_areas() const;
  // Area-weighted uniform samples.
  SurfaceSamples sample(std::size_t n, std::mt19937_64& rng) const;
  Eigen::Vector3d point_at(std::uint32_t tri, const Eigen::Vector2d& bary) const;
};

ShapeModel sample_shape(ShapeKind kind, std::uint64_t seed);

struct TrajectoryLimits {
  double lat_min_deg = -60.0;
  double lat_max_deg = 60.0;
  double radius_min = 1.5;
  double radius_max = 3.0;
  // Per-step velocity magnitude ranges.
  double lon_speed_min_deg = 10.0;
  double lon_speed_max_deg = 25.0;
  double lat_speed_max_deg = 8.0;
  double radius_speed_max = 0.1;
};

struct CameraState {
  double lon_deg = 0.0;
  double lat_deg = 0.0;
  double radius = 2.0;
};

struct CameraTrajectory {
  std::vector<CameraState> states;

  Eigen::Vector3d position(std::size_t k) const;
  // Rows are the camera's right, down and forward axes in scene coordinates.
  Eigen::Matrix3d rotation(std::size_t k) const;
};

/// Constant per-parameter velocities; latitude and radius reverse direction at
/// their limits, longitude wraps freely.
CameraTrajectory make_trajectory(const CameraState& start, const CameraState& velocity, std::size_t K,
                                 const TrajectoryLimits& limits = {});
/// Random start and velocities. With `directional` the longitude always
/// increases.
CameraTrajectory gen_trajectory(std::uint64_t seed, std::size_t K = 10, const TrajectoryLimits& limits = {},
                                bool directional = false);

/// Canonical -> camera pose for an object of the given scale centered at the
/// scene origin.
geo::SimilarityPose camera_pose(const CameraTrajectory& traj, std::size_t k, double object_scale);

struct RenderResult {
  Tensor world;  // n x 3 camera-frame points
  Tensor nocs;   // n x 3 canonical points
  Tensor normals;
  std::vector<int> labels;
  std::size_t visible = 0;
  int resolution = 0;  // output grid actually used
};

inline constexpr std::size_t kCandidateFactor = 16;
inline constexpr int kMaxRenderRes = 4096;

/// Point z-buffer rendering: samples 16 n candidates, drops back faces and
/// candidates hidden behind the image_res depth map, keeps the nearest
/// candidate per pixel and draws n of those. The camera is cropped to the
/// object and the pixel grid doubles while fewer than n pixels are covered.
RenderResult render_partial(const ShapeModel& shape, const geo::SimilarityPose& pose, std::size_t n_points,
                            std::mt19937_64& rng, int image_res = 64);

struct SequenceRecord {
  std::string instance_id;
  std::string split = "train";
  ShapeKind kind = ShapeKind::box_composite;
  std::vector<double> raw_times;
  std::vector<double> canon_times;
  std::vector<geo::SimilarityPose> poses;
  std::vector<Tensor> world;
  std::vector<Tensor> nocs;
  std::vector<std::vector<int>> labels;
  // Undeformed canonical position of every point (deforming data only).
  std::vector<Tensor> rest;

  std::size_t frame_count() const { return world.size(); }
  RawSequence raw() const;
  TNocsSequence gt() const;
};

struct SequenceOptions {
  std::size_t K = 10;
  std::size_t n_points = 4096;
  int image_res = 64;
  double duration = 5.0;
  double object_scale = 1.0;
};

SequenceRecord gen_sequence(const ShapeModel& shape, const CameraTrajectory& traj, const SequenceOptions& opts,
                            std::mt19937_64& rng);

/// Smooth time-dependent deformation of canonical points: per-axis scaling
/// about the center plus a bend, both proportional to sin(pi freq t).
struct WarpParams {
  Eigen::Vector3d scale_amp = Eigen::Vector3d::Zero();
  double bend_amp = 0.0;
  double freq = 1.0;
  // Half extents of the shape about the center, used for clamping and the bound.
  Eigen::Vector3d half_extent = Eigen::Vector3d::Constant(0.5);

  Eigen::Vector3d apply(const Eigen::Vector3d& x, double t) const;
  // Upper bound on |apply(x, t) - x| over the shape and t in [0, 1].
  double displacement_bound() const;
};

WarpParams random_warp(const ShapeModel& shape, std::uint64_t seed);
Tensor warp_points(const Tensor& points, const WarpParams& warp, double t);

/// Full (unoccluded) samples of the deforming shape at K canonical times; no
/// rigid motion, so world and canonical coincide.
SequenceRecord gen_deforming_sequence(const ShapeModel& shape, const WarpParams& warp, const SequenceOptions& opts,
                                      std::mt19937_64& rng);

struct TrainingView {
  RawSequence raw;
  TNocsSequence gt;
  std::vector<std::vector<int>> labels;
  std::vector<std::size_t> frames;  // indices into the source record
  std::vector<Tensor> rest;
};

TrainingView subsample_training_view(const SequenceRecord& rec, std::size_t n_frames, std::size_t n_points,
                                     std::uint64_t seed);
/// Frames at `frames`, n points each (all points when n >= count).
TrainingView select_view(const SequenceRecord& rec, const std::vector<std::size_t>& frames, std::size_t n_points,
                         std::uint64_t seed);

/// Timestamps flipped (s -> s_K - s with frame order reversed).
SequenceRecord time_reversed(const SequenceRecord& rec);

struct DatasetOptions {
  ShapeKind kind = ShapeKind::box_composite;
  std::size_t count = 200;
  std::uint64_t seed = 0;
  SequenceOptions sequence;
  bool directional = false;
  bool deforming = false;
  // Rigid data only: every instance shows the same shape at unit scale, seen
  // from a fixed distance and height.
  bool single_shape = false;
};

std::string split_of(std::size_t instance, std::size_t count, std::uint64_t seed);
SequenceRecord generate_one(const DatasetOptions& opts, std::size_t instance);
/// Deformation used by generate_one for a deforming dataset instance.
WarpParams dataset_warp(const DatasetOptions& opts, std::size_t instance);
std::vector<SequenceRecord> generate_dataset(const DatasetOptions& opts);

// Dataset layout: <root>/manifest.txt lists "<split> <relative path>" lines;
// each sequence lives in <root>/<split>/<instance>.seq.
void write_sequence(const std::filesystem::path& path, const SequenceRecord& rec);
SequenceRecord read_sequence(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& root, const std::vector<SequenceRecord>& records);
struct ManifestEntry {
  std::string split;
  std::filesystem::path path;
};
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root);
std::vector<SequenceRecord> read_split(const std::filesystem::path& root, const std::string& split);

/// ASCII PLY with per-vertex color taken from `colors` in [0, 1].
void write_ply(const std::filesystem::path& path, const Tensor& points, const Tensor& colors);

}  // namespace caspr::synth
