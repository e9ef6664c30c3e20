#pragma once

#include <string>
#include <vector>

#include "caspr/tensor.hpp"

namespace caspr {

struct RawFrame {
  Tensor points;  // n x 3 world coordinates
  double time = 0.0;
};

/// K frames of world-space points with raw timestamps.
struct RawSequence {
  std::vector<RawFrame> frames;
  std::string instance_id;

  std::size_t total_points() const;
  // Throws when a frame is empty, malformed, or timestamps decrease.
  void validate() const;
  // Copy with timestamps shifted so the first one is 0.
  RawSequence shifted() const;
};

/// Canonical T-NOCS points: each frame is n x 4 rows (x, y, z, t), aligned
/// index-for-index with a RawSequence.
struct TNocsSequence {
  std::vector<Tensor> frames;

  std::size_t total_points() const;
  // Spatial columns of one frame (n x 3).
  Tensor spatial(std::size_t frame) const;
};

/// Leading columns [begin, end) of an n x c tensor.
Tensor take_columns(const Tensor& t, std::size_t begin, std::size_t end);
/// Rows of `t` stacked in order.
Tensor stack_rows(const std::vector<Tensor>& parts, std::size_t cols);

}  // namespace caspr
