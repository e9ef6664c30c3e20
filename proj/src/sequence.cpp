#include "caspr/sequence.hpp"

#include <algorithm>

namespace caspr {

std::size_t RawSequence::total_points() const {
  std::size_t n = 0;
  for (const auto& f : frames) n += f.points.rows();
  return n;
}

void RawSequence::validate() const {
  if (frames.empty()) throw Error("sequence has no frames");
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const Tensor& p = frames[k].points;
    if (p.rank() != 2 || p.cols() != 3) throw ShapeError("frame " + std::to_string(k) + " is not n x 3");
    if (p.rows() == 0) throw Error("frame " + std::to_string(k) + " is empty");
    if (!p.all_finite()) throw NumericError("frame " + std::to_string(k) + " has non-finite points");
    if (k > 0 && frames[k].time < frames[k - 1].time) throw Error("frame timestamps must be nondecreasing");
  }
}

RawSequence RawSequence::shifted() const {
  RawSequence out = *this;
  if (out.frames.empty()) return out;
  const double s0 = out.frames.front().time;
  for (auto& f : out.frames) f.time -= s0;
  return out;
}

std::size_t TNocsSequence::total_points() const {
  std::size_t n = 0;
  for (const auto& f : frames) n += f.rows();
  return n;
}

Tensor TNocsSequence::spatial(std::size_t frame) const { return take_columns(frames.at(frame), 0, 3); }

Tensor take_columns(const Tensor& t, std::size_t begin, std::size_t end) {
  if (end > t.cols() || begin > end) throw ShapeError("column range out of bounds");
  Tensor out = Tensor::zeros(t.rows(), end - begin);
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = begin; c < end; ++c) out.at(r, c - begin) = t.at(r, c);
  return out;
}

Tensor stack_rows(const std::vector<Tensor>& parts, std::size_t cols) {
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rows() > 0 && p.cols() != cols) throw ShapeError("stack_rows: column mismatch");
    rows += p.rows();
  }
  Tensor out = Tensor::zeros(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.size(), out.data() + offset);
    offset += p.size();
  }
  return out;
}

}  // namespace caspr
