#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

namespace caspr::accept {

inline constexpr int kCriteria = 10;

struct Options {
  // Trained checkpoints and generated datasets for criteria 7-10 are cached
  // here; empty means a temporary directory.
  std::filesystem::path work_dir;
  // Ignore cached checkpoints and retrain.
  bool fresh = false;
  std::ostream* log = nullptr;
};

struct Outcome {
  int criterion = 0;
  bool pass = false;
  std::string title;
  std::string detail;
  double seconds = 0.0;
};

Outcome run(int criterion, const Options& opts);
std::string format(const Outcome& o);

}  // namespace caspr::accept
