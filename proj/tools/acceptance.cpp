// Runs the acceptance criteria and prints one line per criterion.
#include <iostream>

#include "CLI11.hpp"
#include "acceptance_checks.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> criteria;
  caspr::accept::Options opts;
  bool verbose = false;
  app.add_option("--criterion", criteria, "criteria to run (default: all)")->check(CLI::Range(1, caspr::accept::kCriteria));
  app.add_option("--work-dir", opts.work_dir, "cache for generated datasets and trained checkpoints");
  app.add_flag("--fresh", opts.fresh, "retrain even when cached checkpoints exist");
  app.add_flag("--verbose", verbose, "print training progress");
  CLI11_PARSE(app, argc, argv);
  if (verbose) opts.log = &std::cerr;
  if (criteria.empty())
    for (int c = 1; c <= caspr::accept::kCriteria; ++c) criteria.push_back(c);
  bool ok = true;
  for (int c : criteria) {
    const caspr::accept::Outcome o = caspr::accept::run(c, opts);
    std::cout << caspr::accept::format(o) << std::endl;
    ok = ok && o.pass;
  }
  return ok ? 0 : 1;
}
