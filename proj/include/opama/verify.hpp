#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "opama/ssm.hpp"

namespace opama {

/// Outcome of one named property check.
struct CheckResult {
  std::string suite;
  std::string name;
  bool pass = false;
  double value = 0.0;  // measured quantity
  double limit = 0.0;  // tolerance it was held to
  std::string detail;
  double seconds = 0.0;
};

/// scan, grad, geometry, diffusion, vcr, gma.
const std::vector<std::string>& suite_names();

/// Runs one suite, or every suite for "all". Upper limits are multiplied and
/// lower limits divided by `tolerance_scale`. Throws ContractError for an
/// unknown name.
std::vector<CheckResult> run_suite(const std::string& name, double tolerance_scale = 1.0);

/// Fixed-width pass/fail table, one row per check.
std::string format_results(const std::vector<CheckResult>& results);

struct BenchRow {
  std::int64_t L = 0, N = 0, D = 0;
  std::string variant;
  std::int64_t wall_ns = 0;
  double max_abs_err = 0.0;  // against the sequential scan
};

inline constexpr const char* kBenchHeader = "L,N,D,variant,wall_ns,max_abs_err";

/// Times one selective scan on random operands drawn from `seed`.
BenchRow bench_scan(std::int64_t L, std::int64_t N, std::int64_t D, ScanVariant variant,
                    std::uint64_t seed = 0, unsigned threads = 1);
std::string to_csv(const BenchRow& row);

}  // namespace opama
