#pragma once

// Property suites shared by the `verify` command and the acceptance runner.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajmae/metrics.hpp"

namespace trajmae {

struct SuiteResult {
  std::string name;
  std::string property;
  std::size_t cases = 0;
  std::size_t checks = 0;
  std::size_t violations = 0;
  std::size_t skipped = 0;
  double worst = 0.0;  // suite-specific worst observed error
  double seconds = 0.0;
  std::vector<std::string> failures;  // first few, for diagnostics
  nlohmann::ordered_json details = nlohmann::ordered_json::object();

  bool passed() const noexcept { return violations == 0; }
  void fail(std::string msg);
  nlohmann::ordered_json to_json() const;
};

/// Exact masking counts, ego suffix, block contiguity and patch run lengths
/// for every strategy over the ratio grid 0.3..0.8.
SuiteResult masking_suite(std::uint64_t seed, std::size_t per_cell = 50);

/// Context at visible slots must not move when masked inputs move by +-1000.
/// `inject_fault` exposes one masked slot to the encoder (negative control).
SuiteResult blindness_suite(std::uint64_t seed, std::size_t cases = 100, bool inject_fault = false);

/// Reverse-mode vs central differences (h = 1e-5) on random tiny models.
/// Coordinates whose stencil crosses a kink of a piecewise op are skipped
/// and counted; more than 1% skipped fails the suite.
SuiteResult gradient_suite(std::uint64_t seed, std::size_t configs = 20, double tolerance = 1e-5,
                           std::size_t max_params = 5000);

/// Zero gradient at visible targets and loss invariance to visible predictions.
SuiteResult masked_loss_suite(std::uint64_t seed, std::size_t cases = 50);

/// The reference continual schedule plus quota conservation on random triples.
SuiteResult quota_suite(std::uint64_t seed, std::size_t cases = 500);

/// All nine metrics against a nested-loop reference on random small instances.
SuiteResult metric_oracle_suite(std::uint64_t seed, std::size_t cases = 200, double tolerance = 1e-12);

/// Reference implementation used by the oracle suite.
SceneMetrics reference_metrics(const ForecastSample& f, const MetricParams& p);

}  // namespace trajmae
