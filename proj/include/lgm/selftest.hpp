#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lgm {

struct SuiteResult {
  std::string name;
  int passed = 0;
  int failed = 0;
  double ms = 0;
  std::vector<std::string> failures;  // first few failing checks
};

struct SelftestReport {
  std::vector<SuiteResult> suites;
  int total_passed() const;
  int total_failed() const;
  bool ok() const { return total_failed() == 0; }
  std::string summary() const;
};

// Bijection, gradient, oracle-equivalence and counting suites.
SelftestReport run_selftest(std::uint64_t seed = 0);

}  // namespace lgm
