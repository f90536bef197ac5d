// One PASS/FAIL line per acceptance criterion; nonzero exit if any fails.

#include <chrono>
#include <functional>
#include <iostream>

#include "accvit/verify.hpp"

namespace {

using accvit::SuiteResult;

int failures = 0;

void criterion(int n, const std::string& title, const std::function<SuiteResult()>& run) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  std::string crash;
  try {
    r = run();
  } catch (const std::exception& e) {
    crash = e.what();
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool ok = crash.empty() && !r.empty() && accvit::all_passed(r);
  if (!ok) ++failures;
  for (const auto& c : r)
    std::cout << "    " << (c.passed ? "ok   " : "FAIL ") << c.name << "  (" << c.detail << ")\n";
  if (!crash.empty()) std::cout << "    exception: " << crash << "\n";
  std::cout << "CRITERION " << n << " " << (ok ? "PASS" : "FAIL") << "  " << title << "  ["
            << accvit::detail::fmt(secs) << "s]\n"
            << std::flush;
}

}  // namespace

int main() {
  const auto reports = accvit::published_audits();
  criterion(1, "parameter counts within 2% of the published table",
            [&] { return accvit::verify_audit_params(reports); });
  criterion(2, "compute within 5% of the published table (multiply-accumulates)", [&] {
    auto r = accvit::verify_audit_macs(reports);
    for (const auto& a : reports) {
      r.push_back({a.variant + " 2-per-MAC flops " + accvit::detail::fmt(a.flops / 1e9) + "G",
                   true, "informational: twice the MAC count plus elementwise work"});
    }
    return r;
  });
  criterion(3, "atrous partition round trip and gather oracle", [] { return accvit::verify_partition(); });
  criterion(4, "finite-difference gradient checks", [] { return accvit::verify_gradcheck(); });
  criterion(5, "gate normalization and fusion envelope", [] { return accvit::verify_gating(); });
  criterion(6, "end-to-end shapes and single-branch reference", [] { return accvit::verify_shapes(); });
  criterion(7, "training smoke loss ratio below 0.5", [] { return accvit::verify_train(); });
  criterion(8, "weight serialization round trip and rejection", [] { return accvit::verify_serialization(); });
  std::cout << (failures == 0 ? "ALL CRITERIA PASS" : std::to_string(failures) + " CRITERIA FAIL") << "\n";
  return failures == 0 ? 0 : 1;
}
