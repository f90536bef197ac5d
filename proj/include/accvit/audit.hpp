#pragma once

// Parameter and compute audit against the published configuration table.
//
// Counting convention:
//   macs        multiply-accumulates of conv, linear and attention matmuls
//               (what the published FLOPs column measures; see README)
//   flops       2 * macs + elementwise work, 1 per output element per pass
// The published comparison uses macs with a +-5% tolerance; params use +-2%.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "accvit/cost.hpp"
#include "accvit/model.hpp"

namespace accvit {

inline constexpr double kParamTolerance = 0.02;
inline constexpr double kMacTolerance = 0.05;

struct ModuleCost {
  std::string module;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;
};

struct AuditReport {
  std::string variant;
  std::size_t height = 0, width = 0;
  std::vector<CostEntry> entries;
  std::vector<ModuleCost> modules;
  std::uint64_t params = 0;  // from the named-parameter walk
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;
  std::optional<double> published_params_m;
  std::optional<double> published_gmacs;

  std::optional<double> param_delta() const {
    if (!published_params_m) return std::nullopt;
    return static_cast<double>(params) / (*published_params_m * 1e6) - 1.0;
  }
  std::optional<double> mac_delta() const {
    if (!published_gmacs) return std::nullopt;
    return static_cast<double>(macs) / (*published_gmacs * 1e9) - 1.0;
  }
  bool params_ok(double tol = kParamTolerance) const {
    const auto d = param_delta();
    return !d || std::abs(*d) <= tol;
  }
  bool macs_ok(double tol = kMacTolerance) const {
    const auto d = mac_delta();
    return !d || std::abs(*d) <= tol;
  }
};

/// Module key used for aggregation: "stem", "head", or "stages.S.L.conv|attn".
inline std::string module_key(const std::string& name) {
  if (name.rfind("stages.", 0) != 0) return name.substr(0, name.find('.'));
  std::size_t pos = 0;
  for (int i = 0; i < 4 && pos != std::string::npos; ++i) pos = name.find('.', pos + 1);
  return pos == std::string::npos ? name : name.substr(0, pos);
}

template <typename T>
AuditReport audit_model(AccVitModel<T>& model, std::size_t h, std::size_t w) {
  AuditReport r;
  r.variant = model.config().name;
  r.height = h;
  r.width = w;
  r.params = model.parameter_count();
  r.entries = model.cost(h, w).entries();
  std::map<std::string, std::size_t> index;
  for (const auto& e : r.entries) {
    r.macs += e.macs;
    r.flops += e.flops();
    const std::string key = module_key(e.module);
    auto [it, fresh] = index.try_emplace(key, r.modules.size());
    if (fresh) r.modules.push_back({key});
    auto& m = r.modules[it->second];
    m.params += e.params;
    m.macs += e.macs;
    m.flops += e.flops();
  }
  for (const auto& v : variant_table()) {
    if (v.config.name == r.variant && v.config == model.config()) {
      r.published_params_m = v.published_params_m;
      if (h == 224 && w == 224) r.published_gmacs = v.published_gmacs;
    }
  }
  return r;
}

/// Builds the named variant (classes from the table) and audits it.
inline AuditReport audit_variant(const std::string& name, std::size_t resolution = 224,
                                 std::optional<std::size_t> num_classes = std::nullopt) {
  AccVitModel<float> model(variant(name, num_classes), 0);
  return audit_model(model, resolution, resolution);
}

/// `module<TAB>params<TAB>flops` per module, then a `total` line.
inline void write_audit_tsv(const AuditReport& r, std::ostream& os) {
  for (const auto& m : r.modules) os << m.module << '\t' << m.params << '\t' << m.flops << '\n';
  os << "total\t" << r.params << '\t' << r.flops << '\n';
}

inline std::string format_delta(std::optional<double> d) {
  if (!d) return "n/a";
  std::ostringstream os;
  os << std::showpos << std::fixed << std::setprecision(2) << *d * 100 << '%';
  return os.str();
}

inline void write_audit_table(const AuditReport& r, std::ostream& os) {
  os << "variant " << r.variant << " at " << r.height << "x" << r.width << "\n";
  os << std::left << std::setw(24) << "module" << std::right << std::setw(14) << "params"
     << std::setw(16) << "MACs" << std::setw(16) << "FLOPs" << "\n";
  for (const auto& m : r.modules) {
    os << std::left << std::setw(24) << m.module << std::right << std::setw(14)
       << m.params << std::setw(16) << m.macs << std::setw(16) << m.flops << "\n";
  }
  os << std::fixed << std::setprecision(3);
  os << "params: " << r.params / 1e6 << "M";
  if (r.published_params_m) {
    os << "  published " << *r.published_params_m << "M  delta "
       << format_delta(r.param_delta()) << (r.params_ok() ? "  (within 2%)" : "  (OUTSIDE 2%)");
  }
  os << "\nMACs:   " << r.macs / 1e9 << "G";
  if (r.published_gmacs) {
    os << "  published " << *r.published_gmacs << "G  delta "
       << format_delta(r.mac_delta()) << (r.macs_ok() ? "  (within 5%)" : "  (OUTSIDE 5%)");
  }
  os << "\nFLOPs:  " << r.flops / 1e9 << "G (2 per MAC + elementwise)\n";
}

}  // namespace accvit
