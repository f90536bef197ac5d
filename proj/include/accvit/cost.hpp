#pragma once

// Analytic cost records. Modules append one entry per weighted op (and per
// notable elementwise stage) so the audit can aggregate per module.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "accvit/tensor.hpp"

namespace accvit {

enum class CostKind { kConv, kLinear, kAttentionMatmul, kElementwise };

inline const char* cost_kind_name(CostKind k) {
  switch (k) {
    case CostKind::kConv: return "conv";
    case CostKind::kLinear: return "linear";
    case CostKind::kAttentionMatmul: return "attention_matmul";
    case CostKind::kElementwise: return "elementwise";
  }
  return "?";
}

struct CostEntry {
  std::string module;
  std::string op;
  CostKind kind = CostKind::kElementwise;
  std::vector<std::string> param_names;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  // Non-MAC work: 1 per output element per pass (bias, activation, softmax,
  // normalization, residual adds, gating products).
  std::uint64_t elementwise = 0;
  // False for work on pooled vectors, which does not grow with resolution.
  bool spatial = true;

  std::uint64_t flops() const { return 2 * macs + elementwise; }
};

class CostSink {
 public:
  std::vector<CostEntry>& entries() { return entries_; }
  const std::vector<CostEntry>& entries() const { return entries_; }

  template <typename T>
  using Refs = std::vector<std::pair<std::string, const Tensor<T>*>>;

  /// Parameter names are relative to `module`.
  template <typename T>
  CostEntry& add(std::string module, std::string op, CostKind kind,
                 const Refs<T>& params,
                 std::uint64_t macs, std::uint64_t elementwise, bool spatial = true) {
    CostEntry e{std::move(module), std::move(op), kind, {}, 0, macs, elementwise, spatial};
    for (const auto& [name, t] : params) {
      if (!t || !t->defined()) continue;
      e.param_names.push_back(e.module + "." + name);
      e.params += t->numel();
    }
    entries_.push_back(std::move(e));
    return entries_.back();
  }

  CostEntry& add_plain(std::string module, std::string op, CostKind kind,
                       std::uint64_t macs, std::uint64_t elementwise,
                       bool spatial = true) {
    entries_.push_back({std::move(module), std::move(op), kind, {}, 0, macs,
                        elementwise, spatial});
    return entries_.back();
  }

 private:
  std::vector<CostEntry> entries_;
};

}  // namespace accvit
