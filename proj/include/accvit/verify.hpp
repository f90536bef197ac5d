#pragma once

// Self-contained verification suites used by the `verify` subcommand and the
// acceptance runner. Each check reports one line; a suite passes when every
// check does.

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "accvit/audit.hpp"
#include "accvit/gradcheck.hpp"
#include "accvit/model.hpp"
#include "accvit/partition.hpp"
#include "accvit/serialize.hpp"
#include "accvit/train.hpp"

namespace accvit {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

using SuiteResult = std::vector<CheckResult>;

inline bool all_passed(const SuiteResult& r) {
  for (const auto& c : r) {
    if (!c.passed) return false;
  }
  return !r.empty();
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

template <typename T>
Tensor<T> uniform(const Shape& s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(numel(s));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>::from(s, std::move(v));
}

/// Overwrites every parameter with U(-a, a) so composites run in a
/// non-trivial regime (fresh inits leave gates uniform and attention flat).
template <typename T>
void randomize(const ParamList<T>& params, std::mt19937_64& rng, double a = 0.5) {
  std::uniform_real_distribution<double> u(-a, a);
  for (const auto& [name, t] : params) {
    for (auto& v : t->mutable_data()) v = static_cast<T>(u(rng));
  }
}

template <typename T>
std::vector<Tensor<T>> leaves_of(const ParamList<T>& params) {
  std::vector<Tensor<T>> out;
  for (const auto& [name, t] : params) out.push_back(*t);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- partition

inline SuiteResult verify_partition(std::size_t cases = 1000, std::uint64_t seed = 1) {
  SuiteResult out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> small(1, 3), mult(1, 4), pick(0, 3);
  const std::size_t dils[] = {1, 2, 4, 8};
  std::size_t oracle_bad = 0, trip_bad = 0, win_bad = 0;
  for (std::size_t n = 0; n < cases; ++n) {
    const std::size_t b = small(rng), c = small(rng), d = dils[pick(rng)];
    const std::size_t h = d * mult(rng), w = d * mult(rng);
    auto x = detail::uniform<float>({b, c, h, w}, rng);
    auto p = partition(x, d);
    const auto xv = x.data();
    const auto pv = p.phases.data();
    const std::size_t hs = h / d, ws = w / d;
    bool ok = p.phases.shape() == Shape{b * d * d, c, hs, ws};
    for (std::size_t bi = 0; ok && bi < b; ++bi)
      for (std::size_t ph = 0; ph < d; ++ph)
        for (std::size_t pw = 0; pw < d; ++pw)
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t i = 0; i < hs; ++i)
              for (std::size_t j = 0; j < ws; ++j) {
                const std::size_t pb = (bi * d + ph) * d + pw;
                const float got = pv[((pb * c + ci) * hs + i) * ws + j];
                const float want = xv[((bi * c + ci) * h + i * d + ph) * w + j * d + pw];
                if (got != want) ok = false;
              }
    if (!ok) ++oracle_bad;
    const auto back = departition(p);
    if (back.shape() != x.shape() ||
        !std::equal(xv.begin(), xv.end(), back.data().begin())) {
      ++trip_bad;
    }
    // Window round trip on the phase images.
    const std::size_t q = effective_window(7, hs, ws);
    const auto merged = window_merge(window_split(p.phases, q));
    if (!std::equal(pv.begin(), pv.end(), merged.data().begin())) ++win_bad;
  }
  const std::string nc = std::to_string(cases) + " random cases";
  out.push_back({"partition matches index-gather oracle", oracle_bad == 0,
                 nc + ", " + std::to_string(oracle_bad) + " mismatches"});
  out.push_back({"departition(partition(x)) is bit-identity", trip_bad == 0,
                 nc + ", " + std::to_string(trip_bad) + " mismatches"});
  out.push_back({"window_merge(window_split(x)) is bit-identity", win_bad == 0,
                 nc + ", " + std::to_string(win_bad) + " mismatches"});

  // 4x4 worked example, phase (1,0) = [[4,6],[12,14]].
  std::vector<float> v(16);
  for (int i = 0; i < 16; ++i) v[i] = static_cast<float>(i);
  auto p = partition(Tensor<float>::from({1, 1, 4, 4}, v), 2);
  const std::vector<float> want{0, 2, 8, 10, 1, 3, 9, 11, 4, 6, 12, 14, 5, 7, 13, 15};
  out.push_back({"4x4 d=2 phase layout",
                 std::equal(want.begin(), want.end(), p.phases.data().begin()),
                 "phases (0,0) (0,1) (1,0) (1,1) in batch order"});
  return out;
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckCase {
  std::string name;
  bool composite = false;
  std::function<GradcheckResult()> run;
};

inline constexpr double kPrimitiveTolerance = 1e-4;
inline constexpr double kCompositeTolerance = 1e-3;

inline std::vector<GradcheckCase> gradcheck_cases(std::uint64_t seed = 7) {
  using D = double;
  std::vector<GradcheckCase> cases;
  auto prim = [&](std::string name, std::vector<Shape> shapes,
                  std::function<Tensor<D>(const std::vector<Tensor<D>>&)> f,
                  double lo = -1, double hi = 1) {
    cases.push_back({std::move(name), false, [=] {
                       std::mt19937_64 rng(seed);
                       std::vector<Tensor<D>> xs;
                       for (const auto& s : shapes) xs.push_back(random_tensor(s, rng, lo, hi));
                       const std::uint64_t rs = rng();
                       return gradcheck([&] { return random_projection(f(xs), rs); }, xs);
                     }});
  };
  using V = const std::vector<Tensor<D>>&;
  prim("add (broadcast)", {{2, 3, 4}, {3, 1}}, [](V x) { return add(x[0], x[1]); });
  prim("sub (broadcast)", {{2, 3, 4}, {4}}, [](V x) { return sub(x[0], x[1]); });
  prim("mul (broadcast)", {{2, 3, 4}, {2, 1, 4}}, [](V x) { return mul(x[0], x[1]); });
  prim("scale", {{3, 5}}, [](V x) { return scale(x[0], -1.7); });
  prim("add_scalar", {{3, 5}}, [](V x) { return add_scalar(x[0], 0.3); });
  prim("relu", {{4, 6}}, [](V x) { return relu(x[0]); });
  prim("sigmoid", {{4, 6}}, [](V x) { return sigmoid(x[0]); }, -3, 3);
  prim("gelu", {{4, 6}}, [](V x) { return gelu(x[0]); }, -3, 3);
  prim("sum", {{3, 4}}, [](V x) { return sum(x[0]); });
  prim("mean", {{3, 4}}, [](V x) { return mean(x[0]); });
  prim("global_avg_pool", {{2, 3, 4, 5}}, [](V x) { return global_avg_pool(x[0]); });
  prim("avg_pool2d", {{2, 3, 4, 6}}, [](V x) { return avg_pool2d(x[0], 2); });
  prim("reshape", {{2, 6}}, [](V x) { return reshape(x[0], {3, 4}); });
  prim("permute", {{2, 3, 4}}, [](V x) { return permute(x[0], {2, 0, 1}); });
  prim("slice", {{3, 5, 2}}, [](V x) { return slice(x[0], 1, 1, 3); });
  prim("concat", {{2, 3}, {2, 2}}, [](V x) { return concat<D>({x[0], x[1]}, 1); });
  prim("matmul (batched)", {{2, 3, 4}, {4, 5}}, [](V x) { return matmul(x[0], x[1]); });
  prim("linear", {{3, 4}, {5, 4}, {5}}, [](V x) { return linear(x[0], x[1], x[2]); });
  prim("conv2d stride 2 pad 1", {{2, 3, 6, 6}, {4, 3, 3, 3}, {4}},
       [](V x) { return conv2d(x[0], x[1], x[2], {.stride = 2, .padding = 1}); });
  prim("conv2d depthwise dilation 2", {{1, 4, 7, 7}, {4, 1, 3, 3}},
       [](V x) {
         return conv2d(x[0], x[1], std::nullopt,
                       {.padding = 2, .dilation = 2, .groups = 4});
       });
  prim("conv2d pointwise", {{2, 3, 4, 4}, {5, 3, 1, 1}, {5}},
       [](V x) { return conv2d(x[0], x[1], x[2]); });
  prim("softmax", {{3, 5}}, [](V x) { return softmax(x[0], -1); }, -2, 2);
  prim("softmax axis 0", {{3, 2, 4}}, [](V x) { return softmax(x[0], 0); }, -2, 2);
  prim("layernorm", {{3, 6}, {6}, {6}},
       [](V x) { return layernorm(x[0], x[1], x[2], 1e-5); });
  prim("cross_entropy (smoothing 0.1)", {{4, 3}}, [](V x) {
    static const std::vector<std::size_t> labels{0, 2, 1, 2};
    return cross_entropy(x[0], labels, 0.1);
  });
  prim("partition/departition", {{1, 2, 4, 4}},
       [](V x) { return departition(partition(x[0], 2)); });
  prim("window split/merge", {{1, 2, 4, 4}},
       [](V x) { return window_merge(window_split(x[0], 2)); });
  // Convex gates, as the fusion contract requires.
  prim("gated_sum", {{2, 1, 2, 3, 3}, {1, 2, 3, 3}, {1, 2, 3, 3}},
       [](V x) { return gated_sum(softmax(x[0], 0), {x[1], x[2]}); });

  auto composite = [&](std::string name,
                       std::function<GradcheckResult(std::mt19937_64&)> body) {
    cases.push_back({std::move(name), true, [=] {
                       std::mt19937_64 rng(seed);
                       return body(rng);
                     }});
  };
  composite("W-MHSA window (P=2, 2 heads)", [](std::mt19937_64& rng) {
    ParamInit init(rng());
    WindowedMHSA<D> m(8, 4, 2, init);
    ParamList<D> ps;
    m.parameters("m", ps);
    detail::randomize(ps, rng);
    auto x = random_tensor({3, 4, 8}, rng);
    const auto rs = rng();
    auto leaves = detail::leaves_of(ps);
    leaves.push_back(x);
    return gradcheck([&] { return random_projection(m.forward(x, 2), rs); }, leaves);
  });
  composite("GateUnit fuse (dense, k=3)", [](std::mt19937_64& rng) {
    ParamInit init(rng());
    GateUnit<D> g(4, 3, GateMode::kDense, init);
    ParamList<D> ps;
    g.parameters("g", ps);
    detail::randomize(ps, rng);
    auto x = random_tensor({1, 4, 2, 2}, rng);
    std::vector<Tensor<D>> ys;
    for (int i = 0; i < 3; ++i) ys.push_back(random_tensor({1, 4, 2, 2}, rng));
    const auto rs = rng();
    auto leaves = detail::leaves_of(ps);
    leaves.push_back(x);
    leaves.insert(leaves.end(), ys.begin(), ys.end());
    return gradcheck([&] { return random_projection(g.fuse(x, ys), rs); }, leaves);
  });
  composite("AtrousAttentionLayer (c=8, 8x8, levels {2}, P=2)", [](std::mt19937_64& rng) {
    ParamInit init(rng());
    AtrousAttentionLayer<D> layer(8, {2}, 4, 2, 4, init);
    ParamList<D> ps;
    layer.parameters("a", ps);
    detail::randomize(ps, rng);
    auto x = random_tensor({1, 8, 8, 8}, rng);
    const auto rs = rng();
    auto leaves = detail::leaves_of(ps);
    leaves.push_back(x);
    return gradcheck([&] { return random_projection(layer.forward(x), rs); }, leaves);
  });
  composite("AtrousMBConv (c=4, 8x8, stride 1)", [](std::mt19937_64& rng) {
    ParamInit init(rng());
    AtrousMBConv<D> block(4, 4, 1, init);
    ParamList<D> ps;
    block.parameters("b", ps);
    detail::randomize(ps, rng);
    auto x = random_tensor({1, 4, 8, 8}, rng);
    const auto rs = rng();
    auto leaves = detail::leaves_of(ps);
    leaves.push_back(x);
    return gradcheck([&] { return random_projection(block.forward(x), rs); }, leaves);
  });
  composite("AtrousMBConv (4->8, 8x8, stride 2)", [](std::mt19937_64& rng) {
    ParamInit init(rng());
    AtrousMBConv<D> block(4, 8, 2, init);
    ParamList<D> ps;
    block.parameters("b", ps);
    detail::randomize(ps, rng);
    auto x = random_tensor({1, 4, 8, 8}, rng);
    const auto rs = rng();
    auto leaves = detail::leaves_of(ps);
    leaves.push_back(x);
    return gradcheck([&] { return random_projection(block.forward(x), rs); }, leaves);
  });
  return cases;
}

inline SuiteResult verify_gradcheck(std::uint64_t seed = 7) {
  SuiteResult out;
  for (const auto& c : gradcheck_cases(seed)) {
    const double tol = c.composite ? kCompositeTolerance : kPrimitiveTolerance;
    const auto r = c.run();
    out.push_back({"gradcheck " + c.name, r.max_rel_error < tol && r.checked > 0,
                   "rel error " + detail::fmt(r.max_rel_error) + " < " + detail::fmt(tol) +
                       " over " + std::to_string(r.checked) + " entries"});
  }
  return out;
}

// ---------------------------------------------------------------- gating

inline SuiteResult verify_gating(std::size_t cases = 1000, std::uint64_t seed = 3) {
  SuiteResult out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> kd(2, 4), cd(1, 4), sd(1, 3);
  double worst_norm = 0;
  std::size_t envelope_bad = 0, range_bad = 0;
  for (std::size_t n = 0; n < cases; ++n) {
    const std::size_t k = kd(rng), c = cd(rng), h = sd(rng), w = sd(rng);
    ParamInit init(rng());
    GateUnit<float> g(c, k, n % 2 ? GateMode::kPerChannel : GateMode::kDense, init);
    ParamList<float> ps;
    g.parameters("g", ps);
    detail::randomize(ps, rng, 2.0);
    auto x = detail::uniform<float>({1, c, h, w}, rng, -3, 3);
    const auto gw = g.weights(x);
    const std::size_t m = c * h * w;
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0;
      for (std::size_t b = 0; b < k; ++b) {
        const float v = gw.data()[b * m + i];
        if (!(v > 0.0f && v < 1.0f)) ++range_bad;
        s += v;
      }
      worst_norm = std::max(worst_norm, std::abs(s - 1.0));
    }
    std::vector<Tensor<float>> ys;
    for (std::size_t b = 0; b < k; ++b) ys.push_back(detail::uniform<float>({1, c, h, w}, rng));
    const auto f = g.fuse(x, ys);
    for (std::size_t i = 0; i < m; ++i) {
      float lo = ys[0].data()[i], hi = lo;
      for (const auto& y : ys) {
        lo = std::min(lo, y.data()[i]);
        hi = std::max(hi, y.data()[i]);
      }
      const float v = f.data()[i];
      if (v < lo || v > hi) ++envelope_bad;
    }
  }
  const std::string nc = std::to_string(cases) + " random cases";
  out.push_back({"gate weights sum to 1 +- 1e-6", worst_norm <= 1e-6,
                 nc + ", max |sum-1| = " + detail::fmt(worst_norm)});
  out.push_back({"gate weights in (0,1)", range_bad == 0,
                 nc + ", " + std::to_string(range_bad) + " out of range"});
  out.push_back({"fused output inside branch envelope", envelope_bad == 0,
                 nc + ", " + std::to_string(envelope_bad) + " violations"});

  ParamInit init(seed);
  GateUnit<float> one(5, 1, GateMode::kDense, init);
  auto x = detail::uniform<float>({2, 5, 3, 3}, rng, -5, 5);
  const auto g1 = one.weights(x);
  bool exact = true;
  for (auto v : g1.data()) exact = exact && v == 1.0f;
  out.push_back({"k=1 gate is exactly 1", exact, std::to_string(g1.numel()) + " entries"});
  return out;
}

// ---------------------------------------------------------------- shapes

/// A plain windowed transformer layer assembled from the W-MHSA forward,
/// used as the reference for single-branch attention layers.
template <typename T>
Tensor<T> reference_window_layer(const AtrousAttentionLayer<T>& layer, const Tensor<T>& x) {
  const auto& a = layer.attn;
  const std::size_t p = effective_window(a.window(), x.dim(2), x.dim(3));
  auto grid = window_split(x, p);
  grid.windows = a.forward(
      layernorm(grid.windows, layer.norm1_gamma, layer.norm1_beta, layer.kEps), p);
  auto y = add(window_merge(grid), x);
  auto t = permute(y, {0, 2, 3, 1});
  auto out = add(t, layer.mlp(layernorm(t, layer.norm2_gamma, layer.norm2_beta, layer.kEps)));
  return permute(out, {0, 3, 1, 2});
}

inline SuiteResult verify_shapes(std::uint64_t seed = 5) {
  SuiteResult out;
  NoGradGuard guard;
  AccVitModel<float> model(variant("tiny"), seed);
  std::mt19937_64 rng(seed);
  auto images = detail::uniform<float>({1, 3, 224, 224}, rng);
  std::vector<Tensor<float>> feats;
  const auto logits = model.forward(images, &feats);
  std::string sizes;
  bool ok = feats.size() == 5;
  const std::size_t want[] = {112, 56, 28, 14, 7};
  for (std::size_t i = 0; i < feats.size(); ++i) {
    sizes += (i ? "/" : "") + std::to_string(feats[i].dim(2));
    ok = ok && i < 5 && feats[i].dim(2) == want[i] && feats[i].dim(3) == want[i];
  }
  out.push_back({"tiny@224 stage pyramid 112/56/28/14/7", ok, "got " + sizes});
  bool finite = true;
  for (auto v : logits.data()) finite = finite && std::isfinite(v);
  out.push_back({"tiny@224 logits [1,1000] finite",
                 logits.shape() == Shape{1, 1000} && finite, to_string(logits.shape())});

  // Stage-4 layer against the plain windowed transformer reference.
  auto& layer = model.stages[3].back().attn;
  ParamList<float> ps;
  layer.parameters("s4", ps);
  detail::randomize(ps, rng, 0.1);
  auto x = detail::uniform<float>({2, 512, 7, 7}, rng);
  const auto got = layer.forward(x);
  const auto ref = reference_window_layer(layer, x);
  double diff = 0;
  for (std::size_t i = 0; i < got.numel(); ++i) {
    diff = std::max(diff, static_cast<double>(std::abs(got.data()[i] - ref.data()[i])));
  }
  out.push_back({"S4 layer equals plain windowed transformer layer", diff <= 1e-6,
                 "max abs diff " + detail::fmt(diff)});
  return out;
}

// ---------------------------------------------------------------- audit

/// Audits of the six published variants at 224, in table order.
inline std::vector<AuditReport> published_audits() {
  std::vector<AuditReport> out;
  for (const auto& v : variant_table()) {
    if (v.published_params_m) out.push_back(audit_variant(v.config.name));
  }
  return out;
}

inline SuiteResult verify_audit_params(const std::vector<AuditReport>& reports) {
  SuiteResult out;
  for (const auto& r : reports) {
    out.push_back({"params " + r.variant + " within 2%", r.params_ok(),
                   std::to_string(r.params) + " vs " + detail::fmt(*r.published_params_m) +
                       "M, delta " + format_delta(r.param_delta())});
  }
  return out;
}

inline SuiteResult verify_audit_macs(const std::vector<AuditReport>& reports) {
  SuiteResult out;
  for (const auto& r : reports) {
    out.push_back({"MACs " + r.variant + "@224 within 5%", r.macs_ok(),
                   detail::fmt(r.macs / 1e9) + "G vs " + detail::fmt(*r.published_gmacs) +
                       "G, delta " + format_delta(r.mac_delta()) + " (2-per-MAC flops " +
                       detail::fmt(r.flops / 1e9) + "G)"});
  }
  return out;
}

inline SuiteResult verify_audit() {
  const auto reports = published_audits();
  SuiteResult out = verify_audit_params(reports);
  const auto macs = verify_audit_macs(reports);
  out.insert(out.end(), macs.begin(), macs.end());
  bool sums = true;
  for (const auto& r : reports) {
    std::uint64_t p = 0, m = 0, f = 0;
    for (const auto& e : r.modules) {
      p += e.params;
      m += e.macs;
      f += e.flops;
    }
    sums = sums && p == r.params && m == r.macs && f == r.flops;
  }
  out.push_back({"module parts sum to totals", sums,
                 std::to_string(reports.size()) + " variants"});
  return out;
}

// ---------------------------------------------------------------- serialize

inline SuiteResult verify_serialization() {
  SuiteResult out;
  AccVitModel<float> a(variant("femto"), 11), b(variant("femto"), 12);
  const auto bytes = encode_weights(a);
  decode_weights(b, bytes);
  auto pa = a.named_parameters(), pb = b.named_parameters();
  bool equal = pa.size() == pb.size();
  for (std::size_t i = 0; equal && i < pa.size(); ++i) {
    const auto x = pa[i].second->data(), y = pb[i].second->data();
    equal = std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
  }
  out.push_back({"femto save/load round trip bit-exact", equal,
                 std::to_string(bytes.size()) + " bytes"});

  AccVitModel<float> pico(variant("pico"), 0);
  std::string msg;
  bool rejected = false;
  try {
    decode_weights(pico, bytes);
  } catch (const Error& e) {
    rejected = e.code() == ErrorCode::kShapeMismatch;
    msg = e.what();
  }
  const bool named = msg.find("stem.conv1.weight") != std::string::npos;
  out.push_back({"femto weights rejected by pico", rejected && named, msg});
  return out;
}

// ---------------------------------------------------------------- train

struct TrainSmokeConfig {
  std::size_t images = 8;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  TrainOptions options;
};

inline SuiteResult verify_train(const TrainSmokeConfig& cfg = {}) {
  AccVitModel<float> model(variant("micro", 2), cfg.seed);
  const auto data = brightness_dataset(cfg.images, cfg.size, cfg.seed);
  const auto t0 = std::chrono::steady_clock::now();
  const auto trace = train_smoke(model, data, cfg.options);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto ratio = smoothed_loss_ratio(trace);
  std::string detail = "no trace";
  if (ratio) {
    detail = "initial " + detail::fmt(trace.front()) + ", final smoothed " +
             detail::fmt(*ratio * trace.front()) + ", ratio " + detail::fmt(*ratio) +
             ", " + std::to_string(trace.size()) + " steps in " + detail::fmt(secs) + "s";
  }
  return {{"micro training smoke ratio < 0.5", ratio && *ratio < 0.5, detail}};
}

// ---------------------------------------------------------------- registry

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"partition", "gradcheck", "gating", "shapes",
                                              "audit", "serialize", "train", "all"};
  return names;
}

/// "all" runs every suite except the (slower) training smoke.
inline SuiteResult run_suite(const std::string& name) {
  if (name == "partition") return verify_partition();
  if (name == "gradcheck") return verify_gradcheck();
  if (name == "gating") return verify_gating();
  if (name == "shapes") return verify_shapes();
  if (name == "audit") return verify_audit();
  if (name == "serialize") return verify_serialization();
  if (name == "train") return verify_train();
  if (name == "all") {
    SuiteResult all;
    for (const auto& n : suite_names()) {
      if (n == "all" || n == "train") continue;
      const auto r = run_suite(n);
      all.insert(all.end(), r.begin(), r.end());
    }
    return all;
  }
  std::string valid;
  for (const auto& n : suite_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw Error(ErrorCode::kInvalidConfig, "unknown suite '" + name + "'; valid: " + valid);
}

}  // namespace accvit
