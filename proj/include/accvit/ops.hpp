#pragma once

// Differentiable primitives. Every op returns a fresh tensor; when grad mode
// is on and an input requires grad, the op records a closure that maps the
// output gradient back onto its inputs. Loops run in a fixed order so that
// results are bit-reproducible run to run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "accvit/error.hpp"
#include "accvit/tensor.hpp"

namespace accvit {

// ---------------------------------------------------------------------------
// Multiply-accumulate instrumentation (matmul, linear, conv2d forward only).

struct MacCounter {
  bool active = false;
  std::uint64_t macs = 0;
};

inline MacCounter& mac_counter() {
  thread_local MacCounter counter;
  return counter;
}

class CountMacs {
 public:
  CountMacs() : saved_(mac_counter()) { mac_counter() = {true, 0}; }
  ~CountMacs() { mac_counter() = saved_; }
  CountMacs(const CountMacs&) = delete;
  CountMacs& operator=(const CountMacs&) = delete;
  std::uint64_t macs() const { return mac_counter().macs; }

 private:
  MacCounter saved_;
};

namespace detail {

inline void add_macs(std::uint64_t n) {
  if (mac_counter().active) mac_counter().macs += n;
}

// C[M,N] (+)= op(A) * op(B). op(A) is [M,K]: A is stored [M,K], or [K,M]
// when trans_a. op(B) is [K,N]: B is stored [K,N], or [N,K] when trans_b.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N,
          std::size_t K, const T* A, const T* B, T* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  std::vector<T> bt;
  if (trans_b) {
    bt.resize(K * N);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) bt[k * N + n] = B[n * K + k];
    B = bt.data();
  }
  constexpr std::size_t kBlockN = 512;
  constexpr std::size_t kBlockK = 128;
  for (std::size_t j0 = 0; j0 < N; j0 += kBlockN) {
    const std::size_t j1 = std::min(N, j0 + kBlockN);
    for (std::size_t k0 = 0; k0 < K; k0 += kBlockK) {
      const std::size_t k1 = std::min(K, k0 + kBlockK);
      for (std::size_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        for (std::size_t k = k0; k < k1; ++k) {
          const T a = trans_a ? A[k * M + i] : A[i * K + k];
          const T* b = B + k * N;
          for (std::size_t j = j0; j < j1; ++j) c[j] += a * b[j];
        }
      }
    }
  }
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.assign(nd, 1);
  p.stride_a.assign(nd, 0);
  p.stride_b.assign(nd, 0);
  const auto sa = strides_of(a);
  const auto sb = strides_of(b);
  for (std::size_t d = 0; d < nd; ++d) {
    const std::size_t ia = d + a.size(), ib = d + b.size();
    const std::size_t da = ia >= nd ? a[ia - nd] : 1;
    const std::size_t db = ib >= nd ? b[ib - nd] : 1;
    if (da != db && da != 1 && db != 1) {
      throw Error(ErrorCode::kShapeMismatch,
                  "cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    p.out[d] = std::max(da, db);
    if (ia >= nd && da != 1) p.stride_a[d] = sa[ia - nd];
    if (ib >= nd && db != 1) p.stride_b[d] = sb[ib - nd];
  }
  return p;
}

template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t n = numel(p.out);
  const std::size_t nd = p.out.size();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

template <typename T, typename Fwd, typename GradA, typename GradB>
Tensor<T> binary(const char* name, const Tensor<T>& a, const Tensor<T>& b,
                 Fwd fwd, GradA grad_a, GradB grad_b) {
  if (a.shape() == b.shape()) {
    const auto av = a.data(), bv = b.data();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    auto na = a.node(), nb = b.node();
    return make_result<T>(name, a.shape(), std::move(out), {na, nb},
                          [na, nb, grad_a, grad_b](const Node<T>& o) {
                            const auto& av = na->value;
                            const auto& bv = nb->value;
                            if (na->requires_grad) {
                              auto& g = na->grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i)
                                g[i] += grad_a(av[i], bv[i], o.grad[i]);
                            }
                            if (nb->requires_grad) {
                              auto& g = nb->grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i)
                                g[i] += grad_b(av[i], bv[i], o.grad[i]);
                            }
                          });
  }
  auto plan = plan_broadcast(a.shape(), b.shape());
  const auto av = a.data(), bv = b.data();
  std::vector<T> out(numel(plan.out));
  for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = fwd(av[ia], bv[ib]);
  });
  auto na = a.node(), nb = b.node();
  Shape out_shape = plan.out;
  return make_result<T>(
      name, std::move(out_shape), std::move(out), {na, nb},
      [na, nb, plan, grad_a, grad_b](const Node<T>& o) {
        const auto& av = na->value;
        const auto& bv = nb->value;
        std::vector<T>* ga = na->requires_grad ? &na->grad_buffer() : nullptr;
        std::vector<T>* gb = nb->requires_grad ? &nb->grad_buffer() : nullptr;
        for_each_broadcast(plan, [&](std::size_t i, std::size_t ia,
                                     std::size_t ib) {
          if (ga) (*ga)[ia] += grad_a(av[ia], bv[ib], o.grad[i]);
          if (gb) (*gb)[ib] += grad_b(av[ia], bv[ib], o.grad[i]);
        });
      });
}

// dy/dx expressed through x, y and the incoming gradient g.
template <typename T, typename Fwd, typename Grad>
Tensor<T> unary(const char* name, const Tensor<T>& x, Fwd fwd, Grad grad) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  auto nx = x.node();
  return make_result<T>(name, x.shape(), std::move(out), {nx},
                        [nx, grad](const Node<T>& o) {
                          auto& g = nx->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] += grad(nx->value[i], o.value[i], o.grad[i]);
                        });
}

template <typename T>
Tensor<T> gather_impl(const char* name, const Tensor<T>& x,
                      std::shared_ptr<const std::vector<std::size_t>> index,
                      Shape out_shape) {
  const auto xv = x.data();
  std::vector<T> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*index)[i]];
  auto nx = x.node();
  return make_result<T>(name, std::move(out_shape), std::move(out), {nx},
                        [nx, index](const Node<T>& o) {
                          auto& g = nx->grad_buffer();
                          for (std::size_t i = 0; i < index->size(); ++i)
                            g[(*index)[i]] += o.grad[i];
                        });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting).

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T, T y, T g) { return g * y; }, [](T x, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& x, std::type_identity_t<T> s) {
  return detail::unary<T>(
      "scale", x, [s](T v) { return v * s; },
      [s](T, T, T g) { return g * s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, std::type_identity_t<T> s) {
  return detail::unary<T>(
      "add_scalar", x, [s](T v) { return v + s; },
      [](T, T, T g) { return g; });
}

// ---------------------------------------------------------------------------
// Activations.

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T, T g) { return v > T(0) ? g : T(0); });
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return sigmoid_scalar(v); },
      [](T, T y, T g) { return g * y * (T(1) - y); });
}

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;

template <typename T>
T gelu_scalar(T v) {
  const T k = T(kGeluSqrt2OverPi), c = T(kGeluCubic);
  return T(0.5) * v * (T(1) + std::tanh(k * (v + c * v * v * v)));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::unary<T>(
      "gelu", x, [](T v) { return gelu_scalar(v); },
      [](T v, T, T g) {
        const T k = T(kGeluSqrt2OverPi), c = T(kGeluCubic);
        const T t = std::tanh(k * (v + c * v * v * v));
        const T dinner = k * (T(1) + T(3) * c * v * v);
        return g * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * dinner);
      });
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (const T v : x.data()) s += v;
  auto nx = x.node();
  return detail::make_result<T>("sum", {1}, {s}, {nx}, [nx](const auto& o) {
    for (auto& g : nx->grad_buffer()) g += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// [b, c, h, w] -> [b, c]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.ndim() != 4) {
    throw Error(ErrorCode::kShapeMismatch,
                "global_avg_pool expects [b,c,h,w], got " + to_string(x.shape()));
  }
  const std::size_t bc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto xv = x.data();
  std::vector<T> out(bc);
  for (std::size_t i = 0; i < bc; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < hw; ++j) s += xv[i * hw + j];
    out[i] = s / static_cast<T>(hw);
  }
  auto nx = x.node();
  return detail::make_result<T>(
      "global_avg_pool", {x.dim(0), x.dim(1)}, std::move(out), {nx},
      [nx, bc, hw](const auto& o) {
        auto& g = nx->grad_buffer();
        for (std::size_t i = 0; i < bc; ++i) {
          const T gi = o.grad[i] / static_cast<T>(hw);
          for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += gi;
        }
      });
}

/// Non-overlapping k x k average pooling with stride k.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
  if (x.ndim() != 4) {
    throw Error(ErrorCode::kShapeMismatch,
                "avg_pool2d expects [b,c,h,w], got " + to_string(x.shape()));
  }
  const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k == 0 || h % k || w % k) {
    throw Error(ErrorCode::kIndivisibleDims,
                "avg_pool2d window " + std::to_string(k) + " does not tile " +
                    to_string(x.shape()));
  }
  const std::size_t ho = h / k, wo = w / k;
  const T inv = T(1) / static_cast<T>(k * k);
  const auto xv = x.data();
  std::vector<T> out(bc * ho * wo, T(0));
  for (std::size_t p = 0; p < bc; ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out[(p * ho + i / k) * wo + j / k] += xv[(p * h + i) * w + j] * inv;
  auto nx = x.node();
  return detail::make_result<T>(
      "avg_pool2d", {x.dim(0), x.dim(1), ho, wo}, std::move(out), {nx},
      [nx, bc, h, w, k, ho, wo, inv](const auto& o) {
        auto& g = nx->grad_buffer();
        for (std::size_t p = 0; p < bc; ++p)
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
              g[(p * h + i) * w + j] += o.grad[(p * ho + i / k) * wo + j / k] * inv;
      });
}

// ---------------------------------------------------------------------------
// Layout.

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw Error(ErrorCode::kShapeMismatch,
                "cannot reshape " + to_string(x.shape()) + " to " +
                    to_string(shape));
  }
  auto nx = x.node();
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(out),
                                {nx}, [nx](const auto& o) {
                                  auto& g = nx->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += o.grad[i];
                                });
}

/// out.flat[i] = x.flat[index[i]]; gradients scatter-add back.
template <typename T>
Tensor<T> gather(const Tensor<T>& x,
                 std::shared_ptr<const std::vector<std::size_t>> index,
                 Shape out_shape) {
  if (numel(out_shape) != index->size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "gather index length does not match " + to_string(out_shape));
  }
  for (const auto i : *index) {
    if (i >= x.numel()) {
      throw Error(ErrorCode::kShapeMismatch, "gather index out of range");
    }
  }
  return detail::gather_impl("gather", x, std::move(index),
                             std::move(out_shape));
}

/// Source offsets for a permutation: out.flat[i] = in.flat[result[i]].
inline std::vector<std::size_t> permute_index(const Shape& in,
                                              std::span<const std::size_t> axes) {
  const std::size_t nd = in.size();
  const auto st = strides_of(in);
  Shape out(nd);
  std::vector<std::size_t> src_stride(nd);
  for (std::size_t d = 0; d < nd; ++d) {
    out[d] = in[axes[d]];
    src_stride[d] = st[axes[d]];
  }
  std::vector<std::size_t> index(numel(in));
  std::vector<std::size_t> idx(nd, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    index[i] = off;
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      off += src_stride[d];
      if (idx[d] < out[d]) break;
      off -= src_stride[d] * out[d];
      idx[d] = 0;
    }
  }
  return index;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<std::size_t> axes) {
  const std::size_t nd = x.ndim();
  std::vector<bool> used(nd, false);
  if (axes.size() != nd) {
    throw Error(ErrorCode::kShapeMismatch, "permute needs one axis per dim");
  }
  for (auto a : axes) {
    if (a >= nd || used[a]) {
      throw Error(ErrorCode::kShapeMismatch, "permute axes are not a permutation");
    }
    used[a] = true;
  }
  Shape out(nd);
  for (std::size_t d = 0; d < nd; ++d) out[d] = x.shape()[axes[d]];
  auto index = std::make_shared<const std::vector<std::size_t>>(
      permute_index(x.shape(), axes));
  return detail::gather_impl("permute", x, std::move(index), std::move(out));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start,
                std::size_t length) {
  const std::size_t ax = x.normalize_axis(axis);
  if (length == 0 || start + length > x.shape()[ax]) {
    throw Error(ErrorCode::kShapeMismatch,
                "slice [" + std::to_string(start) + ", " +
                    std::to_string(start + length) + ") out of range for " +
                    to_string(x.shape()));
  }
  Shape out = x.shape();
  out[ax] = length;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= x.shape()[d];
  for (std::size_t d = ax + 1; d < x.ndim(); ++d) inner *= x.shape()[d];
  const std::size_t n = x.shape()[ax];
  auto index = std::make_shared<std::vector<std::size_t>>();
  index->reserve(numel(out));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t a = start; a < start + length; ++a)
      for (std::size_t i = 0; i < inner; ++i)
        index->push_back((o * n + a) * inner + i);
  return detail::gather_impl<T>("slice", x, std::move(index), std::move(out));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw Error(ErrorCode::kShapeMismatch, "concat of nothing");
  const std::size_t ax = parts[0].normalize_axis(axis);
  Shape out = parts[0].shape();
  out[ax] = 0;
  for (const auto& p : parts) {
    if (p.ndim() != out.size()) {
      throw Error(ErrorCode::kShapeMismatch, "concat rank mismatch");
    }
    for (std::size_t d = 0; d < out.size(); ++d) {
      if (d != ax && p.shape()[d] != out[d]) {
        throw Error(ErrorCode::kShapeMismatch,
                    "concat shape mismatch " + to_string(p.shape()) + " vs " +
                        to_string(parts[0].shape()));
      }
    }
    out[ax] += p.shape()[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= out[d];
  for (std::size_t d = ax + 1; d < out.size(); ++d) inner *= out[d];
  std::vector<T> value;
  value.reserve(numel(out));
  std::vector<typename Tensor<T>::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  for (std::size_t o = 0; o < outer; ++o)
    for (const auto& p : parts) {
      const std::size_t chunk = p.shape()[ax] * inner;
      const auto pv = p.data();
      value.insert(value.end(), pv.begin() + o * chunk,
                   pv.begin() + (o + 1) * chunk);
    }
  return detail::make_result<T>(
      "concat", out, std::move(value), nodes,
      [nodes, ax, outer, inner](const detail::Node<T>& o) {
        std::size_t pos = 0;
        for (std::size_t b = 0; b < outer; ++b)
          for (const auto& n : nodes) {
            const std::size_t chunk = n->shape[ax] * inner;
            if (n->requires_grad) {
              auto& g = n->grad_buffer();
              for (std::size_t i = 0; i < chunk; ++i)
                g[b * chunk + i] += o.grad[pos + i];
            }
            pos += chunk;
          }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra.

/// Batched product [.., m, k] x [.., k, n]; leading batch dims broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw Error(ErrorCode::kShapeMismatch, "matmul needs rank >= 2 operands");
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw Error(ErrorCode::kShapeMismatch,
                "matmul inner dims differ: " + to_string(a.shape()) + " x " +
                    to_string(b.shape()));
  }
  const Shape ba(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  auto plan = detail::plan_broadcast(ba, bb);
  Shape out = plan.out;
  out.push_back(m);
  out.push_back(n);
  const std::size_t batches = numel(plan.out);
  std::vector<T> value(batches * m * n);
  const auto av = a.data(), bv = b.data();
  detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    detail::gemm(false, false, m, n, k, av.data() + ia * m * k,
                 bv.data() + ib * k * n, value.data() + i * m * n, false);
  });
  detail::add_macs(batches * m * n * k);
  auto na = a.node(), nb = b.node();
  return detail::make_result<T>(
      "matmul", std::move(out), std::move(value), {na, nb},
      [na, nb, plan, m, n, k](const detail::Node<T>& o) {
        T* ga = na->requires_grad ? na->grad_buffer().data() : nullptr;
        T* gb = nb->requires_grad ? nb->grad_buffer().data() : nullptr;
        detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia,
                                             std::size_t ib) {
          const T* g = o.grad.data() + i * m * n;
          // dA = dY B^T ; dB = A^T dY
          if (ga) detail::gemm(false, true, m, k, n, g, nb->value.data() + ib * k * n,
                               ga + ia * m * k, true);
          if (gb) detail::gemm(true, false, k, n, m, na->value.data() + ia * m * k,
                               g, gb + ib * k * n, true);
        });
      });
}

/// y = x W^T + b over the last axis; W is [out, in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const std::optional<std::type_identity_t<Tensor<T>>>& bias = std::nullopt) {
  if (weight.ndim() != 2 || x.dim(-1) != weight.dim(1)) {
    throw Error(ErrorCode::kShapeMismatch,
                "linear: input " + to_string(x.shape()) + " vs weight " +
                    to_string(weight.shape()));
  }
  const std::size_t in = weight.dim(1), outf = weight.dim(0);
  if (bias && (bias->numel() != outf)) {
    throw Error(ErrorCode::kShapeMismatch, "linear: bias length mismatch");
  }
  const std::size_t rows = x.numel() / in;
  std::vector<T> value(rows * outf);
  detail::gemm(false, true, rows, outf, in, x.data().data(),
               weight.data().data(), value.data(), false);
  if (bias) {
    const auto bv = bias->data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < outf; ++j) value[r * outf + j] += bv[j];
  }
  detail::add_macs(rows * in * outf);
  Shape out = x.shape();
  out.back() = outf;
  auto nx = x.node(), nw = weight.node();
  std::vector<typename Tensor<T>::NodePtr> inputs{nx, nw};
  typename Tensor<T>::NodePtr nb = bias ? bias->node() : nullptr;
  if (nb) inputs.push_back(nb);
  return detail::make_result<T>(
      "linear", std::move(out), std::move(value), inputs,
      [nx, nw, nb, rows, in, outf](const detail::Node<T>& o) {
        if (nx->requires_grad)
          detail::gemm(false, false, rows, in, outf, o.grad.data(),
                       nw->value.data(), nx->grad_buffer().data(), true);
        if (nw->requires_grad)
          detail::gemm(true, false, outf, in, rows, o.grad.data(),
                       nx->value.data(), nw->grad_buffer().data(), true);
        if (nb && nb->requires_grad) {
          auto& g = nb->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < outf; ++j) g[j] += o.grad[r * outf + j];
        }
      });
}

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
};

namespace detail {

struct ConvGeometry {
  std::size_t batch, c_in, h, w, c_out, kh, kw, ho, wo, stride, pad, dil, groups;
  std::size_t cin_g() const { return c_in / groups; }
  std::size_t cout_g() const { return c_out / groups; }
};

// cols[(ci*kh + i)*kw + j, oh*wo + ow] for the channels of one group.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t n = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin_g(); ++ci)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((ci * g.kh + i) * g.kw + j) * n;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i * g.dil) -
                          static_cast<long>(g.pad);
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j * g.dil) -
                            static_cast<long>(g.pad);
            const bool inside = ih >= 0 && iw >= 0 &&
                                ih < static_cast<long>(g.h) &&
                                iw < static_cast<long>(g.w);
            row[oh * g.wo + ow] =
                inside ? x[(ci * g.h + ih) * g.w + iw] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* cols, T* x) {
  const std::size_t n = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin_g(); ++ci)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((ci * g.kh + i) * g.kw + j) * n;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i * g.dil) -
                          static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j * g.dil) -
                            static_cast<long>(g.pad);
            if (iw < 0 || iw >= static_cast<long>(g.w)) continue;
            x[(ci * g.h + ih) * g.w + iw] += row[oh * g.wo + ow];
          }
        }
      }
}

// One input channel per group (depthwise, channel multipliers): direct loops.
template <typename T>
void conv_single_channel(const ConvGeometry& g, const T* x, const T* w, T* y) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t co = 0; co < g.c_out; ++co) {
      const std::size_t ci = co / g.cout_g();
      const T* xin = x + (b * g.c_in + ci) * g.h * g.w;
      const T* k = w + co * g.kh * g.kw;
      T* out = y + (b * g.c_out + co) * g.ho * g.wo;
      for (std::size_t oh = 0; oh < g.ho; ++oh)
        for (std::size_t ow = 0; ow < g.wo; ++ow) {
          T s = 0;
          for (std::size_t i = 0; i < g.kh; ++i) {
            const long ih = static_cast<long>(oh * g.stride + i * g.dil) -
                            static_cast<long>(g.pad);
            if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
            for (std::size_t j = 0; j < g.kw; ++j) {
              const long iw = static_cast<long>(ow * g.stride + j * g.dil) -
                              static_cast<long>(g.pad);
              if (iw < 0 || iw >= static_cast<long>(g.w)) continue;
              s += k[i * g.kw + j] * xin[ih * g.w + iw];
            }
          }
          out[oh * g.wo + ow] += s;
        }
    }
}

template <typename T>
void conv_single_channel_backward(const ConvGeometry& g, const T* x,
                                  const T* w, const T* gy, T* gx, T* gw) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t co = 0; co < g.c_out; ++co) {
      const std::size_t ci = co / g.cout_g();
      const std::size_t xoff = (b * g.c_in + ci) * g.h * g.w;
      const T* k = w + co * g.kh * g.kw;
      const T* go = gy + (b * g.c_out + co) * g.ho * g.wo;
      for (std::size_t oh = 0; oh < g.ho; ++oh)
        for (std::size_t ow = 0; ow < g.wo; ++ow) {
          const T gv = go[oh * g.wo + ow];
          for (std::size_t i = 0; i < g.kh; ++i) {
            const long ih = static_cast<long>(oh * g.stride + i * g.dil) -
                            static_cast<long>(g.pad);
            if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
            for (std::size_t j = 0; j < g.kw; ++j) {
              const long iw = static_cast<long>(ow * g.stride + j * g.dil) -
                              static_cast<long>(g.pad);
              if (iw < 0 || iw >= static_cast<long>(g.w)) continue;
              const std::size_t xi = xoff + ih * g.w + iw;
              if (gx) gx[xi] += k[i * g.kw + j] * gv;
              if (gw) gw[co * g.kh * g.kw + i * g.kw + j] += x[xi] * gv;
            }
          }
        }
    }
}

}  // namespace detail

/// Cross-correlation (no kernel flip). x [b, c_in, h, w],
/// weight [c_out, c_in / groups, kh, kw], bias [c_out].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const std::optional<std::type_identity_t<Tensor<T>>>& bias = std::nullopt,
                 Conv2dOptions opt = {}) {
  if (x.ndim() != 4 || weight.ndim() != 4) {
    throw Error(ErrorCode::kShapeMismatch,
                "conv2d expects 4-d input and weight, got " +
                    to_string(x.shape()) + " and " + to_string(weight.shape()));
  }
  if (opt.groups == 0 || x.dim(1) % opt.groups || weight.dim(0) % opt.groups) {
    throw Error(ErrorCode::kInvalidGroups,
                std::to_string(x.dim(1)) + " input / " +
                    std::to_string(weight.dim(0)) +
                    " output channels not divisible by groups=" +
                    std::to_string(opt.groups));
  }
  if (weight.dim(1) * opt.groups != x.dim(1)) {
    throw Error(ErrorCode::kShapeMismatch,
                "conv2d weight " + to_string(weight.shape()) +
                    " does not match input " + to_string(x.shape()));
  }
  if (opt.stride == 0 || opt.dilation == 0) {
    throw Error(ErrorCode::kShapeMismatch, "conv2d stride/dilation must be >= 1");
  }
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3),
                         weight.dim(0), weight.dim(2), weight.dim(3), 0, 0,
                         opt.stride, opt.padding, opt.dilation, opt.groups};
  const long eh = static_cast<long>(g.h + 2 * g.pad) -
                  static_cast<long>(g.dil * (g.kh - 1)) - 1;
  const long ew = static_cast<long>(g.w + 2 * g.pad) -
                  static_cast<long>(g.dil * (g.kw - 1)) - 1;
  if (eh < 0 || ew < 0) {
    throw Error(ErrorCode::kShapeMismatch,
                "conv2d kernel footprint exceeds padded input " +
                    to_string(x.shape()));
  }
  g.ho = static_cast<std::size_t>(eh) / g.stride + 1;
  g.wo = static_cast<std::size_t>(ew) / g.stride + 1;
  if (bias && bias->numel() != g.c_out) {
    throw Error(ErrorCode::kShapeMismatch, "conv2d bias length mismatch");
  }

  const std::size_t n = g.ho * g.wo;
  const std::size_t kdim = g.cin_g() * g.kh * g.kw;
  const bool pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
  std::vector<T> y(g.batch * g.c_out * n, T(0));
  const T* xv = x.data().data();
  const T* wv = weight.data().data();
  if (g.cin_g() == 1) {
    detail::conv_single_channel(g, xv, wv, y.data());
  } else {
    std::vector<T> cols(pointwise ? 0 : kdim * n);
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t gr = 0; gr < g.groups; ++gr) {
        const T* xin = xv + (b * g.c_in + gr * g.cin_g()) * g.h * g.w;
        const T* src = xin;
        if (!pointwise) {
          detail::im2col(g, xin, cols.data());
          src = cols.data();
        }
        detail::gemm(false, false, g.cout_g(), n, kdim,
                     wv + gr * g.cout_g() * kdim, src,
                     y.data() + (b * g.c_out + gr * g.cout_g()) * n, true);
      }
  }
  if (bias) {
    const auto bv = bias->data();
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t c = 0; c < g.c_out; ++c) {
        T* row = y.data() + (b * g.c_out + c) * n;
        for (std::size_t i = 0; i < n; ++i) row[i] += bv[c];
      }
  }
  detail::add_macs(g.batch * g.c_out * n * kdim);

  auto nx = x.node(), nw = weight.node();
  typename Tensor<T>::NodePtr nb = bias ? bias->node() : nullptr;
  std::vector<typename Tensor<T>::NodePtr> inputs{nx, nw};
  if (nb) inputs.push_back(nb);
  return detail::make_result<T>(
      "conv2d", {g.batch, g.c_out, g.ho, g.wo}, std::move(y), inputs,
      [nx, nw, nb, g, n, kdim, pointwise](const detail::Node<T>& o) {
        T* gx = nx->requires_grad ? nx->grad_buffer().data() : nullptr;
        T* gw = nw->requires_grad ? nw->grad_buffer().data() : nullptr;
        if (nb && nb->requires_grad) {
          auto& gb = nb->grad_buffer();
          for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t c = 0; c < g.c_out; ++c) {
              const T* row = o.grad.data() + (b * g.c_out + c) * n;
              T s = 0;
              for (std::size_t i = 0; i < n; ++i) s += row[i];
              gb[c] += s;
            }
        }
        if (!gx && !gw) return;
        if (g.cin_g() == 1) {
          detail::conv_single_channel_backward(g, nx->value.data(),
                                               nw->value.data(), o.grad.data(),
                                               gx, gw);
          return;
        }
        std::vector<T> cols(pointwise ? 0 : kdim * n);
        std::vector<T> gcols(pointwise ? 0 : kdim * n);
        for (std::size_t b = 0; b < g.batch; ++b)
          for (std::size_t gr = 0; gr < g.groups; ++gr) {
            const std::size_t xoff = (b * g.c_in + gr * g.cin_g()) * g.h * g.w;
            const T* gy = o.grad.data() + (b * g.c_out + gr * g.cout_g()) * n;
            const T* wg = nw->value.data() + gr * g.cout_g() * kdim;
            if (gw) {
              const T* src = nx->value.data() + xoff;
              if (!pointwise) {
                detail::im2col(g, src, cols.data());
                src = cols.data();
              }
              // dW = dY cols^T
              detail::gemm(false, true, g.cout_g(), kdim, n, gy, src,
                           gw + gr * g.cout_g() * kdim, true);
            }
            if (gx) {
              if (pointwise) {
                detail::gemm(true, false, kdim, n, g.cout_g(), wg, gy, gx + xoff, true);
              } else {
                detail::gemm(true, false, kdim, n, g.cout_g(), wg, gy,
                             gcols.data(), false);
                detail::col2im_add(g, gcols.data(), gx + xoff);
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Normalization and probabilities.

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = x.normalize_axis(axis);
  std::size_t outer = 1, inner = 1;
  const std::size_t n = x.shape()[ax];
  for (std::size_t d = 0; d < ax; ++d) outer *= x.shape()[d];
  for (std::size_t d = ax + 1; d < x.ndim(); ++d) inner *= x.shape()[d];
  const auto xv = x.data();
  std::vector<T> y(xv.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T mx = xv[base];
      for (std::size_t a = 1; a < n; ++a) mx = std::max(mx, xv[base + a * inner]);
      T s = 0;
      for (std::size_t a = 0; a < n; ++a) {
        const T e = std::exp(xv[base + a * inner] - mx);
        y[base + a * inner] = e;
        s += e;
      }
      for (std::size_t a = 0; a < n; ++a) y[base + a * inner] /= s;
    }
  auto nx = x.node();
  return detail::make_result<T>(
      "softmax", x.shape(), std::move(y), {nx},
      [nx, outer, inner, n](const detail::Node<T>& o) {
        auto& g = nx->grad_buffer();
        for (std::size_t b = 0; b < outer; ++b)
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = b * n * inner + i;
            T dot = 0;
            for (std::size_t a = 0; a < n; ++a)
              dot += o.grad[base + a * inner] * o.value[base + a * inner];
            for (std::size_t a = 0; a < n; ++a) {
              const std::size_t k = base + a * inner;
              g[k] += o.value[k] * (o.grad[k] - dot);
            }
          }
      });
}

/// Normalizes over the last axis (biased variance, eps inside the sqrt),
/// then applies the optional per-feature affine.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const std::optional<std::type_identity_t<Tensor<T>>>& gamma,
                    const std::optional<std::type_identity_t<Tensor<T>>>& beta,
                    std::type_identity_t<T> eps) {
  const std::size_t d = x.dim(-1);
  if ((gamma && gamma->numel() != d) || (beta && beta->numel() != d)) {
    throw Error(ErrorCode::kShapeMismatch,
                "layernorm affine parameters must have length " +
                    std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  std::vector<T> xhat(xv.size()), rstd(rows), y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (row[i] - mu) * rstd[r];
      xhat[r * d + i] = h;
      y[r * d + i] = h * (gamma ? gamma->data()[i] : T(1)) +
                     (beta ? beta->data()[i] : T(0));
    }
  }
  auto nx = x.node();
  typename Tensor<T>::NodePtr ng = gamma ? gamma->node() : nullptr;
  typename Tensor<T>::NodePtr nb = beta ? beta->node() : nullptr;
  std::vector<typename Tensor<T>::NodePtr> inputs{nx};
  if (ng) inputs.push_back(ng);
  if (nb) inputs.push_back(nb);
  return detail::make_result<T>(
      "layernorm", x.shape(), std::move(y), inputs,
      [nx, ng, nb, xhat = std::move(xhat), rstd = std::move(rstd), rows,
       d](const detail::Node<T>& o) {
        std::vector<T> gh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* g = o.grad.data() + r * d;
          const T* h = xhat.data() + r * d;
          T m1 = 0, m2 = 0;
          for (std::size_t i = 0; i < d; ++i) {
            gh[i] = g[i] * (ng ? ng->value[i] : T(1));
            m1 += gh[i];
            m2 += gh[i] * h[i];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          if (nx->requires_grad) {
            auto& gx = nx->grad_buffer();
            for (std::size_t i = 0; i < d; ++i)
              gx[r * d + i] += rstd[r] * (gh[i] - m1 - h[i] * m2);
          }
          if (ng && ng->requires_grad) {
            auto& gg = ng->grad_buffer();
            for (std::size_t i = 0; i < d; ++i) gg[i] += g[i] * h[i];
          }
          if (nb && nb->requires_grad) {
            auto& gb = nb->grad_buffer();
            for (std::size_t i = 0; i < d; ++i) gb[i] += g[i];
          }
        }
      });
}

/// Mean over the batch of cross-entropy against label-smoothed targets
/// q = (1 - smoothing) * onehot + smoothing / classes.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels,
                        std::type_identity_t<T> smoothing = T(0)) {
  if (logits.ndim() != 2 || logits.dim(0) != labels.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "cross_entropy expects [batch, classes] logits and one label "
                "per row, got " + to_string(logits.shape()));
  }
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  const auto lv = logits.data();
  std::vector<T> probs(lv.size());
  std::vector<T> target(lv.size(), smoothing / static_cast<T>(k));
  T loss = 0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] >= k) {
      throw Error(ErrorCode::kShapeMismatch, "label out of range");
    }
    target[r * k + labels[r]] += T(1) - smoothing;
    const T* row = lv.data() + r * k;
    T mx = row[0];
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
    T s = 0;
    for (std::size_t i = 0; i < k; ++i) s += std::exp(row[i] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t i = 0; i < k; ++i) {
      probs[r * k + i] = std::exp(row[i] - lse);
      loss -= target[r * k + i] * (row[i] - lse);
    }
  }
  loss /= static_cast<T>(b);
  auto nl = logits.node();
  return detail::make_result<T>(
      "cross_entropy", {1}, {loss}, {nl},
      [nl, probs = std::move(probs), target = std::move(target),
       b](const detail::Node<T>& o) {
        auto& g = nl->grad_buffer();
        const T s = o.grad[0] / static_cast<T>(b);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (probs[i] - target[i]);
      });
}

}  // namespace accvit
