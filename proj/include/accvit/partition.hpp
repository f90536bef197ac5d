#pragma once

// Dilated (atrous) partitioning and P x P window tiling. Both are pure index
// permutations implemented as gathers, so the inverses are exact.
//
// Phase layout: phase (ph, pw) of image b lives at batch index
// (b * d + ph) * d + pw of the partitioned tensor, and its element (i, j) is
// x[b, c, i * d + ph, j * d + pw]. This is the rearrangement
// 'b c (h hs) (w ws) -> (b hs ws) c h w' with hs = ws = d.

#include <algorithm>
#include <memory>
#include <vector>

#include "accvit/error.hpp"
#include "accvit/ops.hpp"
#include "accvit/tensor.hpp"

namespace accvit {

template <typename T>
struct DilatedPartition {
  Tensor<T> phases;     // [b*d*d, c, h/d, w/d]
  std::size_t dilation = 1;
  Shape original_shape;  // [b, c, h, w]
};

namespace detail {

inline void require_4d(const Shape& s, const char* what) {
  if (s.size() != 4) {
    throw Error(ErrorCode::kShapeMismatch,
                std::string(what) + " expects [b,c,h,w], got " + to_string(s));
  }
}

// index[k] = source offset in [b,c,h,w] of partitioned element k.
inline std::vector<std::size_t> partition_index(const Shape& s, std::size_t d) {
  const std::size_t b = s[0], c = s[1], h = s[2], w = s[3];
  const std::size_t hs = h / d, ws = w / d;
  std::vector<std::size_t> index;
  index.reserve(b * c * h * w);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ph = 0; ph < d; ++ph)
      for (std::size_t pw = 0; pw < d; ++pw)
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t i = 0; i < hs; ++i)
            for (std::size_t j = 0; j < ws; ++j)
              index.push_back(((bi * c + ci) * h + i * d + ph) * w + j * d + pw);
  return index;
}

inline std::vector<std::size_t> invert_index(const std::vector<std::size_t>& fwd) {
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t k = 0; k < fwd.size(); ++k) inv[fwd[k]] = k;
  return inv;
}

// index[k] = source offset in [b,c,h,w] of window element k, where windows are
// laid out [b*gh*gw, p*p, c].
inline std::vector<std::size_t> window_index(const Shape& s, std::size_t p) {
  const std::size_t b = s[0], c = s[1], h = s[2], w = s[3];
  const std::size_t gh = h / p, gw = w / p;
  std::vector<std::size_t> index;
  index.reserve(b * c * h * w);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t wi = 0; wi < gh; ++wi)
      for (std::size_t wj = 0; wj < gw; ++wj)
        for (std::size_t pi = 0; pi < p; ++pi)
          for (std::size_t pj = 0; pj < p; ++pj)
            for (std::size_t ci = 0; ci < c; ++ci)
              index.push_back(((bi * c + ci) * h + wi * p + pi) * w + wj * p + pj);
  return index;
}

}  // namespace detail

template <typename T>
DilatedPartition<T> partition(const Tensor<T>& x, std::size_t dilation) {
  detail::require_4d(x.shape(), "partition");
  const Shape& s = x.shape();
  if (dilation == 0 || s[2] % dilation || s[3] % dilation) {
    throw Error(ErrorCode::kIndivisibleDims,
                "dilation " + std::to_string(dilation) +
                    " does not divide spatial dims of " + to_string(s));
  }
  if (dilation == 1) return {x, 1, s};
  auto index = std::make_shared<const std::vector<std::size_t>>(
      detail::partition_index(s, dilation));
  Shape out{s[0] * dilation * dilation, s[1], s[2] / dilation, s[3] / dilation};
  return {gather(x, std::move(index), std::move(out)), dilation, s};
}

template <typename T>
Tensor<T> departition(const DilatedPartition<T>& p) {
  const Shape& s = p.original_shape;
  const std::size_t d = p.dilation;
  const bool consistent =
      s.size() == 4 && d >= 1 && s[2] % d == 0 && s[3] % d == 0 &&
      p.phases.defined() &&
      p.phases.shape() == Shape{s[0] * d * d, s[1], s[2] / d, s[3] / d};
  if (!consistent) {
    throw Error(ErrorCode::kInconsistentMetadata,
                "phases " +
                    (p.phases.defined() ? to_string(p.phases.shape())
                                        : std::string("<none>")) +
                    " do not match dilation " + std::to_string(d) +
                    " of " + to_string(s));
  }
  if (d == 1) return p.phases;
  auto index = std::make_shared<const std::vector<std::size_t>>(
      detail::invert_index(detail::partition_index(s, d)));
  return gather(p.phases, std::move(index), s);
}

template <typename T>
struct WindowGrid {
  Tensor<T> windows;  // [b*gh*gw, p*p, c], row-major tile order
  std::size_t window_size = 1;
  std::size_t grid_h = 1;
  std::size_t grid_w = 1;
  Shape source_shape;  // [b, c, h, w]
};

template <typename T>
WindowGrid<T> window_split(const Tensor<T>& x, std::size_t p) {
  detail::require_4d(x.shape(), "window_split");
  const Shape& s = x.shape();
  if (p == 0 || s[2] % p || s[3] % p) {
    throw Error(ErrorCode::kIndivisibleDims,
                "window " + std::to_string(p) + " does not tile " + to_string(s));
  }
  auto index = std::make_shared<const std::vector<std::size_t>>(
      detail::window_index(s, p));
  const std::size_t gh = s[2] / p, gw = s[3] / p;
  Shape out{s[0] * gh * gw, p * p, s[1]};
  return {gather(x, std::move(index), std::move(out)), p, gh, gw, s};
}

template <typename T>
Tensor<T> window_merge(const WindowGrid<T>& g) {
  const Shape& s = g.source_shape;
  const std::size_t p = g.window_size;
  const bool consistent =
      s.size() == 4 && p >= 1 && g.grid_h * p == s[2] && g.grid_w * p == s[3] &&
      g.windows.defined() &&
      g.windows.shape() == Shape{s[0] * g.grid_h * g.grid_w, p * p, s[1]};
  if (!consistent) {
    throw Error(ErrorCode::kInconsistentMetadata,
                "window grid does not match source " + to_string(s));
  }
  auto index = std::make_shared<const std::vector<std::size_t>>(
      detail::invert_index(detail::window_index(s, p)));
  return gather(g.windows, std::move(index), s);
}

/// Largest window side <= p that tiles an h x w map.
inline std::size_t effective_window(std::size_t p, std::size_t h, std::size_t w) {
  for (std::size_t q = std::min({p, h, w}); q > 1; --q) {
    if (h % q == 0 && w % q == 0) return q;
  }
  return 1;
}

}  // namespace accvit
