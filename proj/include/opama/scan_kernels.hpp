#pragma once

// Selective-scan kernels over plain buffers, templated on the scalar type so
// the benchmark can run them in float as well as double.
//
// Layouts (row-major):
//   A      [D, N]      continuous diagonal state matrix
//   B, C   [L, N]      per-step input / output projections
//   delta  [L, D]      per-step positive step sizes
//   x, y   [L, D]
//   A_bar, B_bar, states  [L, D, N]

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "opama/error.hpp"

namespace opama::scan {

/// |delta * A| below this uses the series B_bar = delta * B * (1 + delta A / 2),
/// which agrees with the closed form to O(u^2) at the switch.
inline constexpr double kZohSeriesThreshold = 1e-8;

template <class T>
struct DiscreteSsm {
  std::size_t length = 0;
  std::size_t channels = 0;  // D
  std::size_t state = 0;     // N
  std::vector<T> a_bar;      // [L, D, N]
  std::vector<T> b_bar;      // [L, D, N]
};

/// Zero-order-hold discretization of a diagonal SSM:
///   A_bar = exp(delta A),  B_bar = (delta A)^-1 (exp(delta A) - 1) delta B
/// The B_bar factor is evaluated as expm1(delta A) / A * B.
template <class T>
DiscreteSsm<T> discretize_zoh(std::span<const T> a, std::span<const T> b, std::span<const T> delta,
                              std::size_t length, std::size_t channels, std::size_t state) {
  if (a.size() != channels * state || b.size() != length * state || delta.size() != length * channels)
    throw DimensionError("discretize_zoh: operand sizes do not match L=" + std::to_string(length) +
                         " D=" + std::to_string(channels) + " N=" + std::to_string(state));
  DiscreteSsm<T> out{length, channels, state, std::vector<T>(length * channels * state),
                     std::vector<T>(length * channels * state)};
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t d = 0; d < channels; ++d) {
      const T dt = delta[t * channels + d];
      if (!(dt > T(0)))
        throw ContractError("discretize_zoh: delta must be positive (step " + std::to_string(t) +
                            ", channel " + std::to_string(d) + ")");
      for (std::size_t n = 0; n < state; ++n) {
        const T av = a[d * state + n];
        const T u = dt * av;
        const std::size_t i = (t * channels + d) * state + n;
        out.a_bar[i] = std::exp(u);
        const T bv = b[t * state + n];
        out.b_bar[i] = std::abs(u) < T(kZohSeriesThreshold) ? dt * bv * (T(1) + u / T(2)) : std::expm1(u) / av * bv;
      }
    }
  }
  return out;
}

/// In-place first-order linear recurrence over `length` steps of `width`
/// independent lanes: on entry b holds the inputs, on exit b[t] holds
///   h_t = a_t * h_{t-1} + b_t,   h_{-1} = h0 (zeros when h0 is empty).
template <class T>
void linear_recurrence_sequential(std::span<const T> a, std::span<T> b, std::size_t length,
                                  std::size_t width, std::span<const T> h0 = {}) {
  if (length == 0) return;
  if (!h0.empty())
    for (std::size_t j = 0; j < width; ++j) b[j] += a[j] * h0[j];
  for (std::size_t t = 1; t < length; ++t) {
    const T* at = a.data() + t * width;
    const T* prev = b.data() + (t - 1) * width;
    T* cur = b.data() + t * width;
    for (std::size_t j = 0; j < width; ++j) cur[j] += at[j] * prev[j];
  }
}

namespace detail {

// Blelloch scan of the pairs (a_t, b_t) under
//   (a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2)
// restricted to lanes [lo, hi). The work arrays are padded to a power of two
// with the identity (1, 0).
template <class T>
void blelloch_lanes(std::vector<T>& ea, std::vector<T>& eb, std::size_t padded, std::size_t width,
                    std::size_t lo, std::size_t hi) {
  auto combine_into_right = [&](std::size_t left, std::size_t right) {
    T* al = ea.data() + left * width;
    T* bl = eb.data() + left * width;
    T* ar = ea.data() + right * width;
    T* br = eb.data() + right * width;
    for (std::size_t j = lo; j < hi; ++j) {
      br[j] = ar[j] * bl[j] + br[j];
      ar[j] = al[j] * ar[j];
    }
  };
  // up-sweep: node i accumulates the reduction of its subtree
  for (std::size_t d = 1; d < padded; d <<= 1)
    for (std::size_t i = 2 * d - 1; i < padded; i += 2 * d) combine_into_right(i - d, i);
  // down-sweep to the exclusive prefix
  {
    T* ar = ea.data() + (padded - 1) * width;
    T* br = eb.data() + (padded - 1) * width;
    for (std::size_t j = lo; j < hi; ++j) {
      ar[j] = T(1);
      br[j] = T(0);
    }
  }
  for (std::size_t d = padded >> 1; d >= 1; d >>= 1) {
    for (std::size_t i = 2 * d - 1; i < padded; i += 2 * d) {
      T* al = ea.data() + (i - d) * width;
      T* bl = eb.data() + (i - d) * width;
      T* ar = ea.data() + i * width;
      T* br = eb.data() + i * width;
      for (std::size_t j = lo; j < hi; ++j) {
        // left child receives the parent's prefix; right child gets prefix o left
        const T la = al[j], lb = bl[j];
        al[j] = ar[j];
        bl[j] = br[j];
        br[j] = la * br[j] + lb;
        ar[j] = ar[j] * la;
      }
    }
    if (d == 1) break;
  }
}

}  // namespace detail

/// Same contract as linear_recurrence_sequential, computed with a
/// work-efficient (Blelloch) up/down sweep. Lanes are split across `threads`
/// workers; each lane is computed identically regardless of the split, so
/// results are bit-stable for any thread count.
template <class T>
void linear_recurrence_parallel(std::span<const T> a, std::span<T> b, std::size_t length,
                                std::size_t width, std::span<const T> h0 = {},
                                unsigned threads = 1) {
  if (length == 0) return;
  const std::size_t padded = std::bit_ceil(length);
  std::vector<T> ea(padded * width, T(1));
  std::vector<T> eb(padded * width, T(0));
  std::copy(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(length * width), ea.begin());
  std::copy(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(length * width), eb.begin());
  if (!h0.empty())
    for (std::size_t j = 0; j < width; ++j) eb[j] += ea[j] * h0[j];

  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(width)));
  if (workers == 1) {
    detail::blelloch_lanes(ea, eb, padded, width, 0, width);
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (width + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
      const std::size_t lo = w * chunk, hi = std::min(width, lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back([&, lo, hi] { detail::blelloch_lanes(ea, eb, padded, width, lo, hi); });
    }
  }
  // eb now holds exclusive prefixes applied to a zero state: h_{t-1}.
  // Inclusive h_t = a_t h_{t-1} + b_t (with h0 already folded into b_0).
  std::vector<T> inputs(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(length * width));
  if (!h0.empty())
    for (std::size_t j = 0; j < width; ++j) inputs[j] += a[j] * h0[j];
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t i = t * width + j;
      b[i] = a[i] * eb[i] + inputs[i];
    }
  // eb at t=0 is the identity prefix (b = 0), so h_0 = inputs_0 as required.
}

enum class Variant { sequential, parallel };

/// Runs the selective scan h_t = A_bar_t h_{t-1} + B_bar_t x_t, y_t = C_t h_t.
///
/// `h` carries the initial state on entry (zeros when empty) and the final
/// state h_{L-1} on exit; it is resized to D*N. When `states` is non-null it
/// receives every h_t ([L, D, N]).
template <class T>
void selective_scan(const DiscreteSsm<T>& disc, std::span<const T> c, std::span<const T> x,
                    std::span<T> y, std::vector<T>& h, Variant variant,
                    std::vector<T>* states = nullptr, unsigned threads = 1) {
  const std::size_t len = disc.length, dch = disc.channels, ns = disc.state;
  if (c.size() != len * ns || x.size() != len * dch || y.size() != len * dch)
    throw DimensionError("selective_scan: operand lengths do not match L=" + std::to_string(len));
  if (!h.empty() && h.size() != dch * ns)
    throw DimensionError("selective_scan: initial state must have D*N entries");
  const std::size_t width = dch * ns;
  std::vector<T> local;
  std::vector<T>& hs = states ? *states : local;
  hs.assign(len * width, T(0));
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t d = 0; d < dch; ++d) {
      const T xv = x[t * dch + d];
      const std::size_t base = (t * dch + d) * ns;
      for (std::size_t n = 0; n < ns; ++n) hs[base + n] = disc.b_bar[base + n] * xv;
    }
  std::span<const T> h0 = h.empty() ? std::span<const T>() : std::span<const T>(h);
  if (variant == Variant::sequential)
    linear_recurrence_sequential<T>(disc.a_bar, hs, len, width, h0);
  else
    linear_recurrence_parallel<T>(disc.a_bar, hs, len, width, h0, threads);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t d = 0; d < dch; ++d) {
      const std::size_t base = (t * dch + d) * ns;
      T acc = T(0);
      for (std::size_t n = 0; n < ns; ++n) acc += c[t * ns + n] * hs[base + n];
      y[t * dch + d] = acc;
    }
  if (len > 0)
    h.assign(hs.end() - static_cast<std::ptrdiff_t>(width), hs.end());
  else if (h.empty())
    h.assign(width, T(0));
}

template <class T>
std::vector<T> selective_scan_seq(const DiscreteSsm<T>& disc, std::span<const T> c,
                                  std::span<const T> x) {
  std::vector<T> y(disc.length * disc.channels), h;
  selective_scan<T>(disc, c, x, y, h, Variant::sequential);
  return y;
}

template <class T>
std::vector<T> selective_scan_parallel(const DiscreteSsm<T>& disc, std::span<const T> c,
                                       std::span<const T> x, unsigned threads = 1) {
  std::vector<T> y(disc.length * disc.channels), h;
  selective_scan<T>(disc, c, x, y, h, Variant::parallel, nullptr, threads);
  return y;
}

}  // namespace opama::scan
