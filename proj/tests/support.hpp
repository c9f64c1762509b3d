#pragma once

// Shared test helpers plus naive reference implementations. The references
// are written directly from the operation definitions (loops over every
// output coordinate) and share no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "xnet/rng.hpp"
#include "xnet/tensor.hpp"

namespace xt {

using xnet::Shape;
using xnet::Tensor;
using xnet::Tensor64;

template <typename T = float>
xnet::BasicTensor<T> random_tensor(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                                   bool requires_grad = false) {
  auto t = xnet::BasicTensor<T>::zeros(s);
  xnet::Rng rng(seed);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

template <typename T>
std::vector<double> values(const xnet::BasicTensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

inline double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    const double d = std::max({std::abs(a[i]), std::abs(b[i]), 1e-6});
    m = std::max(m, std::abs(a[i] - b[i]) / d);
  }
  return a.size() == b.size() ? m : INFINITY;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("xnet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// ------------------------------------------------------------------ oracles

inline double ref_gelu(double x) { return 0.5 * x * std::erfc(-x / std::sqrt(2.0)); }

/// Direct definition of grouped, strided, zero-padded cross-correlation.
inline std::vector<double> ref_conv2d(const std::vector<double>& x, std::int64_t n, std::int64_t cin, std::int64_t h,
                                      std::int64_t w, const std::vector<double>& k, std::int64_t cout,
                                      std::int64_t kh, std::int64_t kw, const std::vector<double>& bias,
                                      std::int64_t stride, std::int64_t pad, std::int64_t groups,
                                      std::int64_t* ho_out = nullptr, std::int64_t* wo_out = nullptr) {
  const std::int64_t ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  const std::int64_t cin_g = cin / groups, cout_g = cout / groups;
  std::vector<double> y(static_cast<std::size_t>(n * cout * ho * wo), 0.0);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t co = 0; co < cout; ++co) {
      const std::int64_t gr = co / cout_g;
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          double s = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
          for (std::int64_t ci = 0; ci < cin_g; ++ci)
            for (std::int64_t i = 0; i < kh; ++i)
              for (std::int64_t j = 0; j < kw; ++j) {
                const std::int64_t iy = oy * stride - pad + i, ix = ox * stride - pad + j;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                const std::int64_t c = gr * cin_g + ci;
                s += x[static_cast<std::size_t>(((b * cin + c) * h + iy) * w + ix)] *
                     k[static_cast<std::size_t>(((co * cin_g + ci) * kh + i) * kw + j)];
              }
          y[static_cast<std::size_t>(((b * cout + co) * ho + oy) * wo + ox)] = s;
        }
    }
  if (ho_out) *ho_out = ho;
  if (wo_out) *wo_out = wo;
  return y;
}

/// Layer norm over axis 1 of (N, C, inner...) data, two-pass mean/variance.
inline std::vector<double> ref_layer_norm_axis1(const std::vector<double>& x, std::int64_t n, std::int64_t c,
                                                std::int64_t inner, const std::vector<double>& gamma,
                                                const std::vector<double>& beta, double eps) {
  std::vector<double> y(x.size());
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t p = 0; p < inner; ++p) {
      double mean = 0;
      for (std::int64_t k = 0; k < c; ++k) mean += x[static_cast<std::size_t>((b * c + k) * inner + p)];
      mean /= static_cast<double>(c);
      double var = 0;
      for (std::int64_t k = 0; k < c; ++k) {
        const double d = x[static_cast<std::size_t>((b * c + k) * inner + p)] - mean;
        var += d * d;
      }
      var /= static_cast<double>(c);
      for (std::int64_t k = 0; k < c; ++k) {
        const auto idx = static_cast<std::size_t>((b * c + k) * inner + p);
        y[idx] = (x[idx] - mean) / std::sqrt(var + eps) * gamma[static_cast<std::size_t>(k)] +
                 beta[static_cast<std::size_t>(k)];
      }
    }
  return y;
}

/// Align-corners bilinear interpolation of one (h, w) plane.
inline std::vector<double> ref_resize_plane(const std::vector<double>& x, std::int64_t h, std::int64_t w,
                                            std::int64_t oh, std::int64_t ow) {
  auto src = [](std::int64_t d, std::int64_t lin, std::int64_t lout) {
    return lout == 1 ? 0.0 : static_cast<double>(d) * static_cast<double>(lin - 1) / static_cast<double>(lout - 1);
  };
  std::vector<double> y(static_cast<std::size_t>(oh * ow));
  for (std::int64_t i = 0; i < oh; ++i)
    for (std::int64_t j = 0; j < ow; ++j) {
      const double sy = src(i, h, oh), sx = src(j, w, ow);
      const auto y0 = static_cast<std::int64_t>(std::floor(sy)), x0 = static_cast<std::int64_t>(std::floor(sx));
      const std::int64_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
      auto at = [&](std::int64_t r, std::int64_t c) { return x[static_cast<std::size_t>(r * w + c)]; };
      y[static_cast<std::size_t>(i * ow + j)] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                                                fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
    }
  return y;
}

/// Mean over positions of -log softmax(logits)[label], logits laid out (N, K, P).
inline double ref_cross_entropy(const std::vector<double>& logits, std::int64_t n, std::int64_t k, std::int64_t p,
                                const std::vector<std::int32_t>& labels, std::int32_t ignore = -1) {
  double total = 0;
  int count = 0;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t q = 0; q < p; ++q) {
      const std::int32_t lab = labels[static_cast<std::size_t>(b * p + q)];
      if (lab == ignore) continue;
      double z = 0;
      for (std::int64_t c = 0; c < k; ++c) z += std::exp(logits[static_cast<std::size_t>((b * k + c) * p + q)]);
      total += std::log(z) - logits[static_cast<std::size_t>((b * k + lab) * p + q)];
      ++count;
    }
  return total / count;
}

}  // namespace xt
