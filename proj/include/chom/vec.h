#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace chom {

// Supported spatial dimensions. Unused trailing components of a Vec are kept
// at zero, so dot products and norms never need the active dimension.
inline constexpr int kMinDim = 2;
inline constexpr int kMaxDim = 3;

using Vec = std::array<double, kMaxDim>;

inline void check_dimension(int d) {
  if (d < kMinDim || d > kMaxDim) {
    throw std::invalid_argument("dimension must be in [" + std::to_string(kMinDim) + ", " +
                                std::to_string(kMaxDim) + "], got " + std::to_string(d));
  }
}

inline Vec operator+(const Vec& a, const Vec& b) {
  Vec r;
  for (int k = 0; k < kMaxDim; ++k) r[k] = a[k] + b[k];
  return r;
}

inline Vec operator-(const Vec& a, const Vec& b) {
  Vec r;
  for (int k = 0; k < kMaxDim; ++k) r[k] = a[k] - b[k];
  return r;
}

inline Vec operator-(const Vec& a) {
  Vec r;
  for (int k = 0; k < kMaxDim; ++k) r[k] = -a[k];
  return r;
}

inline Vec operator*(double s, const Vec& a) {
  Vec r;
  for (int k = 0; k < kMaxDim; ++k) r[k] = s * a[k];
  return r;
}

inline Vec& operator+=(Vec& a, const Vec& b) {
  for (int k = 0; k < kMaxDim; ++k) a[k] += b[k];
  return a;
}

inline Vec& operator-=(Vec& a, const Vec& b) {
  for (int k = 0; k < kMaxDim; ++k) a[k] -= b[k];
  return a;
}

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (int k = 0; k < kMaxDim; ++k) s += a[k] * b[k];
  return s;
}

inline double norm2(const Vec& a) { return dot(a, a); }
inline double norm(const Vec& a) { return std::sqrt(norm2(a)); }
inline double distance(const Vec& a, const Vec& b) { return norm(a - b); }

inline double norm_inf(const Vec& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

inline bool all_finite(const Vec& a) {
  for (double v : a)
    if (!std::isfinite(v)) return false;
  return true;
}

/// Unit coordinate vector along `axis` with the given sign.
inline Vec unit(int axis, int sign = 1) {
  Vec e{};
  e[static_cast<std::size_t>(axis)] = sign >= 0 ? 1.0 : -1.0;
  return e;
}

inline Vec make_vec(double x, double y, double z = 0.0) { return Vec{x, y, z}; }

}  // namespace chom
