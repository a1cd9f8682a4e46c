#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gdk {

using Index = Eigen::Index;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = Vec<float>;
using VecD = Vec<double>;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

// FNV-1a, used as a reproducibility fingerprint for files and weight blobs.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// Root-mean-square of all elements: the empirical expected magnitude of a
// matrix viewed as one long vector.
template <typename Derived>
double expected_magnitude(const Eigen::MatrixBase<Derived>& a) {
  if (a.size() == 0) return 0.0;
  return std::sqrt(a.template cast<double>().array().square().sum() /
                   static_cast<double>(a.size()));
}

// Mask over frames: 1 on valid frames, 0 on padding.
template <typename Scalar>
Vec<Scalar> frame_mask(Index total_len, Index valid_len) {
  Vec<Scalar> m = Vec<Scalar>::Zero(total_len);
  m.head(valid_len).setOnes();
  return m;
}

}  // namespace gdk
