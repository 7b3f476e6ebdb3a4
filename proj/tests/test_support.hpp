#pragma once

#include <random>

#include "eqnio/core.hpp"
#include "eqnio/group.hpp"

namespace eqnio::test {

inline std::mt19937_64 rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline double uniform(std::mt19937_64& g, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(g);
}

inline double gauss(std::mt19937_64& g, double stddev = 1.0) {
  return std::normal_distribution<double>(0.0, stddev)(g);
}

inline Vec3 random_vec3(std::mt19937_64& g, double scale = 1.0) {
  return Vec3(gauss(g, scale), gauss(g, scale), gauss(g, scale));
}

inline Mat3 random_psd(std::mt19937_64& g) {
  Mat3 a;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a(r, c) = gauss(g);
  return a.transpose() * a + 0.1 * Mat3::Identity();
}

/// A fixed sweep of group elements: 8 rotations, and 8 roto-reflections when
/// the mode admits them.
inline std::vector<group::YawFrame> sample_frames(GroupMode mode) {
  std::vector<group::YawFrame> out;
  for (int i = 0; i < 8; ++i) {
    out.push_back(group::YawFrame::rotation(0.13 + i * 0.71));
  }
  if (mode == GroupMode::kO2) {
    for (int i = 0; i < 8; ++i) {
      out.push_back(group::YawFrame::reflection(-0.4 + i * 0.37));
    }
  }
  return out;
}

inline group::YawFrame random_frame(std::mt19937_64& g, GroupMode mode) {
  const double angle = uniform(g, -kPi, kPi);
  if (mode == GroupMode::kO2 && (g() & 1u)) {
    return group::YawFrame::reflection(angle);
  }
  return group::YawFrame::rotation(angle);
}

}  // namespace eqnio::test
