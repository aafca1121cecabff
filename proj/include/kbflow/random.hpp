#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>

#include "kbflow/linalg.hpp"

namespace kbflow {

// Philox4x32-10 counter-based generator (Salmon, Moraes, Dror, Shaw 2011).
struct Philox4x32 {
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter apply(Counter c, Key k) {
    constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
    constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
    for (int r = 0; r < 10; ++r) {
      if (r > 0) {
        k[0] += W0;
        k[1] += W1;
      }
      std::uint64_t p0 = std::uint64_t(M0) * c[0];
      std::uint64_t p1 = std::uint64_t(M1) * c[2];
      c = {std::uint32_t(p1 >> 32) ^ c[1] ^ k[0], std::uint32_t(p1),
           std::uint32_t(p0 >> 32) ^ c[3] ^ k[1], std::uint32_t(p0)};
    }
    return c;
  }
};

enum class Channel : std::uint32_t {
  truth_init = 1,
  truth_signal = 2,
  truth_obs = 3,
  particle_init = 4,
  particle_signal = 5,
  particle_obs = 6,
  law_matrix = 7,
  law_mean = 8,
  generic = 9,
};

// Independent N(0,1) sequence identified by (master_seed, trial, channel).
// Two streams with the same identity produce bitwise identical output no
// matter when or where they are consumed.
class NoiseStream {
 public:
  NoiseStream() = default;
  NoiseStream(std::uint64_t master_seed, std::uint32_t trial, std::uint32_t channel)
      : key_{std::uint32_t(master_seed), std::uint32_t(master_seed >> 32)},
        trial_(trial),
        channel_(channel) {}
  NoiseStream(std::uint64_t master_seed, std::uint32_t trial, Channel tag, std::uint32_t level = 0)
      : NoiseStream(master_seed, trial, std::uint32_t(tag) | (level << 8)) {}

  std::uint64_t seed() const { return std::uint64_t(key_[0]) | (std::uint64_t(key_[1]) << 32); }
  std::uint32_t trial() const { return trial_; }
  std::uint32_t channel() const { return channel_; }
  std::uint64_t cursor() const { return block_; }

  Philox4x32::Counter next_block() {
    Philox4x32::Counter c{std::uint32_t(block_), std::uint32_t(block_ >> 32), trial_, channel_};
    ++block_;
    return Philox4x32::apply(c, key_);
  }

  // uniform on (0, 1), 53-bit resolution
  static double to_unit(std::uint32_t hi, std::uint32_t lo) {
    std::uint64_t bits = (std::uint64_t(hi >> 5) << 26) | (lo >> 6);
    return (double(bits) + 0.5) * 0x1.0p-53;
  }

  double uniform() {
    if (have_uniform_) {
      have_uniform_ = false;
      return spare_uniform_;
    }
    auto b = next_block();
    spare_uniform_ = to_unit(b[2], b[3]);
    have_uniform_ = true;
    return to_unit(b[0], b[1]);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    auto b = next_block();
    double u1 = to_unit(b[0], b[1]);
    double u2 = to_unit(b[2], b[3]);
    double r = std::sqrt(-2.0 * std::log(u1));
    double th = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(th);
    have_spare_ = true;
    return r * std::cos(th);
  }

  void fill_normal(double* out, std::size_t n, double scale = 1.0) {
    for (std::size_t i = 0; i < n; ++i) out[i] = scale * normal();
  }

 private:
  Philox4x32::Key key_{0, 0};
  std::uint32_t trial_ = 0;
  std::uint32_t channel_ = 0;
  std::uint64_t block_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
  double spare_uniform_ = 0.0;
  bool have_uniform_ = false;
};

// rows x cols array of i.i.d. N(0, dt) entries.
inline Matrix gaussian_increments(NoiseStream& stream, Eigen::Index rows, Eigen::Index cols,
                                  double dt) {
  Matrix out(rows, cols);
  stream.fill_normal(out.data(), static_cast<std::size_t>(out.size()), std::sqrt(dt));
  return out;
}

inline void gaussian_increments(NoiseStream& stream, Matrix& out, double dt) {
  stream.fill_normal(out.data(), static_cast<std::size_t>(out.size()), std::sqrt(dt));
}

inline Vector gaussian_vector(NoiseStream& stream, Eigen::Index n) {
  Vector v(n);
  stream.fill_normal(v.data(), static_cast<std::size_t>(n));
  return v;
}

}  // namespace kbflow
