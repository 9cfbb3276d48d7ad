#pragma once

#include <array>
#include <cstdint>

namespace kml {

// Philox4x32-10 block function (Salmon et al., SC'11).
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

// Stream domains keep independent uses of one seed apart.
enum class StreamDomain : std::uint32_t {
  episode = 1,
  category = 2,
  init = 3,
  mode = 4,
  evaluation = 5,
  transfer = 6,
  training = 7,
};

/// Counter-based generator over Philox4x32-10.
///
/// A stream is identified by (seed, domain, index); draws walk a 64-bit block
/// counter. The whole state fits in four u64 words for checkpoints.
/// Normal draws use Box-Muller; every transform is written out here so the
/// sequences do not depend on the standard library's distributions.
class Philox {
 public:
  using State = std::array<std::uint64_t, 4>;

  Philox(std::uint64_t seed, StreamDomain domain, std::uint64_t index);

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Unbiased integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);
  double normal();

  State state() const;
  static Philox from_state(const State& state);

  friend bool operator==(const Philox& a, const Philox& b) { return a.state() == b.state(); }

 private:
  Philox() = default;
  void refill();

  std::uint64_t key_ = 0;
  std::uint64_t stream_ = 0;  // (domain << 48) | index, upper counter half
  std::uint64_t block_ = 0;   // lower counter half
  std::uint64_t used_ = 4;    // words consumed from buffer_
  std::array<std::uint32_t, 4> buffer_{};
};

}  // namespace kml
