#include "kml/random.hpp"

#include <cmath>
#include <numbers>

#include "kml/errors.hpp"

namespace kml {

namespace {
constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}
}  // namespace

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> c,
                                        std::array<std::uint32_t, 2> k) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, c[0], hi0, lo0);
    mulhilo(kMul1, c[2], hi1, lo1);
    c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    k[0] += kWeyl0;
    k[1] += kWeyl1;
  }
  return c;
}

Philox::Philox(std::uint64_t seed, StreamDomain domain, std::uint64_t index)
    : key_(seed),
      stream_((static_cast<std::uint64_t>(domain) << 48) | (index & 0xFFFFFFFFFFFFull)) {
  require(index < (1ull << 48), "Philox: stream index exceeds 48 bits");
}

void Philox::refill() {
  buffer_ = philox4x32(
      {static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
       static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
      {static_cast<std::uint32_t>(key_), static_cast<std::uint32_t>(key_ >> 32)});
  ++block_;
  used_ = 0;
}

std::uint32_t Philox::next_u32() {
  if (used_ >= 4) refill();
  return buffer_[used_++];
}

std::uint64_t Philox::next_u64() {
  const std::uint64_t lo = next_u32();
  const std::uint64_t hi = next_u32();
  return (hi << 32) | lo;
}

double Philox::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Philox::below(std::uint64_t bound) {
  require(bound > 0, "Philox::below: bound must be positive");
  // Rejection on the top of the range keeps the draw unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
  for (;;) {
    const std::uint64_t r = next_u64();
    if (r < limit) return r % bound;
  }
}

double Philox::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Philox::State Philox::state() const { return {key_, stream_, block_, used_}; }

Philox Philox::from_state(const State& state) {
  Philox p;
  p.key_ = state[0];
  p.stream_ = state[1];
  p.block_ = state[2];
  p.used_ = state[3];
  require(p.used_ <= 4, "Philox::from_state: corrupt buffer position");
  if (p.used_ < 4) {
    // The buffer came from the block before the current counter.
    require(p.block_ > 0, "Philox::from_state: corrupt counter");
    const std::uint64_t used = p.used_;
    --p.block_;
    p.refill();
    p.used_ = used;
  }
  return p;
}

}  // namespace kml
