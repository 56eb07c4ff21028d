#include "marlcomm/rng.hpp"

#include "marlcomm/core.hpp"

#include <cmath>

namespace marlcomm {

namespace {

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t RngStream::next_u64() {
  const std::uint64_t z = key_ + 0x9e3779b97f4a7c15ull * (counter_++ + 1);
  return mix64(z);
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
  // u1 in (0, 1] so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * 3.14159265358979323846 * u2);
}

std::uint64_t RngStream::uniform_int(std::uint64_t n) {
  require(n >= 1, "uniform_int: n must be >= 1");
  // Rejection sampling to avoid modulo bias.
  const std::uint64_t limit = ~0ull - (~0ull % n);
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

RngStream rng_stream(std::uint64_t master_seed, std::string_view purpose,
                     std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = fnv1a(purpose.data(), purpose.size());
  h = fnv1a(&master_seed, sizeof(master_seed), h);
  h = fnv1a(&a, sizeof(a), h);
  h = fnv1a(&b, sizeof(b), h);
  h = fnv1a(&c, sizeof(c), h);
  return RngStream(mix64(h));
}

}  // namespace marlcomm
