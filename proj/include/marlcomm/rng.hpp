#pragma once

#include <cstdint>
#include <string_view>

namespace marlcomm {

// Counter-based random stream. Each draw applies a SplitMix64-style finalizer
// to (key, counter), so streams are stateless apart from the counter and any
// number of independent streams can be derived from one master seed. Streams
// are named by (purpose, a, b, c) -- typically (purpose, episode, agent) --
// which makes parallel rollouts reproduce serial ones draw for draw.
class RngStream {
 public:
  RngStream() = default;
  RngStream(std::uint64_t key, std::uint64_t counter = 0)
      : key_(key), counter_(counter) {}

  std::uint64_t next_u64();
  // Uniform in [0, 1), 53-bit resolution.
  double uniform();
  // Standard normal via Box-Muller; consumes two uniforms per call.
  double normal();
  // Uniform integer in [0, n), n >= 1.
  std::uint64_t uniform_int(std::uint64_t n);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

// Derives a stream key from the master seed and a stream name. Identical
// arguments always give the identical stream.
RngStream rng_stream(std::uint64_t master_seed, std::string_view purpose,
                     std::uint64_t a = 0, std::uint64_t b = 0,
                     std::uint64_t c = 0);

}  // namespace marlcomm
