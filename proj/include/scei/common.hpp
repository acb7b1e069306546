#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>

namespace scei {

using NodeId = std::uint32_t;
using Round = std::uint32_t;

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when an operation's precondition on its arguments does not hold.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Derives an independent stream seed from a base seed and a list of
// discriminators (node id, round, purpose tag, ...). Stable across platforms.
inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = detail::splitmix64(base);
  for (std::uint64_t p : parts) h = detail::splitmix64(h ^ detail::splitmix64(p));
  return h;
}

// Purpose tags mixed into derive_seed so streams never collide.
enum class SeedPurpose : std::uint64_t {
  kInit = 1,
  kTrain = 2,
  kNoise = 3,
  kPartition = 4,
  kSynthetic = 5,
  kNode = 6,
};

inline std::uint64_t tag(SeedPurpose p) { return static_cast<std::uint64_t>(p); }

}  // namespace scei
