#pragma once

#include <cstdint>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace atm {

using Shape = std::vector<int64_t>;

// Error hierarchy. The CLI maps these onto exit codes:
// ConfigError -> 2, DataError/FormatError -> 3, NumericError -> 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error { using Error::Error; };      // dimension mismatch
struct ArgumentError : Error { using Error::Error; };   // invalid op argument
struct StateError : Error { using Error::Error; };      // misuse of tape/optimizer
struct ConfigError : Error { using Error::Error; };     // bad config file / flags
struct DataError : Error { using Error::Error; };       // dataset I/O
struct FormatError : Error { using Error::Error; };     // checkpoint format
struct NumericError : Error { using Error::Error; };    // NaN/Inf encountered

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline int64_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), int64_t{1}, std::multiplies<>());
}

template <class... Args>
std::string concat_msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

#define ATM_CHECK(cond, ErrType, ...)                         \
  do {                                                        \
    if (!(cond)) throw ErrType(::atm::concat_msg(__VA_ARGS__)); \
  } while (0)

// Deterministic RNG. Only uniform draws are used anywhere so that results
// are reproducible independent of libstdc++ distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64() {
    // splitmix64
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  int64_t uniform_int(int64_t n) {
    return int64_t(uniform() * double(n)) % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Fisher-Yates
  template <class V>
  void shuffle(V& v) {
    for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[uniform_int(i + 1)]);
    }
  }

 private:
  uint64_t state_;
};

}  // namespace atm
