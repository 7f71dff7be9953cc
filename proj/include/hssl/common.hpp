#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hssl {

// Error taxonomy. Every precondition violation maps to one of these so
// callers (and the CLI exit-code mapping) can tell misconfiguration from
// numerical failure from bad files.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct dimension_error : error {
  using error::error;
};
struct parameter_error : error {
  using error::error;
};
struct contract_error : error {
  using error::error;
};
struct config_error : error {
  using error::error;
};
struct format_error : error {
  using error::error;
};
struct numerical_error : error {
  using error::error;
};
struct io_error : error {
  using error::error;
};
struct checkpoint_error : error {
  using error::error;
};
struct undefined_metric_error : error {
  using error::error;
};

inline int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw dimension_error("tensor extent must be positive, got " + std::to_string(e));
    n *= e;
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// splitmix64; used everywhere a sub-seed is derived from a base seed plus
// stream coordinates, so results never depend on call order or thread count.
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> parts) {
  uint64_t h = mix_seed(base);
  for (uint64_t p : parts) h = mix_seed(h ^ mix_seed(p));
  return h;
}

// Deterministic RNG wrapper. All sampling goes through explicit methods so
// the stream is fixed per platform independent of <random> distribution
// internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw parameter_error("uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
    return lo + static_cast<int>(engine_() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Resampled normal restricted to [-bound, bound] sigmas, then scaled.
  double truncated_normal(double sigma, double bound = 2.0) {
    double z = normal();
    while (std::fabs(z) > bound) z = normal();
    return z * sigma;
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace hssl
