#pragma once

// Shared error types, the seedable RNG, and thread-count plumbing used by
// every other header in the library.

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif
#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace aleth {

// Large tensors churn through malloc every iteration; keeping big blocks on
// the heap instead of mmap/munmap cycles avoids continual page re-zeroing.
inline void init_allocator() {
#ifdef __GLIBC__
  static bool done = [] {
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, -1);
    return true;
  }();
  (void)done;
#endif
}

class Error : public std::runtime_error {
 public:
  enum class Kind { config, data, numeric, domain };

  Error(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

  // Process exit code contract: 0 ok, 2 config, 3 data, 4 numeric.
  int exit_code() const {
    switch (kind_) {
      case Kind::data: return 3;
      case Kind::numeric: return 4;
      default: return 2;
    }
  }
  const char* kind_name() const {
    switch (kind_) {
      case Kind::config: return "config";
      case Kind::data: return "data";
      case Kind::numeric: return "numeric";
      default: return "domain";
    }
  }

 private:
  Kind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(Kind::config, m) {}
};
struct DataError : Error {
  explicit DataError(const std::string& m) : Error(Kind::data, m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error(Kind::numeric, m) {}
};
struct DomainError : Error {
  explicit DomainError(const std::string& m) : Error(Kind::domain, m) {}
};

struct CheckpointError : DataError {
  enum class Reason { version_mismatch, truncated, shape_mismatch };
  CheckpointError(Reason r, const std::string& m) : DataError(m), reason(r) {}
  Reason reason;
};

// Deterministic random stream. All draws go through the same 64->53 bit
// construction so results do not depend on the standard library's
// distribution implementations.
class RngState {
 public:
  explicit RngState(std::uint64_t seed = 0) : gen_(static_cast<std::uint32_t>(seed)) {}

  std::uint32_t u32() { return gen_(); }

  // uniform in [0, 1), 53 bits
  double uniform() {
    std::uint64_t hi = gen_() >> 5;  // 27 bits
    std::uint64_t lo = gen_() >> 6;  // 26 bits
    return double((hi << 26) | lo) * (1.0 / 9007199254740992.0);
  }

  // uniform integer in [0, n)
  int uniform_int(int n) {
    int v = int(uniform() * double(n));
    return v < n ? v : n - 1;
  }

  double uniform_range(double a, double b) { return a + (b - a) * uniform(); }

  std::string serialize() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }
  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (is.fail()) throw DataError("invalid rng state string");
  }

  bool operator==(const RngState& o) const { return gen_ == o.gen_; }

 private:
  std::mt19937 gen_;
};

// 0 means "use all hardware threads". Affects Eigen's GEMM; everything else
// in the library is single-threaded by construction, so any fixed thread
// count gives reproducible results.
inline void set_threads(int n) {
  init_allocator();
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#endif
  Eigen::setNbThreads(n > 0 ? n : 0);
}

}  // namespace aleth
