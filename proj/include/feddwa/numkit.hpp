#ifndef FEDDWA_NUMKIT_HPP
#define FEDDWA_NUMKIT_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "feddwa/errors.hpp"

namespace feddwa {

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

struct Segment {
  std::string name;
  std::vector<std::size_t> shape;

  std::size_t count() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  friend bool operator==(const Segment&, const Segment&) = default;
};

using Layout = std::vector<Segment>;

inline std::size_t layout_size(const Layout& layout) {
  std::size_t n = 0;
  for (const auto& seg : layout) n += seg.count();
  return n;
}

// Flat vector of model parameters tagged with the layout that produced it.
// Layouts are shared between copies so the identity check is usually a
// pointer comparison.
class ParamVector {
 public:
  ParamVector() : layout_(std::make_shared<const Layout>()) {}

  explicit ParamVector(std::shared_ptr<const Layout> layout)
      : values_(layout_size(*layout), 0.0), layout_(std::move(layout)) {}

  ParamVector(std::shared_ptr<const Layout> layout, std::vector<double> values)
      : values_(std::move(values)), layout_(std::move(layout)) {
    if (layout_size(*layout_) != values_.size()) {
      throw StructuralError(detail::concat("layout holds ", layout_size(*layout_),
                                           " elements but ", values_.size(), " values were given"));
    }
  }

  // Single-segment vector named "v"; handy for tests and small examples.
  static ParamVector flat(std::vector<double> values) {
    auto layout = std::make_shared<const Layout>(Layout{{"v", {values.size()}}});
    return ParamVector(std::move(layout), std::move(values));
  }

  std::size_t size() const noexcept { return values_.size(); }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  const Layout& layout() const noexcept { return *layout_; }
  const std::shared_ptr<const Layout>& layout_ptr() const noexcept { return layout_; }

  // Offset of a named segment inside the flat vector.
  std::size_t offset_of(std::string_view name) const {
    std::size_t off = 0;
    for (const auto& seg : *layout_) {
      if (seg.name == name) return off;
      off += seg.count();
    }
    throw StructuralError(detail::concat("no segment named '", name, "'"));
  }

  bool same_layout(const ParamVector& other) const {
    return layout_ == other.layout_ || *layout_ == *other.layout_;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  // Bitwise equality of values plus layout identity.
  friend bool operator==(const ParamVector& a, const ParamVector& b) {
    return a.same_layout(b) && a.values_ == b.values_;
  }

 private:
  std::vector<double> values_;
  std::shared_ptr<const Layout> layout_;
};

namespace detail {

inline void require_same_layout(const ParamVector& a, const ParamVector& b, std::string_view op) {
  if (!a.same_layout(b)) {
    throw StructuralError(detail::concat(op, ": parameter layouts differ (", a.size(), " vs ",
                                         b.size(), " elements)"));
  }
}

inline void require_finite(const ParamVector& v, std::string_view op) {
  if (!v.all_finite()) {
    throw RuntimeFailure(detail::concat(op, ": result contains non-finite values"));
  }
}

// Neumaier variant of Kahan summation.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Vector arithmetic
// ---------------------------------------------------------------------------

// alpha * x + y
inline ParamVector axpy(double alpha, const ParamVector& x, const ParamVector& y) {
  detail::require_same_layout(x, y, "axpy");
  ParamVector out = y;
  auto o = out.values();
  auto xs = x.values();
  for (std::size_t k = 0; k < o.size(); ++k) o[k] += alpha * xs[k];
  detail::require_finite(out, "axpy");
  return out;
}

inline ParamVector scaled(double alpha, const ParamVector& x) {
  ParamVector out = x;
  for (double& v : out.values()) v *= alpha;
  detail::require_finite(out, "scaled");
  return out;
}

inline ParamVector subtract(const ParamVector& a, const ParamVector& b) {
  return axpy(-1.0, b, a);
}

inline double dot(const ParamVector& a, const ParamVector& b) {
  detail::require_same_layout(a, b, "dot");
  detail::CompensatedSum acc;
  auto as = a.values();
  auto bs = b.values();
  for (std::size_t k = 0; k < as.size(); ++k) acc.add(as[k] * bs[k]);
  return acc.value();
}

inline double sq_norm(const ParamVector& a) { return dot(a, a); }

// Squared Euclidean distance with compensated accumulation.
inline double sq_dist(const ParamVector& a, const ParamVector& b) {
  detail::require_same_layout(a, b, "sq_dist");
  detail::CompensatedSum acc;
  auto as = a.values();
  auto bs = b.values();
  for (std::size_t k = 0; k < as.size(); ++k) {
    const double diff = as[k] - bs[k];
    acc.add(diff * diff);
  }
  return acc.value();
}

// sum_j weights[j] * vectors[j]. Each coordinate is reduced with compensated
// summation so that a one-hot weight vector reproduces its vector exactly.
inline ParamVector weighted_sum(std::span<const double> weights,
                                std::span<const ParamVector> vectors) {
  if (vectors.empty()) throw StructuralError("weighted_sum: no vectors given");
  if (weights.size() != vectors.size()) {
    throw StructuralError(detail::concat("weighted_sum: ", weights.size(), " weights for ",
                                         vectors.size(), " vectors"));
  }
  for (const auto& v : vectors) detail::require_same_layout(vectors.front(), v, "weighted_sum");

  ParamVector out(vectors.front().layout_ptr());
  auto o = out.values();
  for (std::size_t k = 0; k < o.size(); ++k) {
    detail::CompensatedSum acc;
    for (std::size_t j = 0; j < vectors.size(); ++j) {
      if (weights[j] != 0.0) acc.add(weights[j] * vectors[j][k]);
    }
    o[k] = acc.value();
  }
  detail::require_finite(out, "weighted_sum");
  return out;
}

inline ParamVector mean_of(std::span<const ParamVector> vectors) {
  std::vector<double> w(vectors.size(), vectors.empty() ? 0.0 : 1.0 / double(vectors.size()));
  return weighted_sum(w, vectors);
}

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace detail

// Seedable generator with reproducible output on every platform. The engine
// (mt19937_64) has a standardized output sequence; all distributions below are
// implemented here rather than taken from <random>, whose algorithms are
// implementation-defined.
//
// A Rng is single-owner. Independent streams for separate purposes are
// derived with substream(), which depends only on the root seed and the
// labels, never on how many draws the parent has made.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(detail::splitmix64(seed)) {}

  std::uint64_t seed() const noexcept { return seed_; }

  Rng substream(std::string_view purpose, std::uint64_t a = 0, std::uint64_t b = 0) const {
    std::uint64_t h = detail::splitmix64(seed_ ^ detail::fnv1a(purpose));
    h = detail::splitmix64(h ^ detail::splitmix64(a + 0x51ull));
    h = detail::splitmix64(h ^ detail::splitmix64(b + 0xA3ull));
    return Rng(h);
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer on [0, n), unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw StructuralError("Rng::below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal (Marsaglia polar method).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  // log of a Gamma(shape, 1) variate. Working in log space keeps tiny shapes
  // (Dirichlet concentration 0.07 and below) from underflowing to zero.
  double log_gamma_variate(double shape) {
    if (!(shape > 0.0)) throw StructuralError("gamma shape must be positive");
    if (shape < 1.0) {
      double u;
      do {
        u = uniform();
      } while (u == 0.0);
      return log_gamma_variate(shape + 1.0) + std::log(u) / shape;
    }
    // Marsaglia & Tsang.
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    while (true) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return std::log(d * v);
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return std::log(d * v);
    }
  }

  // Symmetric Dirichlet(alpha, ..., alpha) of dimension n.
  std::vector<double> dirichlet(double alpha, std::size_t n) {
    if (n == 0) throw StructuralError("dirichlet: dimension must be positive");
    std::vector<double> logs(n);
    for (auto& l : logs) l = log_gamma_variate(alpha);
    const double top = *std::max_element(logs.begin(), logs.end());
    double total = 0.0;
    for (auto& l : logs) {
      l = std::exp(l - top);
      total += l;
    }
    for (auto& l : logs) l /= total;
    return logs;
  }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    shuffle(std::span<T>(items));
  }

  // k distinct values from [0, n) in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) throw StructuralError("sample_without_replacement: k exceeds n");
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(pool[i], pool[i + below(n - i)]);
    }
    pool.resize(k);
    return pool;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace feddwa

#endif  // FEDDWA_NUMKIT_HPP
