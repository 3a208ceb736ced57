#pragma once

// Dense vectors/matrices, activations, the seeded RNG, the Adam optimizer
// and a central-difference gradient checker. Everything is double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pguard {

/// Thrown when operand shapes disagree.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a loss or gradient leaves the finite range.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Vec {
  std::vector<double> data;

  Vec() = default;
  explicit Vec(std::size_t n, double fill = 0.0) : data(n, fill) {}
  Vec(std::initializer_list<double> xs) : data(xs) {}
  explicit Vec(std::vector<double> xs) : data(std::move(xs)) {}

  std::size_t dim() const { return data.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  std::span<double> span() { return data; }
  std::span<const double> span() const { return data; }

  bool operator==(const Vec&) const = default;
};

/// Row-major dense matrix.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<double> span() { return data; }
  std::span<const double> span() const { return data; }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  bool operator==(const Mat&) const = default;
};

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + e^x) without overflow.
inline double softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline constexpr double kZeroNorm = 1e-12;

/// Cosine similarity; 0 when either operand has norm below 1e-12.
inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_sim: dimension mismatch");
  const double na = norm(a);
  const double nb = norm(b);
  if (na < kZeroNorm || nb < kZeroNorm) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}
inline double cosine_sim(const Vec& a, const Vec& b) { return cosine_sim(a.span(), b.span()); }

inline Vec matvec(const Mat& m, std::span<const double> x) {
  if (m.cols != x.size()) throw DimensionError("matvec: matrix has " + std::to_string(m.cols) +
                                               " columns, vector has " + std::to_string(x.size()));
  Vec y(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) y[r] = dot(m.row(r), x);
  return y;
}
inline Vec matvec(const Mat& m, const Vec& x) { return matvec(m, x.span()); }

/// y = mᵀ x
inline Vec matvec_t(const Mat& m, std::span<const double> x) {
  if (m.rows != x.size()) throw DimensionError("matvec_t: shape mismatch");
  Vec y(m.cols);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    const auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols; ++c) y[c] += xr * row[c];
  }
  return y;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols != b.rows) throw DimensionError("matmul: inner dimension mismatch");
  Mat out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

/// m += scale · a bᵀ
inline void add_outer(Mat& m, std::span<const double> a, std::span<const double> b, double scale = 1.0) {
  if (m.rows != a.size() || m.cols != b.size()) throw DimensionError("add_outer: shape mismatch");
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double ar = scale * a[r];
    if (ar == 0.0) continue;
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols; ++c) row[c] += ar * b[c];
  }
}

inline bool all_finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

/// Seeded random stream. The engine is mt19937_64, whose output sequence is
/// fixed by the standard; the float transforms are written out here because
/// std distributions differ between standard library vendors.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    // Rejection sampling removes modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return static_cast<std::size_t>(x % n);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return mag * std::cos(2.0 * M_PI * u2);
  }
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <class T>
  void shuffle(std::vector<T>& xs) {
    for (std::size_t i = xs.size(); i > 1; --i) std::swap(xs[i - 1], xs[below(i)]);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Stable 64-bit seed derived from a root seed and a stage label.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : label) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = root ^ h;  // splitmix64 finalizer
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline void fill_uniform(std::span<double> xs, Rng& rng, double lo, double hi) {
  for (auto& x : xs) x = rng.uniform(lo, hi);
}
inline void fill_normal(std::span<double> xs, Rng& rng, double stddev) {
  for (auto& x : xs) x = rng.normal(0.0, stddev);
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed list of parameter blocks. Blocks are bound by position,
/// so the same visiting order must be used on every step.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  long steps() const { return t_; }

  void begin_step() { ++t_; slot_ = 0; }

  void update(std::span<double> param, std::span<const double> grad) {
    if (param.size() != grad.size()) throw DimensionError("Adam: grad/param size mismatch");
    if (slot_ == m_.size()) {
      m_.emplace_back(param.size(), 0.0);
      v_.emplace_back(param.size(), 0.0);
    }
    auto& m = m_[slot_];
    auto& v = v_[slot_];
    ++slot_;
    if (m.size() != param.size()) throw DimensionError("Adam: block size changed between steps");
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < param.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      param[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::size_t slot_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Compares an analytic gradient with central differences.
///
/// `f` maps a parameter vector to a scalar. Returns the largest per-coordinate
/// relative error |g - fd| / max(|g|, |fd|); coordinates where both are below
/// `abs_floor` contribute their absolute error instead, so constant functions
/// report the absolute discrepancy.
inline double grad_check(const std::function<double(std::span<const double>)>& f,
                         std::span<const double> analytic, std::span<const double> p,
                         double eps = 1e-5, double abs_floor = 1e-8) {
  if (analytic.size() != p.size()) throw DimensionError("grad_check: gradient size mismatch");
  std::vector<double> work(p.begin(), p.end());
  double worst = 0.0;
  for (std::size_t k = 0; k < work.size(); ++k) {
    const double orig = work[k];
    work[k] = orig + eps;
    const double fp = f(work);
    work[k] = orig - eps;
    const double fm = f(work);
    work[k] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericalError("grad_check: non-finite function value at coordinate " + std::to_string(k));
    }
    const double fd = (fp - fm) / (2.0 * eps);
    const double scale = std::max(std::abs(analytic[k]), std::abs(fd));
    const double err = scale < abs_floor ? std::abs(analytic[k] - fd) : std::abs(analytic[k] - fd) / scale;
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace pguard
