#pragma once

// Layer primitives with hand-written backward passes, shared by the base
// language model and the router encoder. Activations are Mat with one row
// per sequence position.

#include <cmath>
#include <concepts>
#include <cstring>
#include <string>
#include <type_traits>
#include <vector>

#include "numerics.hpp"

namespace pguard::nn {

/// Dotted parameter name.
inline std::string join(const std::string& prefix, std::string_view name) {
  return prefix.empty() ? std::string(name) : prefix + "." + std::string(name);
}

template <class T, class U>
concept SameAs = std::same_as<std::remove_const_t<T>, U>;

/// Y = X·W + b with W stored in×out.
struct Linear {
  Mat w;
  Vec b;

  Linear() = default;
  Linear(std::size_t in, std::size_t out) : w(in, out), b(out) {}

  std::size_t in_dim() const { return w.rows; }
  std::size_t out_dim() const { return w.cols; }

  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows));
    fill_uniform(w.span(), rng, -bound, bound);
    std::fill(b.data.begin(), b.data.end(), 0.0);
  }
};

template <class L, class F>
  requires SameAs<L, Linear>
void visit_params(L& l, const std::string& prefix, F&& f) {
  f(join(prefix, "w"), l.w.rows, l.w.cols, l.w.span());
  f(join(prefix, "b"), std::size_t{1}, l.b.dim(), l.b.span());
}

inline Mat linear_forward(const Linear& l, const Mat& x) {
  if (x.cols != l.in_dim()) throw DimensionError("linear: input width mismatch");
  Mat y = matmul(x, l.w);
  for (std::size_t r = 0; r < y.rows; ++r) {
    auto row = y.row(r);
    for (std::size_t c = 0; c < y.cols; ++c) row[c] += l.b[c];
  }
  return y;
}

/// Accumulates parameter gradients into `g` and returns dX.
inline Mat linear_backward(const Linear& l, const Mat& x, const Mat& dy, Linear& g) {
  Mat dx(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const auto xr = x.row(r);
    const auto dyr = dy.row(r);
    auto dxr = dx.row(r);
    for (std::size_t i = 0; i < l.w.rows; ++i) {
      const auto wi = l.w.row(i);
      auto gwi = g.w.row(i);
      double acc = 0.0;
      const double xi = xr[i];
      for (std::size_t o = 0; o < l.w.cols; ++o) {
        acc += dyr[o] * wi[o];
        gwi[o] += xi * dyr[o];
      }
      dxr[i] = acc;
    }
    for (std::size_t o = 0; o < l.w.cols; ++o) g.b[o] += dyr[o];
  }
  return dx;
}

struct LayerNorm {
  Vec gamma;
  Vec beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gamma(d, 1.0), beta(d, 0.0) {}
};

template <class L, class F>
  requires SameAs<L, LayerNorm>
void visit_params(L& l, const std::string& prefix, F&& f) {
  f(join(prefix, "gamma"), std::size_t{1}, l.gamma.dim(), l.gamma.span());
  f(join(prefix, "beta"), std::size_t{1}, l.beta.dim(), l.beta.span());
}

struct LayerNormCache {
  Mat xhat;
  std::vector<double> rstd;
};

inline constexpr double kLayerNormEps = 1e-5;

inline Mat layernorm_forward(const LayerNorm& ln, const Mat& x, LayerNormCache* cache = nullptr) {
  const std::size_t d = x.cols;
  Mat y(x.rows, d);
  if (cache) {
    cache->xhat = Mat(x.rows, d);
    cache->rstd.assign(x.rows, 0.0);
  }
  for (std::size_t r = 0; r < x.rows; ++r) {
    const auto xr = x.row(r);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    auto yr = y.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (xr[c] - mean) * rstd;
      if (cache) cache->xhat(r, c) = xh;
      yr[c] = ln.gamma[c] * xh + ln.beta[c];
    }
    if (cache) cache->rstd[r] = rstd;
  }
  return y;
}

inline Mat layernorm_backward(const LayerNorm& ln, const LayerNormCache& cache, const Mat& dy, LayerNorm& g) {
  const std::size_t d = dy.cols;
  Mat dx(dy.rows, d);
  std::vector<double> dxh(d);
  for (std::size_t r = 0; r < dy.rows; ++r) {
    const auto dyr = dy.row(r);
    const auto xh = cache.xhat.row(r);
    double mean_dxh = 0.0;
    double mean_dxh_xh = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      g.gamma[c] += dyr[c] * xh[c];
      g.beta[c] += dyr[c];
      dxh[c] = dyr[c] * ln.gamma[c];
      mean_dxh += dxh[c];
      mean_dxh_xh += dxh[c] * xh[c];
    }
    mean_dxh /= static_cast<double>(d);
    mean_dxh_xh /= static_cast<double>(d);
    auto dxr = dx.row(r);
    for (std::size_t c = 0; c < d; ++c) dxr[c] = cache.rstd[r] * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
  }
  return dx;
}

inline Mat relu_forward(const Mat& x) {
  Mat y = x;
  for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

/// `pre` is the ReLU input.
inline Mat relu_backward(const Mat& pre, const Mat& dy) {
  Mat dx = dy;
  for (std::size_t i = 0; i < dx.data.size(); ++i)
    if (pre.data[i] <= 0.0) dx.data[i] = 0.0;
  return dx;
}

/// Multi-head scaled dot-product attention on already-projected Q, K, V.
/// Query row i sits at absolute position `q_offset + i`; with `causal` set it
/// may only attend to key rows j <= q_offset + i.
struct AttentionCache {
  std::vector<Mat> probs;  // per head, nq × nk
};

inline Mat attention_forward(const Mat& q, const Mat& k, const Mat& v, std::size_t n_heads, bool causal,
                             std::size_t q_offset, AttentionCache* cache = nullptr) {
  const std::size_t d = q.cols;
  if (k.cols != d || v.cols != d || k.rows != v.rows) throw DimensionError("attention: Q/K/V shape mismatch");
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("attention: head count must divide width");
  const std::size_t dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat out(q.rows, d);
  if (cache) cache->probs.assign(n_heads, Mat(q.rows, k.rows));
  std::vector<double> p(k.rows);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < q.rows; ++i) {
      const std::size_t limit = causal ? std::min(k.rows, q_offset + i + 1) : k.rows;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < limit; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q(i, off + c) * k(j, off + c);
        p[j] = s * scale;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < limit; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < limit; ++j) {
        p[j] /= z;
        if (cache) cache->probs[h](i, j) = p[j];
        for (std::size_t c = 0; c < dh; ++c) out(i, off + c) += p[j] * v(j, off + c);
      }
    }
  }
  return out;
}

struct AttentionGrads {
  Mat dq, dk, dv;
};

inline AttentionGrads attention_backward(const Mat& q, const Mat& k, const Mat& v, std::size_t n_heads,
                                         const AttentionCache& cache, const Mat& dout) {
  const std::size_t d = q.cols;
  const std::size_t dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionGrads g{Mat(q.rows, d), Mat(k.rows, d), Mat(v.rows, d)};
  std::vector<double> dp(k.rows);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    const Mat& p = cache.probs[h];
    for (std::size_t i = 0; i < q.rows; ++i) {
      double rowdot = 0.0;
      for (std::size_t j = 0; j < k.rows; ++j) {
        const double pij = p(i, j);
        if (pij == 0.0) {
          dp[j] = 0.0;
          continue;
        }
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) {
          acc += dout(i, off + c) * v(j, off + c);
          g.dv(j, off + c) += pij * dout(i, off + c);
        }
        dp[j] = acc;
        rowdot += acc * pij;
      }
      for (std::size_t j = 0; j < k.rows; ++j) {
        const double pij = p(i, j);
        if (pij == 0.0) continue;
        const double ds = pij * (dp[j] - rowdot) * scale;
        for (std::size_t c = 0; c < dh; ++c) {
          g.dq(i, off + c) += ds * k(j, off + c);
          g.dk(j, off + c) += ds * q(i, off + c);
        }
      }
    }
  }
  return g;
}

inline void add_inplace(Mat& a, const Mat& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw DimensionError("add_inplace: shape mismatch");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

/// Collects every parameter block of `params` as a span, in visiting order.
template <class P>
std::vector<std::span<double>> param_spans(P& params) {
  std::vector<std::span<double>> out;
  visit_params(params, std::string{}, [&](const std::string&, std::size_t, std::size_t, std::span<double> s) {
    out.push_back(s);
  });
  return out;
}

template <class P>
void zero_grads(P& grads) {
  for (auto s : param_spans(grads)) std::fill(s.begin(), s.end(), 0.0);
}

template <class P>
void adam_step(Adam& opt, P& params, P& grads) {
  auto ps = param_spans(params);
  auto gs = param_spans(grads);
  opt.begin_step();
  for (std::size_t i = 0; i < ps.size(); ++i) opt.update(ps[i], gs[i]);
}

/// Order-sensitive FNV-1a checksum over every parameter's bit pattern.
template <class P>
std::uint64_t checksum(const P& params) {
  std::uint64_t h = 1469598103934665603ULL;
  visit_params(params, std::string{}, [&](const std::string&, std::size_t, std::size_t, std::span<const double> s) {
    for (double x : s) {
      std::uint64_t bits;
      std::memcpy(&bits, &x, sizeof bits);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffu;
        h *= 1099511628211ULL;
      }
    }
  });
  return h;
}

template <class P>
std::size_t param_count(const P& params) {
  std::size_t n = 0;
  visit_params(params, std::string{}, [&](const std::string&, std::size_t, std::size_t, std::span<const double> s) {
    n += s.size();
  });
  return n;
}

}  // namespace pguard::nn
