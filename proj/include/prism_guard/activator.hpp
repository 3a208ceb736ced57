#pragma once

// Low-rank activators. Each activator i holds A_i (r×d), B_i (d×r) and a
// signal vector v_i; its signal on a hidden state h is
//
//   s_i(h) = sigmoid(v_i · (B_i A_i h))
//
// The low-rank product is never folded into base-model weights: it only feeds
// the signal and the regularization losses below.

#include <cmath>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "nn.hpp"
#include "numerics.hpp"

namespace pguard {

struct ActivatorParams {
  Mat A;  // r × d
  Mat B;  // d × r
  Vec v;  // d
  std::size_t index = 0;

  ActivatorParams() = default;
  ActivatorParams(std::size_t d, std::size_t r, std::size_t idx = 0) : A(r, d), B(d, r), v(d), index(idx) {
    if (r == 0 || d == 0) throw std::invalid_argument("activator: rank and width must be positive");
    if (r > d) throw std::invalid_argument("activator: rank exceeds width");
  }

  std::size_t dim() const { return A.cols; }
  std::size_t rank() const { return A.rows; }
};

template <class P, class F>
  requires nn::SameAs<P, ActivatorParams>
void visit_params(P& p, const std::string& prefix, F&& f) {
  const auto i = std::to_string(p.index);
  f(nn::join(prefix, "A_" + i), p.A.rows, p.A.cols, p.A.span());
  f(nn::join(prefix, "B_" + i), p.B.rows, p.B.cols, p.B.span());
  f(nn::join(prefix, "v_" + i), std::size_t{1}, p.v.dim(), p.v.span());
}

struct ActivatorBank {
  std::vector<ActivatorParams> activators;

  std::size_t size() const { return activators.size(); }
  std::size_t dim() const { return activators.empty() ? 0 : activators.front().dim(); }
  std::size_t rank() const { return activators.empty() ? 0 : activators.front().rank(); }

  void validate() const {
    if (activators.empty()) throw std::invalid_argument("activator bank is empty");
    for (const auto& a : activators)
      if (a.dim() != dim() || a.B.rows != dim() || a.v.dim() != dim() || a.B.cols != a.rank())
        throw DimensionError("activator bank: inconsistent shapes");
  }

  /// Zero-filled bank with the same shapes, used as a gradient accumulator.
  ActivatorBank zeros_like() const {
    ActivatorBank z;
    for (const auto& a : activators) z.activators.emplace_back(a.dim(), a.rank(), a.index);
    return z;
  }
};

template <class P, class F>
  requires nn::SameAs<P, ActivatorBank>
void visit_params(P& bank, const std::string& prefix, F&& f) {
  for (auto& a : bank.activators) visit_params(a, prefix, f);
}

/// ΔW·h = B(Ah), computed without forming the d×d product.
inline Vec low_rank_delta(const ActivatorParams& p, std::span<const double> h) {
  if (h.size() != p.dim()) throw DimensionError("activator: hidden state has dim " + std::to_string(h.size()) +
                                                ", activator expects " + std::to_string(p.dim()));
  return matvec(p.B, matvec(p.A, h));
}

inline double pre_signal(const ActivatorParams& p, std::span<const double> h) {
  return dot(p.v.span(), low_rank_delta(p, h).span());
}

inline double activation_signal(const ActivatorParams& p, std::span<const double> h) {
  return sigmoid(pre_signal(p, h));
}
inline double activation_signal(const ActivatorParams& p, const Vec& h) { return activation_signal(p, h.span()); }

/// Per-activator signals for one hidden state.
inline std::vector<double> bank_signals(const ActivatorBank& bank, std::span<const double> h) {
  std::vector<double> s;
  s.reserve(bank.size());
  for (const auto& a : bank.activators) s.push_back(activation_signal(a, h));
  return s;
}

/// Aggregate signal: mean of the per-activator signals.
inline double bank_signal(const ActivatorBank& bank, std::span<const double> h) {
  const auto s = bank_signals(bank, h);
  double acc = 0.0;
  for (double x : s) acc += x;
  return acc / static_cast<double>(s.size());
}

namespace detail {

/// Backpropagates dL/du (u = B A h) into the A and B gradients.
inline void backprop_delta(const ActivatorParams& p, std::span<const double> h, std::span<const double> a,
                           std::span<const double> g_u, ActivatorParams& g) {
  add_outer(g.B, g_u, a);
  const Vec g_a = matvec_t(p.B, g_u);
  add_outer(g.A, g_a.span(), h);
}

inline void require_batch(const std::vector<Vec>& xs, const char* what) {
  if (xs.empty()) throw std::invalid_argument(std::string(what) + ": empty batch");
}

}  // namespace detail

/// Adversarial regularization: mean over activators and adversarial states of
/// ReLU(cos(h, ΔW_i h)).
inline double loss_ar(const ActivatorBank& bank, const std::vector<Vec>& adv, ActivatorBank* grads = nullptr,
                      double scale = 1.0) {
  detail::require_batch(adv, "loss_ar");
  bank.validate();
  const double w = 1.0 / (static_cast<double>(bank.size()) * static_cast<double>(adv.size()));
  double total = 0.0;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto& p = bank.activators[i];
    for (const auto& h : adv) {
      const Vec a = matvec(p.A, h);
      const Vec u = matvec(p.B, a);
      const double c = cosine_sim(h, u);
      if (c <= 0.0) continue;
      total += c;
      if (!grads) continue;
      // d cos / du = h / (|h||u|) - cos · u / |u|²
      const double nh = norm(h.span());
      const double nu = norm(u.span());
      Vec g_u(u.dim());
      for (std::size_t k = 0; k < u.dim(); ++k) g_u[k] = scale * w * (h[k] / (nh * nu) - c * u[k] / (nu * nu));
      detail::backprop_delta(p, h.span(), a.span(), g_u.span(), grads->activators[i]);
    }
  }
  return total * w;
}

/// Retention: mean over activators and benign states of ‖ΔW_i h‖².
inline double loss_retain(const ActivatorBank& bank, const std::vector<Vec>& benign, ActivatorBank* grads = nullptr,
                          double scale = 1.0) {
  detail::require_batch(benign, "loss_retain");
  bank.validate();
  const double w = 1.0 / (static_cast<double>(bank.size()) * static_cast<double>(benign.size()));
  double total = 0.0;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto& p = bank.activators[i];
    for (const auto& h : benign) {
      const Vec a = matvec(p.A, h);
      const Vec u = matvec(p.B, a);
      total += dot(u.span(), u.span());
      if (!grads) continue;
      Vec g_u = u;
      for (auto& x : g_u.data) x *= 2.0 * scale * w;
      detail::backprop_delta(p, h.span(), a.span(), g_u.span(), grads->activators[i]);
    }
  }
  return total * w;
}

/// Binary cross-entropy written on the logit: BCE(sigmoid(z), y).
inline double bce_logit(double z, double y) { return y * softplus(-z) + (1.0 - y) * softplus(z); }

/// Signal loss: per activator, mean BCE(s, 0) over benign plus mean BCE(s, 1)
/// over adversarial states; averaged over activators.
///
/// `grads` receives dL/dv always, and dL/dA, dL/dB only when `into_low_rank`.
inline double loss_signal(const ActivatorBank& bank, const std::vector<Vec>& benign, const std::vector<Vec>& adv,
                          ActivatorBank* grads = nullptr, double scale = 1.0, bool into_low_rank = true) {
  detail::require_batch(benign, "loss_signal");
  detail::require_batch(adv, "loss_signal");
  bank.validate();
  const double n_act = static_cast<double>(bank.size());
  double total = 0.0;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto& p = bank.activators[i];
    auto side = [&](const std::vector<Vec>& xs, double y) {
      const double w = 1.0 / (n_act * static_cast<double>(xs.size()));
      double acc = 0.0;
      for (const auto& h : xs) {
        const Vec a = matvec(p.A, h);
        const Vec u = matvec(p.B, a);
        const double z = dot(p.v.span(), u.span());
        acc += bce_logit(z, y);
        if (!grads) continue;
        const double dz = scale * w * (sigmoid(z) - y);
        auto& g = grads->activators[i];
        for (std::size_t k = 0; k < u.dim(); ++k) g.v[k] += dz * u[k];
        if (into_low_rank) {
          Vec g_u = p.v;
          for (auto& x : g_u.data) x *= dz;
          detail::backprop_delta(p, h.span(), a.span(), g_u.span(), g);
        }
      }
      return acc * w;
    };
    total += side(benign, 0.0);
    total += side(adv, 1.0);
  }
  return total;
}

struct ScheduleConfig {
  double alpha = 1.0;
  std::size_t total_steps = 2000;  // T
};

struct ScheduleCoeffs {
  double ar;
  double retain;
};

/// c_ar = α(1 − t/2T), c_retain = α·t/2T.
inline ScheduleCoeffs schedule_coeffs(std::size_t t, const ScheduleConfig& cfg) {
  if (!(cfg.alpha > 0.0)) throw std::invalid_argument("schedule: need alpha > 0");
  if (t > cfg.total_steps) throw std::out_of_range("schedule: step " + std::to_string(t) + " beyond T");
  // T = 0 only admits t = 0, which is the start of the schedule.
  const double frac = t == 0 ? 0.0 : static_cast<double>(t) / (2.0 * static_cast<double>(cfg.total_steps));
  return {cfg.alpha * (1.0 - frac), cfg.alpha * frac};
}

inline ActivatorBank init_activator_bank(std::size_t n_act, std::size_t d, std::size_t r, Rng& rng,
                                         double b_init_std = 0.02, double v_init_std = 0.02) {
  if (n_act == 0) throw std::invalid_argument("activator bank needs at least one activator");
  if (r == 0 || r > d / 2)
    throw std::invalid_argument("activator rank " + std::to_string(r) + " must lie in [1, d/2] for d = " +
                                std::to_string(d));
  ActivatorBank bank;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < n_act; ++i) {
    ActivatorParams p(d, r, i);
    fill_uniform(p.A.span(), rng, -bound, bound);
    fill_normal(p.B.span(), rng, b_init_std);
    fill_normal(p.v.span(), rng, v_init_std);
    bank.activators.push_back(std::move(p));
  }
  return bank;
}

struct ActivatorTrainConfig {
  ScheduleConfig schedule;
  AdamConfig optim{};  // lr 1e-3
  std::size_t batch_size = 64;
  std::size_t log_every = 100;
  bool signal_grad_to_low_rank = true;
};

struct ActivatorLossRecord {
  std::size_t step;
  double c_ar, c_retain;
  double ar, retain, signal;
  double total;
};

struct ActivatorTrainResult {
  ActivatorBank bank;
  std::vector<ActivatorLossRecord> history;  // full-set losses; front is step 0, back is step T
};

inline ActivatorLossRecord evaluate_activator_losses(const ActivatorBank& bank, const std::vector<Vec>& benign,
                                                     const std::vector<Vec>& adv, std::size_t step,
                                                     const ScheduleConfig& sched) {
  const auto c = schedule_coeffs(step, sched);
  ActivatorLossRecord r{step, c.ar, c.retain, loss_ar(bank, adv), loss_retain(bank, benign),
                        loss_signal(bank, benign, adv), 0.0};
  r.total = c.ar * r.ar + c.retain * r.retain + r.signal;
  return r;
}

/// Trains the bank on precomputed hidden states.
///
/// Two parameter groups with separate optimizer state: the low-rank factors
/// minimize c_ar·L_AR + c_retain·L_retain (+ L_signal when
/// `signal_grad_to_low_rank`), and the signal vectors minimize L_signal.
inline ActivatorTrainResult train_activators(ActivatorBank bank, const std::vector<Vec>& benign,
                                             const std::vector<Vec>& adv, const ActivatorTrainConfig& cfg, Rng& rng) {
  detail::require_batch(benign, "train_activators");
  detail::require_batch(adv, "train_activators");
  bank.validate();
  for (const auto* set : {&benign, &adv})
    for (const auto& h : *set)
      if (h.dim() != bank.dim()) throw DimensionError("train_activators: representation width mismatch");

  const auto& sched = cfg.schedule;
  ActivatorTrainResult res;
  res.history.push_back(evaluate_activator_losses(bank, benign, adv, 0, sched));

  Adam opt_low_rank(cfg.optim);
  Adam opt_signal(cfg.optim);
  const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
  std::vector<Vec> bb, ab;
  for (std::size_t t = 0; t < sched.total_steps; ++t) {
    bb.clear();
    ab.clear();
    for (std::size_t k = 0; k < bs; ++k) bb.push_back(benign[rng.below(benign.size())]);
    for (std::size_t k = 0; k < bs; ++k) ab.push_back(adv[rng.below(adv.size())]);

    const auto c = schedule_coeffs(t, sched);
    ActivatorBank g_low = bank.zeros_like();
    ActivatorBank g_sig = bank.zeros_like();
    double total = c.ar * loss_ar(bank, ab, &g_low, c.ar);
    total += c.retain * loss_retain(bank, bb, &g_low, c.retain);
    // g_sig carries dL_signal for every block; only its v part drives the
    // signal group, its A/B part joins the low-rank group when enabled.
    total += loss_signal(bank, bb, ab, &g_sig, 1.0, cfg.signal_grad_to_low_rank);
    for (std::size_t i = 0; i < bank.size(); ++i) {
      auto& gl = g_low.activators[i];
      const auto& gs = g_sig.activators[i];
      for (std::size_t k = 0; k < gl.A.data.size(); ++k) gl.A.data[k] += gs.A.data[k];
      for (std::size_t k = 0; k < gl.B.data.size(); ++k) gl.B.data[k] += gs.B.data[k];
    }
    if (!std::isfinite(total)) throw NumericalError("train_activators: non-finite loss at step " + std::to_string(t));

    opt_low_rank.begin_step();
    opt_signal.begin_step();
    for (std::size_t i = 0; i < bank.size(); ++i) {
      auto& p = bank.activators[i];
      opt_low_rank.update(p.A.span(), g_low.activators[i].A.span());
      opt_low_rank.update(p.B.span(), g_low.activators[i].B.span());
      opt_signal.update(p.v.span(), g_sig.activators[i].v.span());
    }
    const std::size_t done = t + 1;
    if (done == sched.total_steps || (cfg.log_every > 0 && done % cfg.log_every == 0))
      res.history.push_back(evaluate_activator_losses(bank, benign, adv, done, sched));
  }
  res.bank = std::move(bank);
  return res;
}

inline Checkpoint to_checkpoint(const ActivatorBank& bank) {
  bank.validate();
  Checkpoint ck;
  ck.kind = CheckpointKind::ActivatorBank;
  ck.dims = {bank.size(), bank.dim(), bank.rank()};
  add_params(ck, bank);
  ck.add_scalar("r", static_cast<double>(bank.rank()));
  ck.add_scalar("N_act", static_cast<double>(bank.size()));
  return ck;
}

inline ActivatorBank activator_bank_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != CheckpointKind::ActivatorBank || ck.dims.size() != 3)
    throw CheckpointError("not an activator checkpoint");
  const auto n_act = static_cast<std::size_t>(ck.scalar("N_act"));
  const auto r = static_cast<std::size_t>(ck.scalar("r"));
  if (n_act != ck.dims[0] || r != ck.dims[2]) throw CheckpointError("activator checkpoint header disagrees with sections");
  ActivatorBank bank;
  for (std::size_t i = 0; i < n_act; ++i) bank.activators.emplace_back(ck.dims[1], r, i);
  read_params(ck, bank);
  return bank;
}

}  // namespace pguard
