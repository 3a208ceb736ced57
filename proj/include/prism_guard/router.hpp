#pragma once

// Token router: a one-layer transformer encoder over the 2k+1 hidden states
// around a token, read out at the window center and squashed to a
// harmfulness score in (0, 1). Trained with focal loss on token labels.

#include <cmath>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "nn.hpp"
#include "numerics.hpp"

namespace pguard {

struct RouterConfig {
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t ffn_dim = 128;  // 4·d_model at desk scale
  std::size_t window = 8;     // k: tokens of context on each side

  std::size_t slots() const { return 2 * window + 1; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || ffn_dim == 0) throw std::invalid_argument("RouterConfig: sizes must be positive");
    if (d_model % n_heads != 0) throw std::invalid_argument("RouterConfig: n_heads must divide d_model");
  }
};

struct FocalConfig {
  double gamma = 2.0;
};

struct RouterParams {
  RouterConfig config;
  Mat pos_emb;  // one learned row per window slot
  nn::Linear wq, wk, wv, wo;
  nn::LayerNorm ln1;
  nn::Linear fc1, fc2;
  nn::LayerNorm ln2;
  nn::Linear head;  // d → 1

  RouterParams() = default;
  explicit RouterParams(const RouterConfig& cfg)
      : config(cfg),
        pos_emb(cfg.slots(), cfg.d_model),
        wq(cfg.d_model, cfg.d_model),
        wk(cfg.d_model, cfg.d_model),
        wv(cfg.d_model, cfg.d_model),
        wo(cfg.d_model, cfg.d_model),
        ln1(cfg.d_model),
        fc1(cfg.d_model, cfg.ffn_dim),
        fc2(cfg.ffn_dim, cfg.d_model),
        ln2(cfg.d_model),
        head(cfg.d_model, 1) {
    cfg.validate();
  }
};

template <class P, class F>
  requires nn::SameAs<P, RouterParams>
void visit_params(P& p, const std::string& prefix, F&& f) {
  using nn::join;
  f(join(prefix, "encoder.pos_emb"), p.pos_emb.rows, p.pos_emb.cols, p.pos_emb.span());
  visit_params(p.wq, join(prefix, "encoder.wq"), f);
  visit_params(p.wk, join(prefix, "encoder.wk"), f);
  visit_params(p.wv, join(prefix, "encoder.wv"), f);
  visit_params(p.wo, join(prefix, "encoder.wo"), f);
  visit_params(p.ln1, join(prefix, "encoder.ln1"), f);
  visit_params(p.fc1, join(prefix, "encoder.fc1"), f);
  visit_params(p.fc2, join(prefix, "encoder.fc2"), f);
  visit_params(p.ln2, join(prefix, "encoder.ln2"), f);
  visit_params(p.head, join(prefix, "head"), f);
}

inline RouterParams init_router(const RouterConfig& cfg, Rng& rng) {
  RouterParams p(cfg);
  fill_normal(p.pos_emb.span(), rng, 0.02);
  for (auto* l : {&p.wq, &p.wk, &p.wv, &p.wo, &p.fc1, &p.fc2, &p.head}) l->init(rng);
  return p;
}

/// Hidden states at positions j−k … j+k; positions outside the sequence are
/// zero vectors.
inline std::vector<Vec> window(const std::vector<Vec>& hidden, std::size_t j, std::size_t k) {
  if (j >= hidden.size())
    throw std::out_of_range("window: position " + std::to_string(j) + " outside sequence of length " +
                            std::to_string(hidden.size()));
  const std::size_t d = hidden[j].dim();
  std::vector<Vec> out;
  out.reserve(2 * k + 1);
  for (std::size_t s = 0; s < 2 * k + 1; ++s) {
    const auto pos = static_cast<std::ptrdiff_t>(j + s) - static_cast<std::ptrdiff_t>(k);
    if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(hidden.size()))
      out.emplace_back(d);
    else
      out.push_back(hidden[static_cast<std::size_t>(pos)]);
  }
  return out;
}

namespace detail {

struct RouterCache {
  Mat x, xc, q, k, v, att;
  nn::AttentionCache attn;
  Mat y1pre, y1, f1, r, y2;
  nn::LayerNormCache ln1, ln2;
};

}  // namespace detail

struct RouterForward {
  double logit;
  Vec center_encoding;
};

inline RouterForward router_forward(const RouterParams& p, const std::vector<Vec>& win,
                                    detail::RouterCache* cache = nullptr) {
  const auto& cfg = p.config;
  if (win.size() != cfg.slots())
    throw DimensionError("router: window has " + std::to_string(win.size()) + " slots, expected " +
                         std::to_string(cfg.slots()));
  detail::RouterCache local;
  auto& c = cache ? *cache : local;
  c.x = Mat(cfg.slots(), cfg.d_model);
  for (std::size_t s = 0; s < cfg.slots(); ++s) {
    if (win[s].dim() != cfg.d_model)
      throw DimensionError("router: window vector has dim " + std::to_string(win[s].dim()) + ", expected " +
                           std::to_string(cfg.d_model));
    for (std::size_t d = 0; d < cfg.d_model; ++d) c.x(s, d) = win[s][d] + p.pos_emb(s, d);
  }
  // Only the center query matters for the readout.
  c.xc = Mat(1, cfg.d_model);
  for (std::size_t d = 0; d < cfg.d_model; ++d) c.xc(0, d) = c.x(cfg.window, d);
  c.q = nn::linear_forward(p.wq, c.xc);
  c.k = nn::linear_forward(p.wk, c.x);
  c.v = nn::linear_forward(p.wv, c.x);
  c.att = nn::attention_forward(c.q, c.k, c.v, cfg.n_heads, false, 0, &c.attn);
  c.y1pre = c.xc;
  nn::add_inplace(c.y1pre, nn::linear_forward(p.wo, c.att));
  c.y1 = nn::layernorm_forward(p.ln1, c.y1pre, &c.ln1);
  c.f1 = nn::linear_forward(p.fc1, c.y1);
  c.r = nn::relu_forward(c.f1);
  Mat y2pre = c.y1;
  nn::add_inplace(y2pre, nn::linear_forward(p.fc2, c.r));
  c.y2 = nn::layernorm_forward(p.ln2, y2pre, &c.ln2);
  const Mat logit = nn::linear_forward(p.head, c.y2);
  return {logit(0, 0), Vec(std::vector<double>(c.y2.data))};
}

/// Accumulates dL/dparams for an upstream gradient on the logit.
inline void router_backward(const RouterParams& p, const detail::RouterCache& c, double dlogit, RouterParams& g) {
  const auto& cfg = p.config;
  Mat dl(1, 1);
  dl(0, 0) = dlogit;
  Mat dy2 = nn::linear_backward(p.head, c.y2, dl, g.head);
  Mat dy2pre = nn::layernorm_backward(p.ln2, c.ln2, dy2, g.ln2);
  Mat dy1 = dy2pre;
  Mat dr = nn::linear_backward(p.fc2, c.r, dy2pre, g.fc2);
  nn::add_inplace(dy1, nn::linear_backward(p.fc1, c.y1, nn::relu_backward(c.f1, dr), g.fc1));
  Mat dy1pre = nn::layernorm_backward(p.ln1, c.ln1, dy1, g.ln1);
  Mat dxc = dy1pre;
  Mat datt = nn::linear_backward(p.wo, c.att, dy1pre, g.wo);
  auto ag = nn::attention_backward(c.q, c.k, c.v, cfg.n_heads, c.attn, datt);
  nn::add_inplace(dxc, nn::linear_backward(p.wq, c.xc, ag.dq, g.wq));
  Mat dx = nn::linear_backward(p.wk, c.x, ag.dk, g.wk);
  nn::add_inplace(dx, nn::linear_backward(p.wv, c.x, ag.dv, g.wv));
  for (std::size_t d = 0; d < cfg.d_model; ++d) dx(cfg.window, d) += dxc(0, d);
  nn::add_inplace(g.pos_emb, dx);
}

inline double router_score(const RouterParams& p, const std::vector<Vec>& win) {
  return sigmoid(router_forward(p, win).logit);
}

inline constexpr double kProbClamp = 1e-12;

/// Per-token focal loss on a probability; p is clamped to [1e-12, 1 − 1e-12].
inline double focal_loss(double p, int y, const FocalConfig& cfg) {
  if (y != 0 && y != 1) throw std::invalid_argument("focal_loss: label must be 0 or 1");
  p = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  if (y == 1) return std::pow(1.0 - p, cfg.gamma) * -std::log(p);
  return std::pow(p, cfg.gamma) * -std::log(1.0 - p);
}

/// Mean focal loss over a batch of (probability, label) pairs.
inline double focal_loss(std::span<const double> p, std::span<const int> y, const FocalConfig& cfg) {
  if (p.size() != y.size() || p.empty()) throw std::invalid_argument("focal_loss: batch size mismatch or empty");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += focal_loss(p[i], y[i], cfg);
  return acc / static_cast<double>(p.size());
}

/// Focal loss on a logit with its derivative; logs go through softplus so
/// saturated logits stay finite.
inline std::pair<double, double> focal_loss_logit(double z, int y, const FocalConfig& cfg) {
  const double p = sigmoid(z);
  const double g = cfg.gamma;
  if (y == 1) {
    const double logp = -softplus(-z);
    const double m = std::pow(1.0 - p, g);
    return {-m * logp, g * p * m * logp - m * (1.0 - p)};
  }
  const double log1mp = -softplus(z);
  const double m = std::pow(p, g);
  return {-m * log1mp, -g * m * (1.0 - p) * log1mp + m * p};
}

/// One training sequence: hidden states at the tap layer and a binary label
/// per token (IOB B/I ↦ 1, O ↦ 0).
struct TokenLabeledHidden {
  std::vector<Vec> hidden;
  std::vector<int> labels;
};

struct RouterTrainConfig {
  FocalConfig focal{};
  AdamConfig optim{};
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  double right_truncate_prob = 0.5;  // share of windows trained with the future zeroed
  std::size_t log_every = 100;
  std::size_t eval_tokens = 512;
};

struct RouterTrainResult {
  RouterParams params;
  std::vector<double> loss_history;  // front: before training; back: after the last step
};

/// Mean focal loss over explicit (sequence, position) pairs with full windows.
inline double router_dataset_loss(const RouterParams& p, const std::vector<TokenLabeledHidden>& data,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& tokens,
                                  const FocalConfig& focal) {
  double acc = 0.0;
  for (auto [s, j] : tokens)
    acc += focal_loss_logit(router_forward(p, window(data[s].hidden, j, p.config.window)).logit, data[s].labels[j], focal)
               .first;
  return acc / static_cast<double>(tokens.size());
}

inline RouterTrainResult train_router(RouterParams params, const std::vector<TokenLabeledHidden>& data,
                                      const RouterTrainConfig& cfg, Rng& rng) {
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t s = 0; s < data.size(); ++s) {
    if (data[s].hidden.size() != data[s].labels.size())
      throw std::invalid_argument("train_router: sequence " + std::to_string(s) + " has " +
                                  std::to_string(data[s].hidden.size()) + " states but " +
                                  std::to_string(data[s].labels.size()) + " labels");
    for (std::size_t j = 0; j < data[s].hidden.size(); ++j) {
      if (data[s].labels[j] != 0 && data[s].labels[j] != 1)
        throw std::invalid_argument("train_router: labels must be 0 or 1");
      if (data[s].hidden[j].dim() != params.config.d_model)
        throw DimensionError("train_router: hidden width does not match router");
      all.emplace_back(s, j);
    }
  }
  if (all.empty()) throw std::invalid_argument("train_router: no labeled tokens");

  // Fixed evaluation sample, spread evenly over the token list.
  std::vector<std::pair<std::size_t, std::size_t>> eval;
  const std::size_t n_eval = std::min(cfg.eval_tokens, all.size());
  for (std::size_t i = 0; i < n_eval; ++i) eval.push_back(all[i * all.size() / n_eval]);

  RouterTrainResult res;
  res.loss_history.push_back(router_dataset_loss(params, data, eval, cfg.focal));
  RouterParams grads(params.config);
  Adam opt(cfg.optim);
  const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
  detail::RouterCache cache;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    nn::zero_grads(grads);
    double loss = 0.0;
    for (std::size_t b = 0; b < bs; ++b) {
      const auto [s, j] = all[rng.below(all.size())];
      const auto& seq = data[s];
      std::vector<Vec> win = window(seq.hidden, j, params.config.window);
      if (rng.bernoulli(cfg.right_truncate_prob))
        for (std::size_t slot = params.config.window + 1; slot < win.size(); ++slot)
          std::fill(win[slot].data.begin(), win[slot].data.end(), 0.0);
      const auto fw = router_forward(params, win, &cache);
      const auto [l, dz] = focal_loss_logit(fw.logit, seq.labels[j], cfg.focal);
      loss += l / static_cast<double>(bs);
      router_backward(params, cache, dz / static_cast<double>(bs), grads);
    }
    if (!std::isfinite(loss)) throw NumericalError("train_router: non-finite loss at step " + std::to_string(step));
    nn::adam_step(opt, params, grads);
    if (step == cfg.steps || (cfg.log_every > 0 && step % cfg.log_every == 0))
      res.loss_history.push_back(router_dataset_loss(params, data, eval, cfg.focal));
  }
  res.params = std::move(params);
  return res;
}

inline Checkpoint to_checkpoint(const RouterParams& p, const FocalConfig& focal) {
  const auto& c = p.config;
  Checkpoint ck;
  ck.kind = CheckpointKind::Router;
  ck.dims = {c.d_model, c.n_heads, c.ffn_dim, c.window};
  add_params(ck, p);
  ck.add_scalar("k", static_cast<double>(c.window));
  ck.add_scalar("gamma", focal.gamma);
  return ck;
}

inline std::pair<RouterParams, FocalConfig> router_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != CheckpointKind::Router || ck.dims.size() != 4) throw CheckpointError("not a router checkpoint");
  RouterConfig c{ck.dims[0], ck.dims[1], ck.dims[2], ck.dims[3]};
  if (static_cast<std::size_t>(ck.scalar("k")) != c.window) throw CheckpointError("router checkpoint: k disagrees");
  RouterParams p(c);
  read_params(ck, p);
  return {std::move(p), FocalConfig{ck.scalar("gamma")}};
}

}  // namespace pguard
