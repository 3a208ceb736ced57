#pragma once

// Frozen base model: a small pre-LN decoder-only transformer that exposes the
// residual stream after a chosen layer, plus a trace-replay stub with the same
// interface for scripted tests.

#include <concepts>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "nn.hpp"
#include "numerics.hpp"
#include "tokenizer.hpp"

namespace pguard {

/// Anything that yields per-position hidden states and a greedy next token.
template <class M>
concept HiddenStateModel = requires(const M& m, std::span<const TokenId> toks) {
  { m.forward_hidden(toks) } -> std::same_as<std::vector<Vec>>;
  { m.next_token_argmax(toks) } -> std::same_as<TokenId>;
  { m.d_model() } -> std::convertible_to<std::size_t>;
  { m.max_seq_len() } -> std::convertible_to<std::size_t>;
  { m.eos_token() } -> std::convertible_to<TokenId>;
};

/// Index of the largest logit; the lowest index wins ties.
inline TokenId argmax_token(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("argmax over empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<TokenId>(best);
}

struct TinyLmConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 32;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t max_seq_len = 96;
  std::size_t tap_layer = 3;  // 1-based; hidden = residual stream after this block

  void validate() const {
    if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || ffn_dim == 0 || max_seq_len == 0)
      throw std::invalid_argument("TinyLmConfig: all sizes must be positive");
    if (d_model % n_heads != 0) throw std::invalid_argument("TinyLmConfig: n_heads must divide d_model");
    if (tap_layer < 1 || tap_layer > n_layers) throw std::invalid_argument("TinyLmConfig: tap_layer out of range");
  }
};

struct DecoderBlock {
  nn::LayerNorm ln1, ln2;
  nn::Linear wq, wk, wv, wo;
  nn::Linear fc1, fc2;

  DecoderBlock() = default;
  DecoderBlock(std::size_t d, std::size_t ffn)
      : ln1(d), ln2(d), wq(d, d), wk(d, d), wv(d, d), wo(d, d), fc1(d, ffn), fc2(ffn, d) {}
};

template <class B, class F>
  requires nn::SameAs<B, DecoderBlock>
void visit_params(B& b, const std::string& prefix, F&& f) {
  using nn::join;
  visit_params(b.ln1, join(prefix, "ln1"), f);
  visit_params(b.wq, join(prefix, "wq"), f);
  visit_params(b.wk, join(prefix, "wk"), f);
  visit_params(b.wv, join(prefix, "wv"), f);
  visit_params(b.wo, join(prefix, "wo"), f);
  visit_params(b.ln2, join(prefix, "ln2"), f);
  visit_params(b.fc1, join(prefix, "fc1"), f);
  visit_params(b.fc2, join(prefix, "fc2"), f);
}

struct TinyLmParams {
  TinyLmConfig config;
  Mat tok_emb;
  Mat pos_emb;
  std::vector<DecoderBlock> blocks;
  nn::LayerNorm ln_f;
  nn::Linear head;

  TinyLmParams() = default;
  explicit TinyLmParams(const TinyLmConfig& cfg)
      : config(cfg),
        tok_emb(cfg.vocab_size, cfg.d_model),
        pos_emb(cfg.max_seq_len, cfg.d_model),
        blocks(cfg.n_layers, DecoderBlock(cfg.d_model, cfg.ffn_dim)),
        ln_f(cfg.d_model),
        head(cfg.d_model, cfg.vocab_size) {
    cfg.validate();
  }
};

template <class P, class F>
  requires nn::SameAs<P, TinyLmParams>
void visit_params(P& p, const std::string& prefix, F&& f) {
  using nn::join;
  f(join(prefix, "tok_emb"), p.tok_emb.rows, p.tok_emb.cols, p.tok_emb.span());
  f(join(prefix, "pos_emb"), p.pos_emb.rows, p.pos_emb.cols, p.pos_emb.span());
  for (std::size_t l = 0; l < p.blocks.size(); ++l) visit_params(p.blocks[l], join(prefix, "block" + std::to_string(l)), f);
  visit_params(p.ln_f, join(prefix, "ln_f"), f);
  visit_params(p.head, join(prefix, "head"), f);
}

namespace detail {

struct BlockCache {
  Mat x_in, a, q, k, v, att, x_mid, b, f1, r;
  nn::LayerNormCache ln1, ln2;
  nn::AttentionCache attn;
};

struct LmCache {
  std::vector<TokenId> tokens;
  std::vector<BlockCache> blocks;
  Mat x_final;
  nn::LayerNormCache ln_f;
  Mat normed;
};

}  // namespace detail

struct LmOutput {
  std::vector<Vec> hidden;  // at tap_layer, one per position
  Mat logits;               // positions × vocab; empty unless requested
};

inline LmOutput lm_forward(const TinyLmParams& p, std::span<const TokenId> tokens, bool want_logits,
                    detail::LmCache* cache = nullptr);

/// Mean next-token cross-entropy over a sequence; accumulates parameter
/// gradients into `grads`, scaled by `weight`, when given.
inline double lm_loss_and_grad(const TinyLmParams& p, std::span<const TokenId> tokens, TinyLmParams* grads,
                        double weight = 1.0);

/// Frozen decoder-only transformer. All member functions are const.
class TinyLm {
 public:
  TinyLm() = default;
  explicit TinyLm(TinyLmParams params) : p_(std::move(params)) { p_.config.validate(); }

  const TinyLmParams& params() const { return p_; }
  const TinyLmConfig& config() const { return p_.config; }
  std::size_t d_model() const { return p_.config.d_model; }
  std::size_t max_seq_len() const { return p_.config.max_seq_len; }
  std::size_t vocab_size() const { return p_.config.vocab_size; }
  TokenId eos_token() const { return Tokenizer::kEos; }

  LmOutput run(std::span<const TokenId> tokens, bool want_logits = true) const {
    return lm_forward(p_, tokens, want_logits);
  }

  std::vector<Vec> forward_hidden(std::span<const TokenId> tokens) const { return run(tokens, false).hidden; }

  TokenId next_token_argmax(std::span<const TokenId> context) const {
    if (context.empty()) throw std::invalid_argument("next_token_argmax: empty context");
    const auto out = run(context, true);
    return argmax_token(out.logits.row(out.logits.rows - 1));
  }

  /// Greedy continuation of `prompt` until EOS, `max_new` tokens, or the
  /// context limit. The returned tokens exclude the prompt and EOS.
  std::vector<TokenId> generate(std::vector<TokenId> prompt, std::size_t max_new) const {
    std::vector<TokenId> out;
    while (out.size() < max_new && prompt.size() < max_seq_len()) {
      const TokenId t = next_token_argmax(prompt);
      if (t == eos_token()) break;
      out.push_back(t);
      prompt.push_back(t);
    }
    return out;
  }

  double loss(std::span<const TokenId> tokens) const { return lm_loss_and_grad(p_, tokens, nullptr); }

 private:
  TinyLmParams p_;
};

inline LmOutput lm_forward(const TinyLmParams& p_, std::span<const TokenId> tokens, bool want_logits,
                           detail::LmCache* cache) {
  const auto& cfg = p_.config;
  if (tokens.size() > cfg.max_seq_len)
    throw std::length_error("input of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
  for (auto t : tokens)
    if (t >= cfg.vocab_size) throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary");
  const std::size_t n = tokens.size();
  Mat x(n, cfg.d_model);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t c = 0; c < cfg.d_model; ++c) x(t, c) = p_.tok_emb(tokens[t], c) + p_.pos_emb(t, c);

  LmOutput out;
  if (cache) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    cache->blocks.assign(cfg.n_layers, {});
  }
  // Layers after the tap only matter for logits.
  const std::size_t last_layer = want_logits ? cfg.n_layers : cfg.tap_layer;
  for (std::size_t l = 0; l < last_layer; ++l) {
    const auto& blk = p_.blocks[l];
    detail::BlockCache local;
    auto& bc = cache ? cache->blocks[l] : local;
    bc.x_in = x;
    bc.a = nn::layernorm_forward(blk.ln1, x, &bc.ln1);
    bc.q = nn::linear_forward(blk.wq, bc.a);
    bc.k = nn::linear_forward(blk.wk, bc.a);
    bc.v = nn::linear_forward(blk.wv, bc.a);
    bc.att = nn::attention_forward(bc.q, bc.k, bc.v, cfg.n_heads, true, 0, cache ? &bc.attn : nullptr);
    nn::add_inplace(x, nn::linear_forward(blk.wo, bc.att));
    bc.x_mid = x;
    bc.b = nn::layernorm_forward(blk.ln2, x, &bc.ln2);
    bc.f1 = nn::linear_forward(blk.fc1, bc.b);
    bc.r = nn::relu_forward(bc.f1);
    nn::add_inplace(x, nn::linear_forward(blk.fc2, bc.r));
    if (l + 1 == cfg.tap_layer) {
      out.hidden.reserve(n);
      for (std::size_t t = 0; t < n; ++t) out.hidden.emplace_back(std::vector<double>(x.row(t).begin(), x.row(t).end()));
    }
  }
  if (want_logits) {
    nn::LayerNormCache lnc;
    Mat normed = nn::layernorm_forward(p_.ln_f, x, &lnc);
    out.logits = nn::linear_forward(p_.head, normed);
    if (cache) {
      cache->x_final = x;
      cache->ln_f = std::move(lnc);
      cache->normed = std::move(normed);
    }
  }
  return out;
}

inline double lm_loss_and_grad(const TinyLmParams& p_, std::span<const TokenId> tokens, TinyLmParams* grads,
                               double weight) {
  if (tokens.size() < 2) throw std::invalid_argument("loss needs at least two tokens");
  detail::LmCache cache;
  const auto out = lm_forward(p_, tokens, true, grads ? &cache : nullptr);
  const auto& cfg = p_.config;
  const std::size_t n = tokens.size();
  const std::size_t n_pred = n - 1;

  double loss = 0.0;
  Mat dlogits(n, cfg.vocab_size);
  for (std::size_t t = 0; t < n_pred; ++t) {
    const auto row = out.logits.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double logz = mx + std::log(z);
    const TokenId target = tokens[t + 1];
    loss += logz - row[target];
    if (grads) {
      for (std::size_t c = 0; c < cfg.vocab_size; ++c) dlogits(t, c) = std::exp(row[c] - logz) * weight / n_pred;
      dlogits(t, target) -= weight / n_pred;
    }
  }
  loss /= static_cast<double>(n_pred);
  if (!grads) return loss;

  Mat dnormed = nn::linear_backward(p_.head, cache.normed, dlogits, grads->head);
  Mat dx = nn::layernorm_backward(p_.ln_f, cache.ln_f, dnormed, grads->ln_f);
  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    const auto& blk = p_.blocks[l];
    auto& g = grads->blocks[l];
    const auto& bc = cache.blocks[l];
    // x_out = x_mid + fc2(relu(fc1(ln2(x_mid))))
    Mat dr = nn::linear_backward(blk.fc2, bc.r, dx, g.fc2);
    Mat df1 = nn::relu_backward(bc.f1, dr);
    Mat db = nn::linear_backward(blk.fc1, bc.b, df1, g.fc1);
    nn::add_inplace(dx, nn::layernorm_backward(blk.ln2, bc.ln2, db, g.ln2));
    // x_mid = x_in + wo(attn(q, k, v))
    Mat datt = nn::linear_backward(blk.wo, bc.att, dx, g.wo);
    auto ag = nn::attention_backward(bc.q, bc.k, bc.v, cfg.n_heads, bc.attn, datt);
    Mat da = nn::linear_backward(blk.wq, bc.a, ag.dq, g.wq);
    nn::add_inplace(da, nn::linear_backward(blk.wk, bc.a, ag.dk, g.wk));
    nn::add_inplace(da, nn::linear_backward(blk.wv, bc.a, ag.dv, g.wv));
    nn::add_inplace(dx, nn::layernorm_backward(blk.ln1, bc.ln1, da, g.ln1));
  }
  for (std::size_t t = 0; t < n; ++t) {
    auto te = grads->tok_emb.row(tokens[t]);
    auto pe = grads->pos_emb.row(t);
    const auto r = dx.row(t);
    for (std::size_t c = 0; c < cfg.d_model; ++c) {
      te[c] += r[c];
      pe[c] += r[c];
    }
  }
  return loss;
}

inline TinyLmParams init_tiny_lm(const TinyLmConfig& cfg, Rng& rng) {
  TinyLmParams p(cfg);
  fill_normal(p.tok_emb.span(), rng, 0.1);
  fill_normal(p.pos_emb.span(), rng, 0.1);
  for (auto& b : p.blocks) {
    b.wq.init(rng);
    b.wk.init(rng);
    b.wv.init(rng);
    b.wo.init(rng);
    b.fc1.init(rng);
    b.fc2.init(rng);
  }
  p.head.init(rng);
  return p;
}

struct LmTrainConfig {
  std::size_t steps = 400;
  std::size_t batch_size = 8;
  double lr = 3e-3;
  std::size_t log_every = 20;    // steps between recorded losses
  std::size_t eval_subset = 64;  // sequences used for the recorded loss
};

struct LmTrainResult {
  TinyLm model;
  std::vector<double> loss_history;  // [0] is the loss before any update
};

/// Trains the stand-in base model on next-token prediction. The recorded
/// losses are evaluated on a fixed prefix of the corpus, so they are
/// deterministic and free of minibatch noise.
inline LmTrainResult train_tiny_lm(const std::vector<std::vector<TokenId>>& corpus, const TinyLmConfig& cfg,
                                   const LmTrainConfig& tc, Rng& rng) {
  cfg.validate();
  std::vector<std::vector<TokenId>> seqs;
  for (const auto& s : corpus) {
    if (s.size() < 2) continue;
    seqs.emplace_back(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(std::min(s.size(), cfg.max_seq_len)));
  }
  if (seqs.empty()) throw std::invalid_argument("train_tiny_lm: corpus has no sequence of length >= 2");

  TinyLmParams params = init_tiny_lm(cfg, rng);
  TinyLmParams grads(cfg);
  Adam opt(AdamConfig{.lr = tc.lr});
  const std::size_t n_eval = std::min(tc.eval_subset, seqs.size());
  auto eval_loss = [&] {
    double acc = 0.0;
    for (std::size_t i = 0; i < n_eval; ++i) acc += lm_loss_and_grad(params, seqs[i], nullptr);
    return acc / static_cast<double>(n_eval);
  };

  LmTrainResult res;
  res.loss_history.push_back(eval_loss());
  const std::size_t bs = std::max<std::size_t>(1, tc.batch_size);
  for (std::size_t step = 1; step <= tc.steps; ++step) {
    nn::zero_grads(grads);
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < bs; ++b) {
      const auto& s = seqs[rng.below(seqs.size())];
      batch_loss += lm_loss_and_grad(params, s, &grads, 1.0 / static_cast<double>(bs));
    }
    if (!std::isfinite(batch_loss)) throw NumericalError("train_tiny_lm: non-finite loss at step " + std::to_string(step));
    nn::adam_step(opt, params, grads);
    if (tc.log_every > 0 && step % tc.log_every == 0) res.loss_history.push_back(eval_loss());
  }
  res.model = TinyLm(std::move(params));
  return res;
}

inline Checkpoint to_checkpoint(const TinyLm& lm) {
  const auto& c = lm.config();
  Checkpoint ck;
  ck.kind = CheckpointKind::LanguageModel;
  ck.dims = {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.ffn_dim, c.max_seq_len, c.tap_layer};
  add_params(ck, lm.params());
  return ck;
}

inline TinyLm tiny_lm_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != CheckpointKind::LanguageModel || ck.dims.size() != 7)
    throw CheckpointError("not a language-model checkpoint");
  TinyLmConfig c{ck.dims[0], ck.dims[1], ck.dims[2], ck.dims[3], ck.dims[4], ck.dims[5], ck.dims[6]};
  TinyLmParams p(c);
  read_params(ck, p);
  return TinyLm(std::move(p));
}

/// Recorded hidden states (and optionally next-token logits) replayed as a
/// base model. Inputs must be a prefix of the recorded token sequence.
struct TraceRecord {
  TokenId token = 0;
  Vec hidden;
  std::optional<Vec> logits;
};

class HiddenTrace {
 public:
  HiddenTrace() = default;
  explicit HiddenTrace(std::vector<TraceRecord> records, TokenId eos = Tokenizer::kEos)
      : records_(std::move(records)), eos_(eos) {
    if (!records_.empty()) dim_ = records_.front().hidden.dim();
    for (const auto& r : records_)
      if (r.hidden.dim() != dim_) throw DimensionError("HiddenTrace: hidden vectors differ in dimension");
  }

  const std::vector<TraceRecord>& records() const { return records_; }
  std::size_t d_model() const { return dim_; }
  std::size_t max_seq_len() const { return records_.size(); }
  TokenId eos_token() const { return eos_; }

  std::vector<Vec> forward_hidden(std::span<const TokenId> tokens) const {
    check_prefix(tokens);
    std::vector<Vec> out;
    out.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) out.push_back(records_[i].hidden);
    return out;
  }

  TokenId next_token_argmax(std::span<const TokenId> context) const {
    if (context.empty()) throw std::invalid_argument("next_token_argmax: empty context");
    check_prefix(context);
    const auto& rec = records_[context.size() - 1];
    if (!rec.logits) throw std::out_of_range("trace has no logits at position " + std::to_string(context.size() - 1));
    return argmax_token(rec.logits->span());
  }

  void save_jsonl(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write trace '" + path + "'");
    for (const auto& r : records_) {
      nlohmann::json j{{"token", r.token}, {"hidden", r.hidden.data}};
      if (r.logits) j["logits"] = r.logits->data;
      os << j.dump() << '\n';
    }
  }

  static HiddenTrace load_jsonl(const std::string& path, TokenId eos = Tokenizer::kEos) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read trace '" + path + "'");
    std::vector<TraceRecord> recs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        TraceRecord r;
        r.token = j.at("token").get<TokenId>();
        r.hidden = Vec(j.at("hidden").get<std::vector<double>>());
        if (j.contains("logits")) r.logits = Vec(j.at("logits").get<std::vector<double>>());
        recs.push_back(std::move(r));
      } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    return HiddenTrace(std::move(recs), eos);
  }

 private:
  void check_prefix(std::span<const TokenId> tokens) const {
    if (tokens.size() > records_.size())
      throw std::length_error("input of " + std::to_string(tokens.size()) + " tokens is longer than the trace");
    for (std::size_t i = 0; i < tokens.size(); ++i)
      if (tokens[i] != records_[i].token)
        throw std::invalid_argument("input diverges from the trace at position " + std::to_string(i));
  }

  std::vector<TraceRecord> records_;
  TokenId eos_ = Tokenizer::kEos;
  std::size_t dim_ = 0;
};

/// Records a model's hidden states and next-token logits for `tokens`.
inline HiddenTrace record_trace(const TinyLm& lm, std::span<const TokenId> tokens) {
  const auto out = lm.run(tokens, true);
  std::vector<TraceRecord> recs;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto row = out.logits.row(i);
    recs.push_back({tokens[i], out.hidden[i], Vec(std::vector<double>(row.begin(), row.end()))});
  }
  return HiddenTrace(std::move(recs), lm.eos_token());
}

static_assert(HiddenStateModel<TinyLm>);
static_assert(HiddenStateModel<HiddenTrace>);

}  // namespace pguard
