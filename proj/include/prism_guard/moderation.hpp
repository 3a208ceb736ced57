#pragma once

// Streaming moderation: greedy generation where every step computes the
// aggregate activator signal s on the current context, consults the router
// only when s > τ, and replaces the emitted token with a marker when the
// router score also exceeds ξ. The context always receives the original
// token, so generation itself is never altered.

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "activator.hpp"
#include "base_model.hpp"
#include "router.hpp"
#include "tokenizer.hpp"

namespace pguard {

inline constexpr std::string_view kRedactedMarker = "[REDACTED]";

struct Thresholds {
  double tau = 0.5;  // activation threshold
  double xi = 0.5;   // router threshold

  void validate() const {
    if (!(tau >= 0.0 && tau <= 1.0) || !(xi >= 0.0 && xi <= 1.0))
      throw std::invalid_argument("thresholds must lie in [0, 1]");
  }
};

enum class Decision { Retain, Redacted };

inline const char* to_string(Decision d) { return d == Decision::Redacted ? "REDACTED" : "RETAIN"; }

struct ModerationEvent {
  std::size_t step = 0;
  TokenId token = 0;
  double s = 0.0;
  std::optional<double> r;      // router score; only computed when s > τ
  std::optional<double> r_hat;  // mean activator signal × r
  Decision decision = Decision::Retain;

  bool operator==(const ModerationEvent&) const = default;
};

struct ModeratedOutput {
  std::vector<TokenId> prompt;
  std::vector<TokenId> raw;                       // generated tokens as produced
  std::vector<std::optional<TokenId>> rendered;   // nullopt marks a redaction
  std::vector<ModerationEvent> events;

  std::vector<TokenId> context() const {
    auto x = prompt;
    x.insert(x.end(), raw.begin(), raw.end());
    return x;
  }
  bool operator==(const ModeratedOutput&) const = default;
};

/// Mean activator signal times the router score.
inline double combined_score(std::span<const double> signals, double r) {
  if (signals.empty()) throw std::invalid_argument("combined_score: no activator signals");
  double acc = 0.0;
  for (double s : signals) acc += s;
  return acc / static_cast<double>(signals.size()) * r;
}

/// Redact iff s > τ and r > ξ (both strict).
inline Decision decide(double s, std::optional<double> r, const Thresholds& th) {
  if (!(s > th.tau)) return Decision::Retain;
  if (!r) throw std::logic_error("decide: router score missing while s exceeds tau");
  return *r > th.xi ? Decision::Redacted : Decision::Retain;
}

namespace detail {

template <class M>
std::pair<std::vector<Vec>, TokenId> hidden_and_next(const M& model, std::span<const TokenId> x) {
  if constexpr (requires { model.run(x, true); }) {
    auto out = model.run(x, true);
    return {std::move(out.hidden), argmax_token(out.logits.row(out.logits.rows - 1))};
  } else {
    return {model.forward_hidden(x), model.next_token_argmax(x)};
  }
}

}  // namespace detail

/// Greedy generation without moderation, same stopping rules as the engine.
template <HiddenStateModel M>
std::vector<TokenId> greedy_generate(const M& model, std::vector<TokenId> prompt, std::size_t max_len) {
  std::vector<TokenId> out;
  while (out.size() < max_len && prompt.size() < model.max_seq_len()) {
    const TokenId t = model.next_token_argmax(prompt);
    if (t == model.eos_token()) break;
    out.push_back(t);
    prompt.push_back(t);
  }
  return out;
}

/// Runs the moderation loop. `signals_of(h)` returns the per-activator signals
/// for the context state h; `score_of(hidden, j)` returns the router score of
/// position j given hidden states for positions 0..j.
template <HiddenStateModel M, class SignalFn, class ScoreFn>
ModeratedOutput moderate_stream_with(const M& model, SignalFn&& signals_of, ScoreFn&& score_of,
                                     std::vector<TokenId> prompt, const Thresholds& th, std::size_t max_len) {
  if (prompt.empty()) throw std::invalid_argument("moderate_stream: empty prompt");
  if (max_len == 0) throw std::invalid_argument("moderate_stream: max_len must be positive");
  th.validate();

  ModeratedOutput out;
  out.prompt = prompt;
  std::vector<TokenId> x = std::move(prompt);
  for (std::size_t step = 0; step < max_len && x.size() < model.max_seq_len(); ++step) {
    const auto [hidden, next] = detail::hidden_and_next(model, x);
    const std::vector<double> sig = signals_of(hidden.back());
    if (sig.empty()) throw std::invalid_argument("moderate_stream: no activator signals");
    double s = 0.0;
    for (double v : sig) s += v;
    s /= static_cast<double>(sig.size());
    if (next == model.eos_token()) break;

    ModerationEvent ev{step, next, s, std::nullopt, std::nullopt, Decision::Retain};
    x.push_back(next);
    if (s > th.tau) {
      auto extended = model.forward_hidden(x);
      ev.r = score_of(extended, x.size() - 1);
      ev.r_hat = combined_score(sig, *ev.r);
    }
    ev.decision = decide(s, ev.r, th);
    out.raw.push_back(next);
    out.rendered.push_back(ev.decision == Decision::Redacted ? std::nullopt : std::optional<TokenId>(next));
    out.events.push_back(ev);
  }
  return out;
}

template <HiddenStateModel M>
ModeratedOutput moderate_stream(const M& model, const ActivatorBank& bank, const RouterParams& router,
                                std::vector<TokenId> prompt, const Thresholds& th, std::size_t max_len) {
  bank.validate();
  if (bank.dim() != model.d_model() || router.config.d_model != model.d_model())
    throw DimensionError("moderate_stream: activator, router and model widths differ");
  return moderate_stream_with(
      model, [&](const Vec& h) { return bank_signals(bank, h.span()); },
      [&](const std::vector<Vec>& hidden, std::size_t j) {
        return router_score(router, window(hidden, j, router.config.window));
      },
      std::move(prompt), th, max_len);
}

/// Detokenizes the moderated stream. With `collapse_spans`, a run of
/// consecutive markers prints as one marker.
inline std::string render(const ModeratedOutput& out, const Tokenizer& tok, bool collapse_spans) {
  std::string text;
  bool prev_marker = false;
  for (const auto& t : out.rendered) {
    if (!t) {
      if (collapse_spans && prev_marker) continue;
      if (!text.empty()) text.push_back(' ');
      text += kRedactedMarker;
      prev_marker = true;
      continue;
    }
    auto [piece, attach] = tok.piece(*t);
    if (piece.empty()) continue;
    if (!text.empty() && (!attach || prev_marker)) text.push_back(' ');
    text += piece;
    prev_marker = false;
  }
  return text;
}

inline nlohmann::json to_json(const ModerationEvent& e) {
  nlohmann::json j;
  j["step"] = e.step;
  j["token"] = e.token;
  j["s"] = e.s;
  j["r"] = e.r ? nlohmann::json(*e.r) : nlohmann::json(nullptr);
  j["r_hat"] = e.r_hat ? nlohmann::json(*e.r_hat) : nlohmann::json(nullptr);
  j["decision"] = to_string(e.decision);
  return j;
}

inline ModerationEvent event_from_json(const nlohmann::json& j) {
  ModerationEvent e;
  e.step = j.at("step").get<std::size_t>();
  e.token = j.at("token").get<TokenId>();
  e.s = j.at("s").get<double>();
  if (!j.at("r").is_null()) e.r = j.at("r").get<double>();
  if (!j.at("r_hat").is_null()) e.r_hat = j.at("r_hat").get<double>();
  const auto d = j.at("decision").get<std::string>();
  if (d != "REDACTED" && d != "RETAIN") throw std::invalid_argument("unknown decision '" + d + "'");
  e.decision = d == "REDACTED" ? Decision::Redacted : Decision::Retain;
  return e;
}

inline void write_events_jsonl(const std::vector<ModerationEvent>& events, std::ostream& os) {
  for (const auto& e : events) os << to_json(e).dump() << '\n';
}

}  // namespace pguard
