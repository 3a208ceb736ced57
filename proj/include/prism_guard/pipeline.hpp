#pragma once

// Run configuration and the four pipeline stages behind the command-line
// tool: corpus generation, staged training, streaming moderation and
// evaluation. Every stage reads and writes files under the configured paths
// and draws randomness from the root seed split by a fixed stage label.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "activator.hpp"
#include "base_model.hpp"
#include "checkpoint.hpp"
#include "corpus.hpp"
#include "eval.hpp"
#include "moderation.hpp"
#include "router.hpp"
#include "tokenizer.hpp"

namespace pguard {

/// Bad flags or configuration keys (exit code 1).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A required input file is absent (exit code 2).
struct MissingInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::optional<std::uint64_t> seed;

  std::string corpus_path = "corpus.jsonl";
  std::string out_dir = "run";

  SyntheticCorpusConfig corpus{};

  TinyLmConfig lm{};
  LmTrainConfig lm_train{};

  std::size_t n_activators = 2;
  std::size_t activator_rank = 4;
  ActivatorTrainConfig activator{};

  RouterConfig router{};
  RouterTrainConfig router_train{};

  Thresholds thresholds{};
  std::size_t max_new_tokens = 40;

  RunConfig() {
    activator.schedule = {1.0, 3000};
    activator.optim.lr = 1e-2;
    router_train.optim.lr = 2e-3;
    router_train.steps = 1500;
  }

  std::filesystem::path dir() const { return out_dir; }
  std::filesystem::path lm_path() const { return dir() / "lm.pgmd"; }
  std::filesystem::path vocab_path() const { return dir() / "vocab.json"; }
  std::filesystem::path activator_path() const { return dir() / "activator.pgmd"; }
  std::filesystem::path router_path() const { return dir() / "router.pgmd"; }

  std::uint64_t require_seed() const {
    if (!seed) throw UsageError("a seed is required (--seed or \"seed\" in the config file)");
    return *seed;
  }

  void validate_thresholds() const {
    if (!(thresholds.tau >= 0.0 && thresholds.tau <= 1.0) || !(thresholds.xi >= 0.0 && thresholds.xi <= 1.0))
      throw UsageError("thresholds tau and xi must lie in [0, 1]");
  }

  void validate() const {
    lm.validate();
    validate_thresholds();
    if (!(corpus.span_density >= 0.0 && corpus.span_density <= 1.0))
      throw UsageError("corpus.density must lie in [0, 1]");
    if (!(corpus.test_fraction >= 0.0 && corpus.test_fraction < 1.0))
      throw UsageError("corpus.test_fraction must lie in [0, 1)");
    if (n_activators == 0) throw UsageError("activator.count must be >= 1");
    if (activator_rank == 0 || 2 * activator_rank > lm.d_model)
      throw UsageError("activator.rank must lie in [1, d_model/2]");
    if (router.n_heads == 0 || lm.d_model % router.n_heads != 0)
      throw UsageError("router.heads must divide lm.d_model");
    if (router_train.focal.gamma < 0.0) throw UsageError("router.gamma must be >= 0");
    if (activator.schedule.total_steps == 0) throw UsageError("activator.steps must be >= 1");
  }

 private:
  using Slot = std::variant<std::size_t*, double*, std::string*>;

  template <class F>
  void for_each_key(F&& f) {
    f("paths.corpus", Slot{&corpus_path});
    f("paths.out_dir", Slot{&out_dir});
    f("corpus.n_docs", Slot{&corpus.n_docs});
    f("corpus.density", Slot{&corpus.span_density});
    f("corpus.test_fraction", Slot{&corpus.test_fraction});
    f("lm.d_model", Slot{&lm.d_model});
    f("lm.layers", Slot{&lm.n_layers});
    f("lm.heads", Slot{&lm.n_heads});
    f("lm.ffn_dim", Slot{&lm.ffn_dim});
    f("lm.max_seq_len", Slot{&lm.max_seq_len});
    f("lm.tap_layer", Slot{&lm.tap_layer});
    f("lm.steps", Slot{&lm_train.steps});
    f("lm.batch_size", Slot{&lm_train.batch_size});
    f("lm.lr", Slot{&lm_train.lr});
    f("activator.count", Slot{&n_activators});
    f("activator.rank", Slot{&activator_rank});
    f("activator.alpha", Slot{&activator.schedule.alpha});
    f("activator.steps", Slot{&activator.schedule.total_steps});
    f("activator.batch_size", Slot{&activator.batch_size});
    f("activator.lr", Slot{&activator.optim.lr});
    f("router.k", Slot{&router.window});
    f("router.heads", Slot{&router.n_heads});
    f("router.ffn_dim", Slot{&router.ffn_dim});
    f("router.gamma", Slot{&router_train.focal.gamma});
    f("router.steps", Slot{&router_train.steps});
    f("router.batch_size", Slot{&router_train.batch_size});
    f("router.lr", Slot{&router_train.optim.lr});
    f("router.right_truncate_prob", Slot{&router_train.right_truncate_prob});
    f("moderate.tau", Slot{&thresholds.tau});
    f("moderate.xi", Slot{&thresholds.xi});
    f("moderate.max_new_tokens", Slot{&max_new_tokens});
  }

 public:
  /// Applies a flat object of dotted keys. Unknown keys are rejected so typos
  /// cannot silently fall back to defaults.
  void apply(const nlohmann::json& j) {
    if (!j.is_object()) throw UsageError("config must be a JSON object with flat dotted keys");
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") {
        if (!value.is_number_unsigned()) throw UsageError("config key 'seed' must be a non-negative integer");
        seed = value.get<std::uint64_t>();
        continue;
      }
      bool found = false;
      for_each_key([&](const char* name, Slot slot) {
        if (key != name) return;
        found = true;
        std::visit(
            [&](auto* p) {
              using T = std::remove_pointer_t<decltype(p)>;
              if constexpr (std::is_same_v<T, std::string>) {
                if (!value.is_string()) throw UsageError("config key '" + key + "' must be a string");
              } else if constexpr (std::is_same_v<T, std::size_t>) {
                if (!value.is_number_unsigned()) throw UsageError("config key '" + key + "' must be a non-negative integer");
              } else {
                if (!value.is_number()) throw UsageError("config key '" + key + "' must be a number");
              }
              *p = value.get<T>();
            },
            slot);
      });
      if (!found) throw UsageError("unknown config key '" + key + "'");
    }
    router.d_model = lm.d_model;
  }

  nlohmann::json to_json() {
    nlohmann::json j = nlohmann::json::object();
    if (seed) j["seed"] = *seed;
    for_each_key([&](const char* name, Slot slot) { std::visit([&](auto* p) { j[name] = *p; }, slot); });
    return j;
  }

  static RunConfig load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MissingInputError("cannot read config file '" + path + "'");
    RunConfig c;
    try {
      c.apply(nlohmann::json::parse(is));
    } catch (const nlohmann::json::parse_error& e) {
      throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return c;
  }

  /// Explicit path first, then $PRISM_GUARD_CONFIG, then defaults.
  static RunConfig resolve(const std::string& explicit_path) {
    if (!explicit_path.empty()) return load_file(explicit_path);
    if (const char* env = std::getenv("PRISM_GUARD_CONFIG"); env && *env) return load_file(env);
    RunConfig c;
    c.router.d_model = c.lm.d_model;
    return c;
  }
};

namespace detail {

inline void require_file(const std::filesystem::path& p, const std::string& what, const std::string& hint) {
  if (!std::filesystem::exists(p))
    throw MissingInputError("missing " + what + " '" + p.string() + "'" + (hint.empty() ? "" : " (" + hint + ")"));
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::trunc | std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
  os << text;
  if (!os) throw std::runtime_error("write failed for '" + p.string() + "'");
}

inline void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw std::runtime_error("cannot create directory '" + p.string() + "': " + ec.message());
}

}  // namespace detail

/// One document encoded as [BOS] text [EOS] with IOB labels aligned to every
/// position (BOS and EOS are O) and the tap-layer hidden states.
struct EncodedDoc {
  std::vector<TokenId> tokens;
  std::vector<Iob> iob;
  std::vector<Vec> hidden;
  bool harmful = false;
  std::size_t response_start = 1;  // first position after the request line
};

inline LabeledSequence wrap_sequence(const AnnotatedDocument& doc, const Tokenizer& tok, std::size_t max_len,
                                     std::size_t doc_id) {
  LabeledSequence s = label_document(doc, tok, doc_id);
  s.token_ids.insert(s.token_ids.begin(), Tokenizer::kBos);
  s.iob.insert(s.iob.begin(), Iob::O);
  s.token_ids.push_back(Tokenizer::kEos);
  s.iob.push_back(Iob::O);
  if (s.token_ids.size() > max_len) {
    s.token_ids.resize(max_len);
    s.iob.resize(max_len);
  }
  return s;
}

inline std::vector<EncodedDoc> encode_docs(const std::vector<AnnotatedDocument>& docs, const Tokenizer& tok,
                                           const TinyLm& lm, std::optional<Split> only = std::nullopt) {
  std::vector<EncodedDoc> out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (only && docs[i].split != *only) continue;
    auto s = wrap_sequence(docs[i], tok, lm.max_seq_len(), i);
    EncodedDoc e;
    e.hidden = lm.forward_hidden(s.token_ids);
    e.tokens = std::move(s.token_ids);
    e.iob = std::move(s.iob);
    e.harmful = !docs[i].spans.empty();
    if (const auto cut = docs[i].text.find(" ."); cut != std::string::npos) {
      const auto toks = tok.tokenize(docs[i].text);
      std::size_t k = 0;
      while (k < toks.size() && toks[k].start < cut + 2) ++k;
      e.response_start = std::min(k + 1, e.tokens.size());
    }
    out.push_back(std::move(e));
  }
  return out;
}

/// Streaming-equivalent scores for every emitted position j ≥ 1: the signal
/// uses the context state h_{j-1}; the router sees positions ≤ j only.
inline ScoredSequence score_doc(const EncodedDoc& d, const ActivatorBank& bank, const RouterParams& router) {
  ScoredSequence out;
  const std::size_t k = router.config.window;
  for (std::size_t j = 1; j < d.tokens.size(); ++j) {
    if (d.tokens[j] == Tokenizer::kEos) break;
    out.s.push_back(bank_signal(bank, d.hidden[j - 1].span()));
    auto win = window(d.hidden, j, k);
    for (std::size_t slot = k + 1; slot < win.size(); ++slot) std::fill(win[slot].data.begin(), win[slot].data.end(), 0.0);
    out.r.push_back(router_score(router, win));
    out.gold.push_back(d.iob[j] == Iob::O ? 0 : 1);
  }
  return out;
}

struct Artifacts {
  TinyLm lm;
  Tokenizer tok;
};

inline Artifacts load_lm(const RunConfig& cfg, const std::string& needed_by) {
  detail::require_file(cfg.lm_path(), "language-model checkpoint", needed_by + " needs `train --stage lm` first");
  detail::require_file(cfg.vocab_path(), "vocabulary", needed_by + " needs `train --stage lm` first");
  std::ifstream is(cfg.vocab_path());
  Artifacts a{tiny_lm_from_checkpoint(load_checkpoint(cfg.lm_path().string(), CheckpointKind::LanguageModel)),
              Tokenizer::from_json(nlohmann::json::parse(is))};
  if (a.tok.vocab_size() != a.lm.vocab_size())
    throw CheckpointError("vocabulary size does not match the language-model checkpoint");
  return a;
}

inline std::vector<AnnotatedDocument> load_run_corpus(const RunConfig& cfg) {
  detail::require_file(cfg.corpus_path, "corpus", "run gen-corpus first");
  return load_corpus(cfg.corpus_path);
}

struct CorpusSummary {
  std::size_t n_docs = 0, n_spans = 0, n_test = 0;
};

inline CorpusSummary cmd_gen_corpus(const RunConfig& cfg) {
  Rng rng(derive_seed(cfg.require_seed(), "corpus"));
  const auto docs = generate_synthetic_corpus(rng, cfg.corpus);
  const auto parent = std::filesystem::path(cfg.corpus_path).parent_path();
  if (!parent.empty()) detail::ensure_dir(parent);
  save_corpus(docs, cfg.corpus_path);
  CorpusSummary s;
  s.n_docs = docs.size();
  for (const auto& d : docs) {
    s.n_spans += d.spans.size();
    s.n_test += d.split == Split::Test;
  }
  return s;
}

enum class Stage { Lm, Activator, Router };

inline Stage stage_from_string(const std::string& s) {
  if (s == "lm") return Stage::Lm;
  if (s == "activator") return Stage::Activator;
  if (s == "router") return Stage::Router;
  throw UsageError("unknown stage '" + s + "' (expected lm, activator or router)");
}

struct TrainSummary {
  std::filesystem::path checkpoint;
  std::vector<std::pair<std::string, double>> final_losses;
};

inline TrainSummary train_lm_stage(const RunConfig& cfg) {
  const auto docs = load_run_corpus(cfg);
  std::vector<std::string> texts;
  for (const auto& d : docs)
    if (d.split == Split::Train) texts.push_back(d.text);
  if (texts.empty()) throw CorpusError("corpus has no training documents");
  const Tokenizer tok = Tokenizer::build(texts);

  TinyLmConfig lc = cfg.lm;
  lc.vocab_size = tok.vocab_size();
  std::vector<std::vector<TokenId>> seqs;
  for (std::size_t i = 0; i < docs.size(); ++i)
    if (docs[i].split == Split::Train) seqs.push_back(wrap_sequence(docs[i], tok, lc.max_seq_len, i).token_ids);

  Rng rng(derive_seed(cfg.require_seed(), "lm"));
  auto res = train_tiny_lm(seqs, lc, cfg.lm_train, rng);
  detail::ensure_dir(cfg.dir());
  save_checkpoint(to_checkpoint(res.model), cfg.lm_path().string());
  detail::write_text(cfg.vocab_path(), tok.to_json().dump() + "\n");
  return {cfg.lm_path(), {{"lm_initial", res.loss_history.front()}, {"lm_final", res.loss_history.back()}}};
}

/// Activator training pairs. Once a harmful request has been read, every
/// context state of the response is adversarial: for each response position j
/// of a harmful document h_{j-1} is adversarial, and for every position of the
/// balanced retain documents h_{j-1} is benign.
inline std::pair<std::vector<Vec>, std::vector<Vec>> activator_pairs(const std::vector<EncodedDoc>& enc, Rng& rng) {
  std::vector<LabeledSequence> harmful, benign;
  for (std::size_t i = 0; i < enc.size(); ++i) {
    LabeledSequence s{enc[i].tokens, enc[i].iob, i};
    (enc[i].harmful ? harmful : benign).push_back(std::move(s));
  }
  // A retain pool smaller than the harmful set is used whole.
  const auto retain = benign.size() >= harmful.size() ? balance_retain(harmful, benign, rng) : benign;
  std::vector<Vec> ben, adv;
  for (const auto& s : retain)
    for (std::size_t j = 1; j < s.token_ids.size(); ++j) ben.push_back(enc[s.doc_id].hidden[j - 1]);
  for (const auto& s : harmful)
    for (std::size_t j = enc[s.doc_id].response_start; j < s.token_ids.size(); ++j)
      adv.push_back(enc[s.doc_id].hidden[j - 1]);
  return {std::move(ben), std::move(adv)};
}

inline TrainSummary train_activator_stage(const RunConfig& cfg) {
  const auto seed = cfg.require_seed();
  const auto docs = load_run_corpus(cfg);
  const auto art = load_lm(cfg, "activator training");
  const auto enc = encode_docs(docs, art.tok, art.lm, Split::Train);
  Rng rng(derive_seed(seed, "act"));
  auto [benign, adv] = activator_pairs(enc, rng);
  if (adv.empty()) throw CorpusError("training split has no harmful tokens");
  auto bank = init_activator_bank(cfg.n_activators, art.lm.d_model(), cfg.activator_rank, rng);
  auto res = train_activators(std::move(bank), benign, adv, cfg.activator, rng);
  save_checkpoint(to_checkpoint(res.bank), cfg.activator_path().string());
  const auto& last = res.history.back();
  return {cfg.activator_path(), {{"ar", last.ar}, {"retain", last.retain}, {"signal", last.signal}, {"total", last.total}}};
}

inline std::vector<TokenLabeledHidden> router_data(const std::vector<EncodedDoc>& enc) {
  std::vector<TokenLabeledHidden> out;
  for (const auto& e : enc) {
    TokenLabeledHidden t{e.hidden, {}};
    for (auto tag : e.iob) t.labels.push_back(tag == Iob::O ? 0 : 1);
    out.push_back(std::move(t));
  }
  return out;
}

inline TrainSummary train_router_stage(const RunConfig& cfg) {
  const auto seed = cfg.require_seed();
  const auto docs = load_run_corpus(cfg);
  const auto art = load_lm(cfg, "router training");
  const auto enc = encode_docs(docs, art.tok, art.lm, Split::Train);
  Rng rng(derive_seed(seed, "rtr"));
  RouterConfig rc = cfg.router;
  rc.d_model = art.lm.d_model();
  auto res = train_router(init_router(rc, rng), router_data(enc), cfg.router_train, rng);
  save_checkpoint(to_checkpoint(res.params, cfg.router_train.focal), cfg.router_path().string());
  return {cfg.router_path(), {{"focal_initial", res.loss_history.front()}, {"focal_final", res.loss_history.back()}}};
}

inline TrainSummary cmd_train(const RunConfig& cfg, Stage stage) {
  cfg.validate();
  switch (stage) {
    case Stage::Lm: return train_lm_stage(cfg);
    case Stage::Activator: return train_activator_stage(cfg);
    case Stage::Router: return train_router_stage(cfg);
  }
  throw std::logic_error("unreachable stage");
}

struct Moderator {
  Artifacts base;
  ActivatorBank bank;
  RouterParams router;

  static Moderator load(const RunConfig& cfg) {
    auto base = load_lm(cfg, "moderation");
    detail::require_file(cfg.activator_path(), "activator checkpoint", "run `train --stage activator` first");
    detail::require_file(cfg.router_path(), "router checkpoint", "run `train --stage router` first");
    auto bank = activator_bank_from_checkpoint(load_checkpoint(cfg.activator_path().string(), CheckpointKind::ActivatorBank));
    auto router = router_from_checkpoint(load_checkpoint(cfg.router_path().string(), CheckpointKind::Router)).first;
    return {std::move(base), std::move(bank), std::move(router)};
  }
};

struct ModerateResult {
  std::string text;
  ModeratedOutput output;
};

inline ModerateResult cmd_moderate(const RunConfig& cfg, const std::string& prompt, bool collapse_spans,
                                   const std::string& events_out) {
  cfg.validate_thresholds();
  const auto m = Moderator::load(cfg);
  std::vector<TokenId> ids{Tokenizer::kBos};
  for (auto t : m.base.tok.encode(prompt)) ids.push_back(t);
  if (ids.size() >= m.base.lm.max_seq_len()) throw std::invalid_argument("prompt does not fit the context window");
  auto out = moderate_stream(m.base.lm, m.bank, m.router, ids, cfg.thresholds, cfg.max_new_tokens);
  if (!events_out.empty()) {
    std::ofstream os(events_out, std::ios::trunc | std::ios::binary);
    if (!os) throw std::runtime_error("cannot write events file '" + events_out + "'");
    write_events_jsonl(out.events, os);
  }
  return {render(out, m.base.tok, collapse_spans), std::move(out)};
}

struct EvalOptions {
  std::vector<int> pass_at{90, 100};
  bool calibrate = false;
  Projection export_reps = Projection::None;
  PcaSource pca_source = PcaSource::Router;
  std::string report_path;  // default: <out_dir>/report.json
  std::string export_path;  // default: beside the report
};

struct EvalResult {
  nlohmann::json report;
  std::filesystem::path report_path;
  std::optional<std::filesystem::path> export_path;
};

inline MetricReport score_report(const std::vector<ScoredSequence>& scored, const std::vector<int>& pass_ns,
                                 const std::function<int(const ScoredSequence&, std::size_t)>& predict) {
  std::vector<std::vector<int>> preds;
  std::vector<std::vector<Iob>> gold;
  for (const auto& s : scored) {
    std::vector<int> p(s.gold.size());
    std::vector<Iob> g(s.gold.size(), Iob::O);
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = predict(s, i);
      if (s.gold[i]) g[i] = (i > 0 && s.gold[i - 1]) ? Iob::I : Iob::B;
    }
    preds.push_back(std::move(p));
    gold.push_back(std::move(g));
  }
  return build_report(preds, gold, pass_ns);
}

inline EvalResult cmd_eval(const RunConfig& cfg, const EvalOptions& opt) {
  cfg.validate_thresholds();
  for (int n : opt.pass_at)
    if (n <= 0 || n > 100) throw UsageError("--pass-at values must lie in 1..100");
  const auto docs = load_run_corpus(cfg);
  const auto m = Moderator::load(cfg);
  const auto test = encode_docs(docs, m.base.tok, m.base.lm, Split::Test);
  if (test.empty()) throw CorpusError("corpus has no test split");

  Thresholds th = cfg.thresholds;
  std::optional<double> calib_f1;
  if (opt.calibrate) {
    const auto train = encode_docs(docs, m.base.tok, m.base.lm, Split::Train);
    std::vector<ScoredSequence> val;
    for (const auto& d : train) val.push_back(score_doc(d, m.bank, m.router));
    const auto c = calibrate_thresholds(val, CalibrationGrid::standard());
    th = c.best;
    calib_f1 = c.f1;
  }

  std::vector<ScoredSequence> scored;
  for (const auto& d : test) scored.push_back(score_doc(d, m.bank, m.router));
  const auto engine = score_report(scored, opt.pass_at, [&](const ScoredSequence& s, std::size_t i) {
    return static_cast<int>(s.s[i] > th.tau && s.r[i] > th.xi);
  });
  const auto router_only = score_report(scored, opt.pass_at, [&](const ScoredSequence& s, std::size_t i) {
    return static_cast<int>(s.r[i] > th.xi);
  });

  // Early trigger: first in-span step with s > τ in the first 10% of the span.
  std::size_t n_spans = 0, n_early = 0, n_correct = 0, n_tokens = 0;
  for (const auto& s : scored) {
    std::vector<ModerationEvent> ev;
    std::vector<Iob> g;
    for (std::size_t i = 0; i < s.gold.size(); ++i) {
      ev.push_back({i, 0, s.s[i], std::nullopt, std::nullopt, Decision::Retain});
      g.push_back(s.gold[i] ? ((i > 0 && s.gold[i - 1]) ? Iob::I : Iob::B) : Iob::O);
    }
    const auto spans = iob_spans(g);
    const auto et = early_trigger(ev, spans, th.tau);
    n_spans += spans.size();
    for (bool b : et.success) n_early += b;
  }
  // Document-level activator accuracy: a document is flagged when any step fires.
  for (std::size_t i = 0; i < scored.size(); ++i) {
    bool fired = false;
    for (double v : scored[i].s) fired = fired || v > th.tau;
    n_correct += fired == test[i].harmful;
    n_tokens += scored[i].gold.size();
  }

  nlohmann::json rep;
  rep["thresholds"] = {{"tau", th.tau}, {"xi", th.xi}, {"calibrated", opt.calibrate}};
  if (calib_f1) rep["thresholds"]["calibration_f1"] = *calib_f1;
  rep["engine"] = to_json(engine);
  rep["router"] = to_json(router_only);
  rep["activator"] = {{"early_trigger_rate", n_spans ? static_cast<double>(n_early) / static_cast<double>(n_spans) : 1.0},
                      {"document_accuracy", static_cast<double>(n_correct) / static_cast<double>(scored.size())}};
  rep["n_sequences"] = scored.size();
  rep["n_tokens"] = n_tokens;

  EvalResult res;
  res.report_path = opt.report_path.empty() ? cfg.dir() / "report.json" : std::filesystem::path(opt.report_path);
  if (res.report_path.has_parent_path()) detail::ensure_dir(res.report_path.parent_path());
  if (opt.export_reps != Projection::None) {
    res.export_path = opt.export_path.empty() ? res.report_path.parent_path() / "reps.jsonl"
                                              : std::filesystem::path(opt.export_path);
    std::vector<ExportSequence> seqs;
    for (const auto& d : test) {
      ExportSequence e{d.hidden, {}};
      for (auto tag : d.iob) e.labels.push_back(tag == Iob::O ? 0 : 1);
      seqs.push_back(std::move(e));
    }
    const auto n = export_representations(seqs, m.bank, m.router, res.export_path->string(), Projection::Pca2d,
                                          opt.pca_source);
    rep["export"] = {{"path", res.export_path->filename().string()}, {"records", n}};
  }
  detail::write_text(res.report_path, rep.dump(2) + "\n");
  res.report = std::move(rep);
  return res;
}

}  // namespace pguard
