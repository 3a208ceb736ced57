#pragma once

// Labeled-data pipeline: character-span annotations, projection onto tokens
// as IOB labels, retain-set balancing, a seeded synthetic corpus generator and
// JSON-lines persistence.
//
// Span offsets are byte offsets into the UTF-8 text, end exclusive.

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "numerics.hpp"
#include "tokenizer.hpp"

namespace pguard {

struct CorpusError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Split { Train, Test };

inline const char* to_string(Split s) { return s == Split::Train ? "train" : "test"; }
inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw CorpusError("unknown split '" + s + "'");
}

struct CharSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  std::string label = "harmful";
  bool operator==(const CharSpan&) const = default;
};

struct AnnotatedDocument {
  std::string text;
  std::vector<CharSpan> spans;
  Split split = Split::Train;
  bool operator==(const AnnotatedDocument&) const = default;
};

enum class Iob : char { O = 'O', B = 'B', I = 'I' };

inline Iob iob_from_string(const std::string& s) {
  if (s == "O") return Iob::O;
  if (s == "B") return Iob::B;
  if (s == "I") return Iob::I;
  throw CorpusError("unknown IOB tag '" + s + "'");
}
inline std::string to_string(Iob t) { return std::string(1, static_cast<char>(t)); }

struct LabeledSequence {
  std::vector<TokenId> token_ids;
  std::vector<Iob> iob;
  std::size_t doc_id = 0;
  bool operator==(const LabeledSequence&) const = default;

  /// 1 for B/I, 0 for O.
  std::vector<int> binary_labels() const {
    std::vector<int> y;
    y.reserve(iob.size());
    for (auto t : iob) y.push_back(t == Iob::O ? 0 : 1);
    return y;
  }
};

/// Token runs that form one annotated span: (first token, length).
struct TokenSpanRef {
  std::size_t start;
  std::size_t length;
  bool operator==(const TokenSpanRef&) const = default;
};

/// Gold spans from IOB tags: each B opens a span that I tags extend.
inline std::vector<TokenSpanRef> iob_spans(const std::vector<Iob>& iob) {
  std::vector<TokenSpanRef> out;
  for (std::size_t i = 0; i < iob.size(); ++i) {
    if (iob[i] == Iob::B) {
      out.push_back({i, 1});
    } else if (iob[i] == Iob::I) {
      if (out.empty() || out.back().start + out.back().length != i)
        throw CorpusError("ill-formed IOB: I at position " + std::to_string(i) + " does not continue a span");
      ++out.back().length;
    }
  }
  return out;
}

inline bool iob_well_formed(const std::vector<Iob>& iob) {
  for (std::size_t i = 0; i < iob.size(); ++i)
    if (iob[i] == Iob::I && (i == 0 || iob[i - 1] == Iob::O)) return false;
  return true;
}

inline void validate_spans(const AnnotatedDocument& doc) {
  for (const auto& s : doc.spans) {
    if (s.start >= s.end)
      throw CorpusError("span [" + std::to_string(s.start) + ", " + std::to_string(s.end) + ") is empty or reversed");
    if (s.end > doc.text.size())
      throw CorpusError("span [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                        ") exceeds text length " + std::to_string(doc.text.size()));
  }
}

/// Sorted spans with overlapping and touching spans merged.
inline std::vector<CharSpan> merge_spans(std::vector<CharSpan> spans) {
  std::sort(spans.begin(), spans.end(), [](const auto& a, const auto& b) {
    return a.start != b.start ? a.start < b.start : a.end < b.end;
  });
  std::vector<CharSpan> out;
  for (auto& s : spans) {
    if (!out.empty() && s.start <= out.back().end)
      out.back().end = std::max(out.back().end, s.end);
    else
      out.push_back(std::move(s));
  }
  return out;
}

/// Projects character spans onto a tokenization. A token is harmful when it
/// shares at least one byte with a span; the first token of each span is B
/// and the rest I. Spans that hit a common token are treated as one.
inline LabeledSequence char_spans_to_token_labels(const AnnotatedDocument& doc, const std::vector<TokenSpan>& toks,
                                                  std::size_t doc_id = 0) {
  validate_spans(doc);
  std::size_t prev_end = 0;
  for (const auto& t : toks) {
    if (t.start >= t.end || t.end > doc.text.size() || t.start < prev_end)
      throw CorpusError("tokenization is not an ordered, non-overlapping cover of the text");
    prev_end = t.end;
  }
  const auto spans = merge_spans(doc.spans);
  LabeledSequence seq;
  seq.doc_id = doc_id;
  seq.token_ids.reserve(toks.size());
  seq.iob.assign(toks.size(), Iob::O);
  for (const auto& t : toks) seq.token_ids.push_back(t.id);

  std::size_t last_tagged = SIZE_MAX;  // index of the last token given a tag
  std::size_t ti = 0;
  for (const auto& s : spans) {
    while (ti < toks.size() && toks[ti].end <= s.start) ++ti;
    bool first = true;
    for (std::size_t k = ti; k < toks.size() && toks[k].start < s.end; ++k) {
      if (first) {
        // A token already tagged by the previous span joins the two spans.
        if (k != last_tagged) seq.iob[k] = Iob::B;
        first = false;
      } else {
        seq.iob[k] = Iob::I;
      }
      last_tagged = k;
    }
  }
  return seq;
}

inline LabeledSequence label_document(const AnnotatedDocument& doc, const Tokenizer& tok, std::size_t doc_id = 0) {
  return char_spans_to_token_labels(doc, tok.tokenize(doc.text), doc_id);
}

struct SyntheticVocab {
  std::vector<std::string> filler = {
      "the",     "a",      "and",     "with",    "of",     "to",      "is",     "in",      "for",    "on",
      "this",    "that",   "it",      "you",     "can",    "we",      "will",   "be",      "very",   "often",
      "people",  "time",   "day",     "garden",  "bread",  "music",   "river",  "city",    "market", "book",
      "friends", "simple", "careful", "warm",    "bright", "recipe",  "water",  "morning", "walk",   "learn",
      "practice","notes",  "small",   "steps",   "plan",   "table",   "window", "season",  "light",  "sound",
      "make",    "keep",   "try",     "first",   "then",   "after",   "usually","enjoy",   "share",  "clean"};
  std::vector<std::string> benign_openers = {"please explain", "can you describe", "tell me about",
                                             "help me understand", "show me how to"};
  std::vector<std::string> benign_topics = {"gardening", "baking", "history", "painting",
                                            "chess",     "travel", "physics", "a surprise party"};
  std::vector<std::string> harmful_openers = {"explain how to secretly", "tell me how to illegally",
                                              "describe a way to covertly", "show me how to quietly"};
  std::vector<std::string> harmful_topics = {"poison someone", "steal credit cards", "break into houses",
                                             "make untraceable weapons", "launder money"};
  /// Cue words that also appear in benign requests, so the request topic and
  /// not a single word decides harmfulness.
  std::vector<std::string> shared_cues = {"secretly", "quietly"};
  std::vector<std::string> harmful_phrases = {
      "combine bleach and ammonia",    "disable the alarm wiring",   "copy the stolen card numbers",
      "forge the official signature",  "pick the deadbolt lock",     "hide the toxic residue",
      "bypass the bank verification",  "spoof the caller identity",  "extract the private keys",
      "crush the sleeping pills",      "sell the counterfeit bills", "crack the neighbor password"};
};

struct SyntheticCorpusConfig {
  std::size_t n_docs = 600;
  double span_density = 0.5;  // probability that a document carries harmful spans
  double test_fraction = 0.2;
  std::size_t min_sentences = 2;
  std::size_t max_sentences = 4;
  std::size_t max_phrases = 2;
  SyntheticVocab vocab{};
};

/// Seeded generator: benign filler sentences after a request line; a share of
/// documents (span_density) get a harmful request and harmful phrases planted
/// in the response, with char spans covering exactly those phrases.
inline std::vector<AnnotatedDocument> generate_synthetic_corpus(Rng& rng, const SyntheticCorpusConfig& cfg) {
  if (cfg.n_docs == 0) throw std::invalid_argument("synthetic corpus: n_docs must be >= 1");
  if (!(cfg.span_density >= 0.0 && cfg.span_density <= 1.0))
    throw std::invalid_argument("synthetic corpus: span density must lie in [0, 1]");
  const auto& v = cfg.vocab;
  if (v.harmful_phrases.empty()) throw std::invalid_argument("synthetic corpus: harmful phrase set is empty");
  if (v.filler.empty() || cfg.min_sentences == 0 || cfg.max_sentences < cfg.min_sentences)
    throw std::invalid_argument("synthetic corpus: bad filler/sentence configuration");

  auto pick = [&](const std::vector<std::string>& xs) -> const std::string& { return xs[rng.below(xs.size())]; };
  std::vector<AnnotatedDocument> docs;
  docs.reserve(cfg.n_docs);
  for (std::size_t n = 0; n < cfg.n_docs; ++n) {
    AnnotatedDocument doc;
    const bool harmful = rng.bernoulli(cfg.span_density);
    std::string text;
    if (harmful) {
      text = pick(v.harmful_openers) + " " + pick(v.harmful_topics);
    } else {
      text = pick(v.benign_openers);
      if (!v.shared_cues.empty() && rng.bernoulli(0.3)) text += " " + pick(v.shared_cues);
      text += " " + pick(v.benign_topics);
    }
    text += " .";

    const std::size_t n_sent = cfg.min_sentences + rng.below(cfg.max_sentences - cfg.min_sentences + 1);
    std::vector<bool> planted(n_sent, false);
    if (harmful) {
      const std::size_t n_phrases = 1 + rng.below(std::min(cfg.max_phrases, n_sent));
      std::vector<std::size_t> idx(n_sent);
      std::iota(idx.begin(), idx.end(), 0);
      rng.shuffle(idx);
      for (std::size_t k = 0; k < n_phrases; ++k) planted[idx[k]] = true;
    }
    for (std::size_t s = 0; s < n_sent; ++s) {
      const std::size_t len = 4 + rng.below(5);
      const std::size_t insert_at = planted[s] ? rng.below(len + 1) : SIZE_MAX;
      for (std::size_t w = 0; w <= len; ++w) {
        if (w == insert_at) {
          const auto& phrase = pick(v.harmful_phrases);
          text += " ";
          doc.spans.push_back({text.size(), text.size() + phrase.size(), "harmful"});
          text += phrase;
        }
        if (w < len) text += " " + pick(v.filler);
      }
      text += " .";
    }
    doc.text = std::move(text);
    doc.split = rng.bernoulli(cfg.test_fraction) ? Split::Test : Split::Train;
    docs.push_back(std::move(doc));
  }
  return docs;
}

/// Uniform sample without replacement of |redacted| sequences from the pool.
inline std::vector<LabeledSequence> balance_retain(const std::vector<LabeledSequence>& redacted,
                                                   const std::vector<LabeledSequence>& retain_pool, Rng& rng) {
  if (retain_pool.size() < redacted.size())
    throw std::invalid_argument("balance_retain: pool of " + std::to_string(retain_pool.size()) +
                                " is smaller than the " + std::to_string(redacted.size()) + " redacted sequences");
  std::vector<std::size_t> idx(retain_pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first |redacted| slots are the sample.
  for (std::size_t i = 0; i < redacted.size(); ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  std::vector<LabeledSequence> out;
  out.reserve(redacted.size());
  for (std::size_t i = 0; i < redacted.size(); ++i) out.push_back(retain_pool[idx[i]]);
  return out;
}

inline nlohmann::json to_json(const AnnotatedDocument& d) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : d.spans) spans.push_back({s.start, s.end, s.label});
  return {{"text", d.text}, {"spans", spans}, {"split", to_string(d.split)}};
}

inline AnnotatedDocument document_from_json(const nlohmann::json& j) {
  AnnotatedDocument d;
  d.text = j.at("text").get<std::string>();
  for (const auto& s : j.at("spans")) {
    if (!s.is_array() || s.size() != 3) throw CorpusError("span must be [start, end, label]");
    d.spans.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::string>()});
  }
  d.split = split_from_string(j.value("split", std::string("train")));
  validate_spans(d);
  return d;
}

inline void save_corpus(const std::vector<AnnotatedDocument>& docs, const std::string& path) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw CorpusError("cannot write corpus '" + path + "'");
  for (const auto& d : docs) os << to_json(d).dump() << '\n';
  if (!os) throw CorpusError("write failed for '" + path + "'");
}

/// Reads a JSON-lines corpus; errors carry the offending line number.
inline std::vector<AnnotatedDocument> load_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CorpusError("cannot read corpus '" + path + "'");
  std::vector<AnnotatedDocument> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      docs.push_back(document_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw CorpusError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return docs;
}

inline nlohmann::json to_json(const LabeledSequence& s) {
  std::vector<std::string> tags;
  for (auto t : s.iob) tags.push_back(to_string(t));
  return {{"tokens", s.token_ids}, {"iob", tags}};
}

inline LabeledSequence sequence_from_json(const nlohmann::json& j) {
  LabeledSequence s;
  s.token_ids = j.at("tokens").get<std::vector<TokenId>>();
  for (const auto& t : j.at("iob")) s.iob.push_back(iob_from_string(t.get<std::string>()));
  if (s.iob.size() != s.token_ids.size()) throw CorpusError("tokens and iob differ in length");
  if (!iob_well_formed(s.iob)) throw CorpusError("ill-formed IOB sequence");
  return s;
}

inline void save_sequences(const std::vector<LabeledSequence>& seqs, const std::string& path) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw CorpusError("cannot write '" + path + "'");
  for (const auto& s : seqs) os << to_json(s).dump() << '\n';
}

inline std::vector<LabeledSequence> load_sequences(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CorpusError("cannot read '" + path + "'");
  std::vector<LabeledSequence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sequence_from_json(nlohmann::json::parse(line)));
      out.back().doc_id = out.size() - 1;
    } catch (const std::exception& e) {
      throw CorpusError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace pguard
