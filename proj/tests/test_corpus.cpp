#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace pguard;

namespace {

std::vector<TokenSpan> whitespace_tokens() { return {{10, 0, 2}, {11, 3, 5}, {12, 6, 8}}; }

AnnotatedDocument doc_with(std::vector<CharSpan> spans) { return {"ab cd ef", std::move(spans), Split::Train}; }

}  // namespace

TEST(IobProjection, Examples) {
  using enum Iob;
  EXPECT_EQ(char_spans_to_token_labels(doc_with({{3, 5}}), whitespace_tokens()).iob, (std::vector<Iob>{O, B, O}));
  EXPECT_EQ(char_spans_to_token_labels(doc_with({{3, 8}}), whitespace_tokens()).iob, (std::vector<Iob>{O, B, I}));
  EXPECT_EQ(char_spans_to_token_labels(doc_with({}), whitespace_tokens()).iob, (std::vector<Iob>{O, O, O}));
}

TEST(IobProjection, PartialOverlapAndAdjacentSpans) {
  using enum Iob;
  // One byte of overlap makes a token harmful.
  EXPECT_EQ(char_spans_to_token_labels(doc_with({{4, 7}}), whitespace_tokens()).iob, (std::vector<Iob>{O, B, I}));
  // Separate spans on separate tokens start separate runs.
  EXPECT_EQ(char_spans_to_token_labels(doc_with({{0, 2}, {6, 8}}), whitespace_tokens()).iob, (std::vector<Iob>{B, O, B}));
  // Spans sharing a token join.
  EXPECT_EQ(char_spans_to_token_labels(doc_with({{0, 4}, {4, 5}}), whitespace_tokens()).iob, (std::vector<Iob>{B, I, O}));
  // Touching spans on consecutive tokens are merged into one run.
  EXPECT_EQ(char_spans_to_token_labels(doc_with({{0, 3}, {3, 5}}), whitespace_tokens()).iob, (std::vector<Iob>{B, I, O}));
}

TEST(IobProjection, RejectsBadInput) {
  EXPECT_THROW(char_spans_to_token_labels(doc_with({{5, 3}}), whitespace_tokens()), CorpusError);
  EXPECT_THROW(char_spans_to_token_labels(doc_with({{3, 30}}), whitespace_tokens()), CorpusError);
  const std::vector<TokenSpan> overlapping{{10, 0, 4}, {11, 3, 5}};
  EXPECT_THROW(char_spans_to_token_labels(doc_with({}), overlapping), CorpusError);
}

TEST(IobProjection, GeneratedCorpusIsWellFormedAndCoversSpans) {
  Rng rng(1);
  SyntheticCorpusConfig cfg;
  cfg.n_docs = 80;
  const auto docs = generate_synthetic_corpus(rng, cfg);
  std::vector<std::string> texts;
  for (const auto& d : docs) texts.push_back(d.text);
  const auto tok = Tokenizer::build(texts);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto toks = tok.tokenize(docs[i].text);
    const auto seq = label_document(docs[i], tok, i);
    ASSERT_TRUE(iob_well_formed(seq.iob));
    // Oracle: a token is harmful iff some span overlaps its byte range.
    for (std::size_t k = 0; k < toks.size(); ++k) {
      bool hit = false;
      for (const auto& s : docs[i].spans) hit = hit || (toks[k].start < s.end && s.start < toks[k].end);
      EXPECT_EQ(seq.iob[k] != Iob::O, hit);
    }
    EXPECT_EQ(iob_spans(seq.iob).size() > 0, !docs[i].spans.empty());
  }
}

TEST(IobSpans, RunsAndValidation) {
  using enum Iob;
  const std::vector<Iob> tags{O, B, I, I, O, B, B, I};
  EXPECT_EQ(iob_spans(tags), (std::vector<TokenSpanRef>{{1, 3}, {5, 1}, {6, 2}}));
  EXPECT_FALSE(iob_well_formed({O, I}));
  EXPECT_FALSE(iob_well_formed({I}));
  EXPECT_THROW(iob_spans({O, I}), CorpusError);
}

TEST(SyntheticCorpus, DensityAndDeterminism) {
  SyntheticCorpusConfig cfg;
  cfg.n_docs = 100;
  cfg.span_density = 0.0;
  Rng r0(2);
  for (const auto& d : generate_synthetic_corpus(r0, cfg)) EXPECT_TRUE(d.spans.empty());

  cfg.span_density = 0.3;
  Rng r1(3), r2(3);
  const auto a = generate_synthetic_corpus(r1, cfg);
  const auto b = generate_synthetic_corpus(r2, cfg);
  ASSERT_EQ(a.size(), 100u);
  std::size_t with_spans = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].text, b[i].text);
    EXPECT_EQ(a[i].spans.size(), b[i].spans.size());
    with_spans += !a[i].spans.empty();
  }
  EXPECT_GE(with_spans, 20u);
  EXPECT_LE(with_spans, 40u);
}

TEST(SyntheticCorpus, SpansCoverPlantedPhrasesExactly) {
  Rng rng(4);
  SyntheticCorpusConfig cfg;
  cfg.n_docs = 50;
  cfg.span_density = 1.0;
  const std::set<std::string> phrases(cfg.vocab.harmful_phrases.begin(), cfg.vocab.harmful_phrases.end());
  for (const auto& d : generate_synthetic_corpus(rng, cfg)) {
    ASSERT_FALSE(d.spans.empty());
    for (const auto& s : d.spans) EXPECT_TRUE(phrases.count(d.text.substr(s.start, s.end - s.start)));
  }
  EXPECT_THROW(generate_synthetic_corpus(rng, SyntheticCorpusConfig{.n_docs = 0}), std::invalid_argument);
}

namespace {

std::vector<LabeledSequence> sequences(std::size_t n, Iob tag) {
  std::vector<LabeledSequence> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({{static_cast<TokenId>(i)}, {tag}, i});
  return out;
}

}  // namespace

TEST(BalanceRetain, SizeContracts) {
  Rng rng(5);
  const auto pool = sequences(100, Iob::O);
  const auto picked = balance_retain(sequences(10, Iob::B), pool, rng);
  ASSERT_EQ(picked.size(), 10u);
  std::set<std::size_t> ids;
  for (const auto& s : picked) {
    EXPECT_EQ(s.iob, std::vector<Iob>{Iob::O});
    ids.insert(s.doc_id);
  }
  EXPECT_EQ(ids.size(), 10u);

  const auto all = balance_retain(sequences(100, Iob::B), pool, rng);
  std::set<std::size_t> all_ids;
  for (const auto& s : all) all_ids.insert(s.doc_id);
  EXPECT_EQ(all_ids.size(), 100u);

  Rng a(6), b(7);
  const auto pa = balance_retain(sequences(10, Iob::B), pool, a);
  const auto pb = balance_retain(sequences(10, Iob::B), pool, b);
  EXPECT_NE(pa, pb);
  EXPECT_THROW(balance_retain(sequences(5, Iob::B), sequences(3, Iob::O), rng), std::invalid_argument);
}

TEST(CorpusIo, RoundTripAndErrors) {
  const auto dir = testing_support::scratch_dir("corpus_io");
  Rng rng(8);
  SyntheticCorpusConfig cfg;
  cfg.n_docs = 20;
  const auto docs = generate_synthetic_corpus(rng, cfg);
  save_corpus(docs, (dir / "c.jsonl").string());
  const auto back = load_corpus((dir / "c.jsonl").string());
  ASSERT_EQ(back.size(), docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    EXPECT_EQ(back[i].text, docs[i].text);
    EXPECT_EQ(back[i].split, docs[i].split);
    ASSERT_EQ(back[i].spans.size(), docs[i].spans.size());
    for (std::size_t k = 0; k < docs[i].spans.size(); ++k) {
      EXPECT_EQ(back[i].spans[k].start, docs[i].spans[k].start);
      EXPECT_EQ(back[i].spans[k].end, docs[i].spans[k].end);
    }
  }

  std::ofstream((dir / "empty.jsonl").string()).close();
  EXPECT_TRUE(load_corpus((dir / "empty.jsonl").string()).empty());

  std::ofstream bad((dir / "bad.jsonl").string());
  bad << R"({"text":"ab cd","spans":[],"split":"train"})" << '\n'
      << R"({"text":"ab cd","spans":[[4,2,"harmful"]],"split":"train"})" << '\n';
  bad.close();
  try {
    load_corpus((dir / "bad.jsonl").string());
    FAIL() << "expected CorpusError";
  } catch (const CorpusError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_corpus((dir / "missing.jsonl").string()), CorpusError);
}

TEST(SequenceIo, RoundTrip) {
  const auto dir = testing_support::scratch_dir("seq_io");
  const std::vector<LabeledSequence> seqs{{{1, 5, 6}, {Iob::O, Iob::B, Iob::I}, 0}, {{1, 7}, {Iob::O, Iob::O}, 1}};
  save_sequences(seqs, (dir / "s.jsonl").string());
  const auto back = load_sequences((dir / "s.jsonl").string());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].token_ids, seqs[0].token_ids);
  EXPECT_EQ(back[0].iob, seqs[0].iob);
  EXPECT_EQ(back[1].binary_labels(), (std::vector<int>{0, 0}));
}
