#pragma once

// Whitespace word tokenizer with a character-level fallback. Every token
// carries its byte span in the source text so character-level annotations can
// be projected onto tokens exactly.

#include <algorithm>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace pguard {

using TokenId = std::uint32_t;

struct TokenSpan {
  TokenId id;
  std::size_t start;  // byte offset, inclusive
  std::size_t end;    // byte offset, exclusive
};

class Tokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::string_view kCharset = "abcdefghijklmnopqrstuvwxyz0123456789.,!?'-:;";

  Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

  explicit Tokenizer(std::vector<std::string> words) : words_(std::move(words)) {
    std::sort(words_.begin(), words_.end());
    words_.erase(std::unique(words_.begin(), words_.end()), words_.end());
    for (std::size_t i = 0; i < words_.size(); ++i) word_ids_.emplace(words_[i], word_base() + i);
  }

  /// Collects the distinct whitespace-separated words of `texts`, keeping the
  /// `max_words` most frequent (ties broken lexicographically).
  static Tokenizer build(const std::vector<std::string>& texts, std::size_t max_words = 200) {
    std::map<std::string, std::size_t> freq;
    for (const auto& t : texts)
      for_each_word(t, [&](std::size_t s, std::size_t e) { ++freq[t.substr(s, e - s)]; });
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.second > b.second; });
    if (ranked.size() > max_words) ranked.resize(max_words);
    std::vector<std::string> words;
    for (auto& [w, n] : ranked) words.push_back(w);
    return Tokenizer(std::move(words));
  }

  std::size_t vocab_size() const { return word_base() + words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<TokenSpan> tokenize(std::string_view text) const {
    std::vector<TokenSpan> out;
    for_each_word(text, [&](std::size_t s, std::size_t e) {
      const auto it = word_ids_.find(std::string(text.substr(s, e - s)));
      if (it != word_ids_.end()) {
        out.push_back({it->second, s, e});
        return;
      }
      std::size_t i = s;
      while (i < e) {
        const auto c = static_cast<unsigned char>(text[i]);
        std::size_t len = 1;
        if (c >= 0x80) {  // keep a whole UTF-8 sequence together
          while (i + len < e && (static_cast<unsigned char>(text[i + len]) & 0xC0) == 0x80) ++len;
        }
        const auto pos = c < 0x80 ? kCharset.find(static_cast<char>(c)) : std::string_view::npos;
        TokenId id = kUnk;
        if (pos != std::string_view::npos) id = static_cast<TokenId>((i == s ? initial_base() : cont_base()) + pos);
        out.push_back({id, i, i + len});
        i += len;
      }
    });
    return out;
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& t : tokenize(text)) ids.push_back(t.id);
    return ids;
  }

  /// Surface text of a token and whether it attaches to the previous token
  /// without a space. Control tokens render empty.
  std::pair<std::string, bool> piece(TokenId id) const {
    if (id == kPad || id == kBos || id == kEos) return {"", true};
    if (id == kUnk) return {"<unk>", false};
    if (id < cont_base()) return {std::string(1, kCharset[id - initial_base()]), false};
    if (id < word_base()) return {std::string(1, kCharset[id - cont_base()]), true};
    if (id < vocab_size()) return {words_[id - word_base()], false};
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (auto id : ids) {
      auto [text, attach] = piece(id);
      if (text.empty()) continue;
      if (!out.empty() && !attach) out.push_back(' ');
      out += text;
    }
    return out;
  }

  nlohmann::json to_json() const { return {{"charset", std::string(kCharset)}, {"words", words_}}; }

  static Tokenizer from_json(const nlohmann::json& j) {
    if (j.at("charset").get<std::string>() != kCharset) throw std::runtime_error("vocabulary uses a different charset");
    return Tokenizer(j.at("words").get<std::vector<std::string>>());
  }

  static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

  template <class F>
  static void for_each_word(std::string_view text, F&& f) {
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && is_space(text[i])) ++i;
      const std::size_t s = i;
      while (i < text.size() && !is_space(text[i])) ++i;
      if (i > s) f(s, i);
    }
  }

 private:
  static constexpr std::size_t initial_base() { return 4; }
  static constexpr std::size_t cont_base() { return initial_base() + kCharset.size(); }
  static constexpr std::size_t word_base() { return cont_base() + kCharset.size(); }

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> word_ids_;
};

}  // namespace pguard
