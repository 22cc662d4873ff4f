#pragma once

// Caption tokenization, rule-based part-of-speech tagging and noun-phrase chunking.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mia/default_lexicon.hpp"

namespace mia::text {

struct Token {
  std::string surface;
  std::size_t position = 0;
};

enum class PosTag { DT, JJ, CD, NN, VBG, VB, IN, CC, PRP, OTHER };

inline std::string_view tag_name(PosTag t) {
  switch (t) {
    case PosTag::DT: return "DT";
    case PosTag::JJ: return "JJ";
    case PosTag::CD: return "CD";
    case PosTag::NN: return "NN";
    case PosTag::VBG: return "VBG";
    case PosTag::VB: return "VB";
    case PosTag::IN: return "IN";
    case PosTag::CC: return "CC";
    case PosTag::PRP: return "PRP";
    case PosTag::OTHER: return "OTHER";
  }
  return "OTHER";
}

inline std::optional<PosTag> parse_tag(std::string_view s) {
  static const std::pair<std::string_view, PosTag> kTags[] = {
      {"DT", PosTag::DT}, {"JJ", PosTag::JJ}, {"CD", PosTag::CD}, {"NN", PosTag::NN},   {"VBG", PosTag::VBG},
      {"VB", PosTag::VB}, {"IN", PosTag::IN}, {"CC", PosTag::CC}, {"PRP", PosTag::PRP}, {"OTHER", PosTag::OTHER}};
  for (const auto& [name, tag] : kTags) {
    if (name == s) return tag;
  }
  return std::nullopt;
}

struct TaggedToken {
  Token token;
  PosTag tag = PosTag::OTHER;
};

struct NounPhrase {
  std::vector<std::string> tokens;
  std::size_t start = 0;       // first token position (after any stripped determiner)
  std::size_t head_index = 0;  // position of the final noun

  std::string text() const {
    std::string s;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) s += ' ';
      s += tokens[i];
    }
    return s;
  }
};

/// Lowercases and splits on anything that is not an ASCII letter/digit; bytes >= 0x80 stay in words.
inline std::vector<Token> tokenize(std::string_view caption) {
  std::vector<Token> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back({cur, out.size()});
      cur.clear();
    }
  };
  for (char ch : caption) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    } else {
      flush();
    }
  }
  flush();
  return out;
}

inline std::string join_tokens(const std::vector<Token>& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += tokens[i].surface;
  }
  return s;
}

/// Word -> tag table. Closed-class words are always present; content words come from a TSV file.
class Lexicon {
 public:
  /// Closed-class words plus the content lexicon shipped with the library.
  static const Lexicon& builtin() {
    static const Lexicon lex = [] {
      Lexicon l;
      std::istringstream is{std::string(kDefaultLexiconTsv)};
      l.read_tsv(is, "<builtin lexicon>");
      return l;
    }();
    return lex;
  }

  /// Closed-class words plus the content words in `path` (lines `word<TAB>TAG`).
  static Lexicon load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open lexicon: " + path.string());
    Lexicon l;
    l.read_tsv(is, path.string());
    return l;
  }

  std::optional<PosTag> lookup(const std::string& word) const {
    if (auto it = closed_.find(word); it != closed_.end()) return it->second;
    if (auto it = content_.find(word); it != content_.end()) return it->second;
    return std::nullopt;
  }

  /// Every known word, sorted.
  std::vector<std::string> words() const {
    std::vector<std::string> out;
    for (const auto* m : {&closed_, &content_}) {
      for (const auto& kv : *m) out.push_back(kv.first);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  bool is_known_noun(const std::string& word) const {
    auto t = lookup(word);
    return t && *t == PosTag::NN;
  }

  std::size_t content_size() const { return content_.size(); }

 private:
  Lexicon() {
    for (const char* w : {"a", "an", "the", "this", "that", "these", "those", "his", "her", "their", "its", "my",
                          "your", "our", "some", "any", "each", "every", "another", "no", "both", "either",
                          "neither", "all"}) {
      closed_[w] = PosTag::DT;
    }
    for (const char* w : {"in", "on", "at", "with", "without", "of", "over", "under", "above", "below", "behind",
                          "beside", "near", "by", "for", "from", "to", "into", "onto", "through", "across", "along",
                          "around", "about", "against", "between", "among", "during", "after", "before", "while",
                          "like", "as", "up", "down", "off", "out", "upon", "within", "underneath", "inside",
                          "outside", "towards", "toward", "than", "via"}) {
      closed_[w] = PosTag::IN;
    }
    for (const char* w : {"and", "or", "but", "nor", "plus", "yet", "so"}) closed_[w] = PosTag::CC;
    for (const char* w : {"he", "she", "it", "they", "him", "them", "i", "you", "we", "me", "us", "somebody",
                          "someone", "anybody", "anyone", "everybody", "everyone", "nobody", "himself", "herself",
                          "themselves", "itself", "who", "whom", "which", "what", "there", "here"}) {
      closed_[w] = PosTag::PRP;
    }
    for (const char* w : {"is", "are", "was", "were", "be", "been", "am", "has", "have", "had", "wears", "wear",
                          "wore", "carries", "carry", "carried", "holds", "hold", "held", "walks", "walk", "walked",
                          "does", "do", "did", "can", "could", "will", "would", "may", "might", "should", "must"}) {
      closed_[w] = PosTag::VB;
    }
  }

  void read_tsv(std::istream& is, const std::string& what) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos || tab == 0) {
        throw std::runtime_error(what + ":" + std::to_string(lineno) + ": expected word<TAB>TAG");
      }
      auto tag = parse_tag(std::string_view(line).substr(tab + 1));
      if (!tag) throw std::runtime_error(what + ":" + std::to_string(lineno) + ": unknown tag");
      content_[line.substr(0, tab)] = *tag;
    }
  }

  std::unordered_map<std::string, PosTag> closed_;
  std::unordered_map<std::string, PosTag> content_;
};

namespace detail {

inline bool all_digits(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

inline bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && std::string_view(s).substr(s.size() - suffix.size()) == suffix;
}

}  // namespace detail

/// Lexicon first, then suffix rules; anything unrecognised is NN.
inline PosTag tag_word(const std::string& w, const Lexicon& lex) {
  if (auto t = lex.lookup(w)) return *t;
  if (detail::all_digits(w)) return PosTag::CD;
  if (w.size() > 4 && detail::ends_with(w, "ing")) return PosTag::VBG;
  if (w.size() > 1 && w.back() == 's') {
    const std::string stem = w.substr(0, w.size() - 1);
    if (lex.is_known_noun(stem)) return PosTag::NN;
    if (detail::ends_with(w, "es") && lex.is_known_noun(w.substr(0, w.size() - 2))) return PosTag::NN;
  }
  return PosTag::NN;
}

inline std::vector<TaggedToken> pos_tag(const std::vector<Token>& tokens, const Lexicon& lex = Lexicon::builtin()) {
  std::vector<TaggedToken> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back({t, tag_word(t.surface, lex)});
  return out;
}

/// Greedy left-to-right maximal matches of  DT? (JJ|CD|VBG|NN)* NN ; the determiner is dropped.
inline std::vector<NounPhrase> chunk_noun_phrases(const std::vector<TaggedToken>& tagged) {
  auto is_body = [](PosTag t) { return t == PosTag::JJ || t == PosTag::CD || t == PosTag::VBG || t == PosTag::NN; };
  std::vector<NounPhrase> phrases;
  std::size_t i = 0;
  while (i < tagged.size()) {
    std::size_t j = i;
    if (tagged[j].tag == PosTag::DT) ++j;
    std::size_t end = j;
    std::optional<std::size_t> last_noun;
    while (end < tagged.size() && is_body(tagged[end].tag)) {
      if (tagged[end].tag == PosTag::NN) last_noun = end;
      ++end;
    }
    if (!last_noun) {
      ++i;
      continue;
    }
    NounPhrase np;
    for (std::size_t k = j; k <= *last_noun; ++k) np.tokens.push_back(tagged[k].token.surface);
    np.start = tagged[j].token.position;
    np.head_index = tagged[*last_noun].token.position;
    phrases.push_back(std::move(np));
    i = *last_noun + 1;
  }
  return phrases;
}

inline std::vector<NounPhrase> extract_phrases(std::string_view caption, const Lexicon& lex = Lexicon::builtin()) {
  return chunk_noun_phrases(pos_tag(tokenize(caption), lex));
}

/// Word -> index map; index 0 is reserved for unknown words.
class Vocabulary {
 public:
  static constexpr std::size_t kUnk = 0;

  Vocabulary() = default;

  /// Words are ordered alphabetically so the mapping depends only on the surviving word set.
  explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    std::sort(words_.begin(), words_.end());
    words_.erase(std::unique(words_.begin(), words_.end()), words_.end());
    for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = i + 1;
  }

  std::size_t index(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& w) const { return index_.count(w) != 0; }

  /// Number of known words (excluding <unk>).
  std::size_t size() const { return words_.size(); }
  /// Rows needed in an embedding table, <unk> included.
  std::size_t table_size() const { return words_.size() + 1; }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline Vocabulary build_vocab(const std::vector<std::string>& captions, std::size_t min_count) {
  if (min_count < 1) throw std::invalid_argument("min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& c : captions) {
    for (const auto& t : tokenize(c)) ++counts[t.surface];
  }
  std::vector<std::string> kept;
  for (const auto& [w, n] : counts) {
    if (n >= min_count) kept.push_back(w);
  }
  return Vocabulary(std::move(kept));
}

inline std::vector<std::size_t> numericalize(const std::vector<Token>& tokens, const Vocabulary& vocab) {
  std::vector<std::size_t> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(vocab.index(t.surface));
  return out;
}

inline std::vector<std::size_t> numericalize(const std::vector<std::string>& words, const Vocabulary& vocab) {
  std::vector<std::size_t> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(vocab.index(w));
  return out;
}

/// A caption run through the whole pipeline.
struct TextSample {
  std::string caption;
  std::vector<Token> tokens;
  std::vector<PosTag> tags;
  std::vector<NounPhrase> phrases;
  std::vector<std::size_t> indices;
  std::vector<std::vector<std::size_t>> phrase_indices;
};

inline TextSample prepare_text(const std::string& caption, const Vocabulary& vocab,
                               const Lexicon& lex = Lexicon::builtin()) {
  TextSample s;
  s.caption = caption;
  s.tokens = tokenize(caption);
  auto tagged = pos_tag(s.tokens, lex);
  for (const auto& t : tagged) s.tags.push_back(t.tag);
  s.phrases = chunk_noun_phrases(tagged);
  s.indices = numericalize(s.tokens, vocab);
  if (s.indices.empty()) s.indices.push_back(Vocabulary::kUnk);  // a caption without words still encodes
  for (const auto& p : s.phrases) s.phrase_indices.push_back(numericalize(p.tokens, vocab));
  return s;
}

}  // namespace mia::text
