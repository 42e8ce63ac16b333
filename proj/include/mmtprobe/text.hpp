#pragma once

// Tokenization, vocabularies, parallel corpora and the three source-side
// degradation schemes (color deprivation, entity masking, progressive masking).

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mmtprobe/errors.hpp"
#include "mmtprobe/hash.hpp"
#include "mmtprobe/random.hpp"

namespace mmtprobe {

using Tokens = std::vector<std::string>;

inline constexpr std::string_view kMaskToken = "[v]";
inline constexpr std::string_view kHyphenMarker = "@-@";

// ---------------------------------------------------------------------------
// Tokenization

namespace detail {

inline bool is_word_char(UChar32 c) {
  if (u_isalnum(c)) return true;
  const auto type = u_charType(c);
  return type == U_NON_SPACING_MARK || type == U_COMBINING_SPACING_MARK;
}

inline bool is_apostrophe(UChar32 c) { return c == u'\'' || c == 0x2019; }

}  // namespace detail

// NFC-normalize, lowercase, isolate punctuation and split internal hyphens
// into "w1 @-@ w2". Apostrophes between letters and separators between
// digits ("3.5", "1,000") stay inside the word.
inline Tokens tokenize(std::string_view raw) {
  UErrorCode status = U_ZERO_ERROR;
  icu::UnicodeString text = icu::UnicodeString::fromUTF8(icu::StringPiece(raw.data(), static_cast<int32_t>(raw.size())));
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_SUCCESS(status)) {
    icu::UnicodeString normalized = nfc->normalize(text, status);
    if (U_SUCCESS(status)) text = normalized;
  }
  text.toLower(icu::Locale::getRoot());

  std::vector<UChar32> cps;
  for (int32_t i = 0; i < text.length(); i = text.moveIndex32(i, 1)) cps.push_back(text.char32At(i));

  Tokens out;
  icu::UnicodeString current;
  auto flush = [&] {
    if (!current.isEmpty()) {
      std::string s;
      current.toUTF8String(s);
      out.push_back(std::move(s));
      current.remove();
    }
  };
  for (std::size_t i = 0; i < cps.size(); ++i) {
    const UChar32 c = cps[i];
    const bool prev_word = i > 0 && detail::is_word_char(cps[i - 1]);
    const bool next_word = i + 1 < cps.size() && detail::is_word_char(cps[i + 1]);
    if (u_isUWhiteSpace(c)) {
      flush();
    } else if (detail::is_word_char(c)) {
      current.append(c);
    } else if (c == u'-' && prev_word && next_word) {
      flush();
      out.emplace_back(kHyphenMarker);
    } else if (detail::is_apostrophe(c) && prev_word && next_word && u_isalpha(cps[i - 1]) && u_isalpha(cps[i + 1])) {
      current.append(c);
    } else if ((c == u'.' || c == u',') && i > 0 && i + 1 < cps.size() && u_isdigit(cps[i - 1]) && u_isdigit(cps[i + 1])) {
      current.append(c);
    } else {
      flush();
      current.append(c);
      flush();
    }
  }
  flush();
  return out;
}

// Collapses every "w1 @-@ w2" into "w1-w2" (chains collapse fully). A marker
// at either edge of the sequence is kept verbatim.
inline Tokens stitch_hyphens(const Tokens& tokens) {
  Tokens out;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == kHyphenMarker && !out.empty() && i + 1 < tokens.size()) {
      out.back() += '-';
      out.back() += tokens[++i];
    } else {
      out.push_back(tokens[i]);
    }
  }
  return out;
}

inline std::string join_tokens(const Tokens& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += tokens[i];
  }
  return s;
}

inline Tokens split_whitespace(std::string_view line) {
  Tokens out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r' || line[i] == '\n')) ++i;
    std::size_t j = i;
    while (j < line.size() && !(line[j] == ' ' || line[j] == '\t' || line[j] == '\r' || line[j] == '\n')) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

// Canonical form used before scoring: tokenize, then re-join hyphenated words.
inline Tokens normalize_for_eval(std::string_view line) { return stitch_hyphens(tokenize(line)); }

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kMask = 4;
  static constexpr int kReserved = 5;

  static const std::vector<std::string>& reserved_tokens() {
    static const std::vector<std::string> r{"<pad>", "<s>", "</s>", "<unk>", std::string(kMaskToken)};
    return r;
  }

  Vocabulary() : Vocabulary(reserved_tokens()) {}

  // Rebuilds a vocabulary from its id-ordered token list (e.g. a saved file).
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    const auto& reserved = reserved_tokens();
    if (tokens_.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), tokens_.begin())) {
      throw FormatError("vocabulary does not start with the reserved tokens");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
        throw FormatError("duplicate vocabulary entry '" + tokens_[i] + "'");
      }
    }
  }

  // All tokens of the corpus, no frequency cutoff. Order: reserved ids, then
  // descending frequency, ties broken lexicographically.
  static Vocabulary build(const std::vector<Tokens>& corpus) {
    if (corpus.empty()) throw ConfigError("cannot build a vocabulary from an empty corpus");
    std::unordered_map<std::string, std::size_t> freq;
    for (const auto& sentence : corpus) {
      for (const auto& tok : sentence) ++freq[tok];
    }
    const auto& reserved = reserved_tokens();
    std::vector<std::pair<std::string, std::size_t>> entries;
    for (auto& [tok, n] : freq) {
      if (std::find(reserved.begin(), reserved.end(), tok) == reserved.end()) entries.emplace_back(tok, n);
    }
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    std::vector<std::string> tokens = reserved;
    for (auto& e : entries) tokens.push_back(std::move(e.first));
    return Vocabulary(std::move(tokens));
  }

  int id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view token) const { return ids_.count(std::string(token)) != 0; }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw IndexError("vocabulary id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  // Content hash over the id-ordered token list.
  std::string hash() const { return sha256_hex(join_lines(tokens_)); }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << join_lines(tokens_);
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return Vocabulary(std::move(tokens));
  }

 private:
  static std::string join_lines(const std::vector<std::string>& tokens) {
    std::string s;
    for (const auto& t : tokens) {
      s += t;
      s += '\n';
    }
    return s;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// ---------------------------------------------------------------------------
// Corpora

struct ParallelSample {
  Tokens source;
  Tokens target;
  std::size_t image_index = 0;

  bool operator==(const ParallelSample&) const = default;
};

using Corpus = std::vector<ParallelSample>;

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

inline void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

// Writes one sentence per line, tokens joined by single spaces.
inline void write_token_lines(const std::filesystem::path& path, const std::vector<Tokens>& sentences) {
  std::vector<std::string> lines;
  lines.reserve(sentences.size());
  for (const auto& s : sentences) lines.push_back(join_tokens(s));
  write_lines(path, lines);
}

// Loads line-aligned source/target files. With `pretokenized` the lines are
// split on whitespace, otherwise they go through tokenize(). The image index
// of each sample is its line number.
inline Corpus load_parallel(const std::filesystem::path& src, const std::filesystem::path& tgt, bool pretokenized = false) {
  const auto s = read_lines(src);
  const auto t = read_lines(tgt);
  if (s.size() != t.size()) {
    throw FormatError("source has " + std::to_string(s.size()) + " lines but target has " + std::to_string(t.size()));
  }
  Corpus corpus;
  corpus.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    ParallelSample sample{pretokenized ? split_whitespace(s[i]) : tokenize(s[i]),
                          pretokenized ? split_whitespace(t[i]) : tokenize(t[i]), i};
    if (sample.source.empty() || sample.target.empty()) {
      throw FormatError("empty sentence on line " + std::to_string(i + 1) + " of " + src.string() + " / " + tgt.string());
    }
    corpus.push_back(std::move(sample));
  }
  return corpus;
}

inline std::vector<Tokens> sources(const Corpus& c) {
  std::vector<Tokens> out;
  out.reserve(c.size());
  for (const auto& s : c) out.push_back(s.source);
  return out;
}

inline std::vector<Tokens> targets(const Corpus& c) {
  std::vector<Tokens> out;
  out.reserve(c.size());
  for (const auto& s : c) out.push_back(s.target);
  return out;
}

// ---------------------------------------------------------------------------
// Degradation resources

using ColorLexicon = std::unordered_set<std::string>;

inline const std::vector<std::string>& default_color_terms() {
  static const std::vector<std::string> terms{"black", "white", "red",  "green", "blue",   "yellow", "brown",
                                              "orange", "pink", "purple", "gray", "grey", "beige",  "tan",
                                              "maroon", "navy", "teal", "gold",  "silver", "violet"};
  return terms;
}

inline ColorLexicon default_color_lexicon() {
  const auto& t = default_color_terms();
  return ColorLexicon(t.begin(), t.end());
}

// One word per line; blank lines and '#' comments are ignored.
inline ColorLexicon load_color_lexicon(const std::filesystem::path& path) {
  ColorLexicon lex;
  for (auto& line : read_lines(path)) {
    auto toks = split_whitespace(line);
    if (toks.empty() || toks[0][0] == '#') continue;
    lex.insert(toks[0]);
  }
  if (lex.empty()) throw ConfigError("color lexicon " + path.string() + " is empty");
  return lex;
}

// Target-side lexicon: surface form -> canonical color class (bleu/bleue -> BLUE).
using TargetColorLexicon = std::unordered_map<std::string, std::string>;

inline TargetColorLexicon load_target_color_lexicon(const std::filesystem::path& path) {
  TargetColorLexicon lex;
  std::size_t lineno = 0;
  for (auto& line : read_lines(path)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 'surface<TAB>class'");
    }
    lex[line.substr(0, tab)] = line.substr(tab + 1);
  }
  if (lex.empty()) throw ConfigError("target color lexicon " + path.string() + " is empty");
  return lex;
}

// Sample index -> sorted, duplicate-free 0-based source token positions.
struct EntityAnnotations {
  std::map<std::size_t, std::vector<std::size_t>> heads;

  const std::vector<std::size_t>* find(std::size_t sample) const {
    auto it = heads.find(sample);
    return it == heads.end() ? nullptr : &it->second;
  }

  // TSV lines "sample-index<TAB>i,j,k". An empty index field is allowed.
  static EntityAnnotations load(const std::filesystem::path& path) {
    EntityAnnotations ann;
    std::size_t lineno = 0;
    for (auto& line : read_lines(path)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      auto where = [&] { return path.string() + ":" + std::to_string(lineno); };
      try {
        const std::size_t sample = std::stoul(line.substr(0, tab));
        std::vector<std::size_t> idx;
        if (tab != std::string::npos) {
          std::stringstream ss(line.substr(tab + 1));
          std::string item;
          while (std::getline(ss, item, ',')) {
            if (!item.empty()) idx.push_back(std::stoul(item));
          }
        }
        std::sort(idx.begin(), idx.end());
        idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
        ann.heads[sample] = std::move(idx);
      } catch (const std::logic_error&) {
        throw FormatError(where() + ": malformed annotation line");
      }
    }
    return ann;
  }

  void save(const std::filesystem::path& path) const {
    std::vector<std::string> lines;
    for (const auto& [sample, idx] : heads) {
      std::string l = std::to_string(sample) + '\t';
      for (std::size_t i = 0; i < idx.size(); ++i) l += (i ? "," : "") + std::to_string(idx[i]);
      lines.push_back(std::move(l));
    }
    write_lines(path, lines);
  }
};

enum class DegradationVariant { none, color, entity, progressive };

inline std::string to_string(DegradationVariant v) {
  switch (v) {
    case DegradationVariant::none: return "none";
    case DegradationVariant::color: return "color";
    case DegradationVariant::entity: return "entity";
    case DegradationVariant::progressive: return "progressive";
  }
  return "?";
}

inline DegradationVariant parse_degradation_variant(std::string_view s) {
  if (s == "none") return DegradationVariant::none;
  if (s == "color") return DegradationVariant::color;
  if (s == "entity") return DegradationVariant::entity;
  if (s == "progressive") return DegradationVariant::progressive;
  throw ConfigError("unknown degradation variant '" + std::string(s) + "'");
}

struct DegradationSpec {
  DegradationVariant variant = DegradationVariant::none;
  int k = 0;
  std::shared_ptr<const ColorLexicon> color_lexicon;
  std::shared_ptr<const EntityAnnotations> annotations;

  static DegradationSpec none() { return {}; }
  static DegradationSpec color(ColorLexicon lex) {
    return {DegradationVariant::color, 0, std::make_shared<const ColorLexicon>(std::move(lex)), nullptr};
  }
  static DegradationSpec entity(EntityAnnotations ann) {
    return {DegradationVariant::entity, 0, nullptr, std::make_shared<const EntityAnnotations>(std::move(ann))};
  }
  static DegradationSpec progressive(int k) { return {DegradationVariant::progressive, k, nullptr, nullptr}; }

  // Short label used for directory names and reports ("none", "color", "k4", ...).
  std::string label() const {
    return variant == DegradationVariant::progressive ? "k" + std::to_string(k) : to_string(variant);
  }

  void validate() const {
    switch (variant) {
      case DegradationVariant::none:
        if (color_lexicon || annotations) throw ConfigError("degradation 'none' takes no resources");
        break;
      case DegradationVariant::color:
        if (!color_lexicon || color_lexicon->empty()) throw ConfigError("color deprivation needs a non-empty lexicon");
        if (annotations) throw ConfigError("color deprivation takes no entity annotations");
        break;
      case DegradationVariant::entity:
        if (!annotations) throw ConfigError("entity masking needs annotations");
        if (color_lexicon) throw ConfigError("entity masking takes no color lexicon");
        break;
      case DegradationVariant::progressive:
        if (k < 0 || k > 30 || k % 2 != 0) {
          throw ConfigError("progressive masking k must be an even integer in [0, 30], got " + std::to_string(k));
        }
        if (color_lexicon || annotations) throw ConfigError("progressive masking takes no resources");
        break;
    }
  }
};

struct DegradationStats {
  std::size_t total_tokens = 0;
  std::size_t masked_tokens = 0;
  double masked_fraction = 0.0;
  std::size_t affected_sentences = 0;
};

// ---------------------------------------------------------------------------
// Degradation operations

inline Tokens apply_color_deprivation(const Tokens& tokens, const ColorLexicon& lexicon) {
  if (lexicon.empty()) throw ConfigError("color deprivation needs a non-empty lexicon");
  Tokens out = tokens;
  for (auto& t : out) {
    if (lexicon.count(t)) t = kMaskToken;
  }
  return out;
}

inline Tokens apply_entity_masking(const Tokens& tokens, std::span<const std::size_t> heads, std::size_t sample = 0) {
  Tokens out = tokens;
  for (std::size_t i : heads) {
    if (i >= out.size()) {
      throw AnnotationError("sample " + std::to_string(sample) + ": entity index " + std::to_string(i) +
                            " outside sentence of length " + std::to_string(out.size()));
    }
    out[i] = kMaskToken;
  }
  return out;
}

inline Tokens apply_progressive_masking(const Tokens& tokens, int k) {
  if (k < 0) throw ConfigError("progressive masking k must be non-negative");
  Tokens out = tokens;
  for (std::size_t i = static_cast<std::size_t>(k); i < out.size(); ++i) out[i] = kMaskToken;
  return out;
}

inline Tokens degrade_sentence(const Tokens& tokens, const DegradationSpec& spec, std::size_t sample) {
  switch (spec.variant) {
    case DegradationVariant::none: return tokens;
    case DegradationVariant::color: return apply_color_deprivation(tokens, *spec.color_lexicon);
    case DegradationVariant::entity: {
      const auto* heads = spec.annotations->find(sample);
      return heads ? apply_entity_masking(tokens, *heads, sample) : tokens;
    }
    case DegradationVariant::progressive: return apply_progressive_masking(tokens, spec.k);
  }
  return tokens;
}

inline DegradationStats degradation_stats(const Corpus& corpus) {
  DegradationStats st;
  for (const auto& s : corpus) {
    const auto masked = static_cast<std::size_t>(std::count(s.source.begin(), s.source.end(), kMaskToken));
    st.total_tokens += s.source.size();
    st.masked_tokens += masked;
    st.affected_sentences += masked > 0 ? 1 : 0;
  }
  st.masked_fraction = st.total_tokens ? static_cast<double>(st.masked_tokens) / static_cast<double>(st.total_tokens) : 0.0;
  return st;
}

// Degrades every source sentence; targets are untouched. Sample indices used
// for entity lookup are positions within `corpus`.
inline std::pair<Corpus, DegradationStats> degrade_corpus(const Corpus& corpus, const DegradationSpec& spec) {
  spec.validate();
  Corpus out = corpus;
  for (std::size_t i = 0; i < out.size(); ++i) out[i].source = degrade_sentence(corpus[i].source, spec, i);
  auto stats = degradation_stats(out);
  return {std::move(out), stats};
}

// ---------------------------------------------------------------------------
// Encoding and batching

struct EncodedSample {
  std::vector<int> source;  // ids + EOS
  std::vector<int> target;  // BOS + ids + EOS
  std::size_t image_index = 0;
};

inline EncodedSample encode_sample(const ParallelSample& s, const Vocabulary& src, const Vocabulary& tgt) {
  EncodedSample e;
  e.source.reserve(s.source.size() + 1);
  for (const auto& t : s.source) e.source.push_back(src.id(t));
  e.source.push_back(Vocabulary::kEos);
  e.target.reserve(s.target.size() + 2);
  e.target.push_back(Vocabulary::kBos);
  for (const auto& t : s.target) e.target.push_back(tgt.id(t));
  e.target.push_back(Vocabulary::kEos);
  e.image_index = s.image_index;
  return e;
}

inline std::vector<EncodedSample> encode_corpus(const Corpus& c, const Vocabulary& src, const Vocabulary& tgt) {
  std::vector<EncodedSample> out;
  out.reserve(c.size());
  for (const auto& s : c) out.push_back(encode_sample(s, src, tgt));
  return out;
}

// Ids to tokens, stopping at EOS and skipping BOS/PAD.
inline Tokens decode_ids(std::span<const int> ids, const Vocabulary& vocab) {
  Tokens out;
  for (int id : ids) {
    if (id == Vocabulary::kEos) break;
    if (id == Vocabulary::kBos || id == Vocabulary::kPad) continue;
    out.push_back(vocab.token(id));
  }
  return out;
}

// A padded mini-batch. All sequence arrays are time-major: element (t, b) is
// at t * size() + b. Masks are 1 for real tokens and 0 for padding.
struct Batch {
  std::vector<std::size_t> samples;
  std::vector<std::size_t> image_index;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;  // decoder steps = longest target - 1
  std::vector<int> src;
  std::vector<double> src_mask;
  std::vector<int> tgt_in;
  std::vector<int> tgt_out;
  std::vector<double> tgt_mask;

  std::size_t size() const noexcept { return samples.size(); }
};

inline Batch make_batch(const std::vector<EncodedSample>& data, std::span<const std::size_t> indices) {
  Batch b;
  b.samples.assign(indices.begin(), indices.end());
  for (std::size_t i : indices) {
    b.src_len = std::max(b.src_len, data[i].source.size());
    b.tgt_len = std::max(b.tgt_len, data[i].target.size() - 1);
    b.image_index.push_back(data[i].image_index);
  }
  const std::size_t B = indices.size();
  b.src.assign(b.src_len * B, Vocabulary::kPad);
  b.src_mask.assign(b.src_len * B, 0.0);
  b.tgt_in.assign(b.tgt_len * B, Vocabulary::kPad);
  b.tgt_out.assign(b.tgt_len * B, Vocabulary::kPad);
  b.tgt_mask.assign(b.tgt_len * B, 0.0);
  for (std::size_t j = 0; j < B; ++j) {
    const auto& e = data[indices[j]];
    for (std::size_t t = 0; t < e.source.size(); ++t) {
      b.src[t * B + j] = e.source[t];
      b.src_mask[t * B + j] = 1.0;
    }
    for (std::size_t t = 0; t + 1 < e.target.size(); ++t) {
      b.tgt_in[t * B + j] = e.target[t];
      b.tgt_out[t * B + j] = e.target[t + 1];
      b.tgt_mask[t * B + j] = 1.0;
    }
  }
  return b;
}

// Epoch batches: seeded shuffle, then stable sort by source length inside
// windows of 32 * batch_size, then cut into batches in window order. The
// result is a pure function of (data, batch_size, seed, epoch).
inline std::vector<Batch> batch_iterator(const std::vector<EncodedSample>& data, std::size_t batch_size,
                                         std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0xba7c4, epoch));
  shuffle(std::span<std::size_t>(order), rng);
  const std::size_t window = 32 * batch_size;
  std::vector<Batch> batches;
  for (std::size_t w = 0; w < order.size(); w += window) {
    auto first = order.begin() + static_cast<std::ptrdiff_t>(w);
    auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), w + window));
    std::stable_sort(first, last, [&](std::size_t a, std::size_t b) { return data[a].source.size() < data[b].source.size(); });
    for (auto it = first; it < last; it += static_cast<std::ptrdiff_t>(std::min<std::size_t>(batch_size, last - it))) {
      const std::size_t n = std::min<std::size_t>(batch_size, static_cast<std::size_t>(last - it));
      batches.push_back(make_batch(data, std::span<const std::size_t>(&*it, n)));
    }
  }
  return batches;
}

// Batches in corpus order, for evaluation.
inline std::vector<Batch> sequential_batches(const std::vector<EncodedSample>& data, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<Batch> out;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.size(); i += batch_size) {
    idx.clear();
    for (std::size_t j = i; j < std::min(data.size(), i + batch_size); ++j) idx.push_back(j);
    out.push_back(make_batch(data, idx));
  }
  return out;
}

}  // namespace mmtprobe
