#include <catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <map>

#include "mmtprobe/text.hpp"

using namespace mmtprobe;

namespace {

Tokens T(std::string_view s) { return split_whitespace(s); }

const Tokens kTable1 = T("a lady in a blue dress singing");

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mmtprobe_text_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

const std::vector<std::string> kWords{"a",    "man",   "red",  "blue", "dog",  "in",   "the",  "park",
                                      "runs", "green", "shirt", "of",  "ball", "grey", "sits", "on"};

Corpus random_corpus(std::size_t n, Rng& rng) {
  Corpus c;
  for (std::size_t i = 0; i < n; ++i) {
    ParallelSample s;
    const std::size_t len = 1 + uniform_index(rng, 12);
    for (std::size_t j = 0; j < len; ++j) s.source.push_back(kWords[uniform_index(rng, kWords.size())]);
    s.target = {"t" + std::to_string(i)};
    s.image_index = i;
    c.push_back(std::move(s));
  }
  return c;
}

}  // namespace

TEST_CASE("tokenize", "[text][tokenize]") {
  CHECK(tokenize("A lady-in-waiting.") == Tokens{"a", "lady", "@-@", "in", "@-@", "waiting", "."});
  CHECK(tokenize("Hello") == Tokens{"hello"});
  CHECK(tokenize("").empty());
  CHECK(tokenize("  Two   spaces,\tand a tab!") == Tokens{"two", "spaces", ",", "and", "a", "tab", "!"});
  CHECK(tokenize("L'homme court") == Tokens{"l'homme", "court"});
  CHECK(tokenize("ÉTÉ") == Tokens{"été"});
  // Decomposed e + combining acute composes to the same token.
  CHECK(tokenize("e\xCC\x81t\xC3\xA9") == Tokens{"\xC3\xA9t\xC3\xA9"});
  CHECK(tokenize("-leading and trailing-") == Tokens{"-", "leading", "and", "trailing", "-"});
}

TEST_CASE("stitch hyphens", "[text][tokenize]") {
  CHECK(stitch_hyphens({"lady", "@-@", "in"}) == Tokens{"lady-in"});
  CHECK(stitch_hyphens(T("a man runs")) == T("a man runs"));
  CHECK(stitch_hyphens({"@-@", "x"}) == Tokens{"@-@", "x"});
  CHECK(stitch_hyphens({"x", "@-@"}) == Tokens{"x", "@-@"});
  CHECK(stitch_hyphens(tokenize("a lady-in-waiting")) == Tokens{"a", "lady-in-waiting"});
}

TEST_CASE("tokenize then stitch round-trips on random lines", "[text][tokenize][property]") {
  Rng rng(17);
  const std::vector<std::string> pieces{"Man", "woman", "lady-in-waiting", "t-shirt", "RED", "dog",
                                        "x-ray", "blue", "grey-green", "sits", "ball"};
  for (int i = 0; i < 1000; ++i) {
    std::string line;
    const std::size_t n = 1 + uniform_index(rng, 8);
    std::string expected;
    for (std::size_t j = 0; j < n; ++j) {
      const auto& w = pieces[uniform_index(rng, pieces.size())];
      line += (j ? " " : "") + w;
    }
    expected = line;
    std::transform(expected.begin(), expected.end(), expected.begin(), [](unsigned char c) { return std::tolower(c); });
    REQUIRE(join_tokens(stitch_hyphens(tokenize(line))) == expected);
  }
}

TEST_CASE("vocabulary ordering and reserved ids", "[text][vocab]") {
  auto v = Vocabulary::build({T("a b"), T("a")});
  CHECK(v.id("a") == 5);
  CHECK(v.id("b") == 6);
  CHECK(v.id("[v]") == Vocabulary::kMask);
  CHECK(v.token(Vocabulary::kMask) == "[v]");
  CHECK(v.id("zebra") == Vocabulary::kUnk);
  CHECK(v.size() == 7);
  CHECK_THROWS_AS(Vocabulary::build({}), ConfigError);

  auto tie = Vocabulary::build({T("c b a c b a z")});
  CHECK(tie.tokens() == std::vector<std::string>{"<pad>", "<s>", "</s>", "<unk>", "[v]", "a", "b", "c", "z"});

  // Mask tokens in the corpus do not create a second entry.
  auto masked = Vocabulary::build({T("a [v] [v]")});
  CHECK(masked.size() == 6);

  Rng rng(2);
  auto c1 = random_corpus(200, rng);
  CHECK(Vocabulary::build(sources(c1)).hash() == Vocabulary::build(sources(c1)).hash());
}

TEST_CASE("vocabulary save/load round-trip", "[text][vocab]") {
  auto dir = temp_dir("vocab");
  auto v = Vocabulary::build({T("un homme court"), T("un chien")});
  v.save(dir / "v.txt");
  auto w = Vocabulary::load(dir / "v.txt");
  CHECK(w.tokens() == v.tokens());
  CHECK(w.hash() == v.hash());
}

TEST_CASE("Table 1 degradation rows", "[text][degrade]") {
  CHECK(join_tokens(kTable1) == "a lady in a blue dress singing");
  CHECK(join_tokens(apply_color_deprivation(kTable1, default_color_lexicon())) == "a lady in a [v] dress singing");
  const std::vector<std::size_t> heads{1, 5};
  CHECK(join_tokens(apply_entity_masking(kTable1, heads)) == "a [v] in a blue [v] singing");
  CHECK(join_tokens(apply_progressive_masking(kTable1, 4)) == "a lady in a [v] [v] [v]");
  CHECK(join_tokens(apply_progressive_masking(kTable1, 2)) == "a lady [v] [v] [v] [v] [v]");
  CHECK(join_tokens(apply_progressive_masking(kTable1, 0)) == "[v] [v] [v] [v] [v] [v] [v]");
}

TEST_CASE("degradation edge cases", "[text][degrade]") {
  const ColorLexicon red{"red"};
  CHECK(apply_color_deprivation(T("red red herring"), red) == T("[v] [v] herring"));
  CHECK(apply_color_deprivation(T("a man runs"), default_color_lexicon()) == T("a man runs"));
  CHECK_THROWS_AS(apply_color_deprivation(kTable1, ColorLexicon{}), ConfigError);

  CHECK(apply_entity_masking(kTable1, std::vector<std::size_t>{}) == kTable1);
  std::vector<std::size_t> all(kTable1.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  CHECK(apply_entity_masking(kTable1, all) == Tokens(7, "[v]"));
  try {
    (void)apply_entity_masking(kTable1, std::vector<std::size_t>{7}, 42);
    FAIL("expected annotation error");
  } catch (const AnnotationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("sample 42") != std::string::npos);
    CHECK(msg.find("index 7") != std::string::npos);
  }

  CHECK(apply_progressive_masking(kTable1, 100) == kTable1);
  CHECK_THROWS_AS(apply_progressive_masking(kTable1, -1), ConfigError);
}

TEST_CASE("degradation spec validation", "[text][degrade]") {
  CHECK_NOTHROW(DegradationSpec::progressive(30).validate());
  CHECK_THROWS_AS(DegradationSpec::progressive(3).validate(), ConfigError);
  CHECK_THROWS_AS(DegradationSpec::progressive(32).validate(), ConfigError);
  CHECK_THROWS_AS(DegradationSpec::color({}).validate(), ConfigError);
  DegradationSpec bad = DegradationSpec::none();
  bad.color_lexicon = std::make_shared<const ColorLexicon>(default_color_lexicon());
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(DegradationSpec::progressive(4).label() == "k4");
  CHECK(parse_degradation_variant("entity") == DegradationVariant::entity);
  CHECK_THROWS_AS(parse_degradation_variant("blur"), ConfigError);
}

TEST_CASE("degradation properties on random corpora", "[text][degrade][property]") {
  Rng rng(123);
  auto corpus = random_corpus(1000, rng);
  EntityAnnotations ann;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < corpus[i].source.size(); ++j) {
      if (uniform01(rng) < 0.25) idx.push_back(j);
    }
    ann.heads[i] = idx;
  }
  std::vector<DegradationSpec> specs{DegradationSpec::none(), DegradationSpec::color(default_color_lexicon()),
                                     DegradationSpec::entity(ann)};
  for (int k = 0; k <= 30; k += 2) specs.push_back(DegradationSpec::progressive(k));

  for (const auto& spec : specs) {
    auto [once, stats] = degrade_corpus(corpus, spec);
    auto [twice, stats2] = degrade_corpus(once, spec);
    std::size_t total = 0, masked = 0, affected = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      REQUIRE(once[i].source.size() == corpus[i].source.size());
      REQUIRE(once[i].target == corpus[i].target);
      REQUIRE(once[i].image_index == corpus[i].image_index);
      REQUIRE(twice[i] == once[i]);
      std::size_t m = 0;
      for (const auto& t : once[i].source) m += t == "[v]";
      total += once[i].source.size();
      masked += m;
      affected += m > 0;
    }
    CHECK(stats.total_tokens == total);
    CHECK(stats.masked_tokens == masked);
    CHECK(stats.affected_sentences == affected);
    CHECK(stats.masked_fraction == static_cast<double>(masked) / static_cast<double>(total));
  }
  auto none = degrade_corpus(corpus, DegradationSpec::none());
  CHECK(none.first == corpus);
  CHECK(none.second.masked_fraction == 0.0);

  // Progressive masks nest: positions masked at larger k are masked at smaller k.
  for (int j = 0; j <= 28; j += 2) {
    auto a = degrade_corpus(corpus, DegradationSpec::progressive(j)).first;
    auto b = degrade_corpus(corpus, DegradationSpec::progressive(j + 2)).first;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      for (std::size_t p = 0; p < corpus[i].source.size(); ++p) {
        if (b[i].source[p] == "[v]") REQUIRE(a[i].source[p] == "[v]");
      }
    }
  }
}

TEST_CASE("lexicon and annotation files", "[text][io]") {
  auto dir = temp_dir("lex");
  write_lines(dir / "colors.txt", {"# basic", "red", "", "blue"});
  auto lex = load_color_lexicon(dir / "colors.txt");
  CHECK(lex == ColorLexicon{"red", "blue"});
  write_lines(dir / "empty.txt", {"# nothing"});
  CHECK_THROWS_AS(load_color_lexicon(dir / "empty.txt"), ConfigError);

  write_lines(dir / "tgt.txt", {"bleu\tBLUE", "bleue\tBLUE", "rouge\tRED"});
  auto tlex = load_target_color_lexicon(dir / "tgt.txt");
  CHECK(tlex.at("bleue") == "BLUE");
  write_lines(dir / "bad.txt", {"bleu BLUE"});
  CHECK_THROWS_AS(load_target_color_lexicon(dir / "bad.txt"), FormatError);

  EntityAnnotations ann;
  ann.heads[0] = {1, 5};
  ann.heads[3] = {};
  ann.save(dir / "ann.tsv");
  auto back = EntityAnnotations::load(dir / "ann.tsv");
  CHECK(back.heads == ann.heads);
  write_lines(dir / "unsorted.tsv", {"2\t5,1,5"});
  CHECK(EntityAnnotations::load(dir / "unsorted.tsv").heads.at(2) == std::vector<std::size_t>{1, 5});
  write_lines(dir / "junk.tsv", {"x\t1"});
  CHECK_THROWS_AS(EntityAnnotations::load(dir / "junk.tsv"), FormatError);
}

TEST_CASE("parallel corpus loading", "[text][io]") {
  auto dir = temp_dir("corpus");
  write_lines(dir / "s.txt", {"A man-made lake.", "Dogs run"});
  write_lines(dir / "t.txt", {"Un lac artificiel.", "Des chiens courent"});
  auto c = load_parallel(dir / "s.txt", dir / "t.txt");
  REQUIRE(c.size() == 2);
  CHECK(c[0].source == Tokens{"a", "man", "@-@", "made", "lake", "."});
  CHECK(c[1].image_index == 1);
  auto pre = load_parallel(dir / "s.txt", dir / "t.txt", true);
  CHECK(pre[0].source == Tokens{"A", "man-made", "lake."});

  write_lines(dir / "short.txt", {"only one"});
  CHECK_THROWS(load_parallel(dir / "s.txt", dir / "short.txt"));
  write_lines(dir / "blank.txt", {"x", ""});
  CHECK_THROWS(load_parallel(dir / "s.txt", dir / "blank.txt"));

  write_token_lines(dir / "out.txt", {T("a [v] b")});
  CHECK(read_lines(dir / "out.txt") == std::vector<std::string>{"a [v] b"});
}

TEST_CASE("encode and decode samples", "[text][encode]") {
  auto src = Vocabulary::build({T("a lady singing")});
  auto tgt = Vocabulary::build({T("une dame chante")});
  ParallelSample s{T("a lady singing"), T("une dame chante"), 0};
  auto e = encode_sample(s, src, tgt);
  CHECK(e.source.back() == Vocabulary::kEos);
  CHECK(e.source.size() == 4);
  CHECK(e.target.front() == Vocabulary::kBos);
  CHECK(e.target.back() == Vocabulary::kEos);
  CHECK(decode_ids(e.target, tgt) == s.target);
  CHECK(decode_ids(e.source, src) == s.source);
  ParallelSample oov{T("a zebra"), T("une"), 0};
  CHECK(encode_sample(oov, src, tgt).source[1] == Vocabulary::kUnk);
  ParallelSample masked{T("a [v]"), T("une"), 0};
  CHECK(encode_sample(masked, src, tgt).source[1] == Vocabulary::kMask);
}

TEST_CASE("batch iterator", "[text][batch]") {
  Rng rng(9);
  auto corpus = random_corpus(300, rng);
  auto src = Vocabulary::build(sources(corpus));
  auto tgt = Vocabulary::build(targets(corpus));
  auto data = encode_corpus(corpus, src, tgt);

  auto single = batch_iterator(data, 1000, 1, 0);
  REQUIRE(single.size() == 1);
  CHECK(single[0].size() == data.size());

  auto a = batch_iterator(data, 16, 5, 3);
  auto b = batch_iterator(data, 16, 5, 3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].samples == b[i].samples);
    CHECK(a[i].src == b[i].src);
  }
  auto c = batch_iterator(data, 16, 5, 4);
  bool differs = false;
  for (std::size_t i = 0; i < std::min(a.size(), c.size()); ++i) differs |= a[i].samples != c[i].samples;
  CHECK(differs);

  std::vector<std::size_t> seen;
  for (const auto& batch : a) {
    seen.insert(seen.end(), batch.samples.begin(), batch.samples.end());
    const std::size_t B = batch.size();
    for (std::size_t j = 0; j < B; ++j) {
      const auto& e = data[batch.samples[j]];
      for (std::size_t t = 0; t < batch.src_len; ++t) {
        const bool real = t < e.source.size();
        REQUIRE(batch.src_mask[t * B + j] == (real ? 1.0 : 0.0));
        REQUIRE(batch.src[t * B + j] == (real ? e.source[t] : Vocabulary::kPad));
      }
      for (std::size_t t = 0; t + 1 < e.target.size(); ++t) {
        REQUIRE(batch.tgt_in[t * B + j] == e.target[t]);
        REQUIRE(batch.tgt_out[t * B + j] == e.target[t + 1]);
      }
    }
  }
  std::sort(seen.begin(), seen.end());
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  CHECK(seen == all);
  CHECK_THROWS_AS(batch_iterator(data, 0, 1, 0), ConfigError);

  auto seq = sequential_batches(data, 64);
  CHECK(seq.size() == 5);
  CHECK(seq[0].samples.front() == 0);
  CHECK(seq.back().samples.back() == 299);
}
