#pragma once

// Color-grounding toy task. Sources follow "a <NOUN> in a <COLOR> <NOUN>
// <VERB>" with an optional "near a <PLACE>" tail; targets are a word-level
// French-like transduction with the color after the noun and gender
// agreement on articles and colors. Each image is a 2x2 grid: two cells
// show the (color, object) pair, one shows the subject, one is background.
// Whatever masking hides from those words is recoverable from the image.

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mmtprobe/errors.hpp"
#include "mmtprobe/features.hpp"
#include "mmtprobe/random.hpp"
#include "mmtprobe/text.hpp"

namespace mmtprobe {

struct SyntheticTaskSpec {
  std::size_t train_size = 5000;
  std::size_t dev_size = 500;
  std::size_t test_size = 500;
  std::size_t colors = 8;  // K
  std::size_t channels = 64;
  double sigma = 0.1;
  double tail_rate = 0.25;  // share of sentences with the "near a <PLACE>" tail
  std::uint64_t seed = 1;

  void validate() const;
};

namespace synth {

struct Noun {
  const char* en;
  const char* fr;
  bool feminine;
};

struct Color {
  const char* en;
  const char* fr_m;
  const char* fr_f;
  const char* canonical;
};

inline const std::vector<Noun>& subjects() {
  static const std::vector<Noun> v{{"lady", "dame", true},  {"man", "homme", false},  {"woman", "femme", true},
                                   {"boy", "garçon", false}, {"girl", "fille", true}, {"child", "enfant", false},
                                   {"dog", "chien", false},  {"cat", "chat", false}};
  return v;
}

inline const std::vector<Noun>& objects() {
  static const std::vector<Noun> v{{"dress", "robe", true}, {"shirt", "chemise", true}, {"hat", "chapeau", false},
                                   {"car", "voiture", true}, {"ball", "ballon", false},  {"umbrella", "parapluie", false}};
  return v;
}

inline const std::vector<Color>& colors() {
  static const std::vector<Color> v{{"black", "noir", "noire", "BLACK"},    {"white", "blanc", "blanche", "WHITE"},
                                    {"red", "rouge", "rouge", "RED"},       {"green", "vert", "verte", "GREEN"},
                                    {"blue", "bleu", "bleue", "BLUE"},      {"yellow", "jaune", "jaune", "YELLOW"},
                                    {"brown", "marron", "marron", "BROWN"}, {"orange", "orange", "orange", "ORANGE"}};
  return v;
}

inline const std::vector<std::array<const char*, 2>>& verbs() {
  static const std::vector<std::array<const char*, 2>> v{{"singing", "chante"}, {"running", "court"},
                                                         {"dancing", "danse"},   {"waiting", "attend"},
                                                         {"smiling", "sourit"},  {"jumping", "saute"}};
  return v;
}

inline const std::vector<std::array<const char*, 2>>& places() {
  static const std::vector<std::array<const char*, 2>> v{
      {"tree", "arbre"}, {"fence", "grillage"}, {"river", "fleuve"}, {"building", "bâtiment"}};
  return v;
}

}  // namespace synth

inline void SyntheticTaskSpec::validate() const {
  if (train_size == 0 || dev_size == 0 || test_size == 0) throw ConfigError("synthetic splits need at least one sample");
  if (colors == 0 || colors > synth::colors().size()) {
    throw ConfigError("synthetic task supports 1.." + std::to_string(synth::colors().size()) + " colors");
  }
  const std::size_t classes = colors * synth::objects().size() + synth::subjects().size();
  if (classes > channels) {
    throw ConfigError("synthetic features: " + std::to_string(classes) + " (color, object) and subject classes exceed " +
                      std::to_string(channels) + " channels");
  }
  if (sigma < 0.0) throw ConfigError("synthetic noise sigma must be non-negative");
  if (tail_rate < 0.0 || tail_rate > 1.0) throw ConfigError("tail rate must lie in [0, 1]");
}

// One sentence's latent choices.
struct SyntheticScene {
  std::size_t subject = 0, color = 0, object = 0, verb = 0;
  int place = -1;  // -1: no tail
};

inline Tokens synthetic_source(const SyntheticScene& s) {
  Tokens t{"a", synth::subjects()[s.subject].en, "in", "a", synth::colors()[s.color].en, synth::objects()[s.object].en,
           synth::verbs()[s.verb][0]};
  if (s.place >= 0) {
    for (const char* w : {"near", "a", synth::places()[static_cast<std::size_t>(s.place)][0]}) t.push_back(w);
  }
  return t;
}

inline Tokens synthetic_target(const SyntheticScene& s) {
  const auto& subj = synth::subjects()[s.subject];
  const auto& obj = synth::objects()[s.object];
  const auto& col = synth::colors()[s.color];
  Tokens t{subj.feminine ? "une" : "un", subj.fr,  "dans", obj.feminine ? "une" : "un",
           obj.fr,                      obj.feminine ? col.fr_f : col.fr_m, synth::verbs()[s.verb][1]};
  if (s.place >= 0) {
    for (const char* w : {"près", "du", synth::places()[static_cast<std::size_t>(s.place)][1]}) t.push_back(w);
  }
  return t;
}

struct SyntheticSplit {
  Corpus corpus;  // undegraded; image index == line number
  std::vector<SyntheticScene> scenes;
  FeatureSet features;

  std::vector<std::size_t> color_truth() const {
    std::vector<std::size_t> out;
    for (const auto& s : scenes) out.push_back(s.color);
    return out;
  }
};

struct SyntheticTask {
  SyntheticTaskSpec spec;
  SyntheticSplit train, dev, test;

  ColorLexicon source_colors() const {
    ColorLexicon lex;
    for (std::size_t c = 0; c < spec.colors; ++c) lex.insert(synth::colors()[c].en);
    return lex;
  }

  TargetColorLexicon target_colors() const {
    TargetColorLexicon lex;
    for (std::size_t c = 0; c < spec.colors; ++c) {
      const auto& col = synth::colors()[c];
      lex[col.fr_m] = col.canonical;
      lex[col.fr_f] = col.canonical;
    }
    return lex;
  }
};

namespace detail {

// Attributes cycle with different periods over i so every split is as
// balanced as its size allows (exactly, for colors); the order is then shuffled.
inline SyntheticSplit synthetic_split(const SyntheticTaskSpec& spec, std::size_t n, std::uint64_t stream) {
  const std::size_t K = spec.colors, O = synth::objects().size(), S = synth::subjects().size(), V = synth::verbs().size();
  Rng rng(derive_seed(spec.seed, 0x5e17, stream));
  std::vector<SyntheticScene> scenes(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = scenes[i];
    s.color = i % K;
    s.object = (i / K) % O;
    s.subject = (i / (K * O)) % S;
    s.verb = (i / (K * O * S)) % V;
  }
  shuffle(std::span<SyntheticScene>(scenes), rng);
  for (auto& s : scenes) {
    if (uniform01(rng) < spec.tail_rate) s.place = static_cast<int>(uniform_index(rng, synth::places().size()));
  }

  SyntheticSplit out;
  out.scenes = scenes;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < n; ++i) {
    out.corpus.push_back({synthetic_source(scenes[i]), synthetic_target(scenes[i]), i});
    const std::size_t pair = scenes[i].color * O + scenes[i].object;
    for (std::size_t cell : {pair, pair, K * O + scenes[i].subject, kBackgroundLabel}) labels.push_back(cell);
  }
  SyntheticFeatureSpec fspec;
  fspec.classes = K * O + S;
  fspec.channels = spec.channels;
  fspec.sigma = spec.sigma;
  fspec.seed = derive_seed(spec.seed, 0xfea7, stream);
  out.features = synthesize_region_features(labels, fspec);
  return out;
}

}  // namespace detail

inline SyntheticTask generate_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  SyntheticTask task;
  task.spec = spec;
  task.train = detail::synthetic_split(spec, spec.train_size, 1);
  task.dev = detail::synthetic_split(spec, spec.dev_size, 2);
  task.test = detail::synthetic_split(spec, spec.test_size, 3);
  return task;
}

// Writes {train,dev,test}.{en,fr,feat,colors}, colors.en.txt and
// colors.fr.tsv under `dir`. Corpus lines are space-joined tokens.
inline void write_synthetic(const SyntheticTask& task, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write_split = [&](const SyntheticSplit& s, const std::string& name) {
    write_token_lines(dir / (name + ".en"), sources(s.corpus));
    write_token_lines(dir / (name + ".fr"), targets(s.corpus));
    write_features(dir / (name + ".feat"), s.features);
    std::vector<std::string> truth;
    for (const auto& sc : s.scenes) truth.push_back(synth::colors()[sc.color].canonical);
    write_lines(dir / (name + ".colors"), truth);
  };
  write_split(task.train, "train");
  write_split(task.dev, "dev");
  write_split(task.test, "test");

  std::vector<std::string> en, fr;
  for (std::size_t c = 0; c < task.spec.colors; ++c) en.push_back(synth::colors()[c].en);
  const auto lex = task.target_colors();
  for (const auto& [surface, cls] : std::map<std::string, std::string>(lex.begin(), lex.end())) {
    fr.push_back(surface + "\t" + cls);
  }
  write_lines(dir / "colors.en.txt", en);
  write_lines(dir / "colors.fr.tsv", fr);
}

}  // namespace mmtprobe
