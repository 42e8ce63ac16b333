#pragma once

// Experiment configuration: an INI-style file with [sections] and key = value
// lines ('#' or ';' comments). Overrides use "section.key=value". Relative
// paths resolve against the config file's directory.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmtprobe/errors.hpp"
#include "mmtprobe/features.hpp"
#include "mmtprobe/model.hpp"
#include "mmtprobe/synthetic.hpp"
#include "mmtprobe/text.hpp"
#include "mmtprobe/train.hpp"

namespace mmtprobe {

struct DataPaths {
  std::filesystem::path train_src, train_tgt, dev_src, dev_tgt, test_src, test_tgt;
  std::filesystem::path train_features, dev_features, test_features;
  std::filesystem::path color_lexicon;         // empty: built-in English list
  std::filesystem::path target_color_lexicon;  // enables color accuracy
  std::filesystem::path train_annotations, dev_annotations, test_annotations;
  bool pretokenized = false;
  bool normalize_features = true;

  bool has_features() const { return !train_features.empty(); }
};

struct ExperimentConfig {
  DataPaths data;
  std::optional<SyntheticTaskSpec> synthetic;  // generate data instead of reading it
  std::vector<std::string> schemes{"none", "color"};
  std::vector<Fusion> systems{Fusion::nmt, Fusion::init, Fusion::hier, Fusion::direct};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<CongruenceMode> congruence{CongruenceMode::congruent, CongruenceMode::incongruent};
  bool blind = false;  // adds blinded variants of every multimodal system
  BlindOrder blind_order = BlindOrder::shuffled;
  std::uint64_t blind_seed = 7;
  std::size_t beam = 12;
  std::size_t resamples = 10000;
  std::uint64_t significance_seed = 1;
  std::size_t threads = 0;  // 0: MMTPROBE_THREADS or hardware concurrency
  ModelConfig model;        // vocabulary and feature sizes are filled per run
  TrainConfig train;
  std::filesystem::path output = "results";

  void validate() const;
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto toks = split_whitespace(item);
    if (!toks.empty()) out.push_back(toks[0]);
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T x{};
  in >> x;
  if (!in || !(in >> std::ws).eof()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  if constexpr (std::is_unsigned_v<T>) {
    if (v.find('-') != std::string::npos) throw ConfigError(key + ": expected a non-negative number, got '" + v + "'");
  }
  return x;
}

}  // namespace detail

// Validates a scheme label: none, color, entity, or k<even 0..30>.
inline DegradationVariant scheme_variant(const std::string& label, int* k = nullptr) {
  if (label.size() > 1 && label[0] == 'k') {
    int v = -1;
    try {
      std::size_t used = 0;
      v = std::stoi(label.substr(1), &used);
      if (used != label.size() - 1) v = -1;
    } catch (const std::exception&) {
    }
    if (v < 0 || v > 30 || v % 2) throw ConfigError("progressive scheme '" + label + "' needs an even k in [0, 30]");
    if (k) *k = v;
    return DegradationVariant::progressive;
  }
  return parse_degradation_variant(label);
}

inline void ExperimentConfig::validate() const {
  if (schemes.empty()) throw ConfigError("experiment.schemes is empty");
  for (const auto& s : schemes) {
    if (scheme_variant(s) == DegradationVariant::entity &&
        (data.train_annotations.empty() || data.dev_annotations.empty() || data.test_annotations.empty())) {
      throw ConfigError("scheme 'entity' needs data.train_annotations, data.dev_annotations and data.test_annotations");
    }
  }
  if (systems.empty()) throw ConfigError("experiment.systems is empty");
  if (seeds.empty()) throw ConfigError("experiment.seeds is empty");
  if (congruence.empty()) throw ConfigError("experiment.congruence is empty");
  if (beam == 0) throw ConfigError("experiment.beam must be at least 1");
  if (resamples == 0) throw ConfigError("experiment.resamples must be at least 1");
  train.validate();
  if (synthetic) {
    synthetic->validate();
    return;
  }
  const bool multimodal = std::any_of(systems.begin(), systems.end(), [](Fusion f) { return f != Fusion::nmt; });
  std::vector<std::pair<std::string, std::filesystem::path>> required{
      {"train_src", data.train_src}, {"train_tgt", data.train_tgt}, {"dev_src", data.dev_src},
      {"dev_tgt", data.dev_tgt},     {"test_src", data.test_src},   {"test_tgt", data.test_tgt}};
  if (multimodal) {
    required.insert(required.end(), {{"train_features", data.train_features},
                                     {"dev_features", data.dev_features},
                                     {"test_features", data.test_features}});
  }
  for (const auto& p : {data.color_lexicon, data.target_color_lexicon, data.train_annotations, data.dev_annotations,
                        data.test_annotations}) {
    if (!p.empty()) required.emplace_back("resource", p);
  }
  for (const auto& [key, p] : required) {
    if (p.empty()) throw ConfigError("data." + key + " is required");
    if (!std::filesystem::exists(p)) throw ConfigError("data file " + p.string() + " does not exist");
  }
}

namespace detail {

using Tree = boost::property_tree::ptree;

inline void apply_override(Tree& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  auto key = split_whitespace(assignment.substr(0, eq));
  auto value = assignment.substr(eq + 1);
  const auto first = value.find_first_not_of(" \t");
  value = first == std::string::npos ? "" : value.substr(first, value.find_last_not_of(" \t") - first + 1);
  if (key.size() != 1) throw ConfigError("override '" + assignment + "' has a malformed key");
  tree.put(Tree::path_type(key[0], '.'), value);
}

// Reads every known key, rejecting unknown sections and keys.
class TreeReader {
 public:
  TreeReader(const Tree& tree, std::filesystem::path base) : tree_(tree), base_(std::move(base)) {}

  std::optional<std::string> get(const std::string& section, const std::string& key) {
    known_.insert(section + "." + key);
    auto sec = tree_.get_child_optional(Tree::path_type(section, '.'));
    if (!sec) return std::nullopt;
    auto v = sec->get_optional<std::string>(Tree::path_type(key, '.'));
    if (!v) return std::nullopt;
    return *v;
  }

  void path(const std::string& section, const std::string& key, std::filesystem::path& out) {
    if (auto v = get(section, key)) {
      std::filesystem::path p(*v);
      out = p.empty() || p.is_absolute() ? p : base_ / p;
    }
  }

  template <class T>
  void number(const std::string& section, const std::string& key, T& out) {
    if (auto v = get(section, key)) out = parse_number<T>(section + "." + key, *v);
  }

  void boolean(const std::string& section, const std::string& key, bool& out) {
    if (auto v = get(section, key)) out = parse_bool(section + "." + key, *v);
  }

  bool has_section(const std::string& section) const { return tree_.get_child_optional(section).has_value(); }

  void reject_unknown() const {
    for (const auto& [section, body] : tree_) {
      if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' must live in a [section]");
      for (const auto& [key, _] : body) {
        if (!known_.count(section + "." + key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
      }
    }
  }

 private:
  const Tree& tree_;
  std::filesystem::path base_;
  std::set<std::string> known_;
};

}  // namespace detail

inline ExperimentConfig parse_config_tree(const boost::property_tree::ptree& tree, const std::filesystem::path& base) {
  detail::TreeReader r(tree, base);
  ExperimentConfig c;
  // Desk-scale model defaults; the published sizes are set in configs/multi30k.ini.
  c.model.emb_dim = 64;
  c.model.hidden = 128;
  c.model.encoder_layers = 1;
  c.model.split_bidirectional = true;

  auto& d = c.data;
  for (auto [key, field] :
       std::vector<std::pair<const char*, std::filesystem::path*>>{{"train_src", &d.train_src},
                                                                   {"train_tgt", &d.train_tgt},
                                                                   {"dev_src", &d.dev_src},
                                                                   {"dev_tgt", &d.dev_tgt},
                                                                   {"test_src", &d.test_src},
                                                                   {"test_tgt", &d.test_tgt},
                                                                   {"train_features", &d.train_features},
                                                                   {"dev_features", &d.dev_features},
                                                                   {"test_features", &d.test_features},
                                                                   {"color_lexicon", &d.color_lexicon},
                                                                   {"target_color_lexicon", &d.target_color_lexicon},
                                                                   {"train_annotations", &d.train_annotations},
                                                                   {"dev_annotations", &d.dev_annotations},
                                                                   {"test_annotations", &d.test_annotations}}) {
    r.path("data", key, *field);
  }
  r.boolean("data", "pretokenized", d.pretokenized);
  r.boolean("data", "normalize_features", d.normalize_features);

  if (r.has_section("synthetic")) {
    SyntheticTaskSpec s;
    r.number("synthetic", "train_size", s.train_size);
    r.number("synthetic", "dev_size", s.dev_size);
    r.number("synthetic", "test_size", s.test_size);
    r.number("synthetic", "colors", s.colors);
    r.number("synthetic", "channels", s.channels);
    r.number("synthetic", "sigma", s.sigma);
    r.number("synthetic", "tail_rate", s.tail_rate);
    r.number("synthetic", "seed", s.seed);
    c.synthetic = s;
  }

  if (auto v = r.get("experiment", "schemes")) {
    c.schemes = detail::split_list(*v);
    for (const auto& s : c.schemes) scheme_variant(s);
  }
  if (auto v = r.get("experiment", "systems")) {
    c.systems.clear();
    for (const auto& s : detail::split_list(*v)) c.systems.push_back(parse_fusion(s));
  }
  if (auto v = r.get("experiment", "seeds")) {
    c.seeds.clear();
    for (const auto& s : detail::split_list(*v)) c.seeds.push_back(detail::parse_number<std::uint64_t>("experiment.seeds", s));
  }
  if (auto v = r.get("experiment", "congruence")) {
    c.congruence.clear();
    for (const auto& s : detail::split_list(*v)) c.congruence.push_back(parse_congruence(s));
  }
  r.boolean("experiment", "blind", c.blind);
  if (auto v = r.get("experiment", "blind_order")) c.blind_order = parse_blind_order(*v);
  r.number("experiment", "blind_seed", c.blind_seed);
  r.number("experiment", "beam", c.beam);
  r.number("experiment", "resamples", c.resamples);
  r.number("experiment", "significance_seed", c.significance_seed);
  r.number("experiment", "threads", c.threads);
  r.path("experiment", "output", c.output);

  auto& m = c.model;
  r.number("model", "emb_dim", m.emb_dim);
  r.number("model", "hidden", m.hidden);
  r.number("model", "encoder_layers", m.encoder_layers);
  r.boolean("model", "split_bidirectional", m.split_bidirectional);
  r.number("model", "attention_dim", m.attention_dim);
  r.number("model", "dropout_src_emb", m.dropout_src_emb);
  r.number("model", "dropout_enc_out", m.dropout_enc_out);
  r.number("model", "dropout_dec_out", m.dropout_dec_out);
  r.boolean("model", "tied_embeddings", m.tied_embeddings);

  auto& t = c.train;
  r.number("train", "lr", t.lr);
  r.number("train", "batch_size", t.batch_size);
  r.number("train", "clip_norm", t.clip_norm);
  r.number("train", "weight_decay", t.weight_decay);
  if (auto v = r.get("train", "decay_mode")) t.decay_mode = parse_decay_mode(*v);
  r.number("train", "patience", t.patience);
  r.number("train", "max_epochs", t.max_epochs);
  if (auto v = r.get("train", "dev_metric")) t.dev_metric = *v;

  r.reject_unknown();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(e.what());
  }
  for (const auto& o : overrides) detail::apply_override(tree, o);
  return parse_config_tree(tree, path.parent_path());
}

// Config from overrides alone (no file); paths resolve against the working directory.
inline ExperimentConfig config_from_overrides(const std::vector<std::string>& overrides) {
  boost::property_tree::ptree tree;
  for (const auto& o : overrides) detail::apply_override(tree, o);
  return parse_config_tree(tree, std::filesystem::current_path());
}

}  // namespace mmtprobe
