#pragma once

// The experiment grid: schemes x systems x seeds, each cell trained once and
// decoded under every congruence mode. Cells are cached by a content hash of
// their inputs and settings; a manifest lists every artifact with its sha256.
//
// Layout under the output directory:
//   data/                       synthetic corpora (when generated)
//   grid.json                   what was run, plus degradation statistics
//   cells/<scheme>/<system>/seed<N>/{cell.json, model.bin, history.csv,
//                                    hyps.<mode>.txt, metrics.<mode>.json}
//   report.md, scores.csv, gain_drop.csv, color.csv, progressive.csv
//   manifest.json

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mmtprobe/config.hpp"
#include "mmtprobe/decode.hpp"
#include "mmtprobe/features.hpp"
#include "mmtprobe/hash.hpp"
#include "mmtprobe/metrics.hpp"
#include "mmtprobe/model.hpp"
#include "mmtprobe/synthetic.hpp"
#include "mmtprobe/text.hpp"
#include "mmtprobe/train.hpp"

namespace mmtprobe {

namespace fs = std::filesystem;

inline constexpr int kCellFormat = 1;
inline constexpr const char* kMissing = "—";

// ---------------------------------------------------------------------------
// Inputs

struct ExperimentData {
  Corpus train, dev, test;
  std::optional<FeatureSet> train_features, dev_features, test_features;
  // Global-average-pooled copies of spatial features, for INIT.
  std::optional<FeatureSet> train_pooled, dev_pooled, test_pooled;
  ColorLexicon colors;
  std::optional<TargetColorLexicon> target_colors;
  std::optional<EntityAnnotations> train_annotations, dev_annotations, test_annotations;
  std::string fingerprint;  // sha256 over every input file
};

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Writes synthetic data under `dir` and points the config at it.
inline void materialize_synthetic(ExperimentConfig& cfg, const fs::path& dir) {
  if (!cfg.synthetic) return;
  write_synthetic(generate_synthetic(*cfg.synthetic), dir);
  auto& d = cfg.data;
  d.train_src = dir / "train.en", d.train_tgt = dir / "train.fr";
  d.dev_src = dir / "dev.en", d.dev_tgt = dir / "dev.fr";
  d.test_src = dir / "test.en", d.test_tgt = dir / "test.fr";
  d.train_features = dir / "train.feat", d.dev_features = dir / "dev.feat", d.test_features = dir / "test.feat";
  d.color_lexicon = dir / "colors.en.txt";
  d.target_color_lexicon = dir / "colors.fr.tsv";
  d.pretokenized = true;
  cfg.synthetic.reset();
}

inline ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto& d = cfg.data;
  ExperimentData out;
  std::string fp;
  auto note = [&](const fs::path& p) {
    if (!p.empty()) fp += p.filename().string() + ":" + sha256_file(p) + "\n";
  };
  for (const auto& p : {d.train_src, d.train_tgt, d.dev_src, d.dev_tgt, d.test_src, d.test_tgt, d.train_features,
                        d.dev_features, d.test_features, d.color_lexicon, d.target_color_lexicon, d.train_annotations,
                        d.dev_annotations, d.test_annotations}) {
    note(p);
  }
  fp += std::string("pretokenized:") + (d.pretokenized ? "1" : "0") + " normalize:" + (d.normalize_features ? "1" : "0");
  out.fingerprint = sha256_hex(fp);

  out.train = load_parallel(d.train_src, d.train_tgt, d.pretokenized);
  out.dev = load_parallel(d.dev_src, d.dev_tgt, d.pretokenized);
  out.test = load_parallel(d.test_src, d.test_tgt, d.pretokenized);
  auto features = [&](const fs::path& p, std::size_t lines) -> std::optional<FeatureSet> {
    if (p.empty()) return std::nullopt;
    FeatureSet f = load_features(p);
    if (f.rows() != lines) {
      throw ConfigError(p.string() + " has " + std::to_string(f.rows()) + " rows but the corpus has " +
                        std::to_string(lines) + " lines");
    }
    if (d.normalize_features && f.spatial()) f = normalize_depth(f);
    return f;
  };
  out.train_features = features(d.train_features, out.train.size());
  out.dev_features = features(d.dev_features, out.dev.size());
  out.test_features = features(d.test_features, out.test.size());
  auto pooled = [](const std::optional<FeatureSet>& f) -> std::optional<FeatureSet> {
    if (!f || !f->spatial()) return std::nullopt;
    return global_average_pool(*f);
  };
  out.train_pooled = pooled(out.train_features);
  out.dev_pooled = pooled(out.dev_features);
  out.test_pooled = pooled(out.test_features);
  out.colors = d.color_lexicon.empty() ? default_color_lexicon() : load_color_lexicon(d.color_lexicon);
  if (!d.target_color_lexicon.empty()) out.target_colors = load_target_color_lexicon(d.target_color_lexicon);
  if (!d.train_annotations.empty()) out.train_annotations = EntityAnnotations::load(d.train_annotations);
  if (!d.dev_annotations.empty()) out.dev_annotations = EntityAnnotations::load(d.dev_annotations);
  if (!d.test_annotations.empty()) out.test_annotations = EntityAnnotations::load(d.test_annotations);
  return out;
}

// ---------------------------------------------------------------------------
// Degradation per scheme

struct SchemeData {
  std::string label;
  Corpus train, dev, test;
  DegradationStats train_stats, dev_stats, test_stats;
  std::vector<bool> test_has_color;  // undegraded test source mentions a lexicon color
};

inline SchemeData degrade_for_scheme(const ExperimentData& data, const std::string& label) {
  int k = 0;
  const auto variant = scheme_variant(label, &k);
  auto spec_for = [&](const std::optional<EntityAnnotations>& ann) {
    switch (variant) {
      case DegradationVariant::none: return DegradationSpec::none();
      case DegradationVariant::color: return DegradationSpec::color(data.colors);
      case DegradationVariant::entity:
        if (!ann) throw ConfigError("scheme 'entity' needs annotations for every split");
        return DegradationSpec::entity(*ann);
      case DegradationVariant::progressive: return DegradationSpec::progressive(k);
    }
    return DegradationSpec::none();
  };
  SchemeData s;
  s.label = label;
  std::tie(s.train, s.train_stats) = degrade_corpus(data.train, spec_for(data.train_annotations));
  std::tie(s.dev, s.dev_stats) = degrade_corpus(data.dev, spec_for(data.dev_annotations));
  std::tie(s.test, s.test_stats) = degrade_corpus(data.test, spec_for(data.test_annotations));
  for (const auto& sample : data.test) {
    s.test_has_color.push_back(std::any_of(sample.source.begin(), sample.source.end(),
                                           [&](const std::string& t) { return data.colors.count(t) > 0; }));
  }
  return s;
}

inline nlohmann::json stats_json(const DegradationStats& s) {
  return {{"total_tokens", s.total_tokens},
          {"masked_tokens", s.masked_tokens},
          {"masked_fraction", s.masked_fraction},
          {"affected_sentences", s.affected_sentences}};
}

// ---------------------------------------------------------------------------
// Cells

struct CellSpec {
  std::string scheme;
  Fusion system = Fusion::nmt;
  bool blinded = false;
  std::uint64_t seed = 1;

  std::string system_name() const { return to_string(system) + (blinded ? "-blind" : ""); }
  std::string name() const { return scheme + "/" + system_name() + "/seed" + std::to_string(seed); }
  fs::path rel_dir() const { return fs::path("cells") / scheme / system_name() / ("seed" + std::to_string(seed)); }
};

inline std::vector<CellSpec> experiment_cells(const ExperimentConfig& cfg) {
  std::vector<CellSpec> cells;
  for (const auto& scheme : cfg.schemes) {
    for (Fusion f : cfg.systems) {
      for (bool blinded : {false, true}) {
        if (blinded && (!cfg.blind || f == Fusion::nmt)) continue;
        for (auto seed : cfg.seeds) cells.push_back({scheme, f, blinded, seed});
      }
    }
  }
  return cells;
}

// Decoding modes for a cell: the configured ones, plus "blinded" for blinded systems.
inline std::vector<CongruenceMode> cell_modes(const ExperimentConfig& cfg, const CellSpec& cell) {
  auto modes = cfg.congruence;
  if (cell.blinded && std::find(modes.begin(), modes.end(), CongruenceMode::blinded) == modes.end()) {
    modes.push_back(CongruenceMode::blinded);
  }
  return modes;
}

inline nlohmann::json train_config_json(const TrainConfig& t) {
  return {{"lr", t.lr},           {"batch_size", t.batch_size},         {"clip_norm", t.clip_norm},
          {"weight_decay", t.weight_decay}, {"decay_mode", to_string(t.decay_mode)}, {"patience", t.patience},
          {"max_epochs", t.max_epochs},     {"dev_metric", t.dev_metric},           {"beta1", t.beta1},
          {"beta2", t.beta2},               {"eps", t.eps}};
}

inline std::string cell_key(const ExperimentConfig& cfg, const ExperimentData& data, const CellSpec& cell) {
  ModelConfig m = cfg.model;
  m.fusion = cell.system;
  std::vector<std::string> modes;
  for (auto mode : cell_modes(cfg, cell)) modes.push_back(to_string(mode));
  nlohmann::json j{{"format", kCellFormat},
                   {"inputs", data.fingerprint},
                   {"scheme", cell.scheme},
                   {"system", cell.system_name()},
                   {"seed", cell.seed},
                   {"model", m},
                   {"train", train_config_json(cfg.train)},
                   {"beam", cfg.beam},
                   {"modes", modes}};
  if (cell.blinded) {
    j["blind_order"] = cfg.blind_order == BlindOrder::shuffled ? "shuffled" : "reversed";
    j["blind_seed"] = cfg.blind_seed;
  }
  return sha256_hex(j.dump());
}

inline nlohmann::json report_json(const MetricReport& r) {
  return {{"metric", r.metric}, {"corpus", r.corpus}, {"sentences", r.sentences}, {"indices", r.indices}};
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  j.at("metric").get_to(r.metric);
  j.at("corpus").get_to(r.corpus);
  j.at("sentences").get_to(r.sentences);
  j.at("indices").get_to(r.indices);
  return r;
}

inline std::map<std::string, MetricReport> evaluate_hypotheses(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs,
                                                               const std::vector<bool>& has_color,
                                                               const std::optional<TargetColorLexicon>& lex) {
  std::map<std::string, MetricReport> out;
  out["meteor-lite"] = meteor_lite(hyps, refs);
  out["bleu"] = bleu(hyps, refs);
  if (lex && std::find(has_color.begin(), has_color.end(), true) != has_color.end()) {
    try {
      out["color-acc"] = color_accuracy(hyps, refs, has_color, *lex);
    } catch (const ContractError&) {
      // no selected reference mentions a lexicon color
    }
  }
  return out;
}

inline std::vector<std::size_t> congruence_map(CongruenceMode mode, const FeatureSet* fs, std::size_t n,
                                               const ExperimentConfig& cfg) {
  if (fs) return remap_order(*fs, mode, n, cfg.blind_seed, cfg.blind_order);
  return remap_order(mode, n, cfg.blind_seed, cfg.blind_order);
}

// Trains and evaluates one cell into `dir`. Returns the file names written.
inline std::vector<std::string> run_cell(const ExperimentConfig& cfg, const ExperimentData& data, const SchemeData& sd,
                                         const CellSpec& cell, const fs::path& dir, std::size_t decode_threads) {
  fs::create_directories(dir);
  const auto sv = Vocabulary::build(sources(sd.train));
  const auto tv = Vocabulary::build(targets(sd.train));
  ModelConfig mc = cfg.model;
  mc.fusion = cell.system;
  mc.src_vocab = sv.size();
  mc.tgt_vocab = tv.size();
  const bool feats = mc.uses_features();
  const bool pool = mc.fusion == Fusion::init && data.train_pooled;
  const auto& train_f = pool ? data.train_pooled : data.train_features;
  const auto& dev_f = pool ? data.dev_pooled : data.dev_features;
  const auto& test_f = pool ? data.test_pooled : data.test_features;
  if (feats) {
    if (!train_f || !dev_f || !test_f) {
      throw ConfigError(cell.system_name() + " needs train, dev and test features");
    }
    mc.feature_channels = train_f->channels();
    mc.feature_positions = train_f->positions();
  }

  TrainData td;
  td.train = encode_corpus(sd.train, sv, tv);
  td.dev = encode_corpus(sd.dev, sv, tv);
  for (const auto& s : sd.dev) td.dev_refs.push_back(stitch_hyphens(s.target));
  const auto train_mode = cell.blinded ? CongruenceMode::blinded : CongruenceMode::congruent;
  if (feats) {
    td.train_features = &*train_f;
    td.dev_features = &*dev_f;
    td.train_map = congruence_map(train_mode, td.train_features, td.train.size(), cfg);
    td.dev_map = congruence_map(train_mode, td.dev_features, td.dev.size(), cfg);
  }
  TrainConfig tc = cfg.train;
  tc.seed = cell.seed;
  const auto result = train(mc, init_parameters(mc, cell.seed), td, tv, tc);

  std::vector<std::string> files;
  Model model{mc, result.best_params, sv, tv,
              nlohmann::json{{"scheme", cell.scheme},
                             {"system", cell.system_name()},
                             {"seed", cell.seed},
                             {"best_epoch", result.best_epoch},
                             {"best_dev", result.best_score}}};
  save_model(dir / "model.bin", model);
  write_text(dir / "history.csv", history_csv(result.history));
  files.insert(files.end(), {"model.bin", "history.csv"});

  const auto test = encode_corpus(sd.test, sv, tv);
  std::vector<Tokens> refs;
  for (const auto& s : sd.test) refs.push_back(stitch_hyphens(s.target));
  DecodeOptions opt;
  opt.beam = cfg.beam;
  const FeatureSet* test_fs = test_f ? &*test_f : nullptr;
  for (auto mode : cell_modes(cfg, cell)) {
    const auto map = congruence_map(mode, test_fs, test.size(), cfg);
    const auto hyps = translate_corpus(mc, result.best_params, test, feats ? test_fs : nullptr, map, opt, decode_threads);
    std::vector<Tokens> out;
    std::vector<std::string> lines;
    for (const auto& h : hyps) {
      out.push_back(hypothesis_tokens(h, tv));
      lines.push_back(join_tokens(out.back()));
    }
    const std::string m = to_string(mode);
    write_lines(dir / ("hyps." + m + ".txt"), lines);
    nlohmann::json reports = nlohmann::json::object();
    for (const auto& [name, rep] : evaluate_hypotheses(out, refs, sd.test_has_color, data.target_colors)) {
      reports[name] = report_json(rep);
    }
    write_text(dir / ("metrics." + m + ".json"), reports.dump(1) + "\n");
    files.insert(files.end(), {"hyps." + m + ".txt", "metrics." + m + ".json"});
  }
  return files;
}

// A cached cell is reused when its key matches and every listed file still
// hashes to the recorded value.
inline bool cell_is_cached(const fs::path& dir, const std::string& key) {
  const auto path = dir / "cell.json";
  if (!fs::exists(path)) return false;
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    if (j.value("key", "") != key || j.value("status", "") != "ok") return false;
    for (const auto& [name, hash] : j.at("files").items()) {
      if (!fs::exists(dir / name) || sha256_file(dir / name) != hash.get<std::string>()) return false;
    }
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

struct CellOutcome {
  CellSpec cell;
  bool ok = false;
  bool cached = false;
  std::string error;
};

struct ExperimentResult {
  fs::path dir;
  std::vector<CellOutcome> cells;

  bool all_ok() const {
    return std::all_of(cells.begin(), cells.end(), [](const CellOutcome& c) { return c.ok; });
  }
};

using LogFn = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// Reports

struct CellResults {
  std::map<std::string, std::map<std::string, MetricReport>> by_mode;  // mode -> metric -> report
};

// scheme -> system -> seed -> results, for every cell whose status is ok.
using ResultTable = std::map<std::string, std::map<std::string, std::map<std::uint64_t, CellResults>>>;

inline ResultTable load_results(const fs::path& dir, const nlohmann::json& grid) {
  ResultTable table;
  for (const auto& c : grid.at("cells")) {
    const fs::path cdir = dir / c.at("dir").get<std::string>();
    if (!fs::exists(cdir / "cell.json")) continue;
    const auto info = nlohmann::json::parse(read_file(cdir / "cell.json"));
    if (info.value("status", "") != "ok") continue;
    CellResults r;
    for (const auto& m : c.at("modes")) {
      const auto mode = m.get<std::string>();
      const auto path = cdir / ("metrics." + mode + ".json");
      if (!fs::exists(path)) continue;
      const auto reports = nlohmann::json::parse(read_file(path));
      for (const auto& [name, rep] : reports.items()) {
        r.by_mode[mode][name] = report_from_json(rep);
      }
    }
    table[c.at("scheme").get<std::string>()][c.at("system").get<std::string>()][c.at("seed").get<std::uint64_t>()] =
        std::move(r);
  }
  return table;
}

// Corpus scores (x100) over seeds for one (scheme, system, mode, metric).
inline std::vector<double> run_scores(const ResultTable& t, const std::string& scheme, const std::string& system,
                                      const std::string& mode, const std::string& metric) {
  std::vector<double> out;
  auto s = t.find(scheme);
  if (s == t.end()) return out;
  auto sys = s->second.find(system);
  if (sys == s->second.end()) return out;
  for (const auto& [_, r] : sys->second) {
    auto m = r.by_mode.find(mode);
    if (m == r.by_mode.end()) continue;
    auto rep = m->second.find(metric);
    if (rep != m->second.end()) out.push_back(100.0 * rep->second.corpus);
  }
  return out;
}

inline std::vector<std::vector<double>> run_sentences(const ResultTable& t, const std::string& scheme,
                                                      const std::string& system, const std::string& mode,
                                                      const std::string& metric) {
  std::vector<std::vector<double>> out;
  auto s = t.find(scheme);
  if (s == t.end()) return out;
  auto sys = s->second.find(system);
  if (sys == s->second.end()) return out;
  for (const auto& [_, r] : sys->second) {
    auto m = r.by_mode.find(mode);
    if (m == r.by_mode.end()) continue;
    auto rep = m->second.find(metric);
    if (rep == m->second.end()) continue;
    std::vector<double> v;
    for (double x : rep->second.sentences) v.push_back(100.0 * x);
    out.push_back(std::move(v));
  }
  return out;
}

inline std::string markdown_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size(), 0);
  auto display = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;
    return n;
  };
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = display(header[i]);
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], display(r[i]));
  }
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    out << "|";
    for (std::size_t i = 0; i < cells.size(); ++i) out << " " << cells[i] << std::string(width[i] - display(cells[i]), ' ') << " |";
    out << "\n";
  };
  line(header);
  out << "|";
  for (std::size_t w : width) out << std::string(w + 2, '-') << "|";
  out << "\n";
  for (const auto& r : rows) line(r);
  return out.str();
}

inline std::string csv_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Regenerates every report file from grid.json and the cell metrics.
inline void write_reports(const fs::path& dir, std::size_t resamples = 10000, std::uint64_t seed = 1) {
  const auto grid = nlohmann::json::parse(read_file(dir / "grid.json"));
  const auto table = load_results(dir, grid);
  std::vector<std::string> schemes, systems, modes;
  grid.at("schemes").get_to(schemes);
  grid.at("systems").get_to(systems);
  grid.at("modes").get_to(modes);
  const std::vector<std::string> metrics{"meteor-lite", "bleu", "color-acc"};

  std::ostringstream md, scores, gd_csv, color_csv;
  scores << "scheme,system,seed,mode,metric,corpus\n";
  gd_csv << "scheme,system,gain,drop,gain_p,drop_p\n";
  color_csv << "scheme,system,mode,runs,mean,stdev\n";
  md << "# Results\n\nScores are corpus-level x100, mean ± sample stdev over seeds. " << kMissing
     << " marks a missing or failed cell.\n";

  for (const auto& scheme : schemes) {
    md << "\n## " << scheme << "\n";
    const auto& st = grid.at("stats").at(scheme);
    md << "\nMasked source tokens: train " << format_fixed(100.0 * st.at("train").at("masked_fraction").get<double>(), 2)
       << "%, test " << format_fixed(100.0 * st.at("test").at("masked_fraction").get<double>(), 2) << "%\n";
    for (const auto& metric : metrics) {
      std::vector<std::vector<std::string>> rows;
      bool any = false;
      for (const auto& sys : systems) {
        std::vector<std::string> row{sys};
        for (const auto& mode : modes) {
          const auto v = run_scores(table, scheme, sys, mode, metric);
          any = any || !v.empty();
          row.push_back(v.empty() ? kMissing : format_mean_sd(v));
          if (metric == "color-acc" && !v.empty()) {
            color_csv << scheme << "," << sys << "," << mode << "," << v.size() << "," << csv_number(mean_of(v)) << ","
                      << csv_number(stdev_of(v)) << "\n";
          }
        }
        rows.push_back(std::move(row));
      }
      if (!any && metric == "color-acc") continue;
      std::vector<std::string> header{metric};
      header.insert(header.end(), modes.begin(), modes.end());
      md << "\n" << markdown_table(header, rows);
    }

    // Gain over NMT and incongruence drop, METEOR-lite.
    std::map<std::string, SystemScores> ss;
    for (const auto& sys : systems) {
      auto& s = ss[sys];
      s.congruent = run_sentences(table, scheme, sys, "congruent", "meteor-lite");
      s.incongruent = run_sentences(table, scheme, sys, "incongruent", "meteor-lite");
      s.congruent_corpus = run_scores(table, scheme, sys, "congruent", "meteor-lite");
      s.incongruent_corpus = run_scores(table, scheme, sys, "incongruent", "meteor-lite");
    }
    if (ss.count("NMT")) {
      std::vector<std::vector<std::string>> rows;
      for (const auto& sys : systems) {
        if (sys == "NMT") continue;
        std::map<std::string, SystemScores> pair{{"NMT", ss["NMT"]}, {sys, ss[sys]}};
        try {
          const auto g = gain_drop_report(pair, "NMT", resamples, seed).at(sys);
          rows.push_back({sys, format_gain_drop(g)});
          gd_csv << scheme << "," << sys << "," << csv_number(g.gain) << "," << csv_number(g.drop) << ","
                 << csv_number(g.gain_p) << "," << csv_number(g.drop_p) << "\n";
        } catch (const ContractError&) {
          rows.push_back({sys, kMissing});
        }
      }
      if (!rows.empty()) md << "\n" << markdown_table({"METEOR-lite", "+Gain (↓ Incongruence Drop)"}, rows);
    }

    for (const auto& sys : systems) {
      auto s = table.find(scheme);
      if (s == table.end() || !s->second.count(sys)) continue;
      for (const auto& [sd, r] : s->second.at(sys)) {
        for (const auto& [mode, reps] : r.by_mode) {
          for (const auto& [metric, rep] : reps) {
            scores << scheme << "," << sys << "," << sd << "," << mode << "," << metric << "," << csv_number(rep.corpus) << "\n";
          }
        }
      }
    }
  }

  std::vector<CurvePoint> curve;
  for (const auto& scheme : schemes) {
    int k = 0;
    if (scheme_variant(scheme, &k) != DegradationVariant::progressive) continue;
    CurvePoint p;
    p.k = k;
    for (const auto& sys : systems) {
      const auto v = run_scores(table, scheme, sys, "congruent", "meteor-lite");
      if (!v.empty()) p.scores[sys] = mean_of(v);
    }
    p.unmasked_fraction = 1.0 - grid.at("stats").at(scheme).at("train").at("masked_fraction").get<double>();
    curve.push_back(std::move(p));
  }
  std::sort(curve.begin(), curve.end(), [](const CurvePoint& a, const CurvePoint& b) { return a.k < b.k; });
  if (!curve.empty()) {
    write_text(dir / "progressive.csv", progressive_curve_csv(curve));
    md << "\n## Progressive masking\n\n```\n" << progressive_curve_csv(curve) << "```\n";
  }

  write_text(dir / "report.md", md.str());
  write_text(dir / "scores.csv", scores.str());
  write_text(dir / "gain_drop.csv", gd_csv.str());
  write_text(dir / "color.csv", color_csv.str());
}

// Every file under `dir` except the manifest itself, with sha256, plus cell
// statuses. Paths are relative and sorted, so equal runs give equal bytes.
inline void write_manifest(const fs::path& dir, const std::vector<CellOutcome>& cells) {
  std::vector<std::string> paths;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel != "manifest.json") paths.push_back(rel);
  }
  std::sort(paths.begin(), paths.end());
  nlohmann::json files = nlohmann::json::object();
  for (const auto& p : paths) files[p] = sha256_file(dir / p);
  nlohmann::json status = nlohmann::json::array();
  for (const auto& c : cells) {
    nlohmann::json j{{"cell", c.cell.name()}, {"status", c.ok ? "ok" : "failed"}};
    if (!c.ok) j["error"] = c.error;
    status.push_back(std::move(j));
  }
  write_text(dir / "manifest.json", nlohmann::json{{"files", files}, {"cells", status}}.dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// The grid

inline ExperimentResult run_experiment(ExperimentConfig cfg, const LogFn& log = {}) {
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  const fs::path dir = cfg.output;
  fs::create_directories(dir);
  materialize_synthetic(cfg, dir / "data");
  const ExperimentData data = load_experiment_data(cfg);

  std::map<std::string, SchemeData> schemes;
  nlohmann::json stats = nlohmann::json::object();
  for (const auto& label : cfg.schemes) {
    schemes[label] = degrade_for_scheme(data, label);
    const auto& s = schemes[label];
    stats[label] = {{"train", stats_json(s.train_stats)}, {"dev", stats_json(s.dev_stats)}, {"test", stats_json(s.test_stats)}};
  }

  const auto cells = experiment_cells(cfg);
  std::vector<std::string> system_names, mode_names;
  nlohmann::json cell_list = nlohmann::json::array();
  for (const auto& c : cells) {
    if (std::find(system_names.begin(), system_names.end(), c.system_name()) == system_names.end()) {
      system_names.push_back(c.system_name());
    }
    std::vector<std::string> modes;
    for (auto m : cell_modes(cfg, c)) {
      modes.push_back(to_string(m));
      if (std::find(mode_names.begin(), mode_names.end(), modes.back()) == mode_names.end()) mode_names.push_back(modes.back());
    }
    cell_list.push_back({{"scheme", c.scheme},
                         {"system", c.system_name()},
                         {"seed", c.seed},
                         {"dir", c.rel_dir().generic_string()},
                         {"modes", modes}});
  }
  write_text(dir / "grid.json", nlohmann::json{{"schemes", cfg.schemes},
                                               {"systems", system_names},
                                               {"seeds", cfg.seeds},
                                               {"modes", mode_names},
                                               {"stats", stats},
                                               {"cells", cell_list}}
                                        .dump(1) +
                                    "\n");

  const std::size_t threads = std::max<std::size_t>(1, std::min(cfg.threads ? cfg.threads : configured_threads(), cells.size()));
  const std::size_t decode_threads = threads > 1 ? 1 : (cfg.threads ? cfg.threads : configured_threads());
  ExperimentResult result;
  result.dir = dir;
  result.cells.resize(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const auto& cell = cells[i];
      auto& out = result.cells[i];
      out.cell = cell;
      const fs::path cdir = dir / cell.rel_dir();
      const std::string key = cell_key(cfg, data, cell);
      if (cell_is_cached(cdir, key)) {
        out.ok = out.cached = true;
        std::lock_guard lock(log_mutex);
        say(cell.name() + ": cached");
        continue;
      }
      nlohmann::json info{{"cell", cell.name()}, {"key", key}};
      try {
        if (fs::exists(cdir)) fs::remove_all(cdir);
        const auto files = run_cell(cfg, data, schemes.at(cell.scheme), cell, cdir, decode_threads);
        nlohmann::json hashes = nlohmann::json::object();
        for (const auto& f : files) hashes[f] = sha256_file(cdir / f);
        info["status"] = "ok";
        info["files"] = hashes;
        out.ok = true;
      } catch (const std::exception& e) {
        info["status"] = "failed";
        info["error"] = e.what();
        out.error = e.what();
      }
      write_text(cdir / "cell.json", info.dump(1) + "\n");
      std::lock_guard lock(log_mutex);
      say(cell.name() + ": " + (out.ok ? "done" : "FAILED: " + out.error));
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  write_reports(dir, cfg.resamples, cfg.significance_seed);
  write_manifest(dir, result.cells);
  return result;
}

}  // namespace mmtprobe
