// mmtprobe command-line driver. Every subcommand except `prepare` reads
// whitespace-tokenized text (as written by `prepare` and `degrade`) unless
// --tokenize is given.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "mmtprobe/mmtprobe.hpp"

namespace fs = std::filesystem;
using namespace mmtprobe;

namespace {

std::vector<Tokens> read_sentences(const fs::path& path, bool tokenize_lines) {
  std::vector<Tokens> out;
  std::size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    out.push_back(tokenize_lines ? tokenize(line) : split_whitespace(line));
    if (out.back().empty()) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": empty sentence");
  }
  return out;
}

std::vector<Tokens> read_eval_lines(const fs::path& path) {
  std::vector<Tokens> out;
  for (const auto& line : read_lines(path)) out.push_back(normalize_for_eval(line));
  return out;
}

// Spatial features are depth-normalized; INIT consumes their global average.
FeatureSet prepare_features(const fs::path& path, Fusion fusion, bool normalize) {
  FeatureSet fs = load_features(path);
  if (fs.spatial() && normalize) fs = normalize_depth(fs);
  if (fusion == Fusion::init && fs.spatial()) fs = global_average_pool(fs);
  return fs;
}

void add_blind_options(CLI::App* app, std::string& order, std::uint64_t& seed) {
  app->add_option("--blind-order", order, "Feature order for blinded runs")
      ->check(CLI::IsMember({"shuffled", "reversed"}))
      ->capture_default_str();
  app->add_option("--blind-seed", seed, "Seed of the blinded derangement")->capture_default_str();
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

// --- prepare ----------------------------------------------------------------

struct PrepareArgs {
  fs::path src, tgt, out_dir;
  std::string name = "train";
  bool vocab = false;
};

int cmd_prepare(const PrepareArgs& a) {
  const Corpus c = load_parallel(a.src, a.tgt, false);
  fs::create_directories(a.out_dir);
  write_token_lines(a.out_dir / (a.name + ".src"), sources(c));
  write_token_lines(a.out_dir / (a.name + ".tgt"), targets(c));
  const auto sv = Vocabulary::build(sources(c));
  const auto tv = Vocabulary::build(targets(c));
  if (a.vocab) {
    sv.save(a.out_dir / "vocab.src");
    tv.save(a.out_dir / "vocab.tgt");
  }
  const auto reserved = static_cast<std::size_t>(Vocabulary::kReserved);
  print_json({{"sentences", c.size()},
              {"src_types", sv.size() - reserved},
              {"tgt_types", tv.size() - reserved},
              {"src_vocab", sv.size()},
              {"tgt_vocab", tv.size()}});
  return 0;
}

// --- degrade ----------------------------------------------------------------

struct DegradeArgs {
  fs::path src, out, lexicon, annotations;
  std::string scheme;
  bool tokenize_lines = false;
};

int cmd_degrade(const DegradeArgs& a) {
  int k = 0;
  const auto variant = scheme_variant(a.scheme, &k);
  DegradationSpec spec;
  switch (variant) {
    case DegradationVariant::none: spec = DegradationSpec::none(); break;
    case DegradationVariant::color:
      spec = DegradationSpec::color(a.lexicon.empty() ? default_color_lexicon() : load_color_lexicon(a.lexicon));
      break;
    case DegradationVariant::entity:
      if (a.annotations.empty()) throw ConfigError("scheme 'entity' needs --annotations");
      spec = DegradationSpec::entity(EntityAnnotations::load(a.annotations));
      break;
    case DegradationVariant::progressive: spec = DegradationSpec::progressive(k); break;
  }
  Corpus c;
  std::size_t i = 0;
  for (auto& s : read_sentences(a.src, a.tokenize_lines)) c.push_back({std::move(s), {}, i++});
  const auto [out, stats] = degrade_corpus(c, spec);
  write_token_lines(a.out, sources(out));
  print_json(stats_json(stats));
  return 0;
}

// --- synth ------------------------------------------------------------------

int cmd_synth(const SyntheticTaskSpec& spec, const fs::path& out_dir) {
  const auto task = generate_synthetic(spec);
  write_synthetic(task, out_dir);
  print_json({{"train", task.train.corpus.size()}, {"dev", task.dev.corpus.size()}, {"test", task.test.corpus.size()}});
  return 0;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  fs::path train_src, train_tgt, dev_src, dev_tgt, train_features, dev_features, out_dir;
  std::string fusion = "nmt";
  std::string decay_mode = "coupled";
  std::string blind_order = "shuffled";
  std::uint64_t blind_seed = 7;
  bool blind = false;
  bool tokenize_lines = false;
  bool no_normalize = false;
  ModelConfig model;
  TrainConfig train;
};

Corpus read_corpus(const fs::path& src, const fs::path& tgt, bool tokenize_lines) {
  auto s = read_sentences(src, tokenize_lines);
  auto t = read_sentences(tgt, tokenize_lines);
  if (s.size() != t.size()) {
    throw FormatError(src.string() + " has " + std::to_string(s.size()) + " lines but " + tgt.string() + " has " +
                      std::to_string(t.size()));
  }
  Corpus c;
  for (std::size_t i = 0; i < s.size(); ++i) c.push_back({std::move(s[i]), std::move(t[i]), i});
  return c;
}

int cmd_train(TrainArgs a) {
  const Corpus train_c = read_corpus(a.train_src, a.train_tgt, a.tokenize_lines);
  const Corpus dev_c = read_corpus(a.dev_src, a.dev_tgt, a.tokenize_lines);
  const auto sv = Vocabulary::build(sources(train_c));
  const auto tv = Vocabulary::build(targets(train_c));
  ModelConfig mc = a.model;
  mc.fusion = parse_fusion(a.fusion);
  mc.src_vocab = sv.size();
  mc.tgt_vocab = tv.size();
  TrainConfig tc = a.train;
  tc.decay_mode = parse_decay_mode(a.decay_mode);

  TrainData td;
  td.train = encode_corpus(train_c, sv, tv);
  td.dev = encode_corpus(dev_c, sv, tv);
  for (const auto& s : dev_c) td.dev_refs.push_back(stitch_hyphens(s.target));
  std::optional<FeatureSet> train_f, dev_f;
  if (mc.uses_features()) {
    if (a.train_features.empty() || a.dev_features.empty()) {
      throw ConfigError(to_string(mc.fusion) + " needs --train-features and --dev-features");
    }
    train_f = prepare_features(a.train_features, mc.fusion, !a.no_normalize);
    dev_f = prepare_features(a.dev_features, mc.fusion, !a.no_normalize);
    mc.feature_channels = train_f->channels();
    mc.feature_positions = train_f->positions();
    const auto mode = a.blind ? CongruenceMode::blinded : CongruenceMode::congruent;
    const auto order = parse_blind_order(a.blind_order);
    td.train_features = &*train_f;
    td.dev_features = &*dev_f;
    td.train_map = remap_order(*train_f, mode, td.train.size(), a.blind_seed, order);
    td.dev_map = remap_order(*dev_f, mode, td.dev.size(), a.blind_seed, order);
  }
  const auto result = train(mc, init_parameters(mc, tc.seed), td, tv, tc, [](const EpochRecord& r) {
    std::fprintf(stderr, "epoch %zu  loss %.4f  dev %.4f%s\n", r.epoch, r.train_loss, r.dev_score, r.best ? "  *" : "");
  });
  fs::create_directories(a.out_dir);
  Model model{mc, result.best_params, sv, tv,
              nlohmann::json{{"best_epoch", result.best_epoch}, {"best_dev", result.best_score}, {"seed", tc.seed},
                             {"blinded", a.blind}}};
  save_model(a.out_dir / "model.bin", model);
  write_text(a.out_dir / "history.csv", history_csv(result.history));
  print_json({{"best_epoch", result.best_epoch}, {"best_dev", result.best_score}, {"epochs", result.history.size()}});
  return 0;
}

// --- translate --------------------------------------------------------------

struct TranslateArgs {
  fs::path checkpoint, src, out, features, attn_out, src_vocab, tgt_vocab;
  std::size_t beam = 12;
  std::size_t threads = 0;
  std::string congruence = "congruent";
  std::string blind_order = "shuffled";
  std::uint64_t blind_seed = 7;
  bool length_normalize = false;
  bool tokenize_lines = false;
  bool no_normalize = false;
};

int cmd_translate(const TranslateArgs& a) {
  const Model model = load_model(a.checkpoint);
  if (!a.src_vocab.empty() || !a.tgt_vocab.empty()) {
    check_vocabularies(model, a.src_vocab.empty() ? model.src_vocab : Vocabulary::load(a.src_vocab),
                       a.tgt_vocab.empty() ? model.tgt_vocab : Vocabulary::load(a.tgt_vocab));
  }
  const auto src = read_sentences(a.src, a.tokenize_lines);
  Corpus c;
  for (std::size_t i = 0; i < src.size(); ++i) c.push_back({src[i], {}, i});
  const auto data = encode_corpus(c, model.src_vocab, model.tgt_vocab);

  std::optional<FeatureSet> fs;
  if (model.config.uses_features()) {
    if (a.features.empty()) throw ConfigError(to_string(model.config.fusion) + " checkpoint needs --features");
    fs = prepare_features(a.features, model.config.fusion, !a.no_normalize);
  }
  const auto mode = parse_congruence(a.congruence);
  const auto order = parse_blind_order(a.blind_order);
  const auto map = fs ? remap_order(*fs, mode, data.size(), a.blind_seed, order)
                      : remap_order(mode, data.size(), a.blind_seed, order);
  DecodeOptions opt;
  opt.beam = a.beam;
  opt.length_normalize = a.length_normalize;
  opt.record_attention = !a.attn_out.empty();
  const auto hyps = translate_corpus(model.config, model.params, data, fs ? &*fs : nullptr, map, opt, a.threads);

  std::vector<std::string> lines;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    lines.push_back(join_tokens(hypothesis_tokens(hyps[i], model.tgt_vocab)));
    if (opt.record_attention) {
      // One attention row per emitted id, EOS and hyphen markers included.
      Tokens raw;
      for (int id : hyps[i].tokens) raw.push_back(model.tgt_vocab.token(id));
      export_attention(hyps[i], src[i], raw, a.attn_out, std::to_string(i));
    }
  }
  if (a.out.empty()) {
    for (const auto& l : lines) std::cout << l << "\n";
  } else {
    write_lines(a.out, lines);
  }
  return 0;
}

// --- evaluate / significance ------------------------------------------------

struct EvalArgs {
  fs::path hyp, ref, target_lexicon, select;
  std::string metric = "meteor-lite";
  bool sentences = false;
};

MetricReport score_file(const std::string& metric, const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs,
                        const EvalArgs& a) {
  if (metric == "meteor-lite") return meteor_lite(hyps, refs);
  if (metric == "bleu") return bleu(hyps, refs);
  if (a.target_lexicon.empty()) throw ConfigError("color-acc needs --target-lexicon");
  std::vector<bool> selected(refs.size(), true);
  if (!a.select.empty()) {
    const auto src = read_sentences(a.select, false);
    check_aligned(src.size(), refs.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
      selected[i] = std::find(src[i].begin(), src[i].end(), kMaskToken) != src[i].end();
    }
  }
  return color_accuracy(hyps, refs, selected, load_target_color_lexicon(a.target_lexicon));
}

int cmd_evaluate(const EvalArgs& a) {
  const auto rep = score_file(a.metric, read_eval_lines(a.hyp), read_eval_lines(a.ref), a);
  nlohmann::json j{{"metric", rep.metric}, {"corpus", rep.corpus}, {"count", rep.sentences.size()}};
  if (a.sentences) j["sentences"] = rep.sentences;
  print_json(j);
  return 0;
}

struct SignificanceArgs {
  std::vector<fs::path> a, b;
  EvalArgs eval;
  std::size_t resamples = 10000;
  std::uint64_t seed = 1;
};

int cmd_significance(const SignificanceArgs& s) {
  if (s.a.size() != s.b.size()) throw ConfigError("--a and --b need the same number of runs");
  const auto refs = read_eval_lines(s.eval.ref);
  std::vector<std::vector<double>> ra, rb;
  std::vector<double> ca, cb;
  for (std::size_t r = 0; r < s.a.size(); ++r) {
    const auto x = score_file(s.eval.metric, read_eval_lines(s.a[r]), refs, s.eval);
    const auto y = score_file(s.eval.metric, read_eval_lines(s.b[r]), refs, s.eval);
    ra.push_back(x.sentences), ca.push_back(x.corpus);
    rb.push_back(y.sentences), cb.push_back(y.corpus);
  }
  const double p = significance_test(ra, rb, s.resamples, s.seed);
  print_json({{"metric", s.eval.metric}, {"a", mean_of(ca)}, {"b", mean_of(cb)}, {"p", p}, {"resamples", s.resamples}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual-grounding probes for multimodal machine translation"};
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* p = app.add_subcommand("prepare", "Tokenize a parallel corpus and report vocabulary sizes");
  p->add_option("--src", prep.src)->required()->check(CLI::ExistingFile);
  p->add_option("--tgt", prep.tgt)->required()->check(CLI::ExistingFile);
  p->add_option("--out-dir", prep.out_dir)->required();
  p->add_option("--name", prep.name, "Output stem: <name>.src, <name>.tgt")->capture_default_str();
  p->add_flag("--vocab", prep.vocab, "Also write vocab.src and vocab.tgt");

  DegradeArgs deg;
  auto* d = app.add_subcommand("degrade", "Mask source sentences (none, color, entity, k0..k30)");
  d->add_option("--src", deg.src)->required()->check(CLI::ExistingFile);
  d->add_option("--out", deg.out)->required();
  d->add_option("--scheme", deg.scheme)->required();
  d->add_option("--lexicon", deg.lexicon, "Source color lexicon (default: built-in English list)")
      ->check(CLI::ExistingFile);
  d->add_option("--annotations", deg.annotations, "Entity head TSV")->check(CLI::ExistingFile);
  d->add_flag("--tokenize", deg.tokenize_lines, "Tokenize raw input lines");

  SyntheticTaskSpec synth_spec;
  fs::path synth_out;
  auto* sy = app.add_subcommand("synth", "Generate the color-grounding toy task");
  sy->add_option("--out-dir", synth_out)->required();
  sy->add_option("--train-size", synth_spec.train_size)->capture_default_str();
  sy->add_option("--dev-size", synth_spec.dev_size)->capture_default_str();
  sy->add_option("--test-size", synth_spec.test_size)->capture_default_str();
  sy->add_option("--colors", synth_spec.colors)->capture_default_str();
  sy->add_option("--channels", synth_spec.channels)->capture_default_str();
  sy->add_option("--sigma", synth_spec.sigma)->capture_default_str();
  sy->add_option("--tail-rate", synth_spec.tail_rate)->capture_default_str();
  sy->add_option("--seed", synth_spec.seed)->capture_default_str();

  TrainArgs tr;
  tr.model.emb_dim = 64, tr.model.hidden = 128, tr.model.encoder_layers = 1, tr.model.split_bidirectional = true;
  auto* t = app.add_subcommand("train", "Train one model and write model.bin and history.csv");
  t->add_option("--train-src", tr.train_src)->required()->check(CLI::ExistingFile);
  t->add_option("--train-tgt", tr.train_tgt)->required()->check(CLI::ExistingFile);
  t->add_option("--dev-src", tr.dev_src)->required()->check(CLI::ExistingFile);
  t->add_option("--dev-tgt", tr.dev_tgt)->required()->check(CLI::ExistingFile);
  t->add_option("--train-features", tr.train_features)->check(CLI::ExistingFile);
  t->add_option("--dev-features", tr.dev_features)->check(CLI::ExistingFile);
  t->add_option("--out-dir", tr.out_dir)->required();
  t->add_option("--fusion", tr.fusion)->check(CLI::IsMember({"nmt", "init", "hier", "direct"}))->capture_default_str();
  t->add_option("--emb", tr.model.emb_dim)->capture_default_str();
  t->add_option("--hidden", tr.model.hidden)->capture_default_str();
  t->add_option("--layers", tr.model.encoder_layers)->capture_default_str();
  t->add_option("--split-bidirectional", tr.model.split_bidirectional)->capture_default_str();
  t->add_option("--lr", tr.train.lr)->capture_default_str();
  t->add_option("--batch", tr.train.batch_size)->capture_default_str();
  t->add_option("--clip-norm", tr.train.clip_norm)->capture_default_str();
  t->add_option("--weight-decay", tr.train.weight_decay)->capture_default_str();
  t->add_option("--decay-mode", tr.decay_mode)->check(CLI::IsMember({"coupled", "decoupled"}))->capture_default_str();
  t->add_option("--patience", tr.train.patience)->capture_default_str();
  t->add_option("--max-epochs", tr.train.max_epochs)->capture_default_str();
  t->add_option("--seed", tr.train.seed)->capture_default_str();
  t->add_option("--dev-metric", tr.train.dev_metric)->check(CLI::IsMember({"meteor-lite", "bleu"}))->capture_default_str();
  t->add_flag("--blind", tr.blind, "Train on misaligned features");
  add_blind_options(t, tr.blind_order, tr.blind_seed);
  t->add_flag("--tokenize", tr.tokenize_lines, "Tokenize raw input lines");
  t->add_flag("--no-normalize", tr.no_normalize, "Keep spatial features as stored");

  TranslateArgs tl;
  auto* x = app.add_subcommand("translate", "Decode a source file with a checkpoint");
  x->add_option("--checkpoint", tl.checkpoint)->required()->check(CLI::ExistingFile);
  x->add_option("--src", tl.src)->required()->check(CLI::ExistingFile);
  x->add_option("--out", tl.out, "Hypothesis file (default: stdout)");
  x->add_option("--features", tl.features)->check(CLI::ExistingFile);
  x->add_option("--beam", tl.beam)->check(CLI::PositiveNumber)->capture_default_str();
  x->add_option("--congruence", tl.congruence)
      ->check(CLI::IsMember({"congruent", "incongruent", "blinded"}))
      ->capture_default_str();
  add_blind_options(x, tl.blind_order, tl.blind_seed);
  x->add_option("--attn-out", tl.attn_out, "Directory for per-sentence attention CSVs");
  x->add_option("--src-vocab", tl.src_vocab, "Refuse to decode unless this vocabulary matches the checkpoint");
  x->add_option("--tgt-vocab", tl.tgt_vocab);
  x->add_option("--threads", tl.threads, "0: MMTPROBE_THREADS or all cores")->capture_default_str();
  x->add_flag("--length-normalize", tl.length_normalize);
  x->add_flag("--tokenize", tl.tokenize_lines, "Tokenize raw input lines");
  x->add_flag("--no-normalize", tl.no_normalize, "Keep spatial features as stored");

  EvalArgs ev;
  auto add_eval_options = [](CLI::App* cmd, EvalArgs& e) {
    cmd->add_option("--ref", e.ref)->required()->check(CLI::ExistingFile);
    cmd->add_option("--metric", e.metric)->check(CLI::IsMember({"meteor-lite", "bleu", "color-acc"}))->capture_default_str();
    cmd->add_option("--target-lexicon", e.target_lexicon, "surface<TAB>class lines, for color-acc")
        ->check(CLI::ExistingFile);
    cmd->add_option("--select", e.select, "Degraded source; color-acc only scores lines containing the mask")
        ->check(CLI::ExistingFile);
  };
  auto* e = app.add_subcommand("evaluate", "Score a hypothesis file");
  e->add_option("--hyp", ev.hyp)->required()->check(CLI::ExistingFile);
  add_eval_options(e, ev);
  e->add_flag("--sentences", ev.sentences, "Include per-sentence scores");

  SignificanceArgs sg;
  auto* s = app.add_subcommand("significance", "Approximate randomization between two systems' runs");
  s->add_option("--a", sg.a, "Hypothesis files, one per run")->required()->check(CLI::ExistingFile);
  s->add_option("--b", sg.b, "Hypothesis files, one per run")->required()->check(CLI::ExistingFile);
  add_eval_options(s, sg.eval);
  s->add_option("--resamples", sg.resamples)->check(CLI::PositiveNumber)->capture_default_str();
  s->add_option("--seed", sg.seed)->capture_default_str();

  fs::path report_dir;
  std::size_t report_resamples = 10000;
  std::uint64_t report_seed = 1;
  auto* r = app.add_subcommand("report", "Rebuild report.md and CSV tables of a results directory");
  r->add_option("--dir", report_dir)->required()->check(CLI::ExistingDirectory);
  r->add_option("--resamples", report_resamples)->capture_default_str();
  r->add_option("--seed", report_seed)->capture_default_str();

  fs::path config_path;
  std::vector<std::string> overrides;
  std::string output;
  auto* run = app.add_subcommand("run", "Run the experiment grid described by a config");
  run->add_option("config", config_path, "INI config")->check(CLI::ExistingFile);
  run->add_option("--set", overrides, "section.key=value override (repeatable)");
  run->add_option("--output", output, "Results directory (overrides experiment.output)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*p) return cmd_prepare(prep);
    if (*d) return cmd_degrade(deg);
    if (*sy) return cmd_synth(synth_spec, synth_out);
    if (*t) return cmd_train(tr);
    if (*x) return cmd_translate(tl);
    if (*e) return cmd_evaluate(ev);
    if (*s) return cmd_significance(sg);
    if (*r) {
      write_reports(report_dir, report_resamples, report_seed);
      std::cout << (report_dir / "report.md").string() << "\n";
      return 0;
    }
    if (*run) {
      if (!output.empty()) overrides.push_back("experiment.output=" + output);
      auto cfg = config_path.empty() ? config_from_overrides(overrides) : load_config(config_path, overrides);
      const auto res = run_experiment(cfg, [](const std::string& msg) { std::cerr << msg << "\n"; });
      std::size_t failed = 0;
      for (const auto& c : res.cells) {
        if (!c.ok) {
          ++failed;
          std::cerr << "FAILED " << c.cell.name() << ": " << c.error << "\n";
        }
      }
      std::cout << (res.dir / "report.md").lexically_normal().string() << "\n";
      return failed ? 1 : 0;
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 0;
}
