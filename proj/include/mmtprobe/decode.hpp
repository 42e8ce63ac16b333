#pragma once

// Greedy and beam-search decoding, corpus translation under congruence
// maps, and attention export.
//
// Scores are summed log-probabilities (no length normalization unless asked
// for). Ties are broken by lower beam index, then lower token id. The
// default length limit is 2 * source length + 5.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mmtprobe/errors.hpp"
#include "mmtprobe/features.hpp"
#include "mmtprobe/model.hpp"
#include "mmtprobe/text.hpp"

namespace mmtprobe {

struct Hypothesis {
  std::vector<int> tokens;  // without BOS; ends with EOS when finished
  double score = 0.0;
  bool finished = false;
  std::vector<std::vector<double>> text_attention;   // one row per output token
  std::vector<std::vector<double>> image_attention;  // empty without spatial features
};

struct DecodeOptions {
  std::size_t beam = 12;
  std::size_t max_len = 0;  // 0: 2 * source length + 5
  bool record_attention = false;
  bool length_normalize = false;
};

// Source ids include the trailing EOS; the length rule counts real tokens.
inline std::size_t default_max_len(std::span<const int> src) {
  const std::size_t n = !src.empty() && src.back() == Vocabulary::kEos ? src.size() - 1 : src.size();
  return 2 * n + 5;
}

// MMTPROBE_THREADS caps worker threads; default is the hardware concurrency.
inline std::size_t configured_threads() {
  std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MMTPROBE_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) n = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError(std::string("MMTPROBE_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return n;
}

namespace detail {

inline std::vector<double> log_softmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t V = logits.shape()[1];
  const double* x = &logits.data()[row * V];
  const double m = *std::max_element(x, x + V);
  double z = 0.0;
  for (std::size_t v = 0; v < V; ++v) z += std::exp(x[v] - m);
  const double lz = m + std::log(z);
  std::vector<double> out(V);
  for (std::size_t v = 0; v < V; ++v) out[v] = x[v] - lz;
  return out;
}

inline std::vector<double> column(const Tensor& t, std::size_t col) {
  const std::size_t R = t.shape()[0], C = t.shape()[1];
  std::vector<double> out(R);
  for (std::size_t r = 0; r < R; ++r) out[r] = t.data()[r * C + col];
  return out;
}

// Re-batches position-major keys: new item j takes old item which[j].
inline AttentionKeys select_keys(const AttentionKeys& k, std::span<const int> which) {
  const std::size_t P = k.positions, B = k.batch, K = which.size();
  std::vector<int> rows(P * K);
  Tensor mask(Shape{P, K});
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t j = 0; j < K; ++j) {
      rows[p * K + j] = static_cast<int>(p * B) + which[j];
      mask.at(p, j) = k.mask.at(p, static_cast<std::size_t>(which[j]));
    }
  }
  AttentionKeys out;
  out.values = gather_rows(k.values, rows);
  out.projected = gather_rows(k.projected, rows);
  out.mask = std::move(mask);
  out.positions = P;
  out.batch = K;
  return out;
}

inline EncodedSource select_batch(const EncodedSource& enc, std::span<const int> which) {
  EncodedSource out;
  out.text = select_keys(enc.text, which);
  out.annotations = out.text.values;
  if (enc.image) out.image = select_keys(*enc.image, which);
  out.decoder_init = gather_rows(enc.decoder_init, which);
  out.steps = enc.steps;
  out.batch = which.size();
  return out;
}

}  // namespace detail

// Argmax per step from BOS until EOS or the length limit.
inline Hypothesis greedy_decode(const ModelConfig& config, const ParameterSet& params, std::span<const int> src,
                                const FeatureInput* feats, std::size_t max_len = 0, bool record_attention = false) {
  if (max_len == 0) max_len = default_max_len(src);
  Tape tape(false);
  ForwardContext ctx(tape, config, params, false, nullptr);
  EncodedSource enc = encode_source(ctx, SourceInput::single(src), feats);
  Hypothesis h;
  Var state = enc.decoder_init;
  int prev = Vocabulary::kBos;
  for (std::size_t t = 0; t < max_len; ++t) {
    std::vector<int> prev_tokens{prev};
    DecoderStep step = decoder_step(ctx, prev_tokens, state, enc);
    const auto lp = detail::log_softmax_row(step.logits.value(), 0);
    std::size_t best = 0;
    for (std::size_t v = 1; v < lp.size(); ++v) {
      if (h.score + lp[v] > h.score + lp[best]) best = v;
    }
    h.score += lp[best];
    h.tokens.push_back(static_cast<int>(best));
    if (record_attention) {
      h.text_attention.push_back(detail::column(step.text_weights.value(), 0));
      if (step.image_weights.valid()) h.image_attention.push_back(detail::column(step.image_weights.value(), 0));
    }
    state = step.state;
    prev = static_cast<int>(best);
    if (prev == Vocabulary::kEos) {
      h.finished = true;
      break;
    }
  }
  return h;
}

// Length-synchronous beam search. Finished hypotheses leave the beam, which
// shrinks accordingly. Returns the n-best list, best first.
inline std::vector<Hypothesis> beam_search(const ModelConfig& config, const ParameterSet& params, std::span<const int> src,
                                           const FeatureInput* feats, const DecodeOptions& opt = {}) {
  if (opt.beam == 0) throw ConfigError("beam size must be at least 1");
  const std::size_t max_len = opt.max_len ? opt.max_len : default_max_len(src);
  Tape tape(false);
  ForwardContext ctx(tape, config, params, false, nullptr);
  const EncodedSource enc1 = encode_source(ctx, SourceInput::single(src), feats);

  std::vector<Hypothesis> live(1), done;
  Var state = enc1.decoder_init;
  struct Candidate {
    double score;
    std::size_t parent;
    int token;
  };
  for (std::size_t t = 0; t < max_len && !live.empty(); ++t) {
    const std::size_t K = live.size();
    std::vector<int> which(K, 0), prev(K);
    for (std::size_t j = 0; j < K; ++j) prev[j] = live[j].tokens.empty() ? Vocabulary::kBos : live[j].tokens.back();
    EncodedSource enc = detail::select_batch(enc1, which);
    DecoderStep step = decoder_step(ctx, prev, state, enc);
    const Tensor& logits = step.logits.value();
    const std::size_t V = logits.shape()[1];

    std::vector<Candidate> cands;
    cands.reserve(K * V);
    for (std::size_t j = 0; j < K; ++j) {
      const auto lp = detail::log_softmax_row(logits, j);
      for (std::size_t v = 0; v < V; ++v) cands.push_back({live[j].score + lp[v], j, static_cast<int>(v)});
    }
    const std::size_t keep = std::min(cands.size(), opt.beam - done.size());
    auto better = [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    };
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), better);

    std::vector<Hypothesis> next;
    std::vector<int> parents;
    for (std::size_t c = 0; c < keep; ++c) {
      const auto& cand = cands[c];
      Hypothesis h;
      h.tokens = live[cand.parent].tokens;
      h.tokens.push_back(cand.token);
      h.score = cand.score;
      if (opt.record_attention) {
        h.text_attention = live[cand.parent].text_attention;
        h.text_attention.push_back(detail::column(step.text_weights.value(), cand.parent));
        h.image_attention = live[cand.parent].image_attention;
        if (step.image_weights.valid()) h.image_attention.push_back(detail::column(step.image_weights.value(), cand.parent));
      }
      if (cand.token == Vocabulary::kEos) {
        h.finished = true;
        done.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
        parents.push_back(static_cast<int>(cand.parent));
      }
    }
    live = std::move(next);
    if (!live.empty()) state = gather_rows(step.state, parents);
  }
  for (auto& h : live) done.push_back(std::move(h));

  auto key = [&](const Hypothesis& h) {
    return opt.length_normalize ? h.score / static_cast<double>(std::max<std::size_t>(1, h.tokens.size())) : h.score;
  };
  std::stable_sort(done.begin(), done.end(), [&](const Hypothesis& a, const Hypothesis& b) {
    const double ka = key(a), kb = key(b);
    if (ka != kb) return ka > kb;
    return a.tokens < b.tokens;
  });
  if (done.size() > opt.beam) done.resize(opt.beam);
  return done;
}

// Exact log-probability of emitting `tokens` after BOS (teacher forcing).
inline double sequence_log_prob(const ModelConfig& config, const ParameterSet& params, std::span<const int> src,
                                const FeatureInput* feats, std::span<const int> tokens) {
  Tape tape(false);
  ForwardContext ctx(tape, config, params, false, nullptr);
  EncodedSource enc = encode_source(ctx, SourceInput::single(src), feats);
  Var state = enc.decoder_init;
  int prev = Vocabulary::kBos;
  double score = 0.0;
  for (int tok : tokens) {
    std::vector<int> p{prev};
    DecoderStep step = decoder_step(ctx, p, state, enc);
    score += detail::log_softmax_row(step.logits.value(), 0)[static_cast<std::size_t>(tok)];
    state = step.state;
    prev = tok;
  }
  return score;
}

// Feature rows for one sample under a congruence map (nullptr for NMT).
inline std::optional<FeatureInput> sample_features(const ModelConfig& config, const FeatureSet* fs,
                                                   std::span<const std::size_t> congruence, std::size_t image_index) {
  if (!config.uses_features()) return std::nullopt;
  if (!fs) throw ContractError(to_string(config.fusion) + " needs a feature set");
  if (image_index >= congruence.size()) throw IndexError("image index " + std::to_string(image_index) + " outside the congruence map");
  std::vector<std::size_t> rows{congruence[image_index]};
  return gather_features(*fs, rows);
}

// Batched greedy decoding in corpus order (used for dev scoring).
inline std::vector<std::vector<int>> greedy_decode_corpus(const ModelConfig& config, const ParameterSet& params,
                                                          const std::vector<EncodedSample>& data, const FeatureSet* fs,
                                                          std::span<const std::size_t> congruence,
                                                          std::size_t batch_size = 64) {
  std::vector<std::vector<int>> out(data.size());
  for (const Batch& batch : sequential_batches(data, batch_size)) {
    const std::size_t B = batch.size();
    std::optional<FeatureInput> feats;
    if (config.uses_features()) {
      if (!fs) throw ContractError(to_string(config.fusion) + " needs a feature set");
      feats = batch_features(*fs, batch, congruence);
    }
    Tape tape(false);
    ForwardContext ctx(tape, config, params, false, nullptr);
    EncodedSource enc = encode_source(ctx, SourceInput::from_batch(batch), feats ? &*feats : nullptr);
    std::vector<std::size_t> limit(B);
    std::size_t longest = 0;
    for (std::size_t b = 0; b < B; ++b) {
      limit[b] = default_max_len(data[batch.samples[b]].source);
      longest = std::max(longest, limit[b]);
    }
    std::vector<int> prev(B, Vocabulary::kBos);
    std::vector<char> finished(B, 0);
    Var state = enc.decoder_init;
    for (std::size_t t = 0; t < longest; ++t) {
      DecoderStep step = decoder_step(ctx, prev, state, enc);
      const Tensor& logits = step.logits.value();
      const std::size_t V = logits.shape()[1];
      bool all_done = true;
      for (std::size_t b = 0; b < B; ++b) {
        if (finished[b]) continue;
        const double* row = &logits.data()[b * V];
        const int best = static_cast<int>(std::max_element(row, row + V) - row);
        out[batch.samples[b]].push_back(best);
        prev[b] = best;
        if (best == Vocabulary::kEos || out[batch.samples[b]].size() >= limit[b]) finished[b] = 1;
        all_done = all_done && finished[b];
      }
      if (all_done) break;
      state = step.state;
    }
  }
  return out;
}

// Refuses to decode with vocabularies other than the checkpoint's own.
inline void check_vocabularies(const Model& model, const Vocabulary& src, const Vocabulary& tgt) {
  if (src.hash() != model.src_vocab.hash()) {
    throw ContractError("source vocabulary hash " + src.hash().substr(0, 12) + " does not match the checkpoint's " +
                        model.src_vocab.hash().substr(0, 12) +
                        "; the corpus would be encoded with different ids than the model was trained on");
  }
  if (tgt.hash() != model.tgt_vocab.hash()) {
    throw ContractError("target vocabulary hash " + tgt.hash().substr(0, 12) + " does not match the checkpoint's " +
                        model.tgt_vocab.hash().substr(0, 12));
  }
}

// Decodes every sample (beam 1 uses the greedy decoder) on worker threads;
// results are in input order regardless of scheduling.
inline std::vector<Hypothesis> translate_corpus(const ModelConfig& config, const ParameterSet& params,
                                                const std::vector<EncodedSample>& data, const FeatureSet* fs,
                                                std::span<const std::size_t> congruence, const DecodeOptions& opt,
                                                std::size_t threads = 0) {
  if (threads == 0) threads = configured_threads();
  threads = std::max<std::size_t>(1, std::min(threads, data.size()));
  std::vector<Hypothesis> out(data.size());
  std::vector<std::exception_ptr> errors(threads);
  auto work = [&](std::size_t tid) {
    try {
      for (std::size_t i = tid; i < data.size(); i += threads) {
        auto feats = sample_features(config, fs, congruence, data[i].image_index);
        const FeatureInput* fp = feats ? &*feats : nullptr;
        if (opt.beam == 1) {
          out[i] = greedy_decode(config, params, data[i].source, fp, opt.max_len, opt.record_attention);
        } else {
          out[i] = beam_search(config, params, data[i].source, fp, opt).front();
        }
      }
    } catch (...) {
      errors[tid] = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

// Output tokens for a hypothesis, hyphens stitched back.
inline Tokens hypothesis_tokens(const Hypothesis& h, const Vocabulary& tgt) {
  return stitch_hyphens(decode_ids(h.tokens, tgt));
}

// Writes <stem>.text.csv (rows: output tokens, columns: source tokens) and,
// for models with spatial features, <stem>.image.csv (columns: grid cells).
inline void export_attention(const Hypothesis& h, const Tokens& source_tokens, const Tokens& output_tokens,
                             const std::filesystem::path& dir, const std::string& stem) {
  if (h.text_attention.empty()) throw ContractError("export_attention: attention was not recorded");
  if (output_tokens.size() != h.text_attention.size()) {
    throw DimensionError("export_attention: " + std::to_string(output_tokens.size()) + " output tokens for " +
                         std::to_string(h.text_attention.size()) + " attention rows");
  }
  std::filesystem::create_directories(dir);
  auto csv_field = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  auto write = [&](const std::filesystem::path& path, const std::vector<std::string>& header,
                   const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "output";
    for (const auto& c : header) out << ',' << csv_field(c);
    out << '\n';
    char buf[32];
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out << csv_field(output_tokens[r]);
      for (double v : rows[r]) {
        std::snprintf(buf, sizeof buf, "%.6g", v);
        out << ',' << buf;
      }
      out << '\n';
    }
  };
  std::vector<std::string> src_header(source_tokens.begin(), source_tokens.end());
  src_header.resize(h.text_attention.front().size(), "</s>");
  write(dir / (stem + ".text.csv"), src_header, h.text_attention);
  if (!h.image_attention.empty()) {
    std::vector<std::string> cells;
    for (std::size_t p = 0; p < h.image_attention.front().size(); ++p) cells.push_back("cell" + std::to_string(p));
    write(dir / (stem + ".image.csv"), cells, h.image_attention);
  }
}

}  // namespace mmtprobe
