#pragma once

// Corpus metrics, approximate-randomization significance and report shapes.
//
// METEOR-lite is exact-match METEOR: unigram alignment that maximizes matches
// and then minimizes chunks; alpha 0.9, beta 3, gamma 0.5. No stemming,
// synonyms or paraphrases, so absolute values differ from official METEOR.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmtprobe/errors.hpp"
#include "mmtprobe/random.hpp"
#include "mmtprobe/text.hpp"

namespace mmtprobe {

struct MetricReport {
  std::string metric;
  double corpus = 0.0;
  std::vector<double> sentences;
  // Sentence indices the per-sentence scores refer to (all lines unless the
  // metric evaluates a subset).
  std::vector<std::size_t> indices;
};

inline void check_aligned(std::size_t hyps, std::size_t refs) {
  if (hyps != refs) {
    throw ContractError("hypothesis/reference count mismatch: " + std::to_string(hyps) + " vs " + std::to_string(refs));
  }
}

// ---------------------------------------------------------------------------
// METEOR-lite

struct MeteorStats {
  std::size_t matches = 0;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
  std::size_t chunks = 0;
};

namespace detail {

inline std::size_t count_chunks(const std::vector<int>& align) {
  std::size_t chunks = 0;
  int prev_ref = -2;
  bool prev_matched = false;
  for (int r : align) {
    if (r < 0) {
      prev_matched = false;
      continue;
    }
    if (!(prev_matched && r == prev_ref + 1)) ++chunks;
    prev_ref = r;
    prev_matched = true;
  }
  return chunks;
}

// Depth-first search over alignments with the maximal match count, keeping
// the one with fewest chunks. Hypothesis positions are assigned left to
// right; the node budget bounds pathological inputs, in which case the best
// alignment found so far (at worst the greedy one) is used.
class ChunkMinimizer {
 public:
  ChunkMinimizer(const Tokens& hyp, const Tokens& ref, std::size_t node_budget)
      : hyp_(hyp), ref_(ref), budget_(node_budget) {
    std::unordered_map<std::string, int> type_ids;
    auto type_of = [&](const std::string& t) { return type_ids.emplace(t, static_cast<int>(type_ids.size())).first->second; };
    hyp_type_.resize(hyp.size());
    for (std::size_t i = 0; i < hyp.size(); ++i) hyp_type_[i] = type_of(hyp[i]);
    ref_type_.resize(ref.size());
    for (std::size_t j = 0; j < ref.size(); ++j) ref_type_[j] = type_of(ref[j]);
    const std::size_t K = type_ids.size();
    std::vector<std::size_t> hc(K, 0), rc(K, 0);
    for (int t : hyp_type_) ++hc[static_cast<std::size_t>(t)];
    for (int t : ref_type_) ++rc[static_cast<std::size_t>(t)];
    quota_.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
      quota_[k] = std::min(hc[k], rc[k]);
      matches_ += quota_[k];
    }
    // Hypothesis tokens of each type remaining at or after position i.
    remaining_.assign(hyp.size() + 1, std::vector<std::size_t>(K, 0));
    for (std::size_t i = hyp.size(); i-- > 0;) {
      remaining_[i] = remaining_[i + 1];
      ++remaining_[i][static_cast<std::size_t>(hyp_type_[i])];
    }
    ref_by_type_.resize(K);
    for (std::size_t j = 0; j < ref.size(); ++j) ref_by_type_[static_cast<std::size_t>(ref_type_[j])].push_back(static_cast<int>(j));
  }

  std::size_t matches() const { return matches_; }

  std::size_t solve() {
    if (matches_ == 0) return 0;
    best_ = greedy();
    std::vector<int> align(hyp_.size(), -1);
    std::vector<char> used(ref_.size(), 0);
    std::vector<std::size_t> left = quota_;
    dfs(0, align, used, left, 0);
    return best_;
  }

 private:
  std::size_t greedy() const {
    std::vector<int> align(hyp_.size(), -1);
    std::vector<char> used(ref_.size(), 0);
    std::vector<std::size_t> left = quota_;
    for (std::size_t i = 0; i < hyp_.size(); ++i) {
      const auto t = static_cast<std::size_t>(hyp_type_[i]);
      if (left[t] == 0) continue;
      int pick = -1;
      if (i > 0 && align[i - 1] >= 0) {
        const int next = align[i - 1] + 1;
        if (next < static_cast<int>(ref_.size()) && !used[static_cast<std::size_t>(next)] &&
            ref_type_[static_cast<std::size_t>(next)] == hyp_type_[i]) {
          pick = next;
        }
      }
      if (pick < 0) {
        for (int j : ref_by_type_[t]) {
          if (!used[static_cast<std::size_t>(j)]) {
            pick = j;
            break;
          }
        }
      }
      align[i] = pick;
      used[static_cast<std::size_t>(pick)] = 1;
      --left[t];
    }
    return count_chunks(align);
  }

  void dfs(std::size_t i, std::vector<int>& align, std::vector<char>& used, std::vector<std::size_t>& left,
           std::size_t chunks) {
    if (chunks >= best_ || nodes_ >= budget_) return;
    ++nodes_;
    if (i == hyp_.size()) {
      best_ = chunks;
      return;
    }
    const auto t = static_cast<std::size_t>(hyp_type_[i]);
    const int prev = i > 0 ? align[i - 1] : -1;
    if (left[t] > 0) {
      // Continuing the current chunk first finds good bounds early.
      std::vector<int> options;
      int first = -1;
      if (prev >= 0 && prev + 1 < static_cast<int>(ref_.size()) && !used[static_cast<std::size_t>(prev + 1)] &&
          ref_type_[static_cast<std::size_t>(prev + 1)] == hyp_type_[i]) {
        first = prev + 1;
        options.push_back(first);
      }
      for (int j : ref_by_type_[t]) {
        if (!used[static_cast<std::size_t>(j)] && j != first) options.push_back(j);
      }
      for (int j : options) {
        const bool extends = prev >= 0 && j == prev + 1;
        align[i] = j;
        used[static_cast<std::size_t>(j)] = 1;
        --left[t];
        dfs(i + 1, align, used, left, chunks + (extends ? 0 : 1));
        ++left[t];
        used[static_cast<std::size_t>(j)] = 0;
        align[i] = -1;
      }
    }
    // Leaving this token unmatched is only allowed if the quota can still be met.
    if (remaining_[i + 1][t] >= left[t]) dfs(i + 1, align, used, left, chunks);
  }

  const Tokens& hyp_;
  const Tokens& ref_;
  std::size_t budget_;
  std::vector<int> hyp_type_, ref_type_;
  std::vector<std::size_t> quota_;
  std::vector<std::vector<std::size_t>> remaining_;
  std::vector<std::vector<int>> ref_by_type_;
  std::size_t matches_ = 0;
  std::size_t best_ = std::numeric_limits<std::size_t>::max();
  std::size_t nodes_ = 0;
};

}  // namespace detail

inline MeteorStats meteor_stats(const Tokens& hyp, const Tokens& ref, std::size_t node_budget = 200000) {
  detail::ChunkMinimizer cm(hyp, ref, node_budget);
  MeteorStats s;
  s.hyp_len = hyp.size();
  s.ref_len = ref.size();
  s.matches = cm.matches();
  s.chunks = cm.solve();
  return s;
}

inline double meteor_score(const MeteorStats& s) {
  if (s.matches == 0) return 0.0;
  const double m = static_cast<double>(s.matches);
  const double P = m / static_cast<double>(s.hyp_len);
  const double R = m / static_cast<double>(s.ref_len);
  const double F = P * R / (0.9 * P + 0.1 * R);
  const double frag = static_cast<double>(s.chunks) / m;
  const double penalty = 0.5 * frag * frag * frag;
  return F * (1.0 - penalty);
}

// Corpus score from summed statistics; per-sentence scores for significance.
inline MetricReport meteor_lite(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs) {
  check_aligned(hyps.size(), refs.size());
  MetricReport rep;
  rep.metric = "meteor-lite";
  MeteorStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto s = meteor_stats(hyps[i], refs[i]);
    rep.sentences.push_back(meteor_score(s));
    rep.indices.push_back(i);
    total.matches += s.matches;
    total.hyp_len += s.hyp_len;
    total.ref_len += s.ref_len;
    total.chunks += s.chunks;
  }
  rep.corpus = meteor_score(total);
  return rep;
}

// ---------------------------------------------------------------------------
// BLEU

struct BleuStats {
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
  std::size_t matches[4] = {0, 0, 0, 0};
  std::size_t totals[4] = {0, 0, 0, 0};

  BleuStats& operator+=(const BleuStats& o) {
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    for (int n = 0; n < 4; ++n) {
      matches[n] += o.matches[n];
      totals[n] += o.totals[n];
    }
    return *this;
  }
};

inline constexpr double kBleuEpsilon = 1e-9;

inline BleuStats bleu_stats(const Tokens& hyp, const Tokens& ref) {
  BleuStats s;
  s.hyp_len = hyp.size();
  s.ref_len = ref.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<std::vector<std::string>, std::size_t> hc, rc;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hc[Tokens(hyp.begin() + static_cast<std::ptrdiff_t>(i), hyp.begin() + static_cast<std::ptrdiff_t>(i + n))];
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++rc[Tokens(ref.begin() + static_cast<std::ptrdiff_t>(i), ref.begin() + static_cast<std::ptrdiff_t>(i + n))];
    std::size_t m = 0;
    for (const auto& [g, c] : hc) {
      auto it = rc.find(g);
      if (it != rc.end()) m += std::min(c, it->second);
    }
    s.matches[n - 1] = m;
    s.totals[n - 1] = hyp.size() >= n ? hyp.size() - n + 1 : 0;
  }
  return s;
}

// Uniform weights over n = 1..4. A zero match count contributes epsilon
// instead of zero; brevity penalty exp(1 - r/h) when h < r, 0 when h = 0.
inline double bleu_score(const BleuStats& s) {
  if (s.hyp_len == 0) return 0.0;
  double log_p = 0.0;
  for (int n = 0; n < 4; ++n) {
    const double m = s.matches[n] ? static_cast<double>(s.matches[n]) : kBleuEpsilon;
    log_p += std::log(m / static_cast<double>(std::max<std::size_t>(s.totals[n], 1)));
  }
  const double bp = s.hyp_len < s.ref_len
                        ? std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len))
                        : 1.0;
  return bp * std::exp(log_p / 4.0);
}

inline MetricReport bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs) {
  check_aligned(hyps.size(), refs.size());
  MetricReport rep;
  rep.metric = "bleu";
  BleuStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto s = bleu_stats(hyps[i], refs[i]);
    rep.sentences.push_back(bleu_score(s));
    rep.indices.push_back(i);
    total += s;
  }
  rep.corpus = bleu_score(total);
  return rep;
}

// ---------------------------------------------------------------------------
// Color accuracy

inline std::set<std::string> canonical_colors(const Tokens& tokens, const TargetColorLexicon& lex) {
  std::set<std::string> out;
  for (const auto& t : tokens) {
    auto it = lex.find(t);
    if (it != lex.end()) out.insert(it->second);
  }
  return out;
}

// Mean over selected sentences of |colors(hyp) & colors(ref)| / |colors(ref)|.
// Sentences whose reference names no color are skipped.
inline MetricReport color_accuracy(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs,
                                   const std::vector<bool>& selected, const TargetColorLexicon& lex) {
  check_aligned(hyps.size(), refs.size());
  check_aligned(selected.size(), refs.size());
  MetricReport rep;
  rep.metric = "color-acc";
  double sum = 0.0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (!selected[i]) continue;
    const auto rc = canonical_colors(refs[i], lex);
    if (rc.empty()) continue;
    const auto hc = canonical_colors(hyps[i], lex);
    std::size_t hit = 0;
    for (const auto& c : rc) hit += hc.count(c);
    const double acc = static_cast<double>(hit) / static_cast<double>(rc.size());
    rep.sentences.push_back(acc);
    rep.indices.push_back(i);
    sum += acc;
  }
  if (rep.sentences.empty()) throw ContractError("color accuracy: no selected sentence has a reference color");
  rep.corpus = sum / static_cast<double>(rep.sentences.size());
  return rep;
}

// ---------------------------------------------------------------------------
// Significance

// Stratified approximate randomization over optimizer runs. a[r][i] and
// b[r][i] are sentence i's scores in matched run r. Each resample swaps every
// (r, i) pair with probability 1/2; p = (1 + #{delta' >= delta}) / (1 + N).
inline double significance_test(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                                std::size_t resamples = 10000, std::uint64_t seed = 1) {
  if (a.empty() || a.size() != b.size()) throw ContractError("significance: both systems need the same number of runs");
  std::size_t n = 0;
  double sa = 0.0, sb = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r) {
    if (a[r].size() != b[r].size() || a[r].size() != a[0].size()) {
      throw ContractError("significance: per-sentence score vectors are misaligned");
    }
    for (std::size_t i = 0; i < a[r].size(); ++i) {
      sa += a[r][i];
      sb += b[r][i];
    }
    n += a[r].size();
  }
  if (n == 0) throw ContractError("significance: no sentences");
  if (resamples == 0) throw ConfigError("significance: resamples must be positive");
  const double observed = std::abs(sa - sb) / static_cast<double>(n);
  std::size_t at_least = 0;
  for (std::size_t k = 0; k < resamples; ++k) {
    Rng rng(derive_seed(seed, 0x5191, k));
    double ra = 0.0, rb = 0.0;
    for (std::size_t r = 0; r < a.size(); ++r) {
      for (std::size_t i = 0; i < a[r].size(); ++i) {
        std::uint64_t bit = rng() & 1u;
        ra += bit ? b[r][i] : a[r][i];
        rb += bit ? a[r][i] : b[r][i];
      }
    }
    const double delta = std::abs(ra - rb) / static_cast<double>(n);
    if (delta >= observed - 1e-12) ++at_least;
  }
  return static_cast<double>(1 + at_least) / static_cast<double>(1 + resamples);
}

inline std::string significance_stars(double p) {
  if (p <= 0.01) return "**";
  if (p <= 0.05) return "*";
  return "";
}

// ---------------------------------------------------------------------------
// Report formatting. Scores are expected in display units (e.g. x100).

inline std::string format_fixed(double v, int decimals = 1) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  if (s == "-0.0") s = "0.0";
  return s;
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw ContractError("mean of an empty list");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Sample standard deviation; 0 for a single value.
inline double stdev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::string format_mean_sd(const std::vector<double>& v) {
  return format_fixed(mean_of(v)) + " ± " + format_fixed(stdev_of(v));
}

inline std::string format_signed(double v) {
  std::string s = format_fixed(v);
  return s[0] == '-' ? s : "+" + s;
}

struct GainDrop {
  double gain = 0.0;
  double drop = 0.0;
  double gain_p = 1.0;
  double drop_p = 1.0;
};

// "+g (↓ d)" with optional significance stars on either number.
inline std::string format_gain_drop(const GainDrop& g) {
  return format_signed(g.gain) + significance_stars(g.gain_p) + " (↓ " + format_fixed(g.drop) + significance_stars(g.drop_p) +
         ")";
}

// Per-system run scores under congruent and incongruent decoding.
struct SystemScores {
  std::vector<std::vector<double>> congruent;    // [run][sentence]
  std::vector<std::vector<double>> incongruent;  // [run][sentence], may be empty for NMT
  std::vector<double> congruent_corpus;          // per run, display units
  std::vector<double> incongruent_corpus;
};

// gain = MMT(congruent) - NMT(congruent); drop = MMT(congruent) - MMT(incongruent).
inline std::map<std::string, GainDrop> gain_drop_report(const std::map<std::string, SystemScores>& systems,
                                                       const std::string& baseline = "NMT", std::size_t resamples = 10000,
                                                       std::uint64_t seed = 1) {
  std::vector<std::string> missing;
  auto base = systems.find(baseline);
  if (base == systems.end() || base->second.congruent_corpus.empty()) missing.push_back(baseline + "/congruent");
  for (const auto& [name, s] : systems) {
    if (name == baseline) continue;
    if (s.congruent_corpus.empty()) missing.push_back(name + "/congruent");
    if (s.incongruent_corpus.empty()) missing.push_back(name + "/incongruent");
  }
  if (!missing.empty()) {
    std::string msg = "gain/drop report: missing runs for";
    for (const auto& m : missing) msg += " " + m;
    throw ContractError(msg);
  }
  std::map<std::string, GainDrop> out;
  const double nmt = mean_of(base->second.congruent_corpus);
  for (const auto& [name, s] : systems) {
    if (name == baseline) continue;
    GainDrop g;
    const double cong = mean_of(s.congruent_corpus);
    g.gain = cong - nmt;
    g.drop = cong - mean_of(s.incongruent_corpus);
    if (!s.congruent.empty() && s.congruent.size() == base->second.congruent.size()) {
      g.gain_p = significance_test(s.congruent, base->second.congruent, resamples, seed);
    }
    if (!s.congruent.empty() && s.congruent.size() == s.incongruent.size()) {
      g.drop_p = significance_test(s.congruent, s.incongruent, resamples, seed);
    }
    out[name] = g;
  }
  return out;
}

// One row per k: system scores, MMT - NMT gain per system, fraction of
// non-masked training words.
struct CurvePoint {
  int k = 0;
  std::map<std::string, double> scores;
  double unmasked_fraction = 0.0;
};

inline std::string progressive_curve_csv(const std::vector<CurvePoint>& points, const std::string& baseline = "NMT") {
  std::set<std::string> systems;
  for (const auto& p : points) {
    for (const auto& [s, _] : p.scores) systems.insert(s);
  }
  std::ostringstream out;
  out << "k";
  for (const auto& s : systems) out << "," << s;
  for (const auto& s : systems) {
    if (s != baseline) out << "," << s << "_gain";
  }
  out << ",unmasked_fraction\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const auto& p : points) {
    out << p.k;
    for (const auto& s : systems) {
      auto it = p.scores.find(s);
      out << "," << (it == p.scores.end() ? "" : num(it->second));
    }
    auto base = p.scores.find(baseline);
    for (const auto& s : systems) {
      if (s == baseline) continue;
      auto it = p.scores.find(s);
      out << "," << (it == p.scores.end() || base == p.scores.end() ? "" : num(it->second - base->second));
    }
    out << "," << num(p.unmasked_fraction) << "\n";
  }
  return out.str();
}

}  // namespace mmtprobe
