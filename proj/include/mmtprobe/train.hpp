#pragma once

// ADAM with weight decay, global-norm clipping, early stopping on a dev
// metric. A run is a pure function of (seed, data, configs).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mmtprobe/decode.hpp"
#include "mmtprobe/errors.hpp"
#include "mmtprobe/metrics.hpp"
#include "mmtprobe/model.hpp"

namespace mmtprobe {

enum class DecayMode { coupled, decoupled };

inline DecayMode parse_decay_mode(std::string_view s) {
  if (s == "coupled") return DecayMode::coupled;
  if (s == "decoupled") return DecayMode::decoupled;
  throw ConfigError("unknown decay mode '" + std::string(s) + "' (expected coupled or decoupled)");
}

inline std::string to_string(DecayMode m) { return m == DecayMode::coupled ? "coupled" : "decoupled"; }

struct TrainConfig {
  double lr = 4e-4;
  std::size_t batch_size = 64;
  double clip_norm = 1.0;
  double weight_decay = 1e-5;
  DecayMode decay_mode = DecayMode::coupled;
  std::size_t patience = 10;
  std::size_t max_epochs = 100;
  std::uint64_t seed = 1;
  std::string dev_metric = "meteor-lite";  // or "bleu"
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    if (patience == 0) throw ConfigError("patience must be at least 1");
    if (max_epochs == 0) throw ConfigError("max epochs must be at least 1");
    if (dev_metric != "meteor-lite" && dev_metric != "bleu") {
      throw ConfigError("unknown dev metric '" + dev_metric + "' (expected meteor-lite or bleu)");
    }
  }
};

using GradientMap = std::map<std::string, Tensor>;

struct OptimState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::uint64_t step = 0;
};

inline double global_norm(const GradientMap& grads) {
  double s = 0.0;
  for (const auto& [_, g] : grads) {
    for (double x : g.data()) s += x * x;
  }
  return std::sqrt(s);
}

// Scales every gradient by max_norm / g when the global norm g exceeds
// max_norm. Returns the norm before clipping.
inline double clip_global_norm(GradientMap& grads, double max_norm) {
  const double g = global_norm(grads);
  if (g > max_norm) {
    const double f = max_norm / g;
    for (auto& [_, t] : grads) {
      for (double& x : t.data()) x *= f;
    }
  }
  return g;
}

// Bias-corrected ADAM. Coupled decay adds wd * theta to the gradient;
// decoupled decay shrinks theta by lr * wd directly.
inline void adam_step(ParameterSet& params, const GradientMap& grads, OptimState& state, const TrainConfig& cfg) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, theta] : params.tensors) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    if (g.shape() != theta.shape()) throw DimensionError("gradient shape mismatch for '" + name + "'");
    auto& m = state.m.try_emplace(name, Tensor(theta.shape())).first->second;
    auto& v = state.v.try_emplace(name, Tensor(theta.shape())).first->second;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double gi = g[i];
      if (cfg.decay_mode == DecayMode::coupled) gi += cfg.weight_decay * theta[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      if (cfg.decay_mode == DecayMode::decoupled) theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
      theta[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// Higher scores are better. Stops once `patience` epochs pass without a new best.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  bool update(double score) {
    ++epochs_;
    if (!best_ || score > *best_) {
      best_ = score;
      best_epoch_ = epochs_;
      since_best_ = 0;
      return true;
    }
    ++since_best_;
    return false;
  }

  bool should_stop() const { return since_best_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_score() const { return best_.value_or(0.0); }

 private:
  std::size_t patience_;
  std::size_t epochs_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t since_best_ = 0;
  std::optional<double> best_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_score = 0.0;
  bool best = false;
};

struct TrainResult {
  ParameterSet best_params;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_score = 0.0;
  double final_token_accuracy = 0.0;  // teacher-forced on training batches, last epoch
};

struct TrainData {
  std::vector<EncodedSample> train;
  std::vector<EncodedSample> dev;
  std::vector<Tokens> dev_refs;  // stitched reference tokens
  const FeatureSet* train_features = nullptr;
  const FeatureSet* dev_features = nullptr;
  std::vector<std::size_t> train_map;  // congruence maps (image index -> feature row)
  std::vector<std::size_t> dev_map;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << "epoch,train_loss,dev_score,best\n";
  char buf[96];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%d\n", r.epoch, r.train_loss, r.dev_score, r.best ? 1 : 0);
    out << buf;
  }
  return out.str();
}

inline double dev_score(const ModelConfig& config, const ParameterSet& params, const TrainData& data,
                        const Vocabulary& tgt, const std::string& metric, std::size_t batch_size) {
  auto ids = greedy_decode_corpus(config, params, data.dev, data.dev_features, data.dev_map, batch_size);
  std::vector<Tokens> hyps;
  hyps.reserve(ids.size());
  for (const auto& s : ids) hyps.push_back(stitch_hyphens(decode_ids(s, tgt)));
  return metric == "bleu" ? bleu(hyps, data.dev_refs).corpus : meteor_lite(hyps, data.dev_refs).corpus;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train(const ModelConfig& config, ParameterSet params, const TrainData& data, const Vocabulary& tgt_vocab,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  config.validate();
  if (data.train.empty()) throw ConfigError("training set is empty");
  if (data.dev.empty() || data.dev.size() != data.dev_refs.size()) throw ConfigError("dev set is empty or misaligned");
  if (config.uses_features() && (!data.train_features || !data.dev_features)) {
    throw ConfigError(to_string(config.fusion) + " needs train and dev features");
  }

  TrainResult result;
  result.best_params = params;
  OptimState opt;
  EarlyStopping stopper(cfg.patience);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng drop_rng(derive_seed(cfg.seed, 0xd209, epoch));
    double loss_sum = 0.0;
    std::size_t correct = 0, total = 0;
    const auto batches = batch_iterator(data.train, cfg.batch_size, cfg.seed, epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch& batch = batches[bi];
      std::optional<FeatureInput> feats;
      if (config.uses_features()) feats = batch_features(*data.train_features, batch, data.train_map);
      Tape tape;
      ForwardContext ctx(tape, config, params, true, &drop_rng);
      Var logits = teacher_forced_logits(ctx, batch, feats ? &*feats : nullptr);
      Var loss = masked_cross_entropy(logits, batch.tgt_out, batch.tgt_mask);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << ", batch " << bi << "; parameter norms:";
        for (const auto& [name, t] : params.tensors) {
          double s = 0.0;
          for (double x : t.data()) s += x * x;
          msg << " " << name << "=" << std::sqrt(s);
        }
        throw TrainingError(msg.str());
      }
      auto [c, n] = token_accuracy(logits.value(), batch);
      correct += c;
      total += n;
      tape.backward(loss);
      GradientMap grads;
      for (const auto& [name, var] : ctx.bound()) grads.emplace(name, tape.grad(var));
      clip_global_norm(grads, cfg.clip_norm);
      adam_step(params, grads, opt, cfg);
      loss_sum += lv;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches.size());
    rec.dev_score = dev_score(config, params, data, tgt_vocab, cfg.dev_metric, std::max<std::size_t>(cfg.batch_size, 64));
    rec.best = stopper.update(rec.dev_score);
    result.final_token_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    if (rec.best) {
      result.best_params = params;
      result.best_epoch = epoch;
      result.best_score = rec.dev_score;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stopper.should_stop()) break;
  }
  return result;
}

}  // namespace mmtprobe
