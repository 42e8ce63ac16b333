#pragma once

// Attentive GRU encoder-decoder and its three multimodal variants.
//
//   NMT    text-only attentive baseline
//   INIT   encoder and decoder initial states from tanh(W f + b) of pooled features
//   DIRECT linear projection of [c_text; c_img]
//   HIER   second attention layer over projected text and image contexts
//
// Encoder: embeddings -> N bidirectional GRU layers -> annotations (2 * Hd).
// Decoder: conditional GRU. s' = GRU1(emb(y_prev), s); contexts from s';
// s = GRU2(c, s'); readout tanh(Ws s + We emb + Wc c + b) projected through
// the (tied) target embedding matrix.
//
// Sequence tensors are time-major: row t * B + b is step t of batch item b.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmtprobe/binio.hpp"
#include "mmtprobe/errors.hpp"
#include "mmtprobe/features.hpp"
#include "mmtprobe/hash.hpp"
#include "mmtprobe/random.hpp"
#include "mmtprobe/tensor.hpp"
#include "mmtprobe/text.hpp"

namespace mmtprobe {

enum class Fusion { nmt, init, direct, hier };

inline std::string to_string(Fusion f) {
  switch (f) {
    case Fusion::nmt: return "NMT";
    case Fusion::init: return "INIT";
    case Fusion::direct: return "DIRECT";
    case Fusion::hier: return "HIER";
  }
  return "?";
}

inline Fusion parse_fusion(std::string_view s) {
  std::string u(s);
  for (char& c : u) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (u == "NMT") return Fusion::nmt;
  if (u == "INIT") return Fusion::init;
  if (u == "DIRECT") return Fusion::direct;
  if (u == "HIER") return Fusion::hier;
  throw ConfigError("unknown system '" + std::string(s) + "' (expected NMT, INIT, DIRECT or HIER)");
}

struct ModelConfig {
  Fusion fusion = Fusion::nmt;
  std::size_t emb_dim = 200;
  std::size_t hidden = 400;
  std::size_t encoder_layers = 2;
  // false: `hidden` units per encoder direction (annotations 2*hidden);
  // true: hidden/2 per direction.
  bool split_bidirectional = false;
  std::size_t attention_dim = 0;  // 0 = annotation size
  double dropout_src_emb = 0.4;
  double dropout_enc_out = 0.5;
  double dropout_dec_out = 0.5;
  bool tied_embeddings = true;
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  std::size_t feature_channels = 2048;
  std::size_t feature_positions = 64;

  std::size_t enc_dir_dim() const { return split_bidirectional ? hidden / 2 : hidden; }
  std::size_t ctx_dim() const { return 2 * enc_dir_dim(); }
  std::size_t att_dim() const { return attention_dim ? attention_dim : ctx_dim(); }
  bool uses_features() const { return fusion != Fusion::nmt; }
  bool uses_spatial() const { return fusion == Fusion::direct || fusion == Fusion::hier; }

  void validate() const {
    if (emb_dim == 0 || hidden == 0 || encoder_layers == 0) throw ConfigError("model dimensions must be positive");
    if (split_bidirectional && hidden % 2) throw ConfigError("split bidirectional encoder needs an even hidden size");
    // A fully masked source (k0) legitimately holds only the reserved ids.
    if (src_vocab < static_cast<std::size_t>(Vocabulary::kReserved)) {
      throw ConfigError("source vocabulary must hold the reserved ids");
    }
    if (tgt_vocab <= static_cast<std::size_t>(Vocabulary::kReserved)) {
      throw ConfigError("target vocabulary must exceed the reserved ids");
    }
    if (uses_features() && feature_channels == 0) throw ConfigError("feature channel count must be positive");
    if (uses_spatial() && feature_positions == 0) throw ConfigError("feature position count must be positive");
    for (double p : {dropout_src_emb, dropout_enc_out, dropout_dec_out}) {
      if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probabilities must lie in [0, 1)");
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"fusion", to_string(c.fusion)},
                     {"emb_dim", c.emb_dim},
                     {"hidden", c.hidden},
                     {"encoder_layers", c.encoder_layers},
                     {"split_bidirectional", c.split_bidirectional},
                     {"attention_dim", c.attention_dim},
                     {"dropout_src_emb", c.dropout_src_emb},
                     {"dropout_enc_out", c.dropout_enc_out},
                     {"dropout_dec_out", c.dropout_dec_out},
                     {"tied_embeddings", c.tied_embeddings},
                     {"src_vocab", c.src_vocab},
                     {"tgt_vocab", c.tgt_vocab},
                     {"feature_channels", c.feature_channels},
                     {"feature_positions", c.feature_positions}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.fusion = parse_fusion(j.at("fusion").get<std::string>());
  j.at("emb_dim").get_to(c.emb_dim);
  j.at("hidden").get_to(c.hidden);
  j.at("encoder_layers").get_to(c.encoder_layers);
  j.at("split_bidirectional").get_to(c.split_bidirectional);
  j.at("attention_dim").get_to(c.attention_dim);
  j.at("dropout_src_emb").get_to(c.dropout_src_emb);
  j.at("dropout_enc_out").get_to(c.dropout_enc_out);
  j.at("dropout_dec_out").get_to(c.dropout_dec_out);
  j.at("tied_embeddings").get_to(c.tied_embeddings);
  j.at("src_vocab").get_to(c.src_vocab);
  j.at("tgt_vocab").get_to(c.tgt_vocab);
  j.at("feature_channels").get_to(c.feature_channels);
  j.at("feature_positions").get_to(c.feature_positions);
}

// Named learnable tensors, iterated in name order.
struct ParameterSet {
  std::map<std::string, Tensor> tensors;

  Tensor& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& [_, t] : tensors) {
      if (!t.all_finite()) return false;
    }
    return true;
  }

  bool operator==(const ParameterSet&) const = default;
};

inline std::string encoder_gru_name(std::size_t layer, bool backward) {
  return "enc.l" + std::to_string(layer) + (backward ? ".bw" : ".fw");
}

// Every parameter of `config` with its shape, in a fixed order.
inline std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& c) {
  const std::size_t E = c.emb_dim, H = c.hidden, Hd = c.enc_dir_dim(), D = c.ctx_dim(), A = c.att_dim();
  const std::size_t C = c.feature_channels;
  std::vector<std::pair<std::string, Shape>> out;
  auto gru = [&](const std::string& prefix, std::size_t in, std::size_t h) {
    out.emplace_back(prefix + ".Wx", Shape{in, 3 * h});
    out.emplace_back(prefix + ".Wh", Shape{h, 3 * h});
    out.emplace_back(prefix + ".b", Shape{3 * h});
  };
  auto attention = [&](const std::string& prefix, std::size_t key_dim) {
    out.emplace_back(prefix + ".Wq", Shape{H, A});
    out.emplace_back(prefix + ".Wk", Shape{key_dim, A});
    out.emplace_back(prefix + ".b", Shape{A});
    out.emplace_back(prefix + ".v", Shape{A, 1});
  };
  out.emplace_back("src_emb", Shape{c.src_vocab, E});
  out.emplace_back("tgt_emb", Shape{c.tgt_vocab, E});
  for (std::size_t l = 0; l < c.encoder_layers; ++l) {
    for (bool bw : {false, true}) gru(encoder_gru_name(l, bw), l == 0 ? E : D, Hd);
  }
  gru("dec.gru1", E, H);
  gru("dec.gru2", D, H);
  attention("att.text", D);
  if (c.uses_spatial()) attention("att.img", C);
  if (c.fusion == Fusion::direct) {
    out.emplace_back("fuse.W", Shape{D + C, D});
    out.emplace_back("fuse.b", Shape{D});
  }
  if (c.fusion == Fusion::hier) {
    out.emplace_back("hier.Pt", Shape{D, D});
    out.emplace_back("hier.Pi", Shape{C, D});
    attention("att.hier", D);
  }
  if (c.fusion == Fusion::init) {
    for (std::size_t l = 0; l < c.encoder_layers; ++l) {
      for (bool bw : {false, true}) {
        out.emplace_back("init." + encoder_gru_name(l, bw) + ".W", Shape{C, Hd});
        out.emplace_back("init." + encoder_gru_name(l, bw) + ".b", Shape{Hd});
      }
    }
    out.emplace_back("init.dec.W", Shape{C, H});
    out.emplace_back("init.dec.b", Shape{H});
  }
  out.emplace_back("out.Ws", Shape{H, E});
  out.emplace_back("out.We", Shape{E, E});
  out.emplace_back("out.Wc", Shape{D, E});
  out.emplace_back("out.b", Shape{E});
  out.emplace_back("out.bias", Shape{c.tgt_vocab});
  if (!c.tied_embeddings) out.emplace_back("out.W", Shape{E, c.tgt_vocab});
  return out;
}

inline double xavier_limit(const Shape& s) { return std::sqrt(6.0 / static_cast<double>(s[0] + s[1])); }

// Xavier-uniform matrices, zero biases (rank-1 tensors).
inline ParameterSet init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParameterSet ps;
  Rng rng(derive_seed(seed, 0x1417));
  for (auto& [name, shape] : parameter_shapes(config)) {
    Tensor t(shape);
    if (shape.size() == 2) {
      const double lim = xavier_limit(shape);
      for (double& v : t.data()) v = uniform_real(rng, -lim, lim);
    }
    ps.tensors.emplace(name, std::move(t));
  }
  return ps;
}

// Readout projection [E x V]. With tied embeddings this is the target
// embedding table itself (read transposed), not a copy.
inline const Tensor& readout_source(const ModelConfig& c, const ParameterSet& ps) {
  return c.tied_embeddings ? ps.at("tgt_emb") : ps.at("out.W");
}

// ---------------------------------------------------------------------------
// Forward machinery

// Per-tape view of a parameter set. Parameters are bound lazily (no copies)
// and are trainable whenever the tape records gradients.
class ForwardContext {
 public:
  ForwardContext(Tape& tape, const ModelConfig& config, const ParameterSet& params, bool training, Rng* rng)
      : tape_(tape), config_(config), params_(params), training_(training), rng_(rng) {
    if (training && !rng) throw ContractError("training forward pass needs a random generator for dropout");
  }

  Tape& tape() const { return tape_; }
  const ModelConfig& config() const { return config_; }
  bool training() const { return training_; }

  Var p(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var v = tape_.bind(params_.at(name), true);
    bound_.emplace(name, v);
    return v;
  }

  // Routes `name` to an already-recorded variable (used by gradient checks).
  void provide(const std::string& name, const Var& v) {
    if (!bound_.emplace(name, v).second) throw ContractError("parameter '" + name + "' already bound");
  }

  const std::map<std::string, Var>& bound() const { return bound_; }

  // [E x V] output projection.
  Var readout_weight() {
    if (!readout_.valid()) readout_ = config_.tied_embeddings ? transpose(p("tgt_emb")) : p("out.W");
    return readout_;
  }

  Var dropout(const Var& x, double prob) {
    if (!training_) return x;
    return mmtprobe::dropout(x, prob, *rng_, true);
  }

  Var zeros(std::size_t rows, std::size_t cols) { return tape_.constant(Tensor(Shape{rows, cols})); }

 private:
  Tape& tape_;
  const ModelConfig& config_;
  const ParameterSet& params_;
  bool training_;
  Rng* rng_;
  std::map<std::string, Var> bound_;
  Var readout_;
};

// Source side of a batch, time-major [T x B].
struct SourceInput {
  std::vector<int> ids;
  std::vector<double> mask;
  std::size_t steps = 0;
  std::size_t batch = 0;

  static SourceInput from_batch(const Batch& b) { return {b.src, b.src_mask, b.src_len, b.size()}; }

  static SourceInput single(std::span<const int> ids) {
    return {std::vector<int>(ids.begin(), ids.end()), std::vector<double>(ids.size(), 1.0), ids.size(), 1};
  }
};

// Visual input for one batch. Spatial: [P*B x C], position-major. Pooled: [B x C].
struct FeatureInput {
  Tensor values;
  bool spatial = false;
  std::size_t positions = 1;
  std::size_t batch = 0;
};

// Gathers feature rows `rows[b]` for every batch item b.
inline FeatureInput gather_features(const FeatureSet& fs, std::span<const std::size_t> rows) {
  FeatureInput in;
  in.spatial = fs.spatial();
  in.positions = fs.positions();
  in.batch = rows.size();
  const std::size_t B = rows.size(), C = fs.channels(), P = fs.positions();
  in.values = Tensor(Shape{in.spatial ? P * B : B, C});
  for (std::size_t b = 0; b < B; ++b) {
    if (rows[b] >= fs.rows()) throw IndexError("feature row " + std::to_string(rows[b]) + " out of range");
    for (std::size_t c = 0; c < C; ++c) {
      if (in.spatial) {
        for (std::size_t p = 0; p < P; ++p) in.values.at(p * B + b, c) = fs.at(rows[b], c, p);
      } else {
        double s = 0.0;
        for (std::size_t p = 0; p < P; ++p) s += fs.at(rows[b], c, p);
        in.values.at(b, c) = s / static_cast<double>(P);
      }
    }
  }
  return in;
}

// Feature rows for a batch, resolved through a congruence map (sample image
// index -> feature row).
inline FeatureInput batch_features(const FeatureSet& fs, const Batch& batch, std::span<const std::size_t> congruence) {
  std::vector<std::size_t> rows;
  rows.reserve(batch.size());
  for (std::size_t img : batch.image_index) {
    if (img >= congruence.size()) throw IndexError("image index " + std::to_string(img) + " outside the congruence map");
    rows.push_back(congruence[img]);
  }
  return gather_features(fs, rows);
}

// Keys for one attention layer, position-major.
struct AttentionKeys {
  Var values;     // [P*B x Dk]
  Var projected;  // [P*B x A] = values Wk + b
  Tensor mask;    // [P x B]
  std::size_t positions = 0;
  std::size_t batch = 0;
};

inline AttentionKeys make_keys(ForwardContext& ctx, const std::string& prefix, Var values, Tensor mask,
                               std::size_t positions, std::size_t batch) {
  AttentionKeys k;
  k.values = values;
  k.projected = add(matmul(values, ctx.p(prefix + ".Wk")), ctx.p(prefix + ".b"));
  k.mask = std::move(mask);
  k.positions = positions;
  k.batch = batch;
  return k;
}

struct AttentionResult {
  Var context;  // [B x Dk]
  Var weights;  // [P x B]
};

// Bahdanau MLP attention: e = v^T tanh(Wq s + Wk h + b), softmax over
// unmasked positions, context = sum alpha h.
inline AttentionResult attention(ForwardContext& ctx, const std::string& prefix, const Var& query, const AttentionKeys& keys) {
  const Tensor& q = query.value();
  if (q.rank() != 2 || q.shape()[0] != keys.batch) {
    throw DimensionError("attention: query " + detail::shape_str(q.shape()) + " for a key batch of " +
                         std::to_string(keys.batch));
  }
  const std::size_t P = keys.positions, B = keys.batch;
  std::vector<int> rep(P * B);
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t b = 0; b < B; ++b) rep[p * B + b] = static_cast<int>(b);
  }
  Var qp = matmul(query, ctx.p(prefix + ".Wq"));
  Var hidden = tanh(add(gather_rows(qp, rep), keys.projected));
  Var scores = reshape(matmul(hidden, ctx.p(prefix + ".v")), Shape{P, B});
  Var alpha = masked_softmax(scores, keys.mask, 0);
  return {positional_weighted_sum(alpha, keys.values), alpha};
}

// GRU cell. x_proj = x Wx + b (all three gates); mask (optional) keeps the
// previous state where it is 0.
inline Var gru_step(const Var& x_proj, const Var& h, const Var& Wh, std::size_t H, const Var* mask = nullptr) {
  Var hp = matmul(h, Wh);
  Var z = sigmoid(add(slice(x_proj, 1, 0, H), slice(hp, 1, 0, H)));
  Var r = sigmoid(add(slice(x_proj, 1, H, H), slice(hp, 1, H, H)));
  Var cand = tanh(add(slice(x_proj, 1, 2 * H, H), mul(r, slice(hp, 1, 2 * H, H))));
  Var next = add(h, mul(z, sub(cand, h)));
  if (mask) next = add(h, mul(*mask, sub(next, h)));
  return next;
}

struct InitStates {
  std::map<std::string, Var> encoder;  // by encoder GRU name
  Var decoder;
};

// tanh(W f + b) for every encoder GRU and for the decoder's first block.
inline InitStates init_states_from_pool5(ForwardContext& ctx, const FeatureInput& feats) {
  if (feats.spatial) throw ContractError("INIT fusion expects pooled features");
  const auto& c = ctx.config();
  Var f = ctx.tape().constant(feats.values);
  InitStates s;
  for (std::size_t l = 0; l < c.encoder_layers; ++l) {
    for (bool bw : {false, true}) {
      const std::string g = encoder_gru_name(l, bw);
      s.encoder[g] = tanh(add(matmul(f, ctx.p("init." + g + ".W")), ctx.p("init." + g + ".b")));
    }
  }
  s.decoder = tanh(add(matmul(f, ctx.p("init.dec.W")), ctx.p("init.dec.b")));
  return s;
}

struct EncodedSource {
  Var annotations;  // [T*B x D]
  AttentionKeys text;
  std::optional<AttentionKeys> image;
  Var decoder_init;  // [B x H]
  std::size_t steps = 0;
  std::size_t batch = 0;
};

inline void check_features(const ModelConfig& c, const FeatureInput* feats, std::size_t batch) {
  if (!c.uses_features()) return;
  if (!feats) throw ContractError(to_string(c.fusion) + " needs visual features");
  if (feats->batch != batch) throw DimensionError("feature batch does not match the source batch");
  if (c.uses_spatial() && !feats->spatial) throw ContractError(to_string(c.fusion) + " expects spatial features");
  if (c.fusion == Fusion::init && feats->spatial) throw ContractError("INIT expects pooled features");
  if (feats->values.shape()[1] != c.feature_channels) {
    throw DimensionError("features have " + std::to_string(feats->values.shape()[1]) + " channels, model expects " +
                         std::to_string(c.feature_channels));
  }
}

// Encoder plus everything the decoder needs from the source side.
inline EncodedSource encode_source(ForwardContext& ctx, const SourceInput& src, const FeatureInput* feats) {
  const auto& c = ctx.config();
  const std::size_t T = src.steps, B = src.batch, Hd = c.enc_dir_dim();
  if (T == 0 || B == 0) throw ContractError("encode_source: empty source sequence");
  if (src.ids.size() != T * B || src.mask.size() != T * B) throw DimensionError("encode_source: ids/mask size mismatch");
  check_features(c, feats, B);
  Tape& tape = ctx.tape();

  std::optional<InitStates> init;
  if (c.fusion == Fusion::init) init = init_states_from_pool5(ctx, *feats);

  std::vector<Var> step_mask(T);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor m(Shape{B, Hd});
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t j = 0; j < Hd; ++j) m.at(b, j) = src.mask[t * B + b];
    }
    step_mask[t] = tape.constant(std::move(m));
  }

  Var input = ctx.dropout(embedding_lookup(ctx.p("src_emb"), src.ids), c.dropout_src_emb);
  for (std::size_t l = 0; l < c.encoder_layers; ++l) {
    std::vector<Var> fw(T), bw(T);
    for (bool backward : {false, true}) {
      const std::string g = encoder_gru_name(l, backward);
      Var xp = add(matmul(input, ctx.p(g + ".Wx")), ctx.p(g + ".b"));
      Var h = init ? init->encoder.at(g) : ctx.zeros(B, Hd);
      Var Wh = ctx.p(g + ".Wh");
      for (std::size_t i = 0; i < T; ++i) {
        const std::size_t t = backward ? T - 1 - i : i;
        h = gru_step(slice(xp, 0, t * B, B), h, Wh, Hd, &step_mask[t]);
        (backward ? bw : fw)[t] = h;
      }
    }
    std::vector<Var> rows(T);
    for (std::size_t t = 0; t < T; ++t) rows[t] = concat({fw[t], bw[t]}, 1);
    input = concat(rows, 0);
  }

  Tensor full_mask(Shape{T * B, c.ctx_dim()});
  for (std::size_t r = 0; r < T * B; ++r) {
    for (std::size_t j = 0; j < c.ctx_dim(); ++j) full_mask.at(r, j) = src.mask[r];
  }
  EncodedSource enc;
  enc.annotations = ctx.dropout(mul(input, tape.constant(std::move(full_mask))), c.dropout_enc_out);
  enc.steps = T;
  enc.batch = B;
  Tensor text_mask(Shape{T, B});
  for (std::size_t i = 0; i < T * B; ++i) text_mask[i] = src.mask[i];
  enc.text = make_keys(ctx, "att.text", enc.annotations, std::move(text_mask), T, B);
  if (c.uses_spatial()) {
    const std::size_t P = feats->positions;
    enc.image = make_keys(ctx, "att.img", tape.constant(feats->values), Tensor(Shape{P, B}, 1.0), P, B);
  }
  enc.decoder_init = init ? init->decoder : ctx.zeros(B, c.hidden);
  return enc;
}

// Spatial-feature attention with its own parameters.
inline AttentionResult visual_attention(ForwardContext& ctx, const Var& query, const EncodedSource& enc) {
  if (!enc.image) throw ContractError("visual attention needs spatial features");
  return attention(ctx, "att.img", query, *enc.image);
}

struct FusionResult {
  Var context;  // [B x D]
  Var hier_weights;  // [2 x B] for HIER
};

inline FusionResult fuse(ForwardContext& ctx, Fusion kind, const Var& c_text, const Var* c_img, const Var& query) {
  switch (kind) {
    case Fusion::nmt:
    case Fusion::init: return {c_text, {}};
    case Fusion::direct: {
      if (!c_img) throw ContractError("DIRECT fusion needs an image context");
      return {add(matmul(concat({c_text, *c_img}, 1), ctx.p("fuse.W")), ctx.p("fuse.b")), {}};
    }
    case Fusion::hier: {
      if (!c_img) throw ContractError("HIER fusion needs an image context");
      const std::size_t B = c_text.value().shape()[0];
      Var pt = matmul(c_text, ctx.p("hier.Pt"));
      Var pi = matmul(*c_img, ctx.p("hier.Pi"));
      AttentionKeys keys = make_keys(ctx, "att.hier", concat({pt, pi}, 0), Tensor(Shape{2, B}, 1.0), 2, B);
      auto r = attention(ctx, "att.hier", query, keys);
      return {r.context, r.weights};
    }
  }
  throw ContractError("unknown fusion kind");
}

struct CondGruOutput {
  Var state;         // s_t
  Var context;       // fused context
  Var text_weights;  // [T x B]
  Var image_weights; // [P x B], invalid without spatial features
};

// GRU1 -> attention(s) -> fusion -> GRU2. `x1` is the projected embedding.
inline CondGruOutput cgru_step(ForwardContext& ctx, const Var& x1, const Var& state, const EncodedSource& enc) {
  const auto& c = ctx.config();
  Var s1 = gru_step(x1, state, ctx.p("dec.gru1.Wh"), c.hidden);
  AttentionResult text = attention(ctx, "att.text", s1, enc.text);
  std::optional<AttentionResult> img;
  if (c.uses_spatial()) img = visual_attention(ctx, s1, enc);
  FusionResult fused = fuse(ctx, c.fusion, text.context, img ? &img->context : nullptr, s1);
  Var x2 = add(matmul(fused.context, ctx.p("dec.gru2.Wx")), ctx.p("dec.gru2.b"));
  Var s2 = gru_step(x2, s1, ctx.p("dec.gru2.Wh"), c.hidden);
  return {s2, fused.context, text.weights, img ? img->weights : Var{}};
}

inline Var readout_logits(ForwardContext& ctx, const Var& state, const Var& emb, const Var& context) {
  const auto& c = ctx.config();
  Var pre = add(add(add(matmul(state, ctx.p("out.Ws")), matmul(emb, ctx.p("out.We"))), matmul(context, ctx.p("out.Wc"))),
                ctx.p("out.b"));
  Var r = ctx.dropout(tanh(pre), c.dropout_dec_out);
  return add(matmul(r, ctx.readout_weight()), ctx.p("out.bias"));
}

struct DecoderStep {
  Var logits;  // [B x V]
  Var state;   // [B x H]
  Var text_weights;
  Var image_weights;
};

// One decoding step from the previous tokens (one per batch row).
inline DecoderStep decoder_step(ForwardContext& ctx, std::span<const int> prev_tokens, const Var& state,
                                const EncodedSource& enc) {
  const auto& c = ctx.config();
  if (state.value().rank() != 2 || state.value().shape()[1] != c.hidden) {
    throw DimensionError("decoder_step: state must be [B x " + std::to_string(c.hidden) + "]");
  }
  Var emb = embedding_lookup(ctx.p("tgt_emb"), prev_tokens);
  Var x1 = add(matmul(emb, ctx.p("dec.gru1.Wx")), ctx.p("dec.gru1.b"));
  CondGruOutput o = cgru_step(ctx, x1, state, enc);
  return {readout_logits(ctx, o.state, emb, o.context), o.state, o.text_weights, o.image_weights};
}

// Teacher-forced logits for a whole batch, [T_tgt*B x V], time-major.
inline Var teacher_forced_logits(ForwardContext& ctx, const Batch& batch, const FeatureInput* feats) {
  const auto& c = ctx.config();
  EncodedSource enc = encode_source(ctx, SourceInput::from_batch(batch), feats);
  const std::size_t T = batch.tgt_len, B = batch.size();
  Var emb = embedding_lookup(ctx.p("tgt_emb"), batch.tgt_in);
  Var x1_all = add(matmul(emb, ctx.p("dec.gru1.Wx")), ctx.p("dec.gru1.b"));
  Var s = enc.decoder_init;
  std::vector<Var> states(T), contexts(T);
  for (std::size_t t = 0; t < T; ++t) {
    CondGruOutput o = cgru_step(ctx, slice(x1_all, 0, t * B, B), s, enc);
    s = o.state;
    states[t] = o.state;
    contexts[t] = o.context;
  }
  return readout_logits(ctx, concat(states, 0), emb, concat(contexts, 0));
}

// Mean masked cross-entropy over every target position of the batch.
inline Var forward_loss(ForwardContext& ctx, const Batch& batch, const FeatureInput* feats) {
  Var logits = teacher_forced_logits(ctx, batch, feats);
  return masked_cross_entropy(logits, batch.tgt_out, batch.tgt_mask);
}

// Argmax agreement with the reference under teacher forcing (lowest id wins ties).
inline std::pair<std::size_t, std::size_t> token_accuracy(const Tensor& logits, const Batch& batch) {
  std::size_t correct = 0, total = 0;
  const std::size_t V = logits.shape()[1];
  for (std::size_t i = 0; i < batch.tgt_out.size(); ++i) {
    if (batch.tgt_mask[i] == 0.0) continue;
    const double* row = &logits.data()[i * V];
    const auto best = static_cast<int>(std::max_element(row, row + V) - row);
    correct += best == batch.tgt_out[i] ? 1 : 0;
    ++total;
  }
  return {correct, total};
}

// ---------------------------------------------------------------------------
// Model bundle and checkpoint I/O
//
// Checkpoint layout (little-endian):
//   "MMTC" | u32 version=1 | u32 header length | JSON header |
//   u32 tensor count | per tensor: u32 name length, name, u32 ndim, u32 dims[ndim], f64 data.
// The JSON header carries the model config, both vocabularies and their hashes.

struct Model {
  ModelConfig config;
  ParameterSet params;
  Vocabulary src_vocab;
  Vocabulary tgt_vocab;
  nlohmann::json metadata = nlohmann::json::object();
};

inline constexpr char kCheckpointMagic[4] = {'M', 'M', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_model(const Model& m) {
  nlohmann::json header{{"config", m.config},
                        {"src_vocab", m.src_vocab.tokens()},
                        {"tgt_vocab", m.tgt_vocab.tokens()},
                        {"src_vocab_hash", m.src_vocab.hash()},
                        {"tgt_vocab_hash", m.tgt_vocab.hash()},
                        {"metadata", m.metadata}};
  const std::string h = header.dump();
  ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(h.size()));
  w.bytes(h);
  w.u32(static_cast<std::uint32_t>(m.params.tensors.size()));
  for (const auto& [name, t] : m.params.tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.f64(v);
  }
  return w.take();
}

inline Model parse_model(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.bytes(4, "magic") != std::string_view(kCheckpointMagic, 4)) throw FormatError("bad checkpoint magic", 0);
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  const auto hlen = r.u32("header length");
  const auto hpos = r.offset();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(hlen, "header"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what(), hpos);
  }
  Model m;
  m.config = header.at("config").get<ModelConfig>();
  m.src_vocab = Vocabulary(header.at("src_vocab").get<std::vector<std::string>>());
  m.tgt_vocab = Vocabulary(header.at("tgt_vocab").get<std::vector<std::string>>());
  if (m.src_vocab.hash() != header.at("src_vocab_hash").get<std::string>() ||
      m.tgt_vocab.hash() != header.at("tgt_vocab_hash").get<std::string>()) {
    throw FormatError("checkpoint vocabulary hash mismatch", hpos);
  }
  if (header.contains("metadata")) m.metadata = header["metadata"];
  const auto n = r.u32("tensor count");
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto nl = r.u32("name length");
    std::string name(r.bytes(nl, "tensor name"));
    const auto nd = r.u32("rank");
    Shape shape;
    for (std::uint32_t d = 0; d < nd; ++d) shape.push_back(r.u32("dimension"));
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = r.f64("tensor data");
    m.params.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining()) r.fail("trailing bytes after checkpoint tensors");
  for (const auto& [name, shape] : parameter_shapes(m.config)) {
    if (!m.params.contains(name) || m.params.at(name).shape() != shape) {
      throw FormatError("checkpoint tensor '" + name + "' missing or mis-shaped");
    }
  }
  return m;
}

inline void save_model(const std::filesystem::path& path, const Model& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto bytes = serialize_model(m);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Model load_model(const std::filesystem::path& path) {
  try {
    return parse_model(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace mmtprobe
