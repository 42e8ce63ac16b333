#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "mmtprobe/model.hpp"

using namespace mmtprobe;

namespace {

ModelConfig toy_config(Fusion fusion) {
  ModelConfig c;
  c.fusion = fusion;
  c.emb_dim = 8;
  c.hidden = 16;
  c.src_vocab = 12;
  c.tgt_vocab = 12;
  c.feature_channels = 6;
  c.feature_positions = 4;
  return c;
}

std::vector<EncodedSample> toy_samples() {
  return {
      {{5, 7, 9, 2}, {1, 6, 11, 8, 2}, 0},
      {{6, 4, 2}, {1, 10, 5, 2}, 1},
  };
}

FeatureSet toy_features(Fusion fusion, std::uint64_t seed = 3) {
  const bool spatial = fusion == Fusion::direct || fusion == Fusion::hier;
  FeatureSet fs = spatial ? FeatureSet(FeatureLayout::spatial, 2, 6, 2, 2) : FeatureSet(FeatureLayout::pooled, 2, 6);
  Rng rng(seed);
  for (double& v : fs.storage()) v = uniform_real(rng, -1, 1);
  return fs;
}

Batch toy_batch() {
  auto data = toy_samples();
  std::vector<std::size_t> idx{0, 1};
  return make_batch(data, idx);
}

}  // namespace

TEST_CASE("parameter initialization", "[model][init]") {
  for (Fusion f : {Fusion::nmt, Fusion::init, Fusion::direct, Fusion::hier}) {
    auto c = toy_config(f);
    auto a = init_parameters(c, 7);
    auto b = init_parameters(c, 7);
    CHECK(a == b);
    CHECK(!(a == init_parameters(c, 8)));
    for (const auto& [name, shape] : parameter_shapes(c)) {
      const Tensor& t = a.at(name);
      REQUIRE(t.shape() == shape);
      if (shape.size() == 1) {
        for (double v : t.data()) REQUIRE(v == 0.0);
      } else {
        const double lim = xavier_limit(shape);
        for (double v : t.data()) REQUIRE(std::abs(v) <= lim);
      }
    }
  }
  auto big = toy_config(Fusion::hier);
  big.hidden = 40;
  CHECK(parameter_shapes(big).size() > 20);
  auto bad = toy_config(Fusion::nmt);
  bad.tgt_vocab = 3;
  CHECK_THROWS_AS(init_parameters(bad, 1), ConfigError);
  CHECK(parse_fusion("direct") == Fusion::direct);
  CHECK_THROWS_AS(parse_fusion("CONCAT"), ConfigError);
}

TEST_CASE("encoder shapes and padding", "[model][encoder]") {
  auto c = toy_config(Fusion::nmt);
  auto ps = init_parameters(c, 1);
  Tape tape(false);
  ForwardContext ctx(tape, c, ps, false, nullptr);
  std::vector<int> one{5};
  auto enc = encode_source(ctx, SourceInput::single(one), nullptr);
  CHECK(enc.annotations.value().shape() == Shape{1, 32});

  Batch b = toy_batch();
  auto enc2 = encode_source(ctx, SourceInput::from_batch(b), nullptr);
  // Item 1 has 3 source ids; step 3 is padding.
  for (std::size_t j = 0; j < 32; ++j) CHECK(enc2.annotations.value().at(3 * 2 + 1, j) == 0.0);
  for (double v : enc2.decoder_init.value().data()) CHECK(v == 0.0);

  SourceInput empty;
  CHECK_THROWS_AS(encode_source(ctx, empty, nullptr), ContractError);
}

TEST_CASE("attention weights", "[model][attention]") {
  auto c = toy_config(Fusion::nmt);
  auto ps = init_parameters(c, 2);
  Tape tape(false);
  ForwardContext ctx(tape, c, ps, false, nullptr);
  Rng rng(5);

  Tensor q(Shape{1, 16});
  for (double& v : q.data()) v = uniform_real(rng, -1, 1);
  Var query = tape.constant(q);

  Tensor vals(Shape{3, 32});
  for (double& v : vals.data()) v = uniform_real(rng, -1, 1);
  auto single = make_keys(ctx, "att.text", tape.constant(vals), Tensor::matrix({{0}, {1}, {0}}), 3, 1);
  CHECK(attention(ctx, "att.text", query, single).weights.value().at(1, 0) == 1.0);

  Tensor same(Shape{4, 32});
  for (std::size_t p = 0; p < 4; ++p) {
    for (std::size_t j = 0; j < 32; ++j) same.at(p, j) = vals.at(0, j);
  }
  auto uniform = attention(ctx, "att.text", query, make_keys(ctx, "att.text", tape.constant(same), Tensor(Shape{4, 1}, 1.0), 4, 1));
  for (std::size_t p = 0; p < 4; ++p) CHECK(uniform.weights.value()[p] == Catch::Approx(0.25).margin(1e-15));

  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t P = 1 + uniform_index(rng, 7), B = 1 + uniform_index(rng, 3);
    Tensor k(Shape{P * B, 32}), qq(Shape{B, 16}), m(Shape{P, B}, 1.0);
    for (double& v : k.data()) v = uniform_real(rng, -3, 3);
    for (double& v : qq.data()) v = uniform_real(rng, -3, 3);
    for (std::size_t p = 1; p < P; ++p) {
      for (std::size_t b = 0; b < B; ++b) m.at(p, b) = uniform01(rng) < 0.3 ? 0.0 : 1.0;
    }
    auto r = attention(ctx, "att.text", tape.constant(qq), make_keys(ctx, "att.text", tape.constant(k), m, P, B));
    for (std::size_t b = 0; b < B; ++b) {
      double s = 0.0;
      for (std::size_t p = 0; p < P; ++p) {
        REQUIRE(r.weights.value().at(p, b) >= 0.0);
        s += r.weights.value().at(p, b);
      }
      REQUIRE(std::abs(s - 1.0) < 1e-9);
    }
  }
  CHECK_THROWS_AS(attention(ctx, "att.text", query, make_keys(ctx, "att.text", tape.constant(vals), Tensor(Shape{3, 1}), 3, 1)),
                  ContractError);
}

TEST_CASE("visual attention and fusion", "[model][fusion]") {
  Rng rng(6);
  auto c = toy_config(Fusion::hier);
  auto ps = init_parameters(c, 3);
  Tape tape(false);
  ForwardContext ctx(tape, c, ps, false, nullptr);

  // Uniform feature map: every position identical.
  FeatureSet fs(FeatureLayout::spatial, 1, 6, 2, 2);
  for (std::size_t ch = 0; ch < 6; ++ch) {
    const double v = uniform_real(rng, -1, 1);
    for (std::size_t p = 0; p < 4; ++p) fs.at(0, ch, p) = v;
  }
  std::vector<std::size_t> row0{0};
  auto feats = gather_features(fs, row0);
  std::vector<int> src{5, 6, 2};
  auto enc = encode_source(ctx, SourceInput::single(src), &feats);
  Tensor q(Shape{1, 16});
  for (double& v : q.data()) v = uniform_real(rng, -1, 1);
  auto va = visual_attention(ctx, tape.constant(q), enc);
  for (std::size_t p = 0; p < 4; ++p) CHECK(va.weights.value()[p] == Catch::Approx(0.25).margin(1e-15));

  Tensor ct(Shape{1, 32});
  for (double& v : ct.data()) v = uniform_real(rng, -1, 1);
  Var c_text = tape.constant(ct);
  CHECK(fuse(ctx, Fusion::nmt, c_text, nullptr, tape.constant(q)).context.value() == ct);
  CHECK(fuse(ctx, Fusion::init, c_text, nullptr, tape.constant(q)).context.value() == ct);
  CHECK_THROWS_AS(fuse(ctx, Fusion::direct, c_text, nullptr, tape.constant(q)), ContractError);
  CHECK_THROWS_AS(fuse(ctx, Fusion::hier, c_text, nullptr, tape.constant(q)), ContractError);

  // HIER with identical projections attends 0.5/0.5 and returns that projection.
  ParameterSet sym = ps;
  for (double& v : sym.at("hier.Pi").data()) v = 0.0;
  for (double& v : sym.at("hier.Pt").data()) v = 0.0;
  for (std::size_t i = 0; i < 6; ++i) sym.at("hier.Pi").at(i, i) = 1.0;
  for (std::size_t i = 0; i < 6; ++i) sym.at("hier.Pt").at(i, i) = 1.0;
  Tensor img(Shape{1, 6});
  for (std::size_t i = 0; i < 6; ++i) img[i] = ct[i];
  Tape t2(false);
  ForwardContext ctx2(t2, c, sym, false, nullptr);
  Var ci = t2.constant(img);
  auto h = fuse(ctx2, Fusion::hier, t2.constant(ct), &ci, t2.constant(q));
  CHECK(h.hier_weights.value()[0] == Catch::Approx(0.5).margin(1e-15));
  CHECK(h.hier_weights.value()[1] == Catch::Approx(0.5).margin(1e-15));
  for (std::size_t j = 0; j < 32; ++j) CHECK(h.context.value()[j] == Catch::Approx(j < 6 ? ct[j] : 0.0).margin(1e-12));

  auto d = toy_config(Fusion::direct);
  auto dps = init_parameters(d, 4);
  Tape t3(false);
  ForwardContext ctx3(t3, d, dps, false, nullptr);
  Var ci3 = t3.constant(img);
  CHECK(fuse(ctx3, Fusion::direct, t3.constant(ct), &ci3, t3.constant(q)).context.value().shape() == Shape{1, 32});
}

TEST_CASE("INIT state transform", "[model][init-fusion]") {
  auto c = toy_config(Fusion::init);
  auto ps = init_parameters(c, 5);
  Tape tape(false);
  ForwardContext ctx(tape, c, ps, false, nullptr);
  FeatureSet zero(FeatureLayout::pooled, 1, 6);
  std::vector<std::size_t> row0{0};
  auto s0 = init_states_from_pool5(ctx, gather_features(zero, row0));
  for (double v : s0.decoder.value().data()) CHECK(v == 0.0);
  CHECK(s0.encoder.size() == 4);

  auto fs = toy_features(Fusion::init);
  for (double& v : fs.storage()) v *= 50.0;
  auto s = init_states_from_pool5(ctx, gather_features(fs, row0));
  for (double v : s.decoder.value().data()) CHECK(std::abs(v) <= 1.0);

  auto spatial = toy_features(Fusion::direct);
  CHECK_THROWS_AS(init_states_from_pool5(ctx, gather_features(spatial, row0)), ContractError);
}

TEST_CASE("decoder step", "[model][decoder]") {
  for (Fusion f : {Fusion::nmt, Fusion::init, Fusion::direct, Fusion::hier}) {
    auto c = toy_config(f);
    auto ps = init_parameters(c, 9);
    auto fs = toy_features(f);
    Tape tape(false);
    ForwardContext ctx(tape, c, ps, false, nullptr);
    std::vector<std::size_t> row0{0};
    auto feats = gather_features(fs, row0);
    std::vector<int> src{5, 6, 2};
    auto enc = encode_source(ctx, SourceInput::single(src), c.uses_features() ? &feats : nullptr);
    std::vector<int> bos{Vocabulary::kBos};
    auto step = decoder_step(ctx, bos, enc.decoder_init, enc);
    CHECK(step.logits.value().shape() == Shape{1, 12});
    CHECK(step.state.value().shape() == Shape{1, 16});
    const Tensor& p = softmax(step.logits, 1).value();
    double s = 0.0;
    for (double v : p.data()) s += v;
    CHECK(std::abs(s - 1.0) < 1e-12);
    CHECK(step.image_weights.valid() == c.uses_spatial());
    std::vector<int> bad{12};
    CHECK_THROWS_AS(decoder_step(ctx, bad, enc.decoder_init, enc), IndexError);
  }
}

TEST_CASE("full-model gradients match finite differences", "[model][gradcheck]") {
  for (Fusion f : {Fusion::nmt, Fusion::init, Fusion::direct, Fusion::hier}) {
    DYNAMIC_SECTION(to_string(f)) {
      auto c = toy_config(f);
      auto ps = init_parameters(c, 21);
      // Nonzero biases so their gradients are exercised away from the origin.
      Rng rng(4);
      for (auto& [name, t] : ps.tensors) {
        if (t.rank() == 1) {
          for (double& v : t.data()) v = uniform_real(rng, -0.3, 0.3);
        }
      }
      auto fs = toy_features(f);
      Batch batch = toy_batch();
      auto congruent = remap_order(CongruenceMode::congruent, 2);
      auto feats = batch_features(fs, batch, congruent);

      std::vector<std::string> names;
      std::vector<Tensor*> inputs;
      for (auto& [name, t] : ps.tensors) {
        names.push_back(name);
        inputs.push_back(&t);
      }
      auto loss = [&](Tape& tape, std::span<const Var> vars) {
        ForwardContext ctx(tape, c, ps, false, nullptr);
        for (std::size_t i = 0; i < vars.size(); ++i) ctx.provide(names[i], vars[i]);
        return forward_loss(ctx, batch, c.uses_features() ? &feats : nullptr);
      };
      auto report = finite_difference_check(loss, inputs);
      INFO("worst parameter " << names[report.worst_tensor] << " index " << report.worst_index);
      CHECK(report.max_relative_error < 1e-4);
      CHECK(report.coordinates == ps.scalar_count());
    }
  }
}

TEST_CASE("loss sanity", "[model][loss]") {
  auto c = toy_config(Fusion::direct);
  auto ps = init_parameters(c, 13);
  auto fs = toy_features(Fusion::direct);
  Batch batch = toy_batch();
  auto feats = batch_features(fs, batch, remap_order(CongruenceMode::congruent, 2));
  Tape tape(false);
  ForwardContext ctx(tape, c, ps, false, nullptr);
  const double l = forward_loss(ctx, batch, &feats).value()[0];
  CHECK(std::abs(l - std::log(12.0)) < 0.2 * std::log(12.0));

  // NMT ignores features entirely.
  auto n = toy_config(Fusion::nmt);
  auto nps = init_parameters(n, 13);
  auto f1 = batch_features(toy_features(Fusion::direct, 1), batch, remap_order(CongruenceMode::congruent, 2));
  auto f2 = batch_features(toy_features(Fusion::direct, 2), batch, remap_order(CongruenceMode::incongruent, 2));
  Tape ta(false), tb(false);
  ForwardContext ca(ta, n, nps, false, nullptr), cb(tb, n, nps, false, nullptr);
  CHECK(forward_loss(ca, batch, &f1).value()[0] == forward_loss(cb, batch, &f2).value()[0]);

  // Visual models do need them.
  Tape tc(false);
  ForwardContext cc(tc, c, ps, false, nullptr);
  CHECK_THROWS_AS(forward_loss(cc, batch, nullptr), ContractError);
  auto pooled = batch_features(toy_features(Fusion::init), batch, remap_order(CongruenceMode::congruent, 2));
  CHECK_THROWS_AS(forward_loss(cc, batch, &pooled), ContractError);
}

TEST_CASE("training forward pass requires a generator and differs under dropout", "[model][dropout]") {
  auto c = toy_config(Fusion::nmt);
  auto ps = init_parameters(c, 13);
  Batch batch = toy_batch();
  Tape t1;
  CHECK_THROWS_AS(ForwardContext(t1, c, ps, true, nullptr), ContractError);
  Rng r1(1), r2(1);
  Tape ta, tb;
  ForwardContext ca(ta, c, ps, true, &r1), cb(tb, c, ps, true, &r2);
  CHECK(forward_loss(ca, batch, nullptr).value()[0] == forward_loss(cb, batch, nullptr).value()[0]);
  Tape te(false);
  ForwardContext ce(te, c, ps, false, nullptr);
  CHECK(forward_loss(ca, batch, nullptr).value()[0] != forward_loss(ce, batch, nullptr).value()[0]);
}

TEST_CASE("tied readout reads the target embedding table", "[model][tied]") {
  auto c = toy_config(Fusion::nmt);
  auto ps = init_parameters(c, 2);
  CHECK(!ps.contains("out.W"));
  CHECK(&readout_source(c, ps) == &ps.at("tgt_emb"));
  auto u = c;
  u.tied_embeddings = false;
  auto ups = init_parameters(u, 2);
  CHECK(&readout_source(u, ups) == &ups.at("out.W"));
}

TEST_CASE("checkpoint round trip", "[model][io]") {
  Model m;
  m.config = toy_config(Fusion::hier);
  m.params = init_parameters(m.config, 3);
  std::vector<std::string> src = Vocabulary::reserved_tokens(), tgt = Vocabulary::reserved_tokens();
  for (int i = 0; i < 7; ++i) {
    src.push_back("s" + std::to_string(i));
    tgt.push_back("t" + std::to_string(i));
  }
  m.src_vocab = Vocabulary(src);
  m.tgt_vocab = Vocabulary(tgt);
  m.metadata = {{"seed", 3}};
  const auto bytes = serialize_model(m);
  Model back = parse_model(bytes);
  CHECK(back.params == m.params);
  CHECK(back.src_vocab.tokens() == src);
  CHECK(back.metadata.at("seed") == 3);
  CHECK(serialize_model(back) == bytes);

  auto dir = std::filesystem::temp_directory_path() / "mmtprobe_model";
  save_model(dir / "m.ckpt", m);
  CHECK(serialize_model(load_model(dir / "m.ckpt")) == bytes);

  CHECK_THROWS_AS(parse_model(bytes.substr(0, bytes.size() - 3)), FormatError);
  CHECK_THROWS_AS(parse_model(bytes + "z"), FormatError);
  std::string bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(parse_model(bad), FormatError);
}

TEST_CASE("fully masked source vocabulary is accepted", "[model][config]") {
  auto c = toy_config(Fusion::direct);
  c.src_vocab = Vocabulary::kReserved;
  CHECK_NOTHROW(c.validate());
  c.src_vocab = Vocabulary::kReserved - 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.src_vocab = 12;
  c.tgt_vocab = Vocabulary::kReserved;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
