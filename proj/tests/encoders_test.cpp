#include <doctest.h>

#include <cmath>
#include <set>

#include "mia/model.hpp"
#include "mia/pipeline.hpp"
#include "support.hpp"

using namespace mia;
using mia::testing::random_tensor;

namespace {

MiaModel desk_model(std::uint64_t seed = 3, std::size_t vocab = 12) {
  return MiaModel(ModelConfig::desk(), vocab, 4, AblationSpec::preset("mia"), seed);
}

Tensor eval(Graph& g, Var v) {
  g.evaluate();
  return v.value();
}

// Input rows seen by feature row r after `layers` stride-2, 3x3, pad-1 convolutions.
std::pair<long, long> input_rows_of(long first, long last, int layers) {
  for (int l = 0; l < layers; ++l) {
    first = 2 * first - 1;
    last = 2 * last + 1;
  }
  return {first, last};
}

}  // namespace

TEST_CASE("backbone output shape and zero image") {
  MiaModel m = desk_model();
  Graph g;
  Var fm = m.visual_backbone(g.constant(Tensor({2, 3, 192, 64})));
  const Tensor out = eval(g, fm);
  CHECK(out.shape() == Shape{2, 64, 12, 4});
  for (double v : out.values()) CHECK(v == 0.0);  // biases start at zero

  Graph h;
  CHECK_THROWS_AS(m.visual_backbone(h.constant(Tensor({1, 3, 100, 64}))), ShapeError);
}

TEST_CASE("parts ignore pixels outside their receptive field") {
  MiaModel m = desk_model();
  m.params().for_each([](Parameter& p) {
    if (p.name.find(".bias") != std::string::npos) p.value.fill(0.05);
  });
  Rng rng(4);
  Tensor img({1, 3, 192, 64});
  for (auto& v : img.values()) v = rng.uniform();
  const std::size_t n = 6, rows_per_part = 2;
  for (std::size_t part : {std::size_t{0}, std::size_t{5}}) {
    const auto [lo, hi] = input_rows_of(static_cast<long>(part * rows_per_part),
                                        static_cast<long>((part + 1) * rows_per_part - 1), 4);
    Tensor changed = img;
    for (std::size_t c = 0; c < 3; ++c) {
      for (long y = 0; y < 192; ++y) {
        if (y >= lo && y <= hi) continue;
        for (std::size_t x = 0; x < 64; ++x) changed[(c * 192 + y) * 64 + x] += 0.7;
      }
    }
    Graph g;
    Var a = m.part_features(m.visual_backbone(g.constant(img)));
    Var b = m.part_features(m.visual_backbone(g.constant(changed)));
    g.evaluate();
    const std::size_t D = a.dim(1);
    REQUIRE(a.dim(0) == n);
    for (std::size_t k = 0; k < D; ++k) CHECK(a.value()[part * D + k] == b.value()[part * D + k]);
    double diff = 0.0;  // a neighbouring part does see the change
    const std::size_t other = part == 0 ? 1 : 4;
    for (std::size_t k = 0; k < D; ++k) diff += std::abs(a.value()[other * D + k] - b.value()[other * D + k]);
    CHECK(diff > 0.0);
  }
}

TEST_CASE("global and stripe pooling against brute-force means") {
  MiaModel m = desk_model();
  Rng rng(6);
  const Tensor fm = random_tensor({2, 64, 12, 4}, rng);
  Graph g;
  Var fmv = g.constant(fm);
  Var stripes = m.stripe_pool(fmv);
  Var global = m.global_visual(fmv);
  g.evaluate();
  const Tensor& w = m.visual_fc().weight->value;
  const Tensor& b = m.visual_fc().bias->value;
  for (std::size_t bi = 0; bi < 2; ++bi) {
    std::vector<double> pooled(64, 0.0);
    for (std::size_t c = 0; c < 64; ++c) {
      for (std::size_t y = 0; y < 12; ++y) {
        for (std::size_t x = 0; x < 4; ++x) pooled[c] += fm[((bi * 64 + c) * 12 + y) * 4 + x] / 48.0;
      }
      for (std::size_t k = 0; k < 6; ++k) {
        double s = 0.0;
        for (std::size_t y = 2 * k; y < 2 * k + 2; ++y) {
          for (std::size_t x = 0; x < 4; ++x) s += fm[((bi * 64 + c) * 12 + y) * 4 + x];
        }
        CHECK(stripes.value()[(bi * 6 + k) * 64 + c] == doctest::Approx(s / 8.0).epsilon(1e-12));
      }
    }
    const auto expect = testing::affine(w, b, pooled);
    for (std::size_t o = 0; o < expect.size(); ++o) {
      CHECK(global.value()[bi * expect.size() + o] == doctest::Approx(expect[o]).epsilon(1e-10));
    }
  }

  // Stripes partition the map: their mean is the global mean.
  for (std::size_t c = 0; c < 64; ++c) {
    double from_stripes = 0.0, direct = 0.0;
    for (std::size_t k = 0; k < 6; ++k) from_stripes += stripes.value()[k * 64 + c] / 6.0;
    for (std::size_t i = 0; i < 48; ++i) direct += fm[c * 48 + i] / 48.0;
    CHECK(from_stripes == doctest::Approx(direct).epsilon(1e-12));
  }
}

TEST_CASE("single stripe equals global mean pooling") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.parts = 1;
  MiaModel m(cfg, 5, 2, AblationSpec::preset("mia"), 1);
  Rng rng(7);
  const Tensor fm = random_tensor({1, 64, 12, 4}, rng);
  Graph g;
  Var s = m.stripe_pool(g.constant(fm));
  g.evaluate();
  for (std::size_t c = 0; c < 64; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 48; ++i) mean += fm[c * 48 + i] / 48.0;
    CHECK(s.value()[c] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("Bi-GRU matches a hand-unrolled recurrence") {
  MiaModel m = desk_model(11, 9);
  const std::vector<std::size_t> seq = {3, 7, 1};
  const std::size_t H = m.config().gru_hidden, E = m.config().embed_dim;
  const Tensor& emb = m.embedding().value;

  auto run = [&](const GruCell& cell, std::vector<std::size_t> tokens) {
    std::vector<double> h(H, 0.0);
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    const Tensor& wx = cell.w_x->value;
    const Tensor& wh = cell.w_h->value;
    const Tensor& b = cell.bias->value;
    for (auto tok : tokens) {
      const double* x = emb.data() + tok * E;
      std::vector<double> z(H), r(H), next(H);
      for (std::size_t i = 0; i < H; ++i) {
        z[i] = sig(testing::dot(wx.data() + i * E, x, E) + b[i] + testing::dot(wh.data() + i * H, h.data(), H));
        r[i] = sig(testing::dot(wx.data() + (H + i) * E, x, E) + b[H + i] +
                   testing::dot(wh.data() + (H + i) * H, h.data(), H));
      }
      std::vector<double> rh(H);
      for (std::size_t i = 0; i < H; ++i) rh[i] = r[i] * h[i];
      for (std::size_t i = 0; i < H; ++i) {
        const double cand = std::tanh(testing::dot(wx.data() + (2 * H + i) * E, x, E) + b[2 * H + i] +
                                      testing::dot(wh.data() + (2 * H + i) * H, rh.data(), H));
        next[i] = (1.0 - z[i]) * h[i] + z[i] * cand;
      }
      h = next;
    }
    return h;
  };
  // Nonzero biases so every gate term is exercised.
  Rng rng(12);
  for (auto* p : {m.gru_forward().bias, m.gru_backward().bias}) {
    for (auto& v : p->value.values()) v = 0.3 * rng.normal();
  }

  Graph g;
  Var hidden = m.text_hidden(g, {seq, {5}});
  g.evaluate();
  const auto fwd = run(m.gru_forward(), seq);
  const auto bwd = run(m.gru_backward(), {1, 7, 3});
  for (std::size_t i = 0; i < H; ++i) {
    CHECK(hidden.value()[i] == doctest::Approx(fwd[i]).epsilon(1e-12));
    CHECK(hidden.value()[H + i] == doctest::Approx(bwd[i]).epsilon(1e-12));
  }
  // The shorter sequence in the same batch takes exactly one step each way.
  const auto one_f = run(m.gru_forward(), {5});
  const auto one_b = run(m.gru_backward(), {5});
  for (std::size_t i = 0; i < H; ++i) {
    CHECK(hidden.value()[2 * H + i] == doctest::Approx(one_f[i]).epsilon(1e-12));
    CHECK(hidden.value()[3 * H + i] == doctest::Approx(one_b[i]).epsilon(1e-12));
  }
}

TEST_CASE("GRU with zero embeddings and biases stays at zero") {
  MiaModel m = desk_model();
  m.embedding().value.fill(0.0);
  Graph g;
  Var h = m.text_hidden(g, {{1, 2, 3}});
  g.evaluate();
  for (double v : h.value().values()) CHECK(v == 0.0);
  Graph e;
  CHECK_THROWS(m.text_hidden(e, {{}}));
}

TEST_CASE("sentence and phrase projections") {
  MiaModel m = desk_model();
  Rng rng(9);
  const Tensor hidden = random_tensor({2, 2 * m.config().gru_hidden}, rng);
  Graph g;
  Var t = m.sentence_project(g.constant(hidden));
  Var n = m.phrase_project(g.constant(hidden));
  Var zero_t = m.sentence_project(g.constant(Tensor({1, 2 * m.config().gru_hidden})));
  g.evaluate();
  CHECK(t.dim(1) == m.config().joint_dim);
  for (std::size_t r = 0; r < 2; ++r) {
    const auto ts = testing::affine(m.sentence_fc().weight->value, m.sentence_fc().bias->value, testing::row(hidden, r));
    const auto ns = testing::affine(m.phrase_fc().weight->value, m.phrase_fc().bias->value, testing::row(hidden, r));
    for (std::size_t k = 0; k < ts.size(); ++k) {
      CHECK(t.value()[r * ts.size() + k] == doctest::Approx(ts[k]).epsilon(1e-12));
      CHECK(n.value()[r * ns.size() + k] == doctest::Approx(ns[k]).epsilon(1e-12));
    }
  }
  CHECK(!(t.value() == n.value()));
  for (std::size_t k = 0; k < m.config().joint_dim; ++k) CHECK(zero_t.value()[k] == m.sentence_fc().bias->value[k]);
}

TEST_CASE("encoders keep modalities separate and share the GRU") {
  MiaModel m = desk_model(3, 20);
  const auto vocab = testing::small_vocab();
  auto cap = text::prepare_text("a man wears a red hat and blue pants", vocab);
  REQUIRE(cap.phrase_indices.size() == 3);
  Rng rng(1);
  Tensor img = random_tensor({1, 3, 192, 64}, rng, 0.3);

  Graph g;
  EncodedBatch both = encode_batch(g, m, img, {&cap}, true);
  Graph gi, gt;
  EncodedBatch only_img = encode_batch(gi, m, img, {}, true);
  EncodedBatch only_txt = encode_batch(gt, m, Tensor(), {&cap}, true);
  g.evaluate();
  gi.evaluate();
  gt.evaluate();
  CHECK(bit_identical(both.image_global.value(), only_img.image_global.value()));
  CHECK(bit_identical(both.parts.value(), only_img.parts.value()));
  CHECK(bit_identical(both.caption_global.value(), only_txt.caption_global.value()));
  CHECK(both.parts.dim(0) == 6);
  CHECK(both.parts.dim(1) == m.config().part_dim);
  CHECK(both.image_global.dim(1) == both.caption_global.dim(1));
  CHECK(both.phrases.features.dim(0) == 3);

  // Phrase j encodes like a caption made of just that phrase's tokens, through the phrase FC.
  Graph gp;
  Var hidden = m.text_hidden(gp, {cap.phrase_indices[1]});
  Var nj = m.phrase_project(hidden);
  gp.evaluate();
  const std::size_t D = m.config().joint_dim;
  for (std::size_t k = 0; k < D; ++k) CHECK(both.phrases.features.value()[D + k] == doctest::Approx(nj.value()[k]).epsilon(1e-12));

  std::size_t grus = 0;
  m.params().for_each([&](const Parameter& p) { grus += p.name.rfind("text.gru", 0) == 0; });
  CHECK(grus == 6);  // one forward and one backward cell, used by sentences and phrases alike
}

TEST_CASE("parameter registry") {
  MiaModel m = desk_model();
  std::set<std::string> names;
  m.params().for_each([&](const Parameter& p) {
    CHECK(names.insert(p.name).second);
    CHECK(p.trainable_in_steps != 0);
  });
  const auto& bfm = m.params().get("bfm.mlp_v.layer1.weight");
  CHECK(bfm.trainable_in_steps == step_bit(3));
  CHECK(m.params().get("rga.mlp_v.layer1.weight").trainable_in(2));
  CHECK(!m.params().get("rga.mlp_v.layer1.weight").trainable_in(3));
  CHECK(m.params().get("backbone.conv1.weight").trainable_in(1));
  CHECK(m.params().get("visual.part_conv.weight").value.shape() == Shape{64, 64});

  MiaModel frozen(ModelConfig::desk(), 12, 4, AblationSpec::preset("mia", true), 3);
  CHECK(!frozen.params().get("backbone.conv1.weight").trainable_in(1));
  CHECK(frozen.params().get("backbone.conv1.weight").trainable_in(2));
}
