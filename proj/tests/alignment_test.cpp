#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mia/alignment.hpp"
#include "mia/model.hpp"
#include "support.hpp"

using namespace mia;
using namespace mia::testing;

namespace {

using Vec = std::vector<double>;

struct MlpFixture {
  ParameterStore store;
  Mlp mlp;

  MlpFixture(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, const std::string& tag) {
    auto lin = [&](const std::string& name, std::size_t i, std::size_t o) {
      Linear l;
      l.weight = &store.add(tag + name + ".w", random_tensor({o, i}, rng, 1.0 / std::sqrt(double(i))), 1);
      l.bias = &store.add(tag + name + ".b", random_tensor({o}, rng, 0.1), 1);
      return l;
    };
    mlp.first = lin("1", in, hidden);
    mlp.second = lin("2", hidden, out);
  }

  Vec operator()(const Vec& x) const {
    Vec h = affine(mlp.first.weight->value, mlp.first.bias->value, x);
    for (auto& v : h) v = std::max(v, 0.0);
    return affine(mlp.second.weight->value, mlp.second.bias->value, h);
  }
};

std::vector<Vec> rows_of(const Tensor& t) {
  std::vector<Vec> out;
  for (std::size_t r = 0; r < t.dim(0); ++r) out.push_back(row(t, r));
  return out;
}

Vec weighted_sum(const Vec& w, const std::vector<Vec>& xs) {
  Vec s(xs[0].size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    for (std::size_t k = 0; k < s.size(); ++k) s[k] += w[i] * xs[i][k];
  }
  return s;
}

Vec cosines_to(const std::vector<Vec>& xs, const Vec& y) {
  Vec c;
  for (const auto& x : xs) c.push_back(cosine(x, y));
  return c;
}

std::vector<Vec> map_all(const MlpFixture& f, const std::vector<Vec>& xs) {
  std::vector<Vec> out;
  for (const auto& x : xs) out.push_back(f(x));
  return out;
}

PhraseSet make_phrases(Graph& g, const Tensor& feats, const std::vector<std::size_t>& counts) {
  PhraseSet ps;
  std::size_t off = 0;
  for (auto c : counts) {
    ps.offset.push_back(off);
    ps.count.push_back(c);
    off += c;
  }
  if (off > 0) ps.features = g.constant(feats);
  return ps;
}

Linear identity_linear(ParameterStore& s, const std::string& name, std::size_t d) {
  Tensor w({d, d});
  for (std::size_t i = 0; i < d; ++i) w[i * d + i] = 1.0;
  Linear l;
  l.weight = &s.add(name + ".w", w, 1);
  l.bias = &s.add(name + ".b", Tensor({d}), 1);
  return l;
}

}  // namespace

TEST_CASE("relation attention hand case") {
  ParameterStore s;
  Mlp id{identity_linear(s, "a", 2), identity_linear(s, "b", 2)};
  Graph g;
  Var parts = g.constant(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}));
  Var cap = g.constant(Tensor({1, 2}, {1.0, 0.0}));
  auto r = rga_image_to_text(id, parts, 2, cap);
  g.evaluate();
  const Tensor& v = r.weights[0].value();
  CHECK(v[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(v[1] == doctest::Approx(0.2689).epsilon(1e-4));
  // Aggregate (0.7311, 0.2689) against (1, 0).
  CHECK(r.sim.value()[0] == doctest::Approx(0.7311 / std::hypot(0.7311, 0.2689)).epsilon(1e-4));
}

TEST_CASE("image-to-text relation alignment against a brute-force oracle") {
  Rng rng(31);
  const std::size_t U = 2, Q = 3, n = 4, Dp = 5, D = 6;
  MlpFixture mv(Dp, 7, D, rng, "v");
  const Tensor parts = random_tensor({U * n, Dp}, rng);
  const Tensor caps = random_tensor({Q, D}, rng);
  Graph g;
  auto r = rga_image_to_text(mv.mlp, g.constant(parts), n, g.constant(caps));
  g.evaluate();
  const auto P = rows_of(parts);
  for (std::size_t u = 0; u < U; ++u) {
    std::vector<Vec> mine(P.begin() + u * n, P.begin() + (u + 1) * n);
    for (std::size_t q = 0; q < Q; ++q) {
      const Vec t = row(caps, q);
      const Vec v = softmax(cosines_to(map_all(mv, mine), t));
      for (std::size_t k = 0; k < n; ++k) {
        CHECK(r.weights[0].value()[(u * Q + q) * n + k] == doctest::Approx(v[k]).epsilon(1e-10));
      }
      const double expect = cosine(mv(weighted_sum(v, mine)), t);
      CHECK(r.sim.value()[u * Q + q] == doctest::Approx(expect).epsilon(1e-10));
    }
  }
}

TEST_CASE("text-to-image relation alignment against a brute-force oracle") {
  Rng rng(32);
  const std::size_t U = 3, D = 5;
  MlpFixture mt(D, 6, D, rng, "t");
  const std::vector<std::size_t> counts = {2, 0, 3};
  const Tensor feats = random_tensor({5, D}, rng);
  const Tensor imgs = random_tensor({U, D}, rng);
  Graph g;
  auto ps = make_phrases(g, feats, counts);
  auto r = rga_text_to_image(mt.mlp, ps, g.constant(imgs));
  g.evaluate();
  const auto N = rows_of(feats);
  for (std::size_t q = 0; q < counts.size(); ++q) {
    std::vector<Vec> mine(N.begin() + ps.offset[q], N.begin() + ps.offset[q] + counts[q]);
    for (std::size_t u = 0; u < U; ++u) {
      const double got = r.sim.value()[u * counts.size() + q];
      if (mine.empty()) {
        CHECK(got == 0.0);
        continue;
      }
      const Vec img = row(imgs, u);
      const Vec t = softmax(cosines_to(map_all(mt, mine), img));
      CHECK(got == doctest::Approx(cosine(weighted_sum(t, mine), img)).epsilon(1e-10));
    }
  }
  CHECK(!r.weights[1].valid());
}

TEST_CASE("fine-grained matching against brute-force oracles") {
  Rng rng(33);
  const std::size_t U = 2, n = 3, Dp = 4, D = 5;
  MlpFixture mv(Dp, 6, D, rng, "v");
  MlpFixture mt(D, 6, D, rng, "t");
  const std::vector<std::size_t> counts = {2, 1, 0};
  const Tensor parts = random_tensor({U * n, Dp}, rng);
  const Tensor feats = random_tensor({3, D}, rng);
  Graph g;
  auto ps = make_phrases(g, feats, counts);
  Var pv = g.constant(parts);
  auto sp = bfm_phrase_direction(mv.mlp, mt.mlp, pv, n, ps);
  auto sn = bfm_part_direction(mv.mlp, mt.mlp, pv, n, ps);
  g.evaluate();
  REQUIRE(sp.sim.shape() == Shape{2, 3});
  REQUIRE(sn.sim.shape() == Shape{2, 3});
  const auto P = rows_of(parts);
  const auto N = rows_of(feats);
  for (std::size_t u = 0; u < U; ++u) {
    std::vector<Vec> my_parts(P.begin() + u * n, P.begin() + (u + 1) * n);
    const auto lifted_parts = map_all(mv, my_parts);
    for (std::size_t q = 0; q < counts.size(); ++q) {
      std::vector<Vec> my_phr(N.begin() + ps.offset[q], N.begin() + ps.offset[q] + counts[q]);
      if (my_phr.empty()) {
        CHECK(sp.sim.value()[u * 3 + q] == 0.0);
        CHECK(sn.sim.value()[u * 3 + q] == 0.0);
        continue;
      }
      const auto lifted_phr = map_all(mt, my_phr);
      double phrase_side = 0.0;
      for (const auto& ph : lifted_phr) {
        const Vec alpha = softmax(cosines_to(lifted_parts, ph));
        phrase_side += cosine(mv(weighted_sum(alpha, my_parts)), ph) / my_phr.size();
      }
      double part_side = 0.0;
      for (const auto& pt : lifted_parts) {
        const Vec beta = softmax(cosines_to(lifted_phr, pt));
        part_side += cosine(mt(weighted_sum(beta, my_phr)), pt) / n;
      }
      CHECK(sp.sim.value()[u * 3 + q] == doctest::Approx(phrase_side).epsilon(1e-10));
      CHECK(sn.sim.value()[u * 3 + q] == doctest::Approx(part_side).epsilon(1e-10));
    }
  }
}

TEST_CASE("attention weights are distributions") {
  Rng rng(34);
  const std::size_t D = 4;
  MlpFixture mv(D, 5, D, rng, "v");
  MlpFixture mt(D, 5, D, rng, "t");
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t U = 1 + rng.below(3), Q = 1 + rng.below(3), n = 1 + rng.below(5);
    std::vector<std::size_t> counts(Q);
    std::size_t M = 0;
    for (auto& c : counts) M += c = rng.below(4);
    const double spread = std::pow(10.0, rng.uniform(-2.0, 2.0));
    Graph g;
    Var parts = g.constant(random_tensor({U * n, D}, rng, spread));
    Var caps = g.constant(random_tensor({Q, D}, rng, spread));
    Var imgs = g.constant(random_tensor({U, D}, rng, spread));
    auto ps = make_phrases(g, M ? random_tensor({M, D}, rng, spread) : Tensor(), counts);
    auto a = rga_image_to_text(mv.mlp, parts, n, caps);
    auto b = rga_text_to_image(mt.mlp, ps, imgs);
    auto c = bfm_phrase_direction(mv.mlp, mt.mlp, parts, n, ps);
    auto d = bfm_part_direction(mv.mlp, mt.mlp, parts, n, ps);
    g.evaluate();
    auto check_rows = [](const Var& w) {
      if (!w.valid()) return;
      const std::size_t last = w.shape().back();
      const auto vals = w.value().values();
      for (std::size_t r = 0; r < vals.size() / last; ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < last; ++k) {
          CHECK(vals[r * last + k] >= 0.0);
          s += vals[r * last + k];
        }
        CHECK(std::abs(s - 1.0) <= 1e-9);
      }
    };
    for (const auto* r : {&a, &b, &c, &d}) {
      for (const auto& w : r->weights) check_rows(w);
    }
  }
}

TEST_CASE("permuting parts or phrases permutes the weights and keeps the similarity") {
  Rng rng(35);
  const std::size_t n = 4, D = 5;
  MlpFixture mv(D, 6, D, rng, "v");
  MlpFixture mt(D, 6, D, rng, "t");
  const Tensor parts = random_tensor({n, D}, rng);
  const Tensor feats = random_tensor({3, D}, rng);
  const std::vector<std::size_t> pp = {2, 0, 3, 1}, fp = {1, 2, 0};
  Tensor parts_p({n, D}), feats_p({3, D});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(parts.data() + pp[i] * D, D, parts_p.data() + i * D);
  for (std::size_t i = 0; i < 3; ++i) std::copy_n(feats.data() + fp[i] * D, D, feats_p.data() + i * D);
  const Tensor cap = random_tensor({1, D}, rng);

  auto run = [&](const Tensor& p, const Tensor& f) {
    Graph g;
    auto ps = make_phrases(g, f, {3});
    Var pv = g.constant(p);
    auto a = rga_image_to_text(mv.mlp, pv, n, g.constant(cap));
    auto b = rga_text_to_image(mt.mlp, ps, g.constant(cap));
    auto c = bfm_phrase_direction(mv.mlp, mt.mlp, pv, n, ps);
    auto d = bfm_part_direction(mv.mlp, mt.mlp, pv, n, ps);
    g.evaluate();
    return std::vector<Tensor>{a.sim.value(), b.sim.value(), c.sim.value(), d.sim.value(), a.weights[0].value(),
                               b.weights[0].value()};
  };
  const auto base = run(parts, feats);
  const auto perm = run(parts_p, feats_p);
  for (std::size_t s = 0; s < 4; ++s) CHECK(perm[s][0] == doctest::Approx(base[s][0]).epsilon(1e-12));
  for (std::size_t i = 0; i < n; ++i) CHECK(perm[4][i] == doctest::Approx(base[4][pp[i]]).epsilon(1e-12));
  for (std::size_t i = 0; i < 3; ++i) CHECK(perm[5][i] == doctest::Approx(base[5][fp[i]]).epsilon(1e-12));
}

TEST_CASE("single part or single phrase collapses the attention") {
  Rng rng(36);
  const std::size_t D = 4;
  MlpFixture mv(D, 5, D, rng, "v");
  MlpFixture mt(D, 5, D, rng, "t");
  const Tensor part = random_tensor({1, D}, rng);
  const Tensor phrase = random_tensor({1, D}, rng);
  const Tensor cap = random_tensor({1, D}, rng);
  Graph g;
  auto ps = make_phrases(g, phrase, {1});
  Var pv = g.constant(part);
  auto a = rga_image_to_text(mv.mlp, pv, 1, g.constant(cap));
  auto b = rga_text_to_image(mt.mlp, ps, g.constant(cap));
  auto c = bfm_phrase_direction(mv.mlp, mt.mlp, pv, 1, ps);
  auto d = bfm_part_direction(mv.mlp, mt.mlp, pv, 1, ps);
  g.evaluate();
  CHECK(a.weights[0].value()[0] == 1.0);
  CHECK(b.weights[0].value()[0] == 1.0);
  const Vec p = row(part, 0), f = row(phrase, 0), t = row(cap, 0);
  CHECK(a.sim.value()[0] == doctest::Approx(cosine(mv(p), t)).epsilon(1e-12));
  CHECK(b.sim.value()[0] == doctest::Approx(cosine(f, t)).epsilon(1e-12));
  CHECK(c.sim.value()[0] == doctest::Approx(cosine(mv(p), mt(f))).epsilon(1e-12));
  CHECK(d.sim.value()[0] == doctest::Approx(cosine(mt(f), mv(p))).epsilon(1e-12));
}

TEST_CASE("global contrast is the cosine grid") {
  Rng rng(37);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({2, 4}, rng);
  Graph g;
  Var s = global_contrast(g.constant(a), g.constant(b));
  g.evaluate();
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) CHECK(s.value()[i * 2 + j] == doctest::Approx(cosine(row(a, i), row(b, j))));
  }
  Graph h;
  CHECK_THROWS_AS(global_contrast(h.constant(a), h.constant(Tensor({2, 5}))), ShapeError);
}

TEST_CASE("similarity fusion") {
  const SimilarityBundle b{0.5, 0.3, 0.5, 0.2, 0.4};
  CHECK(b.s_R() == doctest::Approx(0.4));
  CHECK(b.s_L() == doctest::Approx(0.3));
  CHECK(fuse(b, 1.0, 1.0) == doctest::Approx(1.2));
  CHECK(fuse(b, 1.0, 2.0) == doctest::Approx(1.5));
  CHECK_THROWS(fuse(b, -0.1, 0.0));

  Rng rng(38);
  for (int i = 0; i < 200; ++i) {
    SimilarityBundle r{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1),
                       rng.uniform(-1, 1)};
    CHECK(fuse(r, 0.0, 0.0) == r.s_G);
    const double l1 = rng.uniform(0, 3), l2 = rng.uniform(0, 3);
    CHECK(fuse(r, l1, l2) == doctest::Approx(r.s_G + l1 * (r.s_I + r.s_T) / 2 + l2 * (r.s_P + r.s_N) / 2));
  }
}
