#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "mia/eval.hpp"
#include "support.hpp"

using namespace mia;

namespace {

// Full sort of each row; a hit is any same-id item whose score beats the K-th best or ties it at a lower index.
double recall_oracle(const Tensor& S, const std::vector<long long>& qid, const std::vector<long long>& gid,
                     std::size_t K) {
  const std::size_t Q = S.dim(0), G = S.dim(1);
  std::size_t hits = 0;
  for (std::size_t q = 0; q < Q; ++q) {
    std::vector<std::pair<double, std::size_t>> rowv;
    for (std::size_t g = 0; g < G; ++g) rowv.push_back({-S[q * G + g], g});
    std::sort(rowv.begin(), rowv.end());
    bool hit = false;
    for (std::size_t r = 0; r < std::min(K, G); ++r) hit = hit || gid[rowv[r].second] == qid[q];
    hits += hit;
  }
  return static_cast<double>(hits) / static_cast<double>(Q);
}

}  // namespace

TEST_CASE("recall hand case") {
  const Tensor S = Tensor::matrix(3, 4, {0.9, 0.1, 0.2, 0.3,  //
                                         0.5, 0.4, 0.3, 0.2,  //
                                         0.1, 0.2, 0.8, 0.7});
  const std::vector<long long> q = {1, 2, 3}, g = {1, 2, 3, 4};
  CHECK(recall_at_k(S, q, g, 1) == doctest::Approx(2.0 / 3.0));
  CHECK(recall_at_k(S, q, g, 2) == 1.0);
  CHECK(recall_at_k(S, q, g, 5) == 1.0);
  CHECK_THROWS(recall_at_k(S, q, g, 0));
  CHECK_THROWS_AS(recall_at_k(S, {1, 2}, g, 1), ShapeError);
}

TEST_CASE("recall matches a full-sort oracle") {
  Rng rng(51);
  for (int t = 0; t < 50; ++t) {
    const std::size_t Q = 1 + rng.below(30), G = 1 + rng.below(30);
    Tensor S({Q, G});
    // Coarse values force plenty of ties.
    for (auto& v : S.values()) v = static_cast<double>(rng.below(5)) / 4.0;
    std::vector<long long> qid(Q), gid(G);
    for (auto& x : qid) x = static_cast<long long>(rng.below(6));
    for (auto& x : gid) x = static_cast<long long>(rng.below(6));
    double prev = 0.0;
    for (std::size_t K : {1, 5, 10, 40}) {
      const double r = recall_at_k(S, qid, gid, K);
      CHECK(r == recall_oracle(S, qid, gid, K));
      CHECK(r >= prev);
      prev = r;
    }
  }
}

TEST_CASE("reports, sweeps and granularities") {
  BundleMatrices b;
  Rng rng(52);
  for (auto* m : {&b.s_G, &b.s_I, &b.s_T, &b.s_P, &b.s_N}) *m = testing::random_tensor({6, 4}, rng);
  b.query_ids = {0, 0, 1, 1, 2, 3};
  b.gallery_ids = {0, 1, 2, 3};
  const Tensor fused = b.scores(Granularity::kFused, 1.0, 0.5);
  for (std::size_t k = 0; k < fused.numel(); ++k) {
    CHECK(fused[k] == doctest::Approx(b.s_G[k] + (b.s_I[k] + b.s_T[k]) / 2 + 0.25 * (b.s_P[k] + b.s_N[k])));
  }
  CHECK(bit_identical(b.scores(Granularity::kFused, 0.0, 0.0), b.s_G));
  CHECK(bit_identical(b.scores(Granularity::kGlobal), b.s_G));

  const auto reports = sweep(b, {0.0, 1.0}, {0.0, 0.5});
  REQUIRE(reports.size() == 4);
  const auto direct = report_from_scores(fused, b, Granularity::kFused, 1.0, 0.5);
  CHECK(reports[3].r1 == direct.r1);
  CHECK(reports[3].ranked == direct.ranked);
  CHECK(reports[3].lambda2 == 0.5);
  CHECK(direct.ranked[0].size() == 4);
  CHECK(direct.total() == doctest::Approx(direct.r1 + direct.r5 + direct.r10));
  const auto j = direct.to_json();
  CHECK(j.at("granularity") == "sF");
  CHECK(!j.contains("ranked"));
  CHECK(format_reports(reports).find("sF") != std::string::npos);

  CHECK(parse_granularity("sR") == Granularity::kRelation);
  CHECK_THROWS(parse_granularity("x"));
}

TEST_CASE("lambda range parsing") {
  CHECK(parse_range("0.5") == std::vector<double>{0.5});
  const auto r = parse_range("0:1:0.25");
  REQUIRE(r.size() == 5);
  CHECK(r.back() == doctest::Approx(1.0));
  CHECK_THROWS(parse_range("1:0:0.1"));
  CHECK_THROWS(parse_range("0:1:0"));
  CHECK_THROWS(parse_range("a"));
  CHECK_THROWS(parse_range("0:1"));
}

TEST_CASE("warnings for untrained granularities") {
  const auto gc = AblationSpec::preset("gc");
  CHECK(lambda_warnings(gc, Granularity::kFused, 1.0, 0.5).size() == 2);
  CHECK(lambda_warnings(gc, Granularity::kFused, 0.0, 0.0).empty());
  CHECK(lambda_warnings(AblationSpec::preset("mia"), Granularity::kFused, 1.0, 0.5).empty());
  CHECK(lambda_warnings(AblationSpec::preset("gc+rga"), Granularity::kLocal, 0.0, 0.0).size() == 1);
}

TEST_CASE("evaluation on a tiny split matches the bundle") {
  const auto dir = testing::scratch_dir("eval_split");
  data::GenerateOptions opt;
  opt.train_ids = 3;
  opt.val_ids = 0;
  opt.test_ids = 0;
  opt.images_per_id = 2;
  data::synth_generate(opt, dir);
  auto ds = data::Dataset::load(dir / "train.jsonl");
  const auto vocab = text::build_vocab(ds.all_captions(), 1);
  ds.prepare_text(vocab, text::Lexicon::builtin());
  MiaModel model(ModelConfig::desk(), vocab.table_size(), ds.num_ids(), AblationSpec::preset("mia"), 9);

  const BundleMatrices b = split_bundle(model, ds);
  CHECK(b.queries() == 12);
  CHECK(b.gallery() == 6);
  // Spot-check one entry against a direct pairwise computation.
  const PairAttention pa = pair_attention(model, ds.image(4), ds.sample(1, 1));
  const SimilarityBundle e = b.at(3, 4);
  CHECK(e.s_G == doctest::Approx(pa.sims.s_G).epsilon(1e-9));
  CHECK(e.s_I == doctest::Approx(pa.sims.s_I).epsilon(1e-9));
  CHECK(e.s_T == doctest::Approx(pa.sims.s_T).epsilon(1e-9));
  CHECK(e.s_P == doctest::Approx(pa.sims.s_P).epsilon(1e-9));
  CHECK(e.s_N == doctest::Approx(pa.sims.s_N).epsilon(1e-9));
  double v = 0.0;
  for (double x : pa.v) v += x;
  CHECK(v == doctest::Approx(1.0));

  std::ostringstream warn;
  const auto fwd = evaluate(model, ds, 1.0, 0.5, Granularity::kFused, &warn);
  CHECK(warn.str().empty());
  CHECK(fwd.r1 == recall_at_k(b.scores(Granularity::kFused, 1.0, 0.5), b.query_ids, b.gallery_ids, 1));
  const auto back = evaluate(model, ds, 1.0, 0.5, Granularity::kFused, nullptr, true);
  CHECK(back.ranked.size() == 6);
  CHECK(back.ranked[0].size() == 10);

  std::size_t counted = 0;
  const double margin = relation_attention_margin(model, ds, data::load_masks(dir / "masks.jsonl"), &counted);
  CHECK(counted > 0);
  CHECK(std::abs(margin) < 1.0);
}
