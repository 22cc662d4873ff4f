#pragma once

// Text-to-image retrieval: similarity bundles over a split, recall@K, lambda sweeps, attention dumps.

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mia/alignment.hpp"
#include "mia/data.hpp"
#include "mia/model.hpp"
#include "mia/pipeline.hpp"
#include "mia/train.hpp"

namespace mia {

/// Gallery indices of one score row, best first; equal scores keep the lower index first.
inline std::vector<std::size_t> rank_row(const double* scores, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

/// Fraction of queries (rows of S [Q, G]) with a same-person gallery item among their top K.
inline double recall_at_k(const Tensor& S, const std::vector<long long>& query_ids,
                          const std::vector<long long>& gallery_ids, std::size_t K) {
  if (K == 0) throw std::invalid_argument("recall_at_k: K must be >= 1");
  if (S.rank() != 2 || S.dim(0) != query_ids.size() || S.dim(1) != gallery_ids.size()) {
    throw ShapeError("recall_at_k: matrix " + shape_str(S.shape()) + " vs " + std::to_string(query_ids.size()) +
                     " queries and " + std::to_string(gallery_ids.size()) + " gallery items");
  }
  const std::size_t Q = S.dim(0), G = S.dim(1);
  std::size_t hits = 0;
  for (std::size_t q = 0; q < Q; ++q) {
    const auto order = rank_row(S.data() + q * G, G);
    for (std::size_t r = 0; r < std::min(K, G); ++r) {
      if (gallery_ids[order[r]] == query_ids[q]) {
        ++hits;
        break;
      }
    }
  }
  return Q == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(Q);
}

enum class Granularity { kGlobal, kRelation, kLocal, kFused };

inline std::string granularity_name(Granularity g) {
  switch (g) {
    case Granularity::kGlobal: return "sG";
    case Granularity::kRelation: return "sR";
    case Granularity::kLocal: return "sL";
    case Granularity::kFused: return "sF";
  }
  return "?";
}

inline Granularity parse_granularity(const std::string& s) {
  if (s == "sG") return Granularity::kGlobal;
  if (s == "sR") return Granularity::kRelation;
  if (s == "sL") return Granularity::kLocal;
  if (s == "sF") return Granularity::kFused;
  throw std::invalid_argument("unknown report granularity '" + s + "' (sG, sR, sL, sF)");
}

/// The five similarity matrices of a split, [Q captions, G images] each.
struct BundleMatrices {
  Tensor s_G, s_I, s_T, s_P, s_N;
  std::vector<long long> query_ids;
  std::vector<long long> gallery_ids;
  std::vector<std::string> gallery_paths;

  std::size_t queries() const { return query_ids.size(); }
  std::size_t gallery() const { return gallery_ids.size(); }

  SimilarityBundle at(std::size_t q, std::size_t g) const {
    const std::size_t k = q * gallery() + g;
    return {s_G[k], s_I[k], s_T[k], s_P[k], s_N[k]};
  }

  /// Score matrix under a granularity; the fused one goes through fuse() entry by entry.
  Tensor scores(Granularity gran, double lambda1 = 0.0, double lambda2 = 0.0) const {
    Tensor out({queries(), gallery()});
    for (std::size_t q = 0; q < queries(); ++q) {
      for (std::size_t g = 0; g < gallery(); ++g) {
        const SimilarityBundle b = at(q, g);
        double s = 0.0;
        switch (gran) {
          case Granularity::kGlobal: s = b.s_G; break;
          case Granularity::kRelation: s = b.s_R(); break;
          case Granularity::kLocal: s = b.s_L(); break;
          case Granularity::kFused: s = fuse(b, lambda1, lambda2); break;
        }
        out[q * gallery() + g] = s;
      }
    }
    return out;
  }
};

/// Global and part features of every image, encoded once.
struct GalleryFeatures {
  Tensor global;  // [G, V]
  Tensor parts;   // [G*n, part_dim]
};

inline GalleryFeatures encode_gallery(const MiaModel& model, const data::Dataset& ds, std::size_t chunk = 16) {
  GalleryFeatures out;
  std::vector<double> gl, pa;
  std::size_t gdim = 0, pdim = 0;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t end = std::min(ds.size(), start + chunk);
    const Tensor& first = ds.image(start);
    Tensor imgs({end - start, first.dim(0), first.dim(1), first.dim(2)});
    for (std::size_t i = start; i < end; ++i) copy_image(ds.image(i), imgs.data() + (i - start) * first.numel(), false);
    Graph g;
    EncodedBatch enc = encode_batch(g, model, imgs, {}, true);
    g.evaluate();
    gdim = enc.image_global.dim(1);
    pdim = enc.parts.dim(1);
    gl.insert(gl.end(), enc.image_global.value().storage().begin(), enc.image_global.value().storage().end());
    pa.insert(pa.end(), enc.parts.value().storage().begin(), enc.parts.value().storage().end());
  }
  out.global = Tensor({ds.size(), gdim}, std::move(gl));
  out.parts = Tensor({ds.size() * model.config().parts, pdim}, std::move(pa));
  return out;
}

/// Scores every caption of `queries` against the gallery. Text must already be prepared on `queries`.
inline BundleMatrices compute_bundle(const MiaModel& model, const GalleryFeatures& gallery,
                                     const std::vector<const text::TextSample*>& queries,
                                     std::size_t chunk = 32) {
  const std::size_t G = gallery.global.dim(0), Q = queries.size();
  BundleMatrices b;
  for (Tensor* t : {&b.s_G, &b.s_I, &b.s_T, &b.s_P, &b.s_N}) *t = Tensor({Q, G});
  for (std::size_t start = 0; start < Q; start += chunk) {
    const std::size_t end = std::min(Q, start + chunk);
    std::vector<const text::TextSample*> part(queries.begin() + start, queries.begin() + end);
    Graph g;
    EncodedBatch enc = encode_batch(g, model, Tensor(), part, true);
    enc.images = G;
    enc.image_global = g.constant(gallery.global);
    enc.parts = g.constant(gallery.parts);
    SimilarityGrid grid = compute_similarities(model, enc, kAllSimilarities);
    g.evaluate();
    const std::array<std::pair<Var, Tensor*>, 5> outs = {
        {{grid.s_G, &b.s_G}, {grid.s_I, &b.s_I}, {grid.s_T, &b.s_T}, {grid.s_P, &b.s_P}, {grid.s_N, &b.s_N}}};
    for (const auto& [var, dst] : outs) {
      const Tensor& v = var.value();  // [G, chunk]
      for (std::size_t gi = 0; gi < G; ++gi) {
        for (std::size_t q = 0; q < end - start; ++q) (*dst)[(start + q) * G + gi] = v[gi * (end - start) + q];
      }
    }
  }
  return b;
}

/// Bundle of a whole split: both captions of every record query the split's images.
inline BundleMatrices split_bundle(const MiaModel& model, const data::Dataset& ds) {
  if (!ds.text_ready()) throw std::logic_error("split text has not been prepared");
  std::vector<const text::TextSample*> queries;
  BundleMatrices b;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      queries.push_back(&ds.sample(i, k));
    }
  }
  const GalleryFeatures gallery = encode_gallery(model, ds);
  b = compute_bundle(model, gallery, queries);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    b.query_ids.push_back(ds.record(i).person_id);
    b.query_ids.push_back(ds.record(i).person_id);
    b.gallery_ids.push_back(ds.record(i).person_id);
    b.gallery_paths.push_back(ds.record(i).image_path);
  }
  return b;
}

struct RetrievalReport {
  double r1 = 0.0, r5 = 0.0, r10 = 0.0;
  Granularity granularity = Granularity::kFused;
  double lambda1 = 0.0, lambda2 = 0.0;
  std::vector<std::vector<std::size_t>> ranked;  // top-10 gallery indices per query

  double total() const { return r1 + r5 + r10; }

  nlohmann::json to_json(bool with_rankings = false) const {
    nlohmann::json j = {{"granularity", granularity_name(granularity)},
                        {"lambda1", lambda1},
                        {"lambda2", lambda2},
                        {"R@1", r1},
                        {"R@5", r5},
                        {"R@10", r10},
                        {"Total", total()}};
    if (with_rankings) j["ranked"] = ranked;
    return j;
  }
};

inline RetrievalReport report_from_scores(const Tensor& S, const std::vector<long long>& query_ids,
                                          const std::vector<long long>& gallery_ids, Granularity gran, double l1,
                                          double l2) {
  RetrievalReport r;
  r.granularity = gran;
  r.lambda1 = l1;
  r.lambda2 = l2;
  r.r1 = recall_at_k(S, query_ids, gallery_ids, 1);
  r.r5 = recall_at_k(S, query_ids, gallery_ids, 5);
  r.r10 = recall_at_k(S, query_ids, gallery_ids, 10);
  const std::size_t G = gallery_ids.size();
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    auto order = rank_row(S.data() + q * G, G);
    order.resize(std::min<std::size_t>(10, G));
    r.ranked.push_back(std::move(order));
  }
  return r;
}

inline RetrievalReport report_from_scores(const Tensor& S, const BundleMatrices& b, Granularity gran, double l1,
                                          double l2) {
  return report_from_scores(S, b.query_ids, b.gallery_ids, gran, l1, l2);
}

/// Warnings for weights placed on granularities this ablation never trained.
inline std::vector<std::string> lambda_warnings(const AblationSpec& ab, Granularity gran, double l1, double l2) {
  std::vector<std::string> w;
  const bool fused = gran == Granularity::kFused;
  if ((gran == Granularity::kRelation || (fused && l1 > 0.0)) && !ab.relation_trained()) {
    w.push_back("relation alignment was not trained by ablation '" + ab.name + "'; lambda1 should be 0");
  }
  if ((gran == Granularity::kLocal || (fused && l2 > 0.0)) && !ab.local_trained()) {
    w.push_back("fine-grained matching was not trained by ablation '" + ab.name + "'; lambda2 should be 0");
  }
  return w;
}

/// Text-to-image retrieval by default; `image_queries` ranks captions for each image instead.
inline RetrievalReport evaluate(const MiaModel& model, const data::Dataset& ds, double l1, double l2, Granularity gran,
                                std::ostream* warn = &std::cerr, bool image_queries = false) {
  if (warn) {
    for (const auto& w : lambda_warnings(model.ablation(), gran, l1, l2)) *warn << "warning: " << w << "\n";
  }
  const BundleMatrices b = split_bundle(model, ds);
  const Tensor S = b.scores(gran, l1, l2);
  if (!image_queries) return report_from_scores(S, b, gran, l1, l2);
  Tensor St({b.gallery(), b.queries()});
  for (std::size_t q = 0; q < b.queries(); ++q) {
    for (std::size_t g = 0; g < b.gallery(); ++g) St[g * b.queries() + q] = S[q * b.gallery() + g];
  }
  return report_from_scores(St, b.gallery_ids, b.query_ids, gran, l1, l2);
}

/// Fused-score reports over a lambda grid, reusing one bundle.
inline std::vector<RetrievalReport> sweep(const BundleMatrices& b, const std::vector<double>& l1_grid,
                                          const std::vector<double>& l2_grid) {
  if (l1_grid.empty() || l2_grid.empty()) throw std::invalid_argument("sweep: empty lambda grid");
  std::vector<RetrievalReport> out;
  for (double l1 : l1_grid) {
    for (double l2 : l2_grid) out.push_back(report_from_scores(b.scores(Granularity::kFused, l1, l2), b, Granularity::kFused, l1, l2));
  }
  return out;
}

/// "a:b:step" (inclusive) or a single value.
inline std::vector<double> parse_range(const std::string& spec) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ':')) parts.push_back(item);
  auto num = [&](const std::string& s) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw std::invalid_argument("bad range '" + spec + "'");
    return v;
  };
  if (parts.size() == 1) return {num(parts[0])};
  if (parts.size() != 3) throw std::invalid_argument("range must be a:b:step, got '" + spec + "'");
  const double a = num(parts[0]), b = num(parts[1]), step = num(parts[2]);
  if (!(step > 0.0) || b < a) throw std::invalid_argument("range needs step > 0 and a <= b: '" + spec + "'");
  std::vector<double> out;
  const auto n = static_cast<std::size_t>(std::floor((b - a) / step + 1e-9));
  for (std::size_t i = 0; i <= n; ++i) out.push_back(a + static_cast<double>(i) * step);
  if (out.empty()) throw std::invalid_argument("empty range '" + spec + "'");
  return out;
}

/// Attention weights of every direction for one image-caption pair.
struct PairAttention {
  std::vector<double> v;                   // over parts
  std::vector<double> t;                   // over phrases
  std::vector<std::vector<double>> alpha;  // per phrase, over parts
  std::vector<std::vector<double>> beta;   // per part, over phrases
  SimilarityBundle sims;

  nlohmann::json to_json() const {
    return {{"v", v}, {"t", t}, {"alpha", alpha}, {"beta", beta},
            {"s_G", sims.s_G}, {"s_I", sims.s_I}, {"s_T", sims.s_T}, {"s_P", sims.s_P}, {"s_N", sims.s_N}};
  }
};

inline PairAttention pair_attention(const MiaModel& model, const Tensor& image, const text::TextSample& caption) {
  Graph g;
  Tensor batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  EncodedBatch enc = encode_batch(g, model, batch, {&caption}, true);
  SimilarityGrid grid = compute_similarities(model, enc, kAllSimilarities);
  g.evaluate();
  const std::size_t n = model.config().parts;
  const std::size_t m = caption.phrase_indices.size();
  PairAttention a;
  const Tensor& v = grid.image_to_text.weights[0].value();
  a.v.assign(v.storage().begin(), v.storage().end());
  if (m > 0) {
    const Tensor& t = grid.text_to_image.weights[0].value();
    a.t.assign(t.storage().begin(), t.storage().end());
    const Tensor& al = grid.phrase_dir.weights[0].value();  // [1, m, n]
    const Tensor& be = grid.part_dir.weights[0].value();    // [n, m]
    for (std::size_t j = 0; j < m; ++j) a.alpha.emplace_back(al.data() + j * n, al.data() + (j + 1) * n);
    for (std::size_t k = 0; k < n; ++k) a.beta.emplace_back(be.data() + k * m, be.data() + (k + 1) * m);
  }
  a.sims = {grid.s_G.value()[0], grid.s_I.value()[0], grid.s_T.value()[0], grid.s_P.value()[0], grid.s_N.value()[0]};
  return a;
}

/// Mean over matched captions of (mean v on mentioned parts) - (mean v on unmentioned parts).
/// Captions mentioning every part, or none, are skipped.
inline double relation_attention_margin(const MiaModel& model, const data::Dataset& ds,
                                        const std::map<std::string, std::vector<std::size_t>>& masks,
                                        std::size_t* counted = nullptr) {
  const std::size_t n = model.config().parts;
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto it = masks.find(ds.caption_id(i, k));
      if (it == masks.end()) throw std::runtime_error("no mention mask for caption " + ds.caption_id(i, k));
      std::vector<bool> mentioned(n, false);
      for (auto p : it->second) {
        if (p < n) mentioned[p] = true;
      }
      const auto hits = static_cast<std::size_t>(std::count(mentioned.begin(), mentioned.end(), true));
      if (hits == 0 || hits == n) continue;
      const PairAttention a = pair_attention(model, ds.image(i), ds.sample(i, k));
      double on = 0.0, off = 0.0;
      for (std::size_t p = 0; p < n; ++p) (mentioned[p] ? on : off) += a.v[p];
      total += on / static_cast<double>(hits) - off / static_cast<double>(n - hits);
      ++used;
    }
  }
  if (counted) *counted = used;
  return used == 0 ? 0.0 : total / static_cast<double>(used);
}

/// Aligned plain-text table of reports.
inline std::string format_reports(const std::vector<RetrievalReport>& reports) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-6s %8s %8s %8s %8s %8s %8s\n", "sim", "lambda1", "lambda2", "R@1", "R@5", "R@10",
                "Total");
  os << line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-6s %8.3f %8.3f %8.4f %8.4f %8.4f %8.4f\n", granularity_name(r.granularity).c_str(),
                  r.lambda1, r.lambda2, r.r1, r.r5, r.r10, r.total());
    os << line;
  }
  return os.str();
}

}  // namespace mia
