#pragma once

// Identity classification loss, sum-of-hinge matching loss, and the per-step composite losses.

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mia/autodiff.hpp"
#include "mia/config.hpp"
#include "mia/model.hpp"
#include "mia/pipeline.hpp"
#include "mia/text.hpp"

namespace mia {

/// Mean softmax cross-entropy of logits [B, K] against labels (one per row); result shape [1].
inline Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels) {
  Graph& g = *logits.graph;
  if (logits.shape().size() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  for (auto y : labels) {
    if (y >= K) throw std::out_of_range("identity label " + std::to_string(y) + " outside [0, " + std::to_string(K) + ")");
  }
  auto probs = std::make_shared<Tensor>();
  return g.add_node(
      "softmax_ce", {logits}, {1},
      [=](Graph& gr, Node& n) {
        const Tensor& x = gr.in(n, 0);
        *probs = Tensor({B, K});
        double loss = 0.0;
        for (std::size_t i = 0; i < B; ++i) {
          const double* row = x.data() + i * K;
          double mx = row[0];
          for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
          double z = 0.0;
          for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
          const double lse = mx + std::log(z);
          for (std::size_t k = 0; k < K; ++k) (*probs)[i * K + k] = std::exp(row[k] - lse);
          loss += lse - row[labels[i]];
        }
        n.value = Tensor::scalar(loss / static_cast<double>(B));
      },
      [=](Graph& gr, Node& n) {
        if (Tensor* gx = gr.grad_in(n, 0)) {
          const double s = n.grad[0] / static_cast<double>(B);
          for (std::size_t i = 0; i < B; ++i) {
            for (std::size_t k = 0; k < K; ++k) {
              const double target = k == labels[i] ? 1.0 : 0.0;
              (*gx)[i * K + k] += s * ((*probs)[i * K + k] - target);
            }
          }
        }
      });
}

/// Sum of hinges over every mismatched (i, j), both directions, on a square similarity matrix.
/// `exclude` (row-major B*B, nonzero = skip) removes pairs that must not act as negatives.
inline Var sh_matching_loss(Var S, double margin, const std::vector<std::uint8_t>& exclude = {}) {
  Graph& g = *S.graph;
  if (S.shape().size() != 2 || S.dim(0) != S.dim(1)) {
    throw ShapeError("sh_matching_loss: similarity matrix must be square, got " + shape_str(S.shape()));
  }
  const std::size_t B = S.dim(0);
  if (!exclude.empty() && exclude.size() != B * B) throw ShapeError("sh_matching_loss: exclusion mask size mismatch");
  if (B < 2) return g.constant(Tensor({1}));
  std::vector<std::size_t> diag_idx(B);
  Tensor mask({B, B}, 1.0);
  for (std::size_t i = 0; i < B; ++i) {
    diag_idx[i] = i * B + i;
    mask[i * B + i] = 0.0;
  }
  for (std::size_t k = 0; k < exclude.size(); ++k) {
    if (exclude[k]) mask[k] = 0.0;
  }
  Var diag = gather_rows(reshape(S, {B * B, 1}), diag_idx);  // [B, 1]
  Var offset = sub(g.constant(Tensor({1, 1}, margin)), diag);
  Var m = g.constant(std::move(mask));
  Var rows = mul(hinge(add(S, offset)), m);             // a - S_ii + S_ij
  Var cols = mul(hinge(add(transpose(S), offset)), m);  // a - S_ii + S_ji
  return add(sum_all(rows), sum_all(cols));
}

/// Plain-value evaluation of the matching loss.
inline double sh_matching_loss(const Tensor& S, double margin) {
  Graph g;
  Var root = sh_matching_loss(g.constant(S), margin);
  g.evaluate();
  return root.value()[0];
}

/// Per-step loss values; absent terms are 0.
struct LossReport {
  int step = 0;
  std::size_t epoch = 0;
  double L_I = 0.0;
  double L_T = 0.0;
  double L_M_G = 0.0;
  double L_M_IT = 0.0;
  double L_M_TI = 0.0;
  double L_M_PN = 0.0;
  double L_M_NP = 0.0;

  double L1() const { return L_I + L_T; }
  double L2() const { return L1() + L_M_G + (L_M_IT + L_M_TI); }
  double L3() const { return L_M_PN + L_M_NP; }
  double total() const { return L2() + L3(); }

  std::array<double*, 7> fields() { return {&L_I, &L_T, &L_M_G, &L_M_IT, &L_M_TI, &L_M_PN, &L_M_NP}; }

  LossReport& accumulate(const LossReport& o, double w) {
    auto a = fields();
    auto b = const_cast<LossReport&>(o).fields();
    for (std::size_t k = 0; k < a.size(); ++k) *a[k] += w * *b[k];
    return *this;
  }

  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"step_id", step}, {"L_I", L_I},       {"L_T", L_T},
            {"L_M_G", L_M_G}, {"L_M_IT", L_M_IT}, {"L_M_TI", L_M_TI}, {"L_M_PN", L_M_PN},
            {"L_M_NP", L_M_NP}, {"total", total()}};
  }
};

/// Matched pairs of one minibatch. Images are deduplicated: pair i uses image image_of_pair[i].
struct PairBatch {
  Tensor images;  // [U, 3, H, W]
  std::vector<std::size_t> image_of_pair;
  std::vector<const text::TextSample*> captions;
  std::vector<std::size_t> labels;  // dense identity per pair

  std::size_t size() const { return captions.size(); }
};

/// Loss graph of one step on one batch.
struct StepLoss {
  int step = 0;
  Var total;
  std::array<Var, 7> terms;  // L_I, L_T, L_M_G, L_M_IT, L_M_TI, L_M_PN, L_M_NP
  EncodedBatch encoded;
  SimilarityGrid grid;

  LossReport report() const {
    LossReport r;
    r.step = step;
    auto f = r.fields();
    for (std::size_t k = 0; k < terms.size(); ++k) {
      if (terms[k].valid()) *f[k] = terms[k].value()[0];
    }
    return r;
  }
};

namespace detail {

// [U, Q] grid -> [B, B] with rows = images of the pairs and columns = captions of the pairs.
inline Var pair_matrix(Var grid, const std::vector<std::size_t>& image_of_pair) {
  return gather_rows(grid, image_of_pair);
}

// Restricts a square matrix to the given rows/columns.
inline Var square_subset(Var S, const std::vector<std::size_t>& keep) {
  return transpose(gather_rows(transpose(gather_rows(S, keep)), keep));
}

}  // namespace detail

/// Builds the loss of `step` (1, 2 or 3) as configured by the model's ablation.
/// Matching terms are normalized per pair; pairs whose caption has no phrase are left out of the
/// phrase-dependent terms. Pairs sharing an identity are never used as each other's negatives.
inline StepLoss build_step_loss(Graph& g, const MiaModel& model, const PairBatch& batch, int step, double margin) {
  if (step < 1 || step > 3) throw std::invalid_argument("unknown training step " + std::to_string(step));
  const std::uint8_t losses = model.ablation().losses[step - 1];
  if (losses == 0) throw std::invalid_argument("step " + std::to_string(step) + " has no loss terms in this configuration");
  const std::size_t B = batch.size();
  if (B == 0 || batch.image_of_pair.size() != B || batch.labels.size() != B) {
    throw std::invalid_argument("malformed pair batch");
  }

  const bool local = losses & (kMatchIT | kMatchTI | kMatchPN | kMatchNP);
  StepLoss out;
  out.step = step;
  out.encoded = encode_batch(g, model, batch.images, batch.captions, local);
  out.grid = compute_similarities(model, out.encoded, losses);

  std::vector<std::uint8_t> same_id(B * B, 0);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = 0; j < B; ++j) same_id[i * B + j] = batch.labels[i] == batch.labels[j];
  }
  std::vector<std::size_t> with_phrases;
  for (std::size_t i = 0; i < B; ++i) {
    if (!batch.captions[i]->phrase_indices.empty()) with_phrases.push_back(i);
  }
  std::vector<std::uint8_t> same_id_sub(with_phrases.size() * with_phrases.size());
  for (std::size_t a = 0; a < with_phrases.size(); ++a) {
    for (std::size_t b = 0; b < with_phrases.size(); ++b) {
      same_id_sub[a * with_phrases.size() + b] = same_id[with_phrases[a] * B + with_phrases[b]];
    }
  }

  auto matching = [&](Var grid, bool phrase_dependent) {
    Var S = detail::pair_matrix(grid, batch.image_of_pair);
    if (!phrase_dependent || with_phrases.size() == B) {
      return scale(sh_matching_loss(S, margin, same_id), 1.0 / static_cast<double>(B));
    }
    if (with_phrases.empty()) return g.constant(Tensor({1}));
    Var sub = detail::square_subset(S, with_phrases);
    return scale(sh_matching_loss(sub, margin, same_id_sub), 1.0 / static_cast<double>(with_phrases.size()));
  };

  if (losses & kIdentity) {
    Var img = gather_rows(out.encoded.image_global, batch.image_of_pair);
    out.terms[0] = softmax_cross_entropy(model.classify(img), batch.labels);
    out.terms[1] = softmax_cross_entropy(model.classify(out.encoded.caption_global), batch.labels);
  }
  if (losses & kMatchGlobal) out.terms[2] = matching(out.grid.s_G, false);
  if (losses & kMatchIT) out.terms[3] = matching(out.grid.s_I, false);
  if (losses & kMatchTI) out.terms[4] = matching(out.grid.s_T, true);
  if (losses & kMatchPN) out.terms[5] = matching(out.grid.s_P, true);
  if (losses & kMatchNP) out.terms[6] = matching(out.grid.s_N, true);

  for (const Var& t : out.terms) {
    if (!t.valid()) continue;
    out.total = out.total.valid() ? add(out.total, t) : t;
  }
  return out;
}

}  // namespace mia
