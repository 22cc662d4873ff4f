#pragma once

// The three alignment granularities and their fusion.
//
// Every function works on a whole grid at once: U images (parts stored
// image-major as [U*n, part_dim]) against Q captions. Similarity outputs are
// [U, Q] with rows = images and columns = captions.
//
// Attention scores always compare MLP-lifted vectors; aggregation sums the raw
// components; the aggregate is lifted through the same MLP before the final
// cosine so that both sides live in the joint dimension.

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "mia/autodiff.hpp"
#include "mia/model.hpp"

namespace mia {

/// Phrase features of a caption batch: rows [offset[q], offset[q] + count[q]) of `features` belong to caption q.
struct PhraseSet {
  Var features;  // [M, N]; invalid when no caption has phrases
  std::vector<std::size_t> offset;
  std::vector<std::size_t> count;

  std::size_t captions() const { return count.size(); }
  bool any() const { return features.valid(); }
};

/// Similarities plus, per caption, the attention weights of that direction (invalid Var when m = 0).
struct DirectionResult {
  Var sim;  // [U, Q]
  std::vector<Var> weights;
};

/// Global similarity for every (image, caption): cosine of the two global vectors.
inline Var global_contrast(Var images_global, Var captions_global) {
  if (images_global.dim(1) != captions_global.dim(1)) {
    throw ShapeError("global_contrast: |I| = " + std::to_string(images_global.dim(1)) +
                     " differs from |T| = " + std::to_string(captions_global.dim(1)));
  }
  return matmul(normalize_rows(images_global), normalize_rows(captions_global), true);
}

/// Image-to-text relation alignment. weights: [U, Q, n], v over parts for each pair.
inline DirectionResult rga_image_to_text(const Mlp& mlp_v, Var parts, std::size_t n, Var captions_global,
                                         double temperature = 1.0) {
  const std::size_t U = parts.dim(0) / n;
  const std::size_t Q = captions_global.dim(0);
  const std::size_t Dp = parts.dim(1);
  Var lifted = mlp_v(parts);                                                      // [U*n, D]
  Var scores = matmul(normalize_rows(lifted), normalize_rows(captions_global), true);  // [U*n, Q]
  scores = permute(reshape(scores, {U, n, Q}), {0, 2, 1});                        // [U, Q, n]
  if (temperature != 1.0) scores = scale(scores, 1.0 / temperature);
  Var v = softmax(scores);
  Var aggregated = bmm(v, reshape(parts, {U, n, Dp}));  // attended image vector per pair, [U, Q, Dp]
  Var lifted_agg = mlp_v(reshape(aggregated, {U * Q, Dp}));
  std::vector<std::size_t> tile(U * Q);
  for (std::size_t u = 0; u < U; ++u) {
    for (std::size_t q = 0; q < Q; ++q) tile[u * Q + q] = q;
  }
  Var sim = reshape(cosine_rows(lifted_agg, gather_rows(captions_global, tile)), {U, Q});
  return {sim, {v}};
}

namespace detail {

// Assembles per-caption [U] columns into [U, Q]; captions without phrases contribute zeros.
inline Var assemble_columns(Graph& g, std::size_t U, const std::vector<Var>& columns) {
  std::vector<Var> cols;
  cols.reserve(columns.size());
  for (const Var& c : columns) cols.push_back(c.valid() ? reshape(c, {U, 1}) : g.constant(Tensor({U, 1})));
  return concat(cols, 1);
}

inline std::vector<std::size_t> iota_repeat(std::size_t outer, std::size_t inner) {
  std::vector<std::size_t> idx(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) idx[o * inner + i] = i;
  }
  return idx;
}

}  // namespace detail

/// Text-to-image relation alignment. weights[q]: [U, m_q], t over phrases for each image.
inline DirectionResult rga_text_to_image(const Mlp& mlp_t, const PhraseSet& phrases, Var images_global,
                                         double temperature = 1.0) {
  Graph& g = *images_global.graph;
  const std::size_t U = images_global.dim(0);
  const std::size_t Q = phrases.captions();
  DirectionResult out;
  out.weights.resize(Q);
  std::vector<Var> columns(Q);
  if (phrases.any()) {
    Var lifted_all = normalize_rows(mlp_t(phrases.features));
    Var img_n = normalize_rows(images_global);
    for (std::size_t q = 0; q < Q; ++q) {
      const std::size_t m = phrases.count[q];
      if (m == 0) continue;
      Var raw = slice(phrases.features, 0, phrases.offset[q], m);  // [m, N]
      Var lifted = slice(lifted_all, 0, phrases.offset[q], m);
      Var scores = matmul(img_n, lifted, true);  // [U, m]
      if (temperature != 1.0) scores = scale(scores, 1.0 / temperature);
      Var t = softmax(scores);
      Var aggregated = matmul(t, raw);  // attended caption vector per image, [U, N]
      columns[q] = cosine_rows(aggregated, images_global);
      out.weights[q] = t;
    }
  }
  out.sim = detail::assemble_columns(g, U, columns);
  return out;
}

/// Phrase-related direction of fine-grained matching. weights[q]: [U, m_q, n] (alpha).
inline DirectionResult bfm_phrase_direction(const Mlp& mlp_v, const Mlp& mlp_t, Var parts, std::size_t n,
                                            const PhraseSet& phrases, double temperature = 1.0) {
  Graph& g = *parts.graph;
  const std::size_t U = parts.dim(0) / n;
  const std::size_t Dp = parts.dim(1);
  const std::size_t Q = phrases.captions();
  DirectionResult out;
  out.weights.resize(Q);
  std::vector<Var> columns(Q);
  if (phrases.any()) {
    Var parts_n = normalize_rows(mlp_v(parts));          // [U*n, D]
    Var phrases_lifted = mlp_t(phrases.features);        // [M, D]
    Var phrases_n = normalize_rows(phrases_lifted);
    Var parts3 = reshape(parts, {U, n, Dp});
    for (std::size_t q = 0; q < Q; ++q) {
      const std::size_t m = phrases.count[q];
      if (m == 0) continue;
      Var ph_n = slice(phrases_n, 0, phrases.offset[q], m);
      Var ph_lifted = slice(phrases_lifted, 0, phrases.offset[q], m);
      Var scores = matmul(ph_n, parts_n, true);                          // [m, U*n]
      scores = permute(reshape(scores, {m, U, n}), {1, 0, 2});          // [U, m, n]
      if (temperature != 1.0) scores = scale(scores, 1.0 / temperature);
      Var alpha = softmax(scores);
      Var aggregated = bmm(alpha, parts3);                               // I_i per pair, [U, m, Dp]
      Var lifted = mlp_v(reshape(aggregated, {U * m, Dp}));
      Var cos = cosine_rows(lifted, gather_rows(ph_lifted, detail::iota_repeat(U, m)));
      columns[q] = mean(reshape(cos, {U, m}), 1);
      out.weights[q] = alpha;
    }
  }
  out.sim = detail::assemble_columns(g, U, columns);
  return out;
}

/// Part-related direction of fine-grained matching. weights[q]: [U*n, m_q] (beta, image-major rows).
inline DirectionResult bfm_part_direction(const Mlp& mlp_v, const Mlp& mlp_t, Var parts, std::size_t n,
                                          const PhraseSet& phrases, double temperature = 1.0) {
  Graph& g = *parts.graph;
  const std::size_t U = parts.dim(0) / n;
  const std::size_t Q = phrases.captions();
  DirectionResult out;
  out.weights.resize(Q);
  std::vector<Var> columns(Q);
  if (phrases.any()) {
    Var parts_lifted = mlp_v(parts);                     // [U*n, D]
    Var parts_n = normalize_rows(parts_lifted);
    Var phrases_n = normalize_rows(mlp_t(phrases.features));
    for (std::size_t q = 0; q < Q; ++q) {
      const std::size_t m = phrases.count[q];
      if (m == 0) continue;
      Var raw = slice(phrases.features, 0, phrases.offset[q], m);
      Var scores = matmul(parts_n, slice(phrases_n, 0, phrases.offset[q], m), true);  // [U*n, m]
      if (temperature != 1.0) scores = scale(scores, 1.0 / temperature);
      Var beta = softmax(scores);
      Var aggregated = matmul(beta, raw);  // T_k per part, [U*n, N]
      Var cos = cosine_rows(mlp_t(aggregated), parts_lifted);
      columns[q] = mean(reshape(cos, {U, n}), 1);
      out.weights[q] = beta;
    }
  }
  out.sim = detail::assemble_columns(g, U, columns);
  return out;
}

/// The five granularity similarities of one image-caption pair.
struct SimilarityBundle {
  double s_G = 0.0;
  double s_I = 0.0;
  double s_T = 0.0;
  double s_P = 0.0;
  double s_N = 0.0;

  double s_R() const { return (s_I + s_T) / 2.0; }
  double s_L() const { return (s_P + s_N) / 2.0; }
};

/// Global score plus l1 * relation score plus l2 * fine-grained score. Terms with a zero weight are omitted, so zero weights return the global score exactly.
inline double fuse(const SimilarityBundle& b, double lambda1, double lambda2) {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("fusion weights must be >= 0");
  double s = b.s_G;
  if (lambda1 != 0.0) s += lambda1 * b.s_R();
  if (lambda2 != 0.0) s += lambda2 * b.s_L();
  return s;
}

}  // namespace mia
