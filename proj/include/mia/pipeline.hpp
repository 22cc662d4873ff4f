#pragma once

// Encodes a batch of images and captions inside one graph and computes the similarity grids.

#include <cstdint>
#include <vector>

#include "mia/alignment.hpp"
#include "mia/autodiff.hpp"
#include "mia/config.hpp"
#include "mia/model.hpp"
#include "mia/text.hpp"

namespace mia {

struct EncodedBatch {
  Var feature_map;     // [U, Cf, Hf, Wf]
  Var image_global;    // I, [U, V]
  Var parts;           // P, [U*n, part_dim]
  Var caption_global;  // T, [Q, C]
  PhraseSet phrases;   // N, per caption
  std::size_t images = 0;
  std::size_t captions = 0;
};

/// images: [U, 3, H, W]. Local components (parts, phrases) are built only when `with_local` is set.
inline EncodedBatch encode_batch(Graph& g, const MiaModel& model, const Tensor& images,
                                 const std::vector<const text::TextSample*>& captions, bool with_local) {
  EncodedBatch enc;
  if (!images.empty()) {
    enc.images = images.dim(0);
    enc.feature_map = model.visual_backbone(g.constant(images));
    enc.image_global = model.global_visual(enc.feature_map);
    if (with_local) enc.parts = model.part_features(enc.feature_map);
  }
  enc.captions = captions.size();
  if (!captions.empty()) {
    std::vector<std::vector<std::size_t>> sentences;
    sentences.reserve(captions.size());
    for (const auto* c : captions) sentences.push_back(c->indices);
    enc.caption_global = model.sentence_project(model.text_hidden(g, sentences));
    if (with_local) {
      std::vector<std::vector<std::size_t>> phrase_seqs;
      for (const auto* c : captions) {
        enc.phrases.offset.push_back(phrase_seqs.size());
        enc.phrases.count.push_back(c->phrase_indices.size());
        for (const auto& p : c->phrase_indices) phrase_seqs.push_back(p);
      }
      if (!phrase_seqs.empty()) enc.phrases.features = model.phrase_project(model.text_hidden(g, phrase_seqs));
    }
  }
  return enc;
}

/// Which similarity grids to build, using the matching-loss bits of LossTerm.
inline constexpr std::uint8_t kAllSimilarities = kMatchGlobal | kMatchIT | kMatchTI | kMatchPN | kMatchNP;

struct SimilarityGrid {
  Var s_G, s_I, s_T, s_P, s_N;  // [U, Q] each; invalid when not requested
  DirectionResult image_to_text, text_to_image, phrase_dir, part_dir;
};

inline SimilarityGrid compute_similarities(const MiaModel& model, const EncodedBatch& enc, std::uint8_t which) {
  const std::size_t n = model.config().parts;
  const double temp = model.config().attention_temperature;
  SimilarityGrid grid;
  if (which & kMatchGlobal) grid.s_G = global_contrast(enc.image_global, enc.caption_global);
  if (which & kMatchIT) {
    grid.image_to_text = rga_image_to_text(model.rga_visual_mlp(), enc.parts, n, enc.caption_global, temp);
    grid.s_I = grid.image_to_text.sim;
  }
  if (which & kMatchTI) {
    grid.text_to_image = rga_text_to_image(model.rga_text_mlp(), enc.phrases, enc.image_global, temp);
    grid.s_T = grid.text_to_image.sim;
  }
  if (which & kMatchPN) {
    grid.phrase_dir = bfm_phrase_direction(model.bfm_visual_mlp(), model.bfm_text_mlp(), enc.parts, n, enc.phrases, temp);
    grid.s_P = grid.phrase_dir.sim;
  }
  if (which & kMatchNP) {
    grid.part_dir = bfm_part_direction(model.bfm_visual_mlp(), model.bfm_text_mlp(), enc.parts, n, enc.phrases, temp);
    grid.s_N = grid.part_dir.sim;
  }
  return grid;
}

}  // namespace mia
