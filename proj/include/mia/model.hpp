#pragma once

// Learnable parameters of the model and the visual/textual encoders.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mia/autodiff.hpp"
#include "mia/config.hpp"
#include "mia/parameter.hpp"
#include "mia/rng.hpp"

namespace mia {

/// y = x W^T + b, with W stored as [out, in].
struct Linear {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;

  std::size_t in_dim() const { return weight->value.dim(1); }
  std::size_t out_dim() const { return weight->value.dim(0); }

  Var operator()(Var x) const {
    Graph& g = *x.graph;
    Var w = g.param(*weight);
    Var b = reshape(g.param(*bias), {1, out_dim()});
    return add(matmul(x, w, true), b);
  }
};

/// linear -> ReLU -> linear
struct Mlp {
  Linear first;
  Linear second;

  Var operator()(Var x) const { return second(relu(first(x))); }
};

/// One GRU direction; gate rows are ordered update (z), reset (r), candidate (n).
struct GruCell {
  Parameter* w_x = nullptr;  // [3H, E]
  Parameter* w_h = nullptr;  // [3H, H]
  Parameter* bias = nullptr;  // [3H]
};

class MiaModel {
 public:
  MiaModel(ModelConfig config, std::size_t vocab_rows, std::size_t num_ids, const AblationSpec& ablation,
           std::uint64_t seed)
      : config_(std::move(config)), vocab_rows_(vocab_rows), num_ids_(num_ids), ablation_(ablation) {
    config_.validate();
    if (vocab_rows == 0) throw std::invalid_argument("embedding table needs at least the <unk> row");
    if (num_ids == 0) throw std::invalid_argument("identity classifier needs at least one identity");
    Rng rng(seed);
    build(rng);
  }

  MiaModel(const MiaModel&) = delete;
  MiaModel& operator=(const MiaModel&) = delete;

  const ModelConfig& config() const { return config_; }
  const AblationSpec& ablation() const { return ablation_; }
  std::size_t vocab_rows() const { return vocab_rows_; }
  std::size_t num_ids() const { return num_ids_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  ParamGroup group_of(const Parameter& p) const { return groups_.at(index_of(p)); }

  /// Marks exactly the parameters trainable in `step` as requiring gradients.
  void activate_step(int step) {
    params_.for_each([&](Parameter& p) { p.requires_grad = p.trainable_in(step); });
  }
  void require_all_grads(bool on = true) {
    params_.for_each([&](Parameter& p) { p.requires_grad = on; });
  }

  // ---- visual path -------------------------------------------------------------

  /// Stride-2 conv+ReLU blocks: [B,3,H,W] -> [B,Cf,H/16,W/16].
  Var visual_backbone(Var images) const {
    const Shape s = images.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != config_.image_height || s[3] != config_.image_width) {
      throw ShapeError("visual_backbone expects [B, 3, " + std::to_string(config_.image_height) + ", " +
                       std::to_string(config_.image_width) + "], got " + shape_str(s));
    }
    Graph& g = *images.graph;
    Var x = images;
    for (const auto& layer : conv_layers_) {
      x = relu(conv2d(x, g.param(*layer.weight), g.param(*layer.bias), 2, 1));
    }
    return x;
  }

  /// Global mean pooling followed by the global visual FC layer: I, [B, V].
  Var global_visual(Var feature_map) const {
    const Shape s = feature_map.shape();
    Var pooled = mean(reshape(feature_map, {s[0], s[1], s[2] * s[3]}), 2);
    return visual_fc_(pooled);
  }

  /// Mean of every vertical stripe, [B*n, Cf]; stripe k covers feature rows [k*Hf/n, (k+1)*Hf/n).
  Var stripe_pool(Var feature_map) const {
    const Shape s = feature_map.shape();
    const std::size_t n = config_.parts;
    if (s[2] % n != 0) {
      throw ShapeError("feature-map height " + std::to_string(s[2]) + " not divisible by " + std::to_string(n));
    }
    Var pooled = mean(reshape(feature_map, {s[0], s[1], n, (s[2] / n) * s[3]}), 3);  // [B, Cf, n]
    return reshape(permute(pooled, {0, 2, 1}), {s[0] * n, s[1]});
  }

  /// Part features P_1..P_n for every image, [B*n, part_dim] (image-major).
  Var part_features(Var feature_map) const { return part_conv_(stripe_pool(feature_map)); }

  // ---- textual path --------------------------------------------------------------

  /// Bi-GRU over each token-index sequence; returns [h_fwd_last, h_bwd_last] per sequence, [S, 2H].
  Var text_hidden(Graph& g, const std::vector<std::vector<std::size_t>>& sequences) const {
    if (sequences.empty()) throw std::invalid_argument("text_hidden: no sequences");
    for (const auto& s : sequences) {
      if (s.empty()) throw std::invalid_argument("text_hidden: empty token sequence");
      for (auto t : s) {
        if (t >= vocab_rows_) throw std::out_of_range("token index " + std::to_string(t) + " outside vocabulary");
      }
    }
    std::vector<std::vector<std::size_t>> reversed = sequences;
    for (auto& s : reversed) std::reverse(s.begin(), s.end());
    Var fwd = run_gru(g, gru_fwd_, sequences);
    Var bwd = run_gru(g, gru_bwd_, reversed);
    return concat({fwd, bwd}, 1);
  }

  /// T = W_g h + b_g
  Var sentence_project(Var hidden) const { return sentence_fc_(hidden); }
  /// Phrase FC over the Bi-GRU state.
  Var phrase_project(Var hidden) const { return phrase_fc_(hidden); }

  /// Identity logits W_s x + b_s, shared by both modalities.
  Var classify(Var features) const { return classifier_(features); }

  const Mlp& rga_visual_mlp() const { return rga_v_; }
  const Mlp& rga_text_mlp() const { return rga_t_; }
  const Mlp& bfm_visual_mlp() const { return bfm_v_; }
  const Mlp& bfm_text_mlp() const { return bfm_t_; }
  const Linear& sentence_fc() const { return sentence_fc_; }
  const Linear& phrase_fc() const { return phrase_fc_; }
  const Linear& visual_fc() const { return visual_fc_; }
  const Linear& part_conv() const { return part_conv_; }
  const Linear& classifier() const { return classifier_; }
  const GruCell& gru_forward() const { return gru_fwd_; }
  const GruCell& gru_backward() const { return gru_bwd_; }
  Parameter& embedding() const { return *embedding_; }

 private:
  std::size_t index_of(const Parameter& p) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (&params_[i] == &p) return i;
    }
    throw std::out_of_range("parameter not owned by this model: " + p.name);
  }

  StepMask steps_for(ParamGroup g) const {
    StepMask m = 0;
    for (int s = 1; s <= 3; ++s) {
      if (ablation_.groups[s - 1] & group_bit(g)) m |= step_bit(s);
    }
    return m;
  }

  // Xavier-uniform block [rows, cols] with the given fans.
  static void xavier(Rng& rng, Tensor& t, std::size_t offset, std::size_t count, std::size_t fan_in,
                     std::size_t fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (std::size_t i = 0; i < count; ++i) t[offset + i] = rng.uniform(-a, a);
  }

  Parameter& add_matrix(Rng& rng, const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out,
                        ParamGroup g) {
    Tensor t(shape);
    xavier(rng, t, 0, t.numel(), fan_in, fan_out);
    groups_.push_back(g);
    return params_.add(name, std::move(t), steps_for(g));
  }

  Parameter& add_bias(const std::string& name, std::size_t n, ParamGroup g) {
    groups_.push_back(g);
    return params_.add(name, Tensor({n}), steps_for(g));
  }

  Linear add_linear(Rng& rng, const std::string& name, std::size_t in, std::size_t out, ParamGroup g) {
    Linear l;
    l.weight = &add_matrix(rng, name + ".weight", {out, in}, in, out, g);
    l.bias = &add_bias(name + ".bias", out, g);
    return l;
  }

  Mlp add_mlp(Rng& rng, const std::string& name, std::size_t in, ParamGroup g) {
    Mlp m;
    m.first = add_linear(rng, name + ".layer1", in, config_.mlp_hidden, g);
    m.second = add_linear(rng, name + ".layer2", config_.mlp_hidden, config_.joint_dim, g);
    return m;
  }

  GruCell add_gru(Rng& rng, const std::string& name) {
    const std::size_t H = config_.gru_hidden, E = config_.embed_dim;
    GruCell c;
    // Each gate block gets its own Xavier fan (E -> H, H -> H).
    Tensor wx({3 * H, E});
    Tensor wh({3 * H, H});
    for (std::size_t gate = 0; gate < 3; ++gate) {
      xavier(rng, wx, gate * H * E, H * E, E, H);
      xavier(rng, wh, gate * H * H, H * H, H, H);
    }
    groups_.push_back(ParamGroup::kTextCore);
    c.w_x = &params_.add(name + ".w_x", std::move(wx), steps_for(ParamGroup::kTextCore));
    groups_.push_back(ParamGroup::kTextCore);
    c.w_h = &params_.add(name + ".w_h", std::move(wh), steps_for(ParamGroup::kTextCore));
    c.bias = &add_bias(name + ".bias", 3 * H, ParamGroup::kTextCore);
    return c;
  }

  void build(Rng& rng) {
    const auto& c = config_;
    std::size_t in_ch = 3;
    for (std::size_t i = 0; i < c.backbone_channels.size(); ++i) {
      const std::size_t out_ch = c.backbone_channels[i];
      const std::string name = "backbone.conv" + std::to_string(i + 1);
      Linear layer;
      layer.weight = &add_matrix(rng, name + ".weight", {out_ch, in_ch, 3, 3}, in_ch * 9, out_ch * 9,
                                 ParamGroup::kBackbone);
      layer.bias = &add_bias(name + ".bias", out_ch, ParamGroup::kBackbone);
      conv_layers_.push_back(layer);
      in_ch = out_ch;
    }
    visual_fc_ = add_linear(rng, "visual.global_fc", c.feature_channels(), c.joint_dim, ParamGroup::kVisualFc);
    part_conv_ = add_linear(rng, "visual.part_conv", c.feature_channels(), c.part_dim, ParamGroup::kPartConv);

    embedding_ = &add_matrix(rng, "text.embedding.weight", {vocab_rows_, c.embed_dim}, vocab_rows_, c.embed_dim,
                             ParamGroup::kTextCore);
    gru_fwd_ = add_gru(rng, "text.gru.forward");
    gru_bwd_ = add_gru(rng, "text.gru.backward");
    sentence_fc_ = add_linear(rng, "text.sentence_fc", 2 * c.gru_hidden, c.joint_dim, ParamGroup::kSentenceFc);
    phrase_fc_ = add_linear(rng, "text.phrase_fc", 2 * c.gru_hidden, c.joint_dim, ParamGroup::kPhraseFc);

    rga_v_ = add_mlp(rng, "rga.mlp_v", c.part_dim, ParamGroup::kRgaMlps);
    rga_t_ = add_mlp(rng, "rga.mlp_t", c.joint_dim, ParamGroup::kRgaMlps);
    bfm_v_ = add_mlp(rng, "bfm.mlp_v", c.part_dim, ParamGroup::kBfmMlps);
    bfm_t_ = add_mlp(rng, "bfm.mlp_t", c.joint_dim, ParamGroup::kBfmMlps);

    classifier_ = add_linear(rng, "classifier", c.joint_dim, num_ids_, ParamGroup::kClassifier);
  }

  // Masked batch recurrence: sequences shorter than the longest keep their state once exhausted.
  Var run_gru(Graph& g, const GruCell& cell, const std::vector<std::vector<std::size_t>>& seqs) const {
    const std::size_t S = seqs.size();
    const std::size_t H = config_.gru_hidden;
    std::size_t steps = 0;
    for (const auto& s : seqs) steps = std::max(steps, s.size());

    std::vector<std::size_t> flat;
    flat.reserve(steps * S);
    for (std::size_t t = 0; t < steps; ++t) {
      for (const auto& s : seqs) flat.push_back(t < s.size() ? s[t] : kPadToken);
    }
    Var x_all = gather_rows(g.param(*embedding_), flat);  // [steps*S, E]
    Var gx_all = add(matmul(x_all, g.param(*cell.w_x), true), reshape(g.param(*cell.bias), {1, 3 * H}));
    Var w_h = g.param(*cell.w_h);
    Var u_zr = slice(w_h, 0, 0, 2 * H);
    Var u_n = slice(w_h, 0, 2 * H, H);

    Var h = g.constant(Tensor({S, H}));
    for (std::size_t t = 0; t < steps; ++t) {
      Var gx = slice(gx_all, 0, t * S, S);
      Var gh = matmul(h, u_zr, true);
      Var z = sigmoid(slice(gx, 1, 0, H) + slice(gh, 1, 0, H));
      Var r = sigmoid(slice(gx, 1, H, H) + slice(gh, 1, H, H));
      Var cand = tanh(slice(gx, 1, 2 * H, H) + matmul(r * h, u_n, true));
      Var h_new = h + z * (cand - h);
      bool all_active = true;
      Tensor mask({S, 1});
      for (std::size_t i = 0; i < S; ++i) {
        mask[i] = t < seqs[i].size() ? 1.0 : 0.0;
        all_active = all_active && t < seqs[i].size();
      }
      h = all_active ? h_new : h + g.constant(std::move(mask)) * (h_new - h);
    }
    return h;
  }

  static constexpr std::size_t kPadToken = 0;

  ModelConfig config_;
  std::size_t vocab_rows_;
  std::size_t num_ids_;
  AblationSpec ablation_;
  ParameterStore params_;
  std::vector<ParamGroup> groups_;

  std::vector<Linear> conv_layers_;
  Linear visual_fc_, part_conv_;
  Parameter* embedding_ = nullptr;
  GruCell gru_fwd_, gru_bwd_;
  Linear sentence_fc_, phrase_fc_;
  Mlp rga_v_, rga_t_, bfm_v_, bfm_t_;
  Linear classifier_;
};

}  // namespace mia
