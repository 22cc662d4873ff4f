#pragma once

// Three-step training: identity pretraining, joint identity + matching, then BFM adapters only.

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "mia/checkpoint.hpp"
#include "mia/config.hpp"
#include "mia/data.hpp"
#include "mia/model.hpp"
#include "mia/objectives.hpp"
#include "mia/optim.hpp"
#include "mia/rng.hpp"

namespace mia {

class StepOrderError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Horizontally mirrored copy of a [3, H, W] image written into `dst`.
inline void copy_image(const Tensor& src, double* dst, bool mirror) {
  const std::size_t C = src.dim(0), H = src.dim(1), W = src.dim(2);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      const double* row = src.data() + (c * H + y) * W;
      double* out = dst + (c * H + y) * W;
      for (std::size_t x = 0; x < W; ++x) out[x] = row[mirror ? W - 1 - x : x];
    }
  }
}

/// Gathers (record, caption) pairs into a batch, deduplicating images in order of first use.
inline PairBatch make_batch(const data::Dataset& ds, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                            const std::vector<std::uint8_t>& mirror = {}) {
  PairBatch b;
  std::vector<std::size_t> unique;
  std::map<std::size_t, std::size_t> slot;
  for (const auto& [rec, k] : pairs) {
    auto [it, fresh] = slot.try_emplace(rec, unique.size());
    if (fresh) unique.push_back(rec);
    b.image_of_pair.push_back(it->second);
    b.captions.push_back(&ds.sample(rec, k));
    b.labels.push_back(ds.label(rec));
  }
  const Tensor& first = ds.image(unique.front());
  const std::size_t per = first.numel();
  b.images = Tensor({unique.size(), first.dim(0), first.dim(1), first.dim(2)});
  for (std::size_t u = 0; u < unique.size(); ++u) {
    const bool flip = !mirror.empty() && mirror[u];
    copy_image(ds.image(unique[u]), b.images.data() + u * per, flip);
  }
  return b;
}

class Trainer {
 public:
  /// Fresh model; the vocabulary is built from the training captions.
  Trainer(const RunConfig& cfg, data::Dataset& train, const text::Lexicon& lex) : cfg_(cfg), data_(train), lex_(lex) {
    cfg_.validate();
    if (train.num_ids() < 2) throw std::invalid_argument("training split needs at least 2 identities");
    vocab_ = text::build_vocab(train.all_captions(), cfg_.train.min_count);
    meta_.model = cfg_.model;
    meta_.ablation = cfg_.train.ablation;
    meta_.freeze_backbone_step1 = cfg_.train.freeze_backbone_step1;
    meta_.vocab = vocab_.words();
    meta_.identities = train.identities();
    meta_.lexicon = cfg_.lexicon;
    meta_.lambda1 = cfg_.train.lambda1;
    meta_.lambda2 = cfg_.train.lambda2;
    model_ = std::make_unique<MiaModel>(cfg_.model, vocab_.table_size(), train.num_ids(),
                                        AblationSpec::preset(cfg_.train.ablation, cfg_.train.freeze_backbone_step1),
                                        Rng::derived(cfg_.train.seed, 1).next());
    data_.prepare_text(vocab_, lex_);
  }

  /// Continues from a checkpoint; model widths, ablation and vocabulary come from the checkpoint.
  Trainer(LoadedCheckpoint ckpt, const RunConfig& cfg, data::Dataset& train, const text::Lexicon& lex)
      : cfg_(cfg), data_(train), lex_(lex), vocab_(std::move(ckpt.vocab)), meta_(std::move(ckpt.meta)),
        model_(std::move(ckpt.model)) {
    cfg_.model = meta_.model;
    cfg_.train.ablation = meta_.ablation;
    cfg_.train.freeze_backbone_step1 = meta_.freeze_backbone_step1;
    cfg_.validate();
    if (train.identities() != meta_.identities) {
      throw std::invalid_argument("training split identities differ from the checkpoint's");
    }
    data_.prepare_text(vocab_, lex_);
  }

  MiaModel& model() { return *model_; }
  const CheckpointMeta& meta() const { return meta_; }
  const text::Vocabulary& vocab() const { return vocab_; }
  const Adam& optimizer() const { return adam_; }

  /// Rejects steps run out of order: every earlier active step must be done, no later one may be.
  void check_order(int step) const {
    if (step < 1 || step > 3) throw std::invalid_argument("unknown training step " + std::to_string(step));
    const auto& ab = model_->ablation();
    for (int s = 1; s < step; ++s) {
      if (ab.step_active(s) && !meta_.completed(s)) {
        throw StepOrderError("step " + std::to_string(step) + " requires step " + std::to_string(s) + " to be completed first");
      }
    }
    for (int s = step; s <= 3; ++s) {
      if (meta_.completed(s)) {
        throw StepOrderError("step " + std::to_string(s) + " has already been completed; cannot run step " +
                             std::to_string(step));
      }
    }
  }

  using EpochCallback = std::function<void(const LossReport&)>;

  /// Runs every epoch of one step. Inactive steps (no loss terms in the ablation) only get marked done.
  void run_step(int step, const EpochCallback& on_epoch = {}) {
    check_order(step);
    const auto& ab = model_->ablation();
    if (ab.step_active(step)) {
      model_->activate_step(step);
      adam_ = Adam(cfg_.train);
      const std::size_t pairs_total = 2 * data_.size();
      std::vector<std::pair<std::size_t, std::size_t>> order;
      for (std::size_t i = 0; i < data_.size(); ++i) {
        order.emplace_back(i, 0);
        order.emplace_back(i, 1);
      }
      for (std::size_t epoch = 0; epoch < cfg_.train.epochs[step - 1]; ++epoch) {
        Rng rng = Rng::derived(cfg_.train.seed, 1000 * static_cast<std::uint64_t>(step) + epoch + 2);
        rng.shuffle(order);
        const double lr = lr_schedule(step, epoch, cfg_.train);
        LossReport sum;
        for (std::size_t start = 0; start < pairs_total; start += cfg_.train.batch_size) {
          const std::size_t end = std::min(pairs_total, start + cfg_.train.batch_size);
          std::vector<std::pair<std::size_t, std::size_t>> chunk(order.begin() + start, order.begin() + end);
          std::vector<std::uint8_t> mirror(chunk.size());
          for (auto& m : mirror) m = rng.bernoulli(cfg_.train.mirror_prob);
          PairBatch batch = make_batch(data_, chunk, mirror);
          LossReport r = train_batch(batch, step, lr);
          sum.accumulate(r, static_cast<double>(chunk.size()) / static_cast<double>(pairs_total));
        }
        sum.step = step;
        sum.epoch = epoch;
        if (on_epoch) on_epoch(sum);
      }
      model_->require_all_grads(true);
    }
    meta_.completed_steps.push_back(step);
  }

  /// Forward, backward and one optimizer update on a batch.
  LossReport train_batch(const PairBatch& batch, int step, double lr) {
    model_->params().zero_grad();
    Graph g;
    StepLoss loss = build_step_loss(g, *model_, batch, step, cfg_.train.margin);
    g.evaluate();
    g.backward(loss.total);
    adam_.step(model_->params(), lr);
    return loss.report();
  }

  void save(const std::filesystem::path& path, bool with_optimizer = true) const {
    save_checkpoint(path, *model_, meta_, with_optimizer ? &adam_ : nullptr);
  }

 private:
  RunConfig cfg_;
  data::Dataset& data_;
  const text::Lexicon& lex_;
  text::Vocabulary vocab_;
  CheckpointMeta meta_;
  std::unique_ptr<MiaModel> model_;
  Adam adam_;
};

}  // namespace mia
