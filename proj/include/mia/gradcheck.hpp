#pragma once

// Central-difference check of analytic parameter gradients of a step loss.

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mia/data.hpp"
#include "mia/model.hpp"
#include "mia/objectives.hpp"
#include "mia/rng.hpp"

namespace mia {

struct GradSample {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckResult {
  int step = 0;
  std::vector<GradSample> samples;
  std::size_t resampled = 0;  // draws rejected because a perturbation crossed a ReLU/hinge kink
  std::size_t tensors_reached = 0;

  std::set<std::string> sampled_names() const {
    std::set<std::string> names;
    for (const auto& s : samples) names.insert(s.param);
    return names;
  }
  std::size_t tensors_sampled() const { return sampled_names().size(); }
  double max_rel_error = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json worst = nlohmann::json::array();
    auto sorted = samples;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.rel_error > b.rel_error; });
    for (std::size_t i = 0; i < std::min<std::size_t>(5, sorted.size()); ++i) {
      worst.push_back({{"param", sorted[i].param},
                       {"index", sorted[i].index},
                       {"analytic", sorted[i].analytic},
                       {"numeric", sorted[i].numeric},
                       {"rel_error", sorted[i].rel_error}});
    }
    return {{"step", step},
            {"samples", samples.size()},
            {"resampled", resampled},
            {"tensors_reached", tensors_reached},
            {"tensors_sampled", tensors_sampled()},
            {"sampled_params", sampled_names()},
            {"max_rel_error", max_rel_error},
            {"worst", worst}};
  }
};

inline double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
}

/// Central differences of a built graph's scalar `root` against the analytic gradients of `params`.
/// Entries are drawn round-robin over the tensors; a draw is rejected when a perturbation flips
/// the side of any ReLU/hinge kink, since the difference quotient is then not the derivative.
inline GradCheckResult finite_difference_check(Graph& g, Var root, const std::vector<Parameter*>& params,
                                               std::size_t samples, double h = 1e-5, std::uint64_t seed = 7) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_check: h must be > 0");
  for (Parameter* p : params) p->zero_grad();
  g.evaluate();
  const std::vector<std::uint8_t> kinks = g.kink_pattern();
  g.backward(root);

  auto loss_at = [&](Parameter& p, std::size_t i, double value, bool& crossed) {
    const double saved = p.value[i];
    p.value[i] = value;
    g.reevaluate_from(p);
    crossed = crossed || g.kink_pattern() != kinks;
    p.value[i] = saved;
    return root.value()[0];
  };

  GradCheckResult out;
  out.tensors_reached = params.size();
  if (params.empty()) return out;
  Rng rng(seed);
  std::size_t attempts = 0, misses = 0;
  for (std::size_t k = 0; out.samples.size() < samples && attempts < 20 * samples; ++attempts) {
    Parameter& p = *params[k % params.size()];
    // Prefer entries the loss actually touches (embedding rows of absent words have zero gradient).
    std::size_t i = rng.below(p.value.numel());
    for (int tries = 0; tries < 16 && p.grad[i] == 0.0; ++tries) i = rng.below(p.value.numel());
    bool crossed = false;
    const double theta = p.value[i];
    const double up = loss_at(p, i, theta + h, crossed);
    const double down = loss_at(p, i, theta - h, crossed);
    g.reevaluate_from(p);
    if (crossed) {
      ++out.resampled;
      // Tensors feeding many ReLUs may cross on almost every draw; give up on this one after a few.
      if (++misses == 8) {
        misses = 0;
        ++k;
      }
      continue;
    }
    misses = 0;
    ++k;
    GradSample s{p.name, i, p.grad[i], (up - down) / (2.0 * h), 0.0};
    s.rel_error = relative_error(s.analytic, s.numeric);
    out.max_rel_error = std::max(out.max_rel_error, s.rel_error);
    out.samples.push_back(s);
  }
  return out;
}

/// Checks a step loss over every parameter tensor it reaches.
inline GradCheckResult gradient_check(MiaModel& model, const PairBatch& batch, int step, double margin,
                                      std::size_t samples = 200, double h = 1e-5, std::uint64_t seed = 7) {
  model.require_all_grads(true);
  model.params().zero_grad();
  Graph g;
  StepLoss loss = build_step_loss(g, model, batch, step, margin);
  g.evaluate();
  g.backward(loss.total);
  std::vector<Parameter*> reached;
  model.params().for_each([&](Parameter& p) {
    for (double v : p.grad.values()) {
      if (v != 0.0) {
        reached.push_back(&p);
        return;
      }
    }
  });
  GradCheckResult out =
      finite_difference_check(g, loss.total, reached, samples, h, Rng::derived(seed, static_cast<std::uint64_t>(step)).next());
  out.step = step;
  return out;
}

/// Four distinct synthetic people with one caption each, built in memory.
inline PairBatch synthetic_check_batch(const text::Vocabulary& vocab, const text::Lexicon& lex, std::size_t num_ids,
                                       std::vector<text::TextSample>& storage, std::uint64_t seed = 11) {
  Rng rng = Rng::derived(seed, 0);
  const auto people = data::choose_people(4, rng);
  PairBatch b;
  b.images = Tensor({4, 3, data::kImageHeight, data::kImageWidth});
  storage.clear();
  storage.reserve(4);
  for (std::size_t i = 0; i < 4; ++i) {
    Tensor img = data::render_person(people[i], rng);
    std::copy(img.storage().begin(), img.storage().end(), b.images.data() + i * img.numel());
    auto cap = data::compose_caption(people[i], {data::kHat, data::kShirt, data::kPants}, rng);
    storage.push_back(text::prepare_text(cap.text, vocab, lex));
  }
  for (std::size_t i = 0; i < 4; ++i) {
    b.image_of_pair.push_back(i);
    b.captions.push_back(&storage[i]);
    b.labels.push_back(i % num_ids);
  }
  return b;
}

}  // namespace mia
