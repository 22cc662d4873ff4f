// mia: data generation, training, evaluation and diagnostics.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mia/checkpoint.hpp"
#include "mia/config.hpp"
#include "mia/data.hpp"
#include "mia/eval.hpp"
#include "mia/gradcheck.hpp"
#include "mia/text.hpp"
#include "mia/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const mia::text::Lexicon& lexicon_for(const std::string& path) {
  static std::map<std::string, mia::text::Lexicon> loaded;
  if (path.empty()) return mia::text::Lexicon::builtin();
  auto it = loaded.find(path);
  if (it == loaded.end()) it = loaded.emplace(path, mia::text::Lexicon::load(path)).first;
  return it->second;
}

std::string split_manifest(const std::string& corpus, const std::string& split, const std::string& manifest) {
  if (!manifest.empty()) return manifest;
  return (fs::path(corpus) / (split + ".jsonl")).string();
}

int cmd_gen_data(const mia::data::GenerateOptions& opt, const std::string& out) {
  const auto summary = mia::data::synth_generate(opt, out);
  for (const auto& [split, n] : summary.images) {
    std::cout << split << ": " << n << " images, " << summary.captions.at(split) << " captions\n";
  }
  std::cout << "wrote " << out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string step = "all";
  std::vector<std::string> overrides;
  std::string data, out, ablation, profile, init;
  long long seed = -1;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  mia::RunConfig cfg;
  if (!a.profile.empty()) cfg.set_profile(a.profile);
  if (!a.config.empty()) mia::load_config_file(cfg, a.config);
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got " + kv);
    cfg.set(mia::detail::trim(kv.substr(0, eq)), mia::detail::trim(kv.substr(eq + 1)));
  }
  if (!a.data.empty()) cfg.data = a.data;
  if (!a.out.empty()) cfg.out = a.out;
  if (!a.ablation.empty()) cfg.train.ablation = a.ablation;
  if (a.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(a.seed);
  cfg.validate();

  std::vector<int> steps;
  if (a.step == "all") steps = {1, 2, 3};
  else if (a.step == "1" || a.step == "2" || a.step == "3") steps = {std::stoi(a.step)};
  else throw std::invalid_argument("--step must be 1, 2, 3 or all");

  const auto& lex = lexicon_for(cfg.lexicon);
  auto train = mia::data::Dataset::load(cfg.data);
  fs::create_directories(cfg.out);
  const fs::path latest = fs::path(cfg.out) / "latest.miac";

  std::unique_ptr<mia::Trainer> trainer;
  if (steps.front() == 1) {
    trainer = std::make_unique<mia::Trainer>(cfg, train, lex);
  } else {
    const fs::path from = a.init.empty() ? latest : fs::path(a.init);
    if (!fs::exists(from)) {
      throw mia::StepOrderError("step " + a.step + " needs a checkpoint from the previous step (" + from.string() + ")");
    }
    trainer = std::make_unique<mia::Trainer>(mia::load_checkpoint(from), cfg, train, lex);
  }

  std::ofstream log(fs::path(cfg.out) / "train_log.jsonl", steps.front() == 1 ? std::ios::trunc : std::ios::app);
  for (int s : steps) {
    const auto t0 = std::chrono::steady_clock::now();
    trainer->run_step(s, [&](const mia::LossReport& r) {
      log << r.to_json().dump() << "\n";
      log.flush();
      if (!a.quiet) {
        std::cout << "step " << r.step << " epoch " << std::setw(3) << r.epoch << "  total " << std::fixed
                  << std::setprecision(5) << r.total() << std::defaultfloat << "\n";
      }
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const fs::path ckpt = fs::path(cfg.out) / ("step" + std::to_string(s) + ".miac");
    trainer->save(ckpt);
    trainer->save(latest);
    std::cout << "step " << s << " done in " << std::fixed << std::setprecision(1) << secs << std::defaultfloat
              << " s -> " << ckpt.string() << "\n";
  }
  return 0;
}

struct EvalArgs {
  std::string ckpt, corpus = "corpus", split = "test", manifest, report = "sF", dump_attn;
  double lambda1 = 1.0, lambda2 = 0.5;
  bool json_out = false;
  bool image_queries = false;
};

mia::data::Dataset load_split(const mia::LoadedCheckpoint& ck, const std::string& manifest) {
  auto ds = mia::data::Dataset::load(manifest);
  ds.prepare_text(ck.vocab, lexicon_for(ck.meta.lexicon));
  return ds;
}

int cmd_eval(const EvalArgs& a) {
  auto ck = mia::load_checkpoint(a.ckpt);
  auto ds = load_split(ck, split_manifest(a.corpus, a.split, a.manifest));
  const auto gran = mia::parse_granularity(a.report);
  const auto report = mia::evaluate(*ck.model, ds, a.lambda1, a.lambda2, gran, &std::cerr, a.image_queries);
  if (!a.dump_attn.empty()) {
    fs::create_directories(a.dump_attn);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      for (std::size_t k = 0; k < 2; ++k) {
        json j = mia::pair_attention(*ck.model, ds.image(i), ds.sample(i, k)).to_json();
        j["pair_id"] = ds.caption_id(i, k);
        j["caption_id"] = ds.caption_id(i, k);
        j["caption"] = ds.record(i).captions[k];
        std::string name = ds.caption_id(i, k);
        std::replace(name.begin(), name.end(), '#', '_');
        std::ofstream(fs::path(a.dump_attn) / (name + ".json")) << j.dump(2) << "\n";
      }
    }
  }
  if (a.json_out) {
    json j = report.to_json();
    j["split"] = a.split;
    j["queries"] = 2 * ds.size();
    j["gallery"] = ds.size();
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << mia::format_reports({report});
  }
  return 0;
}

int cmd_sweep(const EvalArgs& a, const std::string& l1, const std::string& l2, const std::string& csv) {
  auto ck = mia::load_checkpoint(a.ckpt);
  auto ds = load_split(ck, split_manifest(a.corpus, a.split, a.manifest));
  const auto b = mia::split_bundle(*ck.model, ds);
  const auto reports = mia::sweep(b, mia::parse_range(l1), mia::parse_range(l2));
  if (a.json_out) {
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(r.to_json());
    std::cout << arr.dump(2) << "\n";
  } else {
    std::cout << mia::format_reports(reports);
  }
  if (!csv.empty()) {
    std::ofstream os(csv);
    os << "lambda1,lambda2,R@1,R@5,R@10,Total\n";
    for (const auto& r : reports) {
      os << r.lambda1 << "," << r.lambda2 << "," << r.r1 << "," << r.r5 << "," << r.r10 << "," << r.total() << "\n";
    }
  }
  return 0;
}

int cmd_retrieve(const EvalArgs& a, const std::string& caption, std::size_t topk) {
  auto ck = mia::load_checkpoint(a.ckpt);
  auto ds = load_split(ck, split_manifest(a.corpus, a.split, a.manifest));
  const auto sample = mia::text::prepare_text(caption, ck.vocab, lexicon_for(ck.meta.lexicon));
  const auto gallery = mia::encode_gallery(*ck.model, ds);
  auto b = mia::compute_bundle(*ck.model, gallery, {&sample});
  b.query_ids = {-1};
  for (std::size_t i = 0; i < ds.size(); ++i) b.gallery_ids.push_back(ds.record(i).person_id);
  const auto gran = mia::parse_granularity(a.report);
  const mia::Tensor S = b.scores(gran, a.lambda1, a.lambda2);
  const auto order = mia::rank_row(S.data(), S.dim(1));
  json hits = json::array();
  for (std::size_t r = 0; r < std::min(topk, order.size()); ++r) {
    const auto g = order[r];
    hits.push_back({{"rank", r + 1}, {"image", ds.record(g).image_path}, {"person_id", ds.record(g).person_id},
                    {"score", S[g]}});
  }
  std::vector<std::string> phrases;
  for (const auto& p : sample.phrases) phrases.push_back(p.text());
  if (a.json_out) {
    std::cout << json{{"caption", caption}, {"phrases", phrases}, {"granularity", a.report}, {"results", hits}}.dump(2)
              << "\n";
  } else {
    std::cout << "phrases:";
    for (const auto& p : phrases) std::cout << " [" << p << "]";
    std::cout << "\n";
    for (const auto& h : hits) {
      std::cout << std::setw(3) << h["rank"].get<int>() << "  " << std::fixed << std::setprecision(4)
                << h["score"].get<double>() << std::defaultfloat << "  person " << h["person_id"].get<long long>()
                << "  " << h["image"].get<std::string>() << "\n";
    }
  }
  return 0;
}

int cmd_grad_check(const std::string& ckpt, std::size_t samples, double h, double tol, bool json_out) {
  std::unique_ptr<mia::MiaModel> model;
  mia::text::Vocabulary vocab;
  const mia::text::Lexicon* lex = &mia::text::Lexicon::builtin();
  if (!ckpt.empty()) {
    auto ck = mia::load_checkpoint(ckpt);
    vocab = ck.vocab;
    lex = &lexicon_for(ck.meta.lexicon);
    model = std::move(ck.model);
  } else {
    std::vector<std::string> words;
    for (const auto& c : mia::data::palette()) words.push_back(c.name);
    for (const char* w : {"the", "a", "person", "man", "wears", "has", "and", "with", "hat", "shirt", "pants", "cap",
                          "jacket", "jeans", "beanie", "sweater", "trousers"}) {
      words.push_back(w);
    }
    vocab = mia::text::Vocabulary(words);
    model = std::make_unique<mia::MiaModel>(mia::ModelConfig::desk(), vocab.table_size(), 4,
                                            mia::AblationSpec::preset("mia"), 5);
  }
  std::vector<mia::text::TextSample> storage;
  const auto batch = mia::synthetic_check_batch(vocab, *lex, model->num_ids(), storage);
  bool ok = true;
  json out = json::array();
  for (int step : {2, 3}) {
    if (!model->ablation().step_active(step)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    auto r = mia::gradient_check(*model, batch, step, 0.2, samples, h);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ok = ok && r.max_rel_error <= tol && !r.samples.empty();
    json j = r.to_json();
    j["seconds"] = secs;
    out.push_back(j);
    if (!json_out) {
      std::cout << "step " << step << ": " << r.samples.size() << " entries, max relative error " << std::scientific
                << r.max_rel_error << std::defaultfloat << " (" << r.tensors_sampled() << "/" << r.tensors_reached << " tensors, " << r.resampled << " kink resamples, " << std::fixed
                << std::setprecision(2) << secs << std::defaultfloat << " s)\n";
    }
  }
  if (json_out) std::cout << out.dump(2) << "\n";
  std::cout << (ok ? "grad-check passed" : "grad-check FAILED") << " (tolerance " << tol << ")\n";
  return ok ? 0 : 1;
}

int cmd_chunk(const std::string& in, bool tags, const std::string& lexicon) {
  const auto& lex = lexicon_for(lexicon);
  std::ifstream file;
  std::istream* is = &std::cin;
  if (!in.empty() && in != "-") {
    file.open(in);
    if (!file) throw std::runtime_error("cannot open " + in);
    is = &file;
  }
  std::string line;
  while (std::getline(*is, line)) {
    const auto tokens = mia::text::tokenize(line);
    const auto tagged = mia::text::pos_tag(tokens, lex);
    const auto phrases = mia::text::chunk_noun_phrases(tagged);
    json j = {{"caption", line}, {"phrases", json::array()}};
    for (const auto& p : phrases) j["phrases"].push_back(p.text());
    if (tags) {
      j["tags"] = json::array();
      for (const auto& t : tagged) j["tags"].push_back({t.token.surface, mia::text::tag_name(t.tag)});
    }
    std::cout << j.dump() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-granularity image-text alignment for description-based person retrieval"};
  app.require_subcommand(1);

  mia::data::GenerateOptions gen;
  std::string gen_out = "corpus";
  auto* g = app.add_subcommand("gen-data", "Generate the synthetic attribute-person corpus");
  g->add_option("--ids", gen.train_ids, "Training identities")->capture_default_str();
  g->add_option("--val-ids", gen.val_ids, "Validation identities")->capture_default_str();
  g->add_option("--test-ids", gen.test_ids, "Test identities")->capture_default_str();
  g->add_option("--per-id", gen.images_per_id, "Images per identity")->capture_default_str();
  g->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  g->add_option("--noise", gen.noise, "Per-pixel noise sigma")->capture_default_str();
  g->add_option("--jitter", gen.jitter, "Band boundary jitter in pixels")->capture_default_str();
  g->add_option("--out", gen_out, "Output directory")->capture_default_str();

  TrainArgs ta;
  auto* t = app.add_subcommand("train", "Run training steps");
  t->footer(
      "Config keys (key = value): profile, data, out, lexicon, seed, batch_size, step{1,2,3}_epochs,\n"
      "step{1,2,3}_lr, step2_decay_every, step2_decay_factor, margin, lambda1, lambda2, mirror_prob,\n"
      "freeze_backbone_step1, min_count, ablation, adam_beta1, adam_beta2, adam_eps, parts, part_dim,\n"
      "joint_dim, mlp_hidden, embed_dim, gru_hidden, attention_temperature, backbone_channels.\n"
      "Profile 'full': batch 96; epochs 10/15/5; lr 0.001/0.0002/0.0002; step-2 lr x0.1 every 10 epochs;\n"
      "margin 0.2; lambda1 1, lambda2 0.5; widths 1024, part 256, embedding 300.\n"
      "Profile 'desk' (default): batch 32; epochs 60/60/30; lr 0.001/0.0005/0.0005; decay every 40;\n"
      "joint 128, part 64, GRU 64, embedding 32.");
  t->add_option("--config", ta.config, "Config file of key = value lines");
  t->add_option("--step", ta.step, "1, 2, 3 or all")->capture_default_str();
  t->add_option("--profile", ta.profile, "full or desk (applied before the config file)");
  t->add_option("--set", ta.overrides, "Override a config key (key=value); repeatable");
  t->add_option("--data", ta.data, "Training manifest");
  t->add_option("--out", ta.out, "Output directory for checkpoints and log");
  t->add_option("--ablation", ta.ablation, "mia, gc, gc+rga, gc+bfm, gc+rga+bfm, fine");
  t->add_option("--seed", ta.seed, "Run seed");
  t->add_option("--init", ta.init, "Checkpoint to continue from (steps 2 and 3; default <out>/latest.miac)");
  t->add_flag("--quiet", ta.quiet, "Only print per-step summaries");

  EvalArgs ea;
  auto add_eval_opts = [&](CLI::App* c, bool split_opts) {
    c->add_option("--ckpt", ea.ckpt, "Checkpoint (.miac)")->required();
    if (split_opts) {
      c->add_option("--corpus", ea.corpus, "Corpus directory")->capture_default_str();
      c->add_option("--split", ea.split, "train, val or test")->capture_default_str();
      c->add_option("--manifest", ea.manifest, "Explicit manifest path (overrides --corpus/--split)");
    }
    c->add_flag("--json", ea.json_out, "Emit JSON");
  };
  auto* e = app.add_subcommand("eval", "Text-to-image retrieval on a split");
  add_eval_opts(e, true);
  e->add_option("--lambda1", ea.lambda1, "Weight of the relation similarity")->capture_default_str();
  e->add_option("--lambda2", ea.lambda2, "Weight of the fine-grained similarity")->capture_default_str();
  e->add_option("--report", ea.report, "sG, sR, sL or sF")->capture_default_str();
  e->add_option("--dump-attn", ea.dump_attn, "Write per-pair attention weights as JSON into this directory");
  e->add_flag("--image-queries", ea.image_queries, "Rank captions for each image instead of images for each caption");

  std::string l1 = "0:2:0.2", l2 = "0:2:0.2", csv;
  auto* s = app.add_subcommand("sweep", "Grid over lambda1 x lambda2 on cached similarities");
  add_eval_opts(s, true);
  s->add_option("--l1", l1, "lambda1 range a:b:step (inclusive) or a value")->capture_default_str();
  s->add_option("--l2", l2, "lambda2 range a:b:step (inclusive) or a value")->capture_default_str();
  s->add_option("--csv", csv, "Also write the table as CSV");

  std::string caption;
  std::size_t topk = 10;
  auto* r = app.add_subcommand("retrieve", "Rank a split's images for one caption");
  add_eval_opts(r, true);
  r->add_option("--caption", caption, "Query text")->required();
  r->add_option("--topk", topk, "Results to show")->capture_default_str();
  r->add_option("--lambda1", ea.lambda1, "Weight of the relation similarity")->capture_default_str();
  r->add_option("--lambda2", ea.lambda2, "Weight of the fine-grained similarity")->capture_default_str();
  r->add_option("--report", ea.report, "sG, sR, sL or sF")->capture_default_str();

  std::string gc_ckpt;
  std::size_t gc_samples = 200;
  double gc_h = 1e-5, gc_tol = 1e-4;
  bool gc_json = false;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the step-2 and step-3 losses");
  gc->add_option("--ckpt", gc_ckpt, "Checkpoint (default: freshly initialized desk model)");
  gc->add_option("--samples", gc_samples, "Parameter entries per loss")->capture_default_str();
  gc->add_option("--step-size", gc_h, "Central-difference step")->capture_default_str();
  gc->add_option("--tol", gc_tol, "Maximum allowed relative error")->capture_default_str();
  gc->add_flag("--json", gc_json, "Emit JSON");

  std::string chunk_in, chunk_lex;
  bool chunk_tags = false;
  auto* c = app.add_subcommand("chunk", "Emit the noun phrases of each input line as JSON");
  c->add_option("--in", chunk_in, "Caption file, one per line (default stdin)");
  c->add_option("--lexicon", chunk_lex, "Lexicon TSV (default builtin)");
  c->add_flag("--tags", chunk_tags, "Include part-of-speech tags");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*g) return cmd_gen_data(gen, gen_out);
    if (*t) return cmd_train(ta);
    if (*e) return cmd_eval(ea);
    if (*s) return cmd_sweep(ea, l1, l2, csv);
    if (*r) return cmd_retrieve(ea, caption, topk);
    if (*gc) return cmd_grad_check(gc_ckpt, gc_samples, gc_h, gc_tol, gc_json);
    if (*c) return cmd_chunk(chunk_in, chunk_tags, chunk_lex);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 0;
}
