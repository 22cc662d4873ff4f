#pragma once

// Model/training configuration, ablation presets, and the `key = value` config file format.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mia {

struct ModelConfig {
  std::string profile = "full";
  std::size_t image_height = 192;
  std::size_t image_width = 64;
  std::vector<std::size_t> backbone_channels = {8, 16, 32, 64};
  std::size_t parts = 6;
  std::size_t part_dim = 256;
  // Width of the global image/caption vectors, phrase vectors and every MLP output.
  std::size_t joint_dim = 1024;
  std::size_t mlp_hidden = 1024;
  std::size_t embed_dim = 300;
  std::size_t gru_hidden = 1024;
  double attention_temperature = 1.0;

  /// Feature-map height after the stride-2 backbone.
  std::size_t feature_height() const { return image_height >> backbone_channels.size(); }
  std::size_t feature_width() const { return image_width >> backbone_channels.size(); }
  std::size_t feature_channels() const { return backbone_channels.back(); }

  static ModelConfig full() { return {}; }

  /// Reduced widths for single-core training on the synthetic corpus.
  static ModelConfig desk() {
    ModelConfig c;
    c.profile = "desk";
    c.part_dim = 64;
    c.joint_dim = 128;
    c.mlp_hidden = 128;
    c.embed_dim = 32;
    c.gru_hidden = 64;
    return c;
  }

  void validate() const {
    if (backbone_channels.empty()) throw std::invalid_argument("backbone needs at least one layer");
    const std::size_t down = std::size_t{1} << backbone_channels.size();
    if (image_height % down != 0 || image_width % down != 0) {
      throw std::invalid_argument("image size must be divisible by " + std::to_string(down));
    }
    if (parts == 0 || feature_height() % parts != 0) {
      throw std::invalid_argument("feature-map height " + std::to_string(feature_height()) +
                                  " is not divisible by part count " + std::to_string(parts));
    }
    if (part_dim == 0 || joint_dim == 0 || mlp_hidden == 0 || embed_dim == 0 || gru_hidden == 0) {
      throw std::invalid_argument("model dimensions must be positive");
    }
    if (!(attention_temperature > 0.0)) throw std::invalid_argument("attention temperature must be > 0");
  }
};

/// Loss terms a training step may use.
enum LossTerm : std::uint8_t {
  kIdentity = 1 << 0,     // identity classification, both modalities
  kMatchGlobal = 1 << 1,  // global-global
  kMatchIT = 1 << 2,      // image-to-text relation
  kMatchTI = 1 << 3,      // text-to-image relation
  kMatchPN = 1 << 4,      // phrase-to-part
  kMatchNP = 1 << 5,      // part-to-phrase
};

/// Parameter groups that can be switched on per step.
enum class ParamGroup : std::uint8_t {
  kBackbone,
  kVisualFc,
  kPartConv,
  kTextCore,  // embedding + Bi-GRU
  kSentenceFc,
  kPhraseFc,
  kClassifier,
  kRgaMlps,
  kBfmMlps,
};

inline constexpr std::size_t kNumParamGroups = 9;

inline std::uint16_t group_bit(ParamGroup g) { return static_cast<std::uint16_t>(1u << static_cast<unsigned>(g)); }

/// Which loss terms and parameter groups each of the three steps uses.
struct AblationSpec {
  std::string name;
  std::array<std::uint8_t, 3> losses{};
  std::array<std::uint16_t, 3> groups{};

  bool step_active(int step) const { return losses[step - 1] != 0; }
  bool trains(ParamGroup g) const {
    for (auto m : groups) {
      if (m & group_bit(g)) return true;
    }
    return false;
  }
  bool relation_trained() const { return trains(ParamGroup::kRgaMlps); }
  bool local_trained() const { return trains(ParamGroup::kBfmMlps); }

  static AblationSpec preset(const std::string& name, bool freeze_backbone_step1 = false) {
    using G = ParamGroup;
    auto bits = [](std::initializer_list<G> gs) {
      std::uint16_t m = 0;
      for (G g : gs) m |= group_bit(g);
      return m;
    };
    const std::uint16_t global1 = freeze_backbone_step1
                                      ? bits({G::kVisualFc, G::kTextCore, G::kSentenceFc, G::kClassifier})
                                      : bits({G::kBackbone, G::kVisualFc, G::kTextCore, G::kSentenceFc, G::kClassifier});
    const std::uint16_t global2 = bits({G::kBackbone, G::kVisualFc, G::kTextCore, G::kSentenceFc, G::kClassifier});
    const std::uint16_t local = bits({G::kPartConv, G::kPhraseFc});
    AblationSpec a;
    a.name = name;
    if (name == "mia") {
      a.losses = {kIdentity, kIdentity | kMatchGlobal | kMatchIT | kMatchTI, kMatchPN | kMatchNP};
      a.groups = {global1, static_cast<std::uint16_t>(global2 | local | bits({G::kRgaMlps})), bits({G::kBfmMlps})};
    } else if (name == "gc") {
      a.losses = {kIdentity, kIdentity | kMatchGlobal, 0};
      a.groups = {global1, global2, 0};
    } else if (name == "gc+rga") {
      a.losses = {kIdentity, kIdentity | kMatchGlobal | kMatchIT | kMatchTI, 0};
      a.groups = {global1, static_cast<std::uint16_t>(global2 | local | bits({G::kRgaMlps})), 0};
    } else if (name == "gc+bfm") {
      a.losses = {kIdentity, kIdentity | kMatchGlobal | kMatchPN | kMatchNP, 0};
      a.groups = {global1, static_cast<std::uint16_t>(global2 | local | bits({G::kBfmMlps})), 0};
    } else if (name == "gc+rga+bfm") {
      a.losses = {kIdentity, kIdentity | kMatchGlobal | kMatchIT | kMatchTI | kMatchPN | kMatchNP, 0};
      a.groups = {global1, static_cast<std::uint16_t>(global2 | local | bits({G::kRgaMlps, G::kBfmMlps})), 0};
    } else if (name == "fine") {
      a.losses = {kMatchPN | kMatchNP, 0, 0};
      a.groups = {bits({G::kBackbone, G::kPartConv, G::kTextCore, G::kPhraseFc, G::kBfmMlps}), 0, 0};
    } else {
      throw std::invalid_argument("unknown ablation '" + name + "' (mia, gc, gc+rga, gc+bfm, gc+rga+bfm, fine)");
    }
    return a;
  }

  static std::vector<std::string> preset_names() { return {"mia", "gc", "gc+rga", "gc+bfm", "gc+rga+bfm", "fine"}; }
};

struct TrainConfig {
  std::size_t batch_size = 96;
  std::array<std::size_t, 3> epochs = {10, 15, 5};
  std::array<double, 3> lr = {0.001, 0.0002, 0.0002};
  // Step-2 learning rate is multiplied by decay_factor every decay_every epochs.
  std::size_t step2_decay_every = 10;
  double step2_decay_factor = 0.1;
  double margin = 0.2;
  double lambda1 = 1.0;
  double lambda2 = 0.5;
  double mirror_prob = 0.5;
  bool freeze_backbone_step1 = false;
  std::size_t min_count = 1;
  std::string ablation = "mia";
  std::uint64_t seed = 42;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  /// Desk-scale schedule used by the synthetic-corpus runs.
  static TrainConfig desk() {
    TrainConfig t;
    t.batch_size = 32;
    t.epochs = {60, 60, 30};
    t.lr = {0.001, 0.0005, 0.0005};
    t.step2_decay_every = 40;
    return t;
  }

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("batch_size must be > 0");
    for (double r : lr) {
      if (!(r > 0.0)) throw std::invalid_argument("learning rates must be > 0");
    }
    if (step2_decay_every == 0) throw std::invalid_argument("step2_decay_every must be > 0");
    if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("lambda values must be >= 0");
    if (min_count < 1) throw std::invalid_argument("min_count must be >= 1");
  }
};

/// Everything a `mia` run needs.
struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  TrainConfig train = TrainConfig::desk();
  std::string data = "corpus/train.jsonl";
  std::string out = "run";
  std::string lexicon;  // empty: builtin

  /// Switches both model widths and schedule to a named profile.
  void set_profile(const std::string& p) {
    if (p == "full") {
      model = ModelConfig::full();
      const auto keep_seed = train.seed;
      train = TrainConfig{};
      train.seed = keep_seed;
    } else if (p == "desk") {
      model = ModelConfig::desk();
      const auto keep_seed = train.seed;
      train = TrainConfig::desk();
      train.seed = keep_seed;
    } else {
      throw std::invalid_argument("unknown profile '" + p + "' (full, desk)");
    }
  }

  void set(const std::string& key, const std::string& value);

  void validate() const {
    model.validate();
    train.validate();
    AblationSpec::preset(train.ablation);
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("config '" + key + "': not a number: " + v);
  }
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    long long d = std::stoll(v, &pos);
    if (pos != v.size() || d < 0) throw std::invalid_argument("bad");
    return static_cast<std::size_t>(d);
  } catch (const std::exception&) {
    throw std::invalid_argument("config '" + key + "': not a non-negative integer: " + v);
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config '" + key + "': not a boolean: " + v);
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  using namespace detail;
  const std::string& v = value;
  if (key == "profile") set_profile(v);
  else if (key == "data") data = v;
  else if (key == "out") out = v;
  else if (key == "lexicon") lexicon = v;
  else if (key == "seed") train.seed = parse_size(key, v);
  else if (key == "batch_size") train.batch_size = parse_size(key, v);
  else if (key == "step1_epochs") train.epochs[0] = parse_size(key, v);
  else if (key == "step2_epochs") train.epochs[1] = parse_size(key, v);
  else if (key == "step3_epochs") train.epochs[2] = parse_size(key, v);
  else if (key == "step1_lr") train.lr[0] = parse_double(key, v);
  else if (key == "step2_lr") train.lr[1] = parse_double(key, v);
  else if (key == "step3_lr") train.lr[2] = parse_double(key, v);
  else if (key == "step2_decay_every") train.step2_decay_every = parse_size(key, v);
  else if (key == "step2_decay_factor") train.step2_decay_factor = parse_double(key, v);
  else if (key == "margin") train.margin = parse_double(key, v);
  else if (key == "lambda1") train.lambda1 = parse_double(key, v);
  else if (key == "lambda2") train.lambda2 = parse_double(key, v);
  else if (key == "mirror_prob") train.mirror_prob = parse_double(key, v);
  else if (key == "freeze_backbone_step1") train.freeze_backbone_step1 = parse_bool(key, v);
  else if (key == "min_count") train.min_count = parse_size(key, v);
  else if (key == "ablation") train.ablation = v;
  else if (key == "adam_beta1") train.adam_beta1 = parse_double(key, v);
  else if (key == "adam_beta2") train.adam_beta2 = parse_double(key, v);
  else if (key == "adam_eps") train.adam_eps = parse_double(key, v);
  else if (key == "parts") model.parts = parse_size(key, v);
  else if (key == "part_dim") model.part_dim = parse_size(key, v);
  else if (key == "joint_dim") model.joint_dim = parse_size(key, v);
  else if (key == "mlp_hidden") model.mlp_hidden = parse_size(key, v);
  else if (key == "embed_dim") model.embed_dim = parse_size(key, v);
  else if (key == "gru_hidden") model.gru_hidden = parse_size(key, v);
  else if (key == "attention_temperature") model.attention_temperature = parse_double(key, v);
  else if (key == "backbone_channels") {
    std::vector<std::size_t> ch;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) ch.push_back(parse_size(key, trim(item)));
    model.backbone_channels = ch;
  } else {
    throw std::invalid_argument("unknown config key: " + key);
  }
}

/// Parses UTF-8 `key = value` lines ('#' starts a comment); `profile` is applied first.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& what = "config") {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument(what + ":" + std::to_string(lineno) + ": expected key = value");
    entries.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  for (const auto& [k, v] : entries) {
    if (k == "profile") cfg.set(k, v);
  }
  for (const auto& [k, v] : entries) {
    if (k != "profile") cfg.set(k, v);
  }
}

inline void load_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  apply_config_text(cfg, ss.str(), path.string());
}

}  // namespace mia
