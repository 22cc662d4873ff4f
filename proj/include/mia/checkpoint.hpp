#pragma once

// .miac checkpoints: named f32 tensors plus an optional "opt/" block, with a JSON sidecar
// (<ckpt>.json) describing how to rebuild the model around them.

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mia/config.hpp"
#include "mia/io.hpp"
#include "mia/model.hpp"
#include "mia/optim.hpp"
#include "mia/text.hpp"

namespace mia {

inline constexpr char kCheckpointMagic[4] = {'M', 'I', 'A', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using TensorEntries = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline void put_entries(std::ostream& os, const TensorEntries& entries) {
  le::put_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    le::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    le::put_tensor_body(os, t);
  }
}

inline void get_entries(std::istream& is, std::uint32_t count, const std::string& what, TensorEntries& out) {
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    if (!le::get_u32(is, len) || len > (1u << 20)) throw FormatError(what + ": bad entry name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError(what + ": truncated entry name");
    Shape shape = le::get_shape(is, what + " [" + name + "]");
    out.emplace_back(name, le::get_payload(is, std::move(shape), what + " [" + name + "]"));
  }
}

}  // namespace detail

/// Writes parameter entries followed, when `optimizer` is non-empty, by the optimizer block.
inline void write_miac(const std::filesystem::path& path, const TensorEntries& params, const TensorEntries& optimizer) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os.write(kCheckpointMagic, 4);
  le::put_u32(os, kCheckpointVersion);
  detail::put_entries(os, params);
  if (!optimizer.empty()) detail::put_entries(os, optimizer);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

/// All entries in file order; optimizer entries keep their "opt/" prefix.
inline TensorEntries read_miac(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  const std::string what = path.string();
  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError(what + ": bad magic (expected MIAC)");
  }
  std::uint32_t version = 0, count = 0;
  if (!le::get_u32(is, version) || version != kCheckpointVersion) throw FormatError(what + ": unsupported version");
  if (!le::get_u32(is, count)) throw FormatError(what + ": truncated entry count");
  TensorEntries out;
  detail::get_entries(is, count, what, out);
  if (le::get_u32(is, count)) detail::get_entries(is, count, what, out);
  return out;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"profile", c.profile},       {"image_height", c.image_height}, {"image_width", c.image_width},
          {"backbone_channels", c.backbone_channels}, {"parts", c.parts}, {"part_dim", c.part_dim},
          {"joint_dim", c.joint_dim},   {"mlp_hidden", c.mlp_hidden},     {"embed_dim", c.embed_dim},
          {"gru_hidden", c.gru_hidden}, {"attention_temperature", c.attention_temperature}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.profile = j.at("profile").get<std::string>();
  c.image_height = j.at("image_height");
  c.image_width = j.at("image_width");
  c.backbone_channels = j.at("backbone_channels").get<std::vector<std::size_t>>();
  c.parts = j.at("parts");
  c.part_dim = j.at("part_dim");
  c.joint_dim = j.at("joint_dim");
  c.mlp_hidden = j.at("mlp_hidden");
  c.embed_dim = j.at("embed_dim");
  c.gru_hidden = j.at("gru_hidden");
  c.attention_temperature = j.at("attention_temperature");
  return c;
}

/// Sidecar contents.
struct CheckpointMeta {
  ModelConfig model;
  std::string ablation = "mia";
  bool freeze_backbone_step1 = false;
  std::vector<std::string> vocab;
  std::vector<long long> identities;  // original person ids, index = dense label
  std::vector<int> completed_steps;
  std::string lexicon;
  double lambda1 = 1.0;
  double lambda2 = 0.5;

  nlohmann::json to_json() const {
    return {{"model", mia::to_json(model)},
            {"ablation", ablation},
            {"freeze_backbone_step1", freeze_backbone_step1},
            {"vocab", vocab},
            {"identities", identities},
            {"completed_steps", completed_steps},
            {"lexicon", lexicon},
            {"lambda1", lambda1},
            {"lambda2", lambda2}};
  }

  static CheckpointMeta from_json(const nlohmann::json& j) {
    CheckpointMeta m;
    m.model = model_config_from_json(j.at("model"));
    m.ablation = j.at("ablation").get<std::string>();
    m.freeze_backbone_step1 = j.value("freeze_backbone_step1", false);
    m.vocab = j.at("vocab").get<std::vector<std::string>>();
    m.identities = j.at("identities").get<std::vector<long long>>();
    m.completed_steps = j.at("completed_steps").get<std::vector<int>>();
    m.lexicon = j.value("lexicon", "");
    m.lambda1 = j.value("lambda1", 1.0);
    m.lambda2 = j.value("lambda2", 0.5);
    return m;
  }

  bool completed(int step) const {
    return std::find(completed_steps.begin(), completed_steps.end(), step) != completed_steps.end();
  }
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) {
  return std::filesystem::path(ckpt.string() + ".json");
}

inline void save_checkpoint(const std::filesystem::path& path, const MiaModel& model, const CheckpointMeta& meta,
                            const Adam* optimizer = nullptr) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  TensorEntries params, opt;
  model.params().for_each([&](const Parameter& p) { params.emplace_back(p.name, p.value); });
  if (optimizer && optimizer->steps_taken() > 0) {
    opt.emplace_back("opt/t", Tensor::scalar(static_cast<double>(optimizer->steps_taken())));
    for (const auto& [name, s] : optimizer->state()) {
      opt.emplace_back("opt/" + name + "/m", s.m);
      opt.emplace_back("opt/" + name + "/v", s.v);
    }
  }
  write_miac(path, params, opt);
  std::ofstream js(sidecar_path(path), std::ios::trunc);
  if (!js) throw std::runtime_error("cannot write " + sidecar_path(path).string());
  js << meta.to_json().dump(2) << "\n";
}

struct LoadedCheckpoint {
  CheckpointMeta meta;
  text::Vocabulary vocab;
  std::unique_ptr<MiaModel> model;
};

inline CheckpointMeta load_checkpoint_meta(const std::filesystem::path& path) {
  std::ifstream js(sidecar_path(path));
  if (!js) throw std::runtime_error("missing checkpoint sidecar: " + sidecar_path(path).string());
  try {
    return CheckpointMeta::from_json(nlohmann::json::parse(js));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(sidecar_path(path).string() + ": " + e.what());
  }
}

/// Copies parameter entries into `model`; every model parameter must be present with its shape.
inline void assign_parameters(MiaModel& model, const TensorEntries& entries, const std::string& what) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : entries) by_name[name] = &t;
  model.params().for_each([&](Parameter& p) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError(what + ": missing parameter " + p.name);
    if (it->second->shape() != p.value.shape()) {
      throw FormatError(what + ": parameter " + p.name + " has shape " + shape_str(it->second->shape()) +
                        ", model expects " + shape_str(p.value.shape()));
    }
    p.value = *it->second;
  });
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  LoadedCheckpoint out;
  out.meta = load_checkpoint_meta(path);
  out.vocab = text::Vocabulary(out.meta.vocab);
  out.model = std::make_unique<MiaModel>(out.meta.model, out.vocab.table_size(), out.meta.identities.size(),
                                         AblationSpec::preset(out.meta.ablation, out.meta.freeze_backbone_step1), 0);
  assign_parameters(*out.model, read_miac(path), path.string());
  return out;
}

}  // namespace mia
