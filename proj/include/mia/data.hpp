#pragma once

// Synthetic attribute-person corpus and manifest loading.
//
// A person is five attributes (hat, shirt, pants, shoes, bag), each one of six colors. Images are
// 3x192x64 with horizontal colour bands aligned to the six part stripes; each caption names a
// random 2-4 attribute subset.

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mia/io.hpp"
#include "mia/rng.hpp"
#include "mia/tensor.hpp"
#include "mia/text.hpp"

namespace mia::data {

inline constexpr std::size_t kSlots = 5;
inline constexpr std::size_t kColors = 6;
inline constexpr std::size_t kImageHeight = 192;
inline constexpr std::size_t kImageWidth = 64;

enum Slot : std::size_t { kHat, kShirt, kPants, kShoes, kBag };

inline const std::array<std::string, kSlots>& slot_names() {
  static const std::array<std::string, kSlots> names = {"hat", "shirt", "pants", "shoes", "bag"};
  return names;
}

struct Color {
  std::string name;
  std::array<double, 3> rgb;
};

inline const std::array<Color, kColors>& palette() {
  static const std::array<Color, kColors> colors = {{{"red", {0.85, 0.12, 0.12}},
                                                      {"blue", {0.12, 0.22, 0.85}},
                                                      {"green", {0.12, 0.68, 0.22}},
                                                      {"yellow", {0.92, 0.85, 0.12}},
                                                      {"white", {0.95, 0.95, 0.95}},
                                                      {"black", {0.06, 0.06, 0.06}}}};
  return colors;
}

/// Part stripes (of six) that each attribute occupies; the bag is drawn inside the shirt band.
inline std::vector<std::size_t> parts_of(Slot s) {
  switch (s) {
    case kHat: return {0};
    case kShirt: return {1, 2};
    case kPants: return {3, 4};
    case kShoes: return {5};
    case kBag: return {1, 2};
  }
  return {};
}

struct PersonSpec {
  long long id = 0;
  std::array<std::size_t, kSlots> colors{};
};

inline std::size_t hamming(const PersonSpec& a, const PersonSpec& b) {
  std::size_t d = 0;
  for (std::size_t s = 0; s < kSlots; ++s) d += a.colors[s] != b.colors[s];
  return d;
}

/// Picks `count` distinct attribute tuples, greedily maximizing the smallest pairwise Hamming distance.
inline std::vector<PersonSpec> choose_people(std::size_t count, Rng& rng) {
  std::vector<std::array<std::size_t, kSlots>> all;
  for (std::size_t code = 0; code < 7776; ++code) {
    std::array<std::size_t, kSlots> c{};
    std::size_t x = code;
    for (auto& v : c) {
      v = x % kColors;
      x /= kColors;
    }
    all.push_back(c);
  }
  if (count > all.size()) throw std::invalid_argument("at most 7776 distinct identities");
  rng.shuffle(all);
  std::vector<PersonSpec> chosen;
  std::vector<std::size_t> min_dist(all.size(), kSlots + 1);
  std::vector<bool> used(all.size(), false);
  for (std::size_t k = 0; k < count; ++k) {
    std::size_t best = all.size();
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (used[i]) continue;
      if (best == all.size() || min_dist[i] > min_dist[best]) best = i;
    }
    used[best] = true;
    PersonSpec p;
    p.id = static_cast<long long>(k);
    p.colors = all[best];
    chosen.push_back(p);
    for (std::size_t i = 0; i < all.size(); ++i) {
      PersonSpec q;
      q.colors = all[i];
      min_dist[i] = std::min(min_dist[i], hamming(p, q));
    }
  }
  return chosen;
}

/// Renders one image [3, 192, 64]: four jittered bands, a bag patch, and Gaussian pixel noise.
inline Tensor render_person(const PersonSpec& p, Rng& rng, double noise = 0.05, int jitter = 4) {
  const auto& pal = palette();
  std::array<int, 3> cuts = {32, 96, 160};
  for (auto& c : cuts) c += static_cast<int>(rng.below(2 * jitter + 1)) - jitter;
  const int bag_top = 44 + static_cast<int>(rng.below(9));
  const int bag_left = rng.bernoulli(0.5) ? 4 : 40;
  Tensor img({3, kImageHeight, kImageWidth});
  for (std::size_t y = 0; y < kImageHeight; ++y) {
    const int yi = static_cast<int>(y);
    const Slot band = yi < cuts[0] ? kHat : yi < cuts[1] ? kShirt : yi < cuts[2] ? kPants : kShoes;
    for (std::size_t x = 0; x < kImageWidth; ++x) {
      const int xi = static_cast<int>(x);
      const bool bag = yi >= bag_top && yi < bag_top + 32 && xi >= bag_left && xi < bag_left + 20;
      const auto& rgb = pal[p.colors[bag ? kBag : band]].rgb;
      for (std::size_t c = 0; c < 3; ++c) img[(c * kImageHeight + y) * kImageWidth + x] = rgb[c] + noise * rng.normal();
    }
  }
  return img;
}

struct Caption {
  std::string text;
  std::vector<Slot> mentioned;
};

namespace detail {

inline std::string attribute_phrase(Slot s, const std::string& color, Rng& rng) {
  static const std::array<std::vector<std::string>, kSlots> nouns = {{{"hat", "cap", "beanie"},
                                                                       {"shirt", "jacket", "sweater"},
                                                                       {"pants", "trousers", "jeans"},
                                                                       {"shoes", "sneakers", "boots"},
                                                                       {"bag", "backpack", "handbag"}}};
  const auto& options = nouns[s];
  const std::string noun = options[rng.below(options.size())];
  const bool plural = noun.back() == 's';
  return (plural || rng.bernoulli(0.5) ? "" : "a ") + color + " " + noun;
}

}  // namespace detail

/// Caption naming exactly the attributes in `subset`.
inline Caption compose_caption(const PersonSpec& p, std::vector<Slot> subset, Rng& rng) {
  static const std::vector<std::string> subjects = {"the person", "a man", "the woman", "this pedestrian",
                                                    "a person", "the lady", "this guy"};
  std::sort(subset.begin(), subset.end());
  std::vector<std::string> worn;
  std::string bag;
  for (Slot s : subset) {
    const std::string phrase = detail::attribute_phrase(s, palette()[p.colors[s]].name, rng);
    if (s == kBag) bag = phrase;
    else worn.push_back(phrase);
  }
  rng.shuffle(worn);
  std::string text = subjects[rng.below(subjects.size())];
  if (!worn.empty()) {
    text += rng.bernoulli(0.5) ? " wears " : " has ";
    for (std::size_t i = 0; i < worn.size(); ++i) {
      if (i > 0) text += i + 1 == worn.size() || rng.bernoulli(0.5) ? " and " : " with ";
      text += worn[i];
    }
  }
  if (!bag.empty()) text += (worn.empty() ? " carries " : " and carries ") + bag;
  return {text, subset};
}

/// One manifest line.
struct Record {
  long long person_id = 0;
  std::string image_path;  // as written in the manifest
  std::array<std::string, 2> captions;
};

struct GenerateOptions {
  std::size_t train_ids = 16;
  std::size_t val_ids = 4;
  std::size_t test_ids = 8;
  std::size_t images_per_id = 4;
  std::uint64_t seed = 42;
  double noise = 0.05;
  int jitter = 4;
};

struct GenerateSummary {
  std::map<std::string, std::size_t> images;  // per split
  std::map<std::string, std::size_t> captions;
};

namespace detail {

inline std::string caption_id(const std::string& image_path, std::size_t k) {
  return std::filesystem::path(image_path).stem().string() + "#" + std::to_string(k);
}

// Random 2-4 attribute subset, resampled (bounded) until no other person of the split shares it.
inline std::vector<Slot> pick_subset(const PersonSpec& p, const std::vector<PersonSpec>& split, Rng& rng) {
  std::vector<Slot> best;
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::vector<Slot> slots = {kHat, kShirt, kPants, kShoes, kBag};
    rng.shuffle(slots);
    slots.resize(2 + rng.below(3));
    bool unique = true;
    for (const auto& q : split) {
      if (q.id == p.id) continue;
      bool same = true;
      for (Slot s : slots) same = same && q.colors[s] == p.colors[s];
      if (same) {
        unique = false;
        break;
      }
    }
    if (unique) return slots;
    if (best.empty()) best = slots;
  }
  return best;
}

}  // namespace detail

/// Writes images/, train.jsonl, val.jsonl, test.jsonl and masks.jsonl under `out_dir`.
inline GenerateSummary synth_generate(const GenerateOptions& opt, const std::filesystem::path& out_dir) {
  if (opt.train_ids < 2) throw std::invalid_argument("need at least 2 training identities");
  if (opt.images_per_id == 0) throw std::invalid_argument("images_per_id must be > 0");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw std::runtime_error("cannot create " + (out_dir / "images").string() + ": " + ec.message());

  Rng pick = Rng::derived(opt.seed, 0xC0DE);
  const auto people = choose_people(opt.train_ids + opt.val_ids + opt.test_ids, pick);
  const std::array<std::pair<std::string, std::size_t>, 3> splits = {
      {{"train", opt.train_ids}, {"val", opt.val_ids}, {"test", opt.test_ids}}};

  GenerateSummary summary;
  std::ofstream masks(out_dir / "masks.jsonl", std::ios::trunc);
  if (!masks) throw std::runtime_error("cannot write " + (out_dir / "masks.jsonl").string());
  std::size_t first = 0;
  std::uint64_t image_index = 0;
  for (const auto& [split, count] : splits) {
    std::ofstream manifest(out_dir / (split + ".jsonl"), std::ios::trunc);
    if (!manifest) throw std::runtime_error("cannot write " + (out_dir / (split + ".jsonl")).string());
    const std::vector<PersonSpec> members(people.begin() + first, people.begin() + first + count);
    for (const auto& p : members) {
      for (std::size_t k = 0; k < opt.images_per_id; ++k, ++image_index) {
        Rng rng = Rng::derived(opt.seed, image_index);
        char stem[64];
        std::snprintf(stem, sizeof stem, "p%04lld_%02zu", p.id, k);
        const std::string rel = std::string("images/") + stem + ".ten";
        save_tensor(out_dir / rel, render_person(p, rng, opt.noise, opt.jitter));
        nlohmann::json line = {{"person_id", p.id}, {"image_path", rel}, {"captions", nlohmann::json::array()}};
        for (std::size_t c = 0; c < 2; ++c) {
          Caption cap = compose_caption(p, detail::pick_subset(p, members, rng), rng);
          line["captions"].push_back(cap.text);
          std::vector<std::string> attrs;
          std::set<std::size_t> parts;
          for (Slot s : cap.mentioned) {
            attrs.push_back(slot_names()[s]);
            for (auto q : parts_of(s)) parts.insert(q);
          }
          masks << nlohmann::json{{"caption_id", detail::caption_id(rel, c)},
                                  {"split", split},
                                  {"attributes", attrs},
                                  {"parts", std::vector<std::size_t>(parts.begin(), parts.end())}}
                       .dump()
                << "\n";
        }
        manifest << line.dump() << "\n";
        ++summary.images[split];
        summary.captions[split] += 2;
      }
    }
    first += count;
  }
  return summary;
}

/// A loaded split. Images are read on first use; identity labels are dense, ordered by original id.
class Dataset {
 public:
  static Dataset load(const std::filesystem::path& manifest) {
    std::ifstream is(manifest);
    if (!is) throw std::runtime_error("cannot open manifest: " + manifest.string());
    Dataset d;
    d.root_ = manifest.parent_path();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const std::string where = manifest.string() + ":" + std::to_string(lineno);
      Record r;
      try {
        auto j = nlohmann::json::parse(line);
        r.person_id = j.at("person_id").get<long long>();
        r.image_path = j.at("image_path").get<std::string>();
        const auto& caps = j.at("captions");
        if (!caps.is_array() || caps.size() != 2) {
          throw std::runtime_error(where + ": expected exactly 2 captions, got " + std::to_string(caps.size()));
        }
        r.captions = {caps[0].get<std::string>(), caps[1].get<std::string>()};
      } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(where + ": " + e.what());
      }
      const auto path = d.root_ / r.image_path;
      if (!std::filesystem::exists(path)) throw std::runtime_error(where + ": missing image " + path.string());
      const Shape s = peek_tensor_shape(path);
      if (s.size() != 3 || s[0] != 3) {
        throw FormatError(path.string() + ": expected a [3, H, W] image, got " + shape_str(s));
      }
      d.records_.push_back(std::move(r));
    }
    if (d.records_.empty()) throw std::runtime_error("empty split: " + manifest.string());
    d.reindex();
    d.images_.resize(d.records_.size());
    return d;
  }

  std::size_t size() const { return records_.size(); }
  const Record& record(std::size_t i) const { return records_.at(i); }
  const std::vector<Record>& records() const { return records_; }
  std::size_t label(std::size_t i) const { return labels_.at(i); }
  std::size_t num_ids() const { return identities_.size(); }
  const std::vector<long long>& identities() const { return identities_; }
  std::filesystem::path image_path(std::size_t i) const { return root_ / records_.at(i).image_path; }
  std::string caption_id(std::size_t i, std::size_t k) const { return detail::caption_id(records_.at(i).image_path, k); }

  const Tensor& image(std::size_t i) const {
    auto& slot = images_.at(i);
    if (!slot) slot = load_tensor(image_path(i));
    return *slot;
  }

  std::vector<std::string> all_captions() const {
    std::vector<std::string> out;
    for (const auto& r : records_) out.insert(out.end(), r.captions.begin(), r.captions.end());
    return out;
  }

  /// Tokenizes and chunks every caption once; sample 2*i+k is caption k of record i.
  void prepare_text(const text::Vocabulary& vocab, const text::Lexicon& lex) {
    samples_.clear();
    samples_.reserve(2 * records_.size());
    for (const auto& r : records_) {
      for (const auto& c : r.captions) samples_.push_back(text::prepare_text(c, vocab, lex));
    }
  }
  const text::TextSample& sample(std::size_t i, std::size_t k) const { return samples_.at(2 * i + k); }
  bool text_ready() const { return samples_.size() == 2 * records_.size(); }

 private:
  void reindex() {
    std::set<long long> ids;
    for (const auto& r : records_) ids.insert(r.person_id);
    identities_.assign(ids.begin(), ids.end());
    labels_.clear();
    for (const auto& r : records_) {
      labels_.push_back(static_cast<std::size_t>(
          std::lower_bound(identities_.begin(), identities_.end(), r.person_id) - identities_.begin()));
    }
  }

  std::filesystem::path root_;
  std::vector<Record> records_;
  std::vector<long long> identities_;
  std::vector<std::size_t> labels_;
  mutable std::vector<std::optional<Tensor>> images_;
  std::vector<text::TextSample> samples_;
};

/// caption_id -> mentioned part stripes, from masks.jsonl.
inline std::map<std::string, std::vector<std::size_t>> load_masks(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open masks: " + path.string());
  std::map<std::string, std::vector<std::size_t>> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    out[j.at("caption_id").get<std::string>()] = j.at("parts").get<std::vector<std::size_t>>();
  }
  return out;
}

/// caption_id -> mentioned attribute names.
inline std::map<std::string, std::vector<std::string>> load_mask_attributes(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open masks: " + path.string());
  std::map<std::string, std::vector<std::string>> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    out[j.at("caption_id").get<std::string>()] = j.at("attributes").get<std::vector<std::string>>();
  }
  return out;
}

}  // namespace mia::data
