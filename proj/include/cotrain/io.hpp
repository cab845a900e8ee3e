#pragma once

// File formats: 8-bit PNG images and label maps, raw float32 rasters with a
// JSON sidecar header, canonical JSON records, dataset manifests and
// persisted pseudo-label sets.

#include <png.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cotrain/core.hpp"

namespace cotrain {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Stable key order (std::map backed objects), two-space indent, trailing newline.
inline std::string canonical_dump(const json& j) { return j.dump(2) + "\n"; }

inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::data, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::data, "short write on " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::data, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_json(const fs::path& path, const json& j) {
  write_file_atomic(path, canonical_dump(j));
}

inline json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::data, path.string() + ": malformed record: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// PNG

namespace detail {

struct PngImageGuard {
  png_image* image;
  ~PngImageGuard() { png_image_free(image); }
};

inline std::vector<std::uint8_t> read_png_pixels(const fs::path& path, png_uint_32 format,
                                                 bool require_gray, int& width, int& height) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  PngImageGuard guard{&image};
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    fail(ErrorKind::data, "cannot read PNG " + path.string() + ": " + image.message);
  if (require_gray && (image.format != PNG_FORMAT_GRAY))
    fail(ErrorKind::data, "label PNG " + path.string() +
                              " must be single-channel 8-bit with raw class ids");
  image.format = format;
  width = static_cast<int>(image.width);
  height = static_cast<int>(image.height);
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr))
    fail(ErrorKind::data, "cannot decode PNG " + path.string() + ": " + image.message);
  return buffer;
}

inline void write_png_pixels(const fs::path& path, png_uint_32 format, int width, int height,
                             const std::uint8_t* data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = format;
  fs::path tmp = path;
  tmp += ".tmp";
  if (!png_image_write_to_file(&image, tmp.string().c_str(), 0, data, 0, nullptr))
    fail(ErrorKind::data, "cannot write PNG " + path.string() + ": " + image.message);
  fs::rename(tmp, path);
}

}  // namespace detail

inline Image read_png_rgb(const fs::path& path) {
  int w = 0, h = 0;
  auto buf = detail::read_png_pixels(path, PNG_FORMAT_RGB, false, w, h);
  std::vector<Rgb> px(static_cast<std::size_t>(w) * h);
  std::memcpy(px.data(), buf.data(), buf.size());
  return Image(w, h, std::move(px));
}

inline void write_png_rgb(const fs::path& path, const Image& img) {
  static_assert(sizeof(Rgb) == 3);
  detail::write_png_pixels(path, PNG_FORMAT_RGB, img.width(), img.height(),
                           reinterpret_cast<const std::uint8_t*>(img.values().data()));
}

inline LabelMap read_label_png(const fs::path& path) {
  int w = 0, h = 0;
  auto buf = detail::read_png_pixels(path, PNG_FORMAT_GRAY, true, w, h);
  return LabelMap(w, h, std::move(buf));
}

inline void write_label_png(const fs::path& path, const LabelMap& labels) {
  detail::write_png_pixels(path, PNG_FORMAT_GRAY, labels.width(), labels.height(),
                           labels.values().data());
}

// ---------------------------------------------------------------------------
// float32 little-endian rasters, row-major, with "<file>.json" header.

struct RasterHeader {
  std::vector<int> shape;
  std::string order = "row-major";
  std::string dtype = "float32-le";
};

inline fs::path header_path(const fs::path& raster) {
  fs::path p = raster;
  p += ".json";
  return p;
}

inline void write_f32_raster(const fs::path& path, std::span<const float> values,
                             const std::vector<int>& shape) {
  std::size_t expected = 1;
  for (int d : shape) expected *= static_cast<std::size_t>(d);
  if (expected != values.size())
    fail(ErrorKind::data, "raster shape does not match value count for " + path.string());
  std::string bytes(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  write_file_atomic(path, bytes);
  write_json(header_path(path),
             json{{"dtype", "float32-le"}, {"order", "row-major"}, {"shape", shape}});
}

inline std::vector<float> read_f32_raster(const fs::path& path, std::vector<int>& shape) {
  const json header = read_json(header_path(path));
  if (header.value("dtype", "") != "float32-le" || header.value("order", "") != "row-major")
    fail(ErrorKind::data, "unsupported raster header for " + path.string());
  shape = header.at("shape").get<std::vector<int>>();
  std::size_t expected = 1;
  for (int d : shape) expected *= static_cast<std::size_t>(d);
  const std::string bytes = read_file(path);
  if (bytes.size() != expected * 4)
    fail(ErrorKind::data, "raster " + path.string() + " has " + std::to_string(bytes.size()) +
                              " bytes, header implies " + std::to_string(expected * 4));
  std::vector<float> values(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
  return values;
}

inline void write_confidence_map(const fs::path& path, const ConfidenceMap& conf) {
  write_f32_raster(path, conf.values(), {conf.height(), conf.width()});
}

inline ConfidenceMap read_confidence_map(const fs::path& path) {
  std::vector<int> shape;
  auto values = read_f32_raster(path, shape);
  if (shape.size() != 2) fail(ErrorKind::data, path.string() + ": expected an HxW raster");
  return ConfidenceMap(shape[1], shape[0], std::move(values));
}

inline void write_confidence_stack(const fs::path& path, const ConfidenceStack& stack) {
  write_f32_raster(path, stack.values(), {stack.num_classes(), stack.height(), stack.width()});
}

inline ConfidenceStack read_confidence_stack(const fs::path& path) {
  std::vector<int> shape;
  auto values = read_f32_raster(path, shape);
  if (shape.size() != 3) fail(ErrorKind::data, path.string() + ": expected a CxHxW raster");
  return ConfidenceStack(shape[2], shape[1], shape[0], std::move(values));
}

// ---------------------------------------------------------------------------
// Label spaces, manifests

inline json to_json(const LabelSpace& space) {
  json j{{"name", space.name()}, {"classes", space.class_names()}};
  if (space.eval_subset()) j["eval_subset"] = *space.eval_subset();
  return j;
}

inline LabelSpace label_space_from_json(const json& j) {
  try {
    std::optional<std::vector<int>> subset;
    if (j.contains("eval_subset")) subset = j.at("eval_subset").get<std::vector<int>>();
    return LabelSpace(j.value("name", ""), j.at("classes").get<std::vector<std::string>>(),
                      std::move(subset));
  } catch (const json::exception& e) {
    fail(ErrorKind::data, std::string("malformed label space: ") + e.what());
  }
}

inline const char* to_string(SplitKind kind) {
  switch (kind) {
    case SplitKind::labeled: return "labeled";
    case SplitKind::unlabeled: return "unlabeled";
    case SplitKind::pseudo_labeled: return "pseudo-labeled";
  }
  return "?";
}

inline SplitKind split_kind_from_string(const std::string& s) {
  if (s == "labeled") return SplitKind::labeled;
  if (s == "unlabeled") return SplitKind::unlabeled;
  if (s == "pseudo-labeled") return SplitKind::pseudo_labeled;
  fail(ErrorKind::data, "unknown split kind '" + s + "'");
}

inline std::string relative_to(const fs::path& target, const fs::path& base) {
  const fs::path abs_target = fs::absolute(target).lexically_normal();
  const fs::path abs_base = fs::absolute(base).lexically_normal();
  fs::path rel = abs_target.lexically_relative(abs_base);
  if (rel.empty()) return abs_target.generic_string();
  return rel.generic_string();
}

inline void save_manifest(const fs::path& path, const DatasetSplit& split) {
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  json entries = json::array();
  for (const auto& e : split.entries) {
    json je{{"image_id", e.image_id}, {"image_path", relative_to(e.image_path, base)}};
    if (e.label_path) je["label_path"] = relative_to(*e.label_path, base);
    if (e.sampling_weight) je["sampling_weight"] = *e.sampling_weight;
    entries.push_back(std::move(je));
  }
  write_json(path, json{{"name", split.name},
                        {"kind", to_string(split.kind)},
                        {"label_space", to_json(split.label_space)},
                        {"entries", std::move(entries)}});
}

inline DatasetSplit load_manifest(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::data, "manifest not found: " + path.string());
  const json j = read_json(path);
  const fs::path base = path.parent_path();
  DatasetSplit split;
  try {
    split.name = j.value("name", path.stem().string());
    split.kind = split_kind_from_string(j.value("kind", "unlabeled"));
    split.label_space = label_space_from_json(j.at("label_space"));
    std::set<std::string> seen;
    for (const auto& je : j.at("entries")) {
      DatasetEntry e;
      e.image_id = je.at("image_id").get<std::string>();
      if (!seen.insert(e.image_id).second)
        fail(ErrorKind::data, path.string() + ": duplicate image_id '" + e.image_id + "'");
      e.image_path = base / je.at("image_path").get<std::string>();
      if (je.contains("label_path")) e.label_path = base / je.at("label_path").get<std::string>();
      if (je.contains("sampling_weight")) e.sampling_weight = je.at("sampling_weight").get<double>();
      if (!fs::exists(e.image_path))
        fail(ErrorKind::data, "missing image file: " + e.image_path.string());
      if (e.label_path && !fs::exists(*e.label_path))
        fail(ErrorKind::data, "missing label file: " + e.label_path->string());
      split.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::data, path.string() + ": malformed manifest: " + e.what());
  }
  split.validate();
  return split;
}

// Thread-safe cache of decoded images keyed by path.
class ImageCache {
 public:
  std::shared_ptr<const Image> rgb(const fs::path& path) {
    const std::string key = path.string();
    {
      std::lock_guard lock(mutex_);
      if (auto it = rgb_.find(key); it != rgb_.end()) return it->second;
    }
    auto img = std::make_shared<const Image>(read_png_rgb(path));
    std::lock_guard lock(mutex_);
    return rgb_.emplace(key, std::move(img)).first->second;
  }

  std::shared_ptr<const LabelMap> labels(const fs::path& path) {
    const std::string key = path.string();
    {
      std::lock_guard lock(mutex_);
      if (auto it = labels_.find(key); it != labels_.end()) return it->second;
    }
    auto map = std::make_shared<const LabelMap>(read_label_png(path));
    std::lock_guard lock(mutex_);
    return labels_.emplace(key, std::move(map)).first->second;
  }

 private:
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const Image>> rgb_;
  std::map<std::string, std::shared_ptr<const LabelMap>> labels_;
};

inline json to_json(const ModelHandle& h) {
  return json{{"branch", h.branch}, {"session", h.session_id}, {"weights", h.weights}};
}

inline ModelHandle model_handle_from_json(const json& j) {
  return {j.at("branch").get<std::string>(), j.at("session").get<std::string>(),
          j.at("weights").get<std::string>()};
}

// ---------------------------------------------------------------------------
// Pseudo-label sets: <id>.png + <id>.conf.f32 (+ header) + index.json

inline std::string file_stem_for_id(const std::string& id) {
  std::string out = id;
  for (char& ch : out) {
    const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') ||
                    (ch >= '0' && ch <= '9') || ch == '_' || ch == '-' || ch == '.';
    if (!ok) ch = '_';
  }
  return out;
}

inline json to_json(const ThresholdVector& v) {
  return json{{"per_class", v.per_class},
              {"curriculum_fraction", v.curriculum_fraction},
              {"cycle", v.cycle}};
}

inline ThresholdVector threshold_vector_from_json(const json& j) {
  ThresholdVector v;
  v.per_class = j.at("per_class").get<std::vector<float>>();
  v.curriculum_fraction = j.at("curriculum_fraction").get<double>();
  v.cycle = j.at("cycle").get<int>();
  return v;
}

inline void save_pseudo_label_set(const fs::path& dir, const PseudoLabelSet& set,
                                  const std::optional<ThresholdVector>& vct) {
  fs::create_directories(dir);
  json entries = json::array();
  std::set<std::string> stems;
  for (const auto& p : set) {
    const std::string stem = file_stem_for_id(p.image_id());
    if (!stems.insert(stem).second)
      fail(ErrorKind::data, "image ids collide on file name '" + stem + "'");
    write_label_png(dir / (stem + ".png"), p.labels());
    write_confidence_map(dir / (stem + ".conf.f32"), p.pixel_confidence());
    entries.push_back(json{{"image_id", p.image_id()},
                           {"image_confidence", p.image_confidence()},
                           {"source_cycle", p.source_cycle()},
                           {"source_model", to_string(p.source_model())},
                           {"labels", stem + ".png"},
                           {"confidence", stem + ".conf.f32"}});
  }
  json index{{"entries", std::move(entries)}};
  if (vct) index["thresholds"] = to_json(*vct);
  write_json(dir / "index.json", index);
}

struct LoadedPseudoLabelSet {
  PseudoLabelSet set;
  std::optional<ThresholdVector> thresholds;
};

inline LoadedPseudoLabelSet load_pseudo_label_set(const fs::path& dir) {
  const json index = read_json(dir / "index.json");
  LoadedPseudoLabelSet out;
  try {
    for (const auto& e : index.at("entries")) {
      out.set.emplace_back(e.at("image_id").get<std::string>(),
                           read_label_png(dir / e.at("labels").get<std::string>()),
                           read_confidence_map(dir / e.at("confidence").get<std::string>()),
                           e.at("source_cycle").get<int>(),
                           model_tag_from_string(e.at("source_model").get<std::string>()));
    }
    if (index.contains("thresholds"))
      out.thresholds = threshold_vector_from_json(index.at("thresholds"));
  } catch (const json::exception& e) {
    fail(ErrorKind::data, dir.string() + ": malformed pseudo-label index: " + e.what());
  }
  return out;
}

}  // namespace cotrain
