#pragma once

// Annotated samples, ROI masks, and the on-disk dataset layout:
//
//   root/index.csv    sample_id,label,image,mask
//   root/boxes.csv    sample_id,x_min,y_min,x_max,y_max   (optional, half-open)
//   root/classes.txt  one class identifier per line          (optional)
//   root/dataset.cfg  allow_empty_masks=0|1, source=...      (optional)
//
// `image` is one PNG/PPM file, or several single-channel files joined with ';'
// that are stacked in the given order. An empty `mask` falls back to the
// sample's boxes.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "protoxplain/image_io.hpp"
#include "protoxplain/keyvalue.hpp"
#include "protoxplain/tensor.hpp"

namespace protoxplain {

enum class SampleSource { synthetic, brats_style, cxr_style };

inline std::string to_string(SampleSource s) {
  switch (s) {
    case SampleSource::synthetic: return "synthetic";
    case SampleSource::brats_style: return "brats-style";
    case SampleSource::cxr_style: return "cxr-style";
  }
  return "unknown";
}

inline SampleSource parse_source(const std::string& s) {
  if (s == "synthetic") return SampleSource::synthetic;
  if (s == "brats-style") return SampleSource::brats_style;
  if (s == "cxr-style") return SampleSource::cxr_style;
  throw ConfigError("unknown sample source " + s);
}

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AnnotatedSample {
  Tensor3 image;  // values in [0,1]
  std::string label;
  std::size_t label_index = 0;
  Grid roi_mask;  // {0,1}
  std::string sample_id;
  SampleSource source = SampleSource::synthetic;

  bool has_mask() const { return roi_mask.size() > 0 && roi_mask.sum() > 0.0; }
};

/// Half-open pixel box [x_min, x_max) x [y_min, y_max).
struct BoundingBox {
  long x_min = 0;
  long y_min = 0;
  long x_max = 0;
  long y_max = 0;
};

struct RasterResult {
  Grid mask;
  std::vector<std::string> warnings;
};

/// Union of the boxes after clipping; boxes that end up empty are skipped
/// with a warning.
inline RasterResult rasterize_boxes(const std::vector<BoundingBox>& boxes, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ContractError("rasterize_boxes: empty grid");
  RasterResult r{Grid::Zero(static_cast<Eigen::Index>(height), static_cast<Eigen::Index>(width)), {}};
  const long h = static_cast<long>(height);
  const long w = static_cast<long>(width);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i];
    const long x0 = std::clamp(b.x_min, 0L, w);
    const long x1 = std::clamp(b.x_max, 0L, w);
    const long y0 = std::clamp(b.y_min, 0L, h);
    const long y1 = std::clamp(b.y_max, 0L, h);
    if (x0 >= x1 || y0 >= y1) {
      r.warnings.push_back("box " + std::to_string(i) + " (" + std::to_string(b.x_min) + "," + std::to_string(b.y_min) +
                           "," + std::to_string(b.x_max) + "," + std::to_string(b.y_max) +
                           ") has zero area after clipping; skipped");
      continue;
    }
    r.mask.block(y0, x0, y1 - y0, x1 - x0) = 1.0;
  }
  return r;
}

/// Stacks single-channel planes in order, min-max normalizing each to [0,1].
/// Constant planes become all-zero.
inline Tensor3 stack_channels(const std::vector<Grid>& sequences, std::size_t expected_channels) {
  if (sequences.size() != expected_channels) {
    throw ContractError("stack_channels: expected " + std::to_string(expected_channels) + " channels, got " +
                        std::to_string(sequences.size()));
  }
  if (sequences.empty()) throw ContractError("stack_channels: no channels");
  const auto h = static_cast<std::size_t>(sequences.front().rows());
  const auto w = static_cast<std::size_t>(sequences.front().cols());
  Tensor3 out(sequences.size(), h, w);
  for (std::size_t c = 0; c < sequences.size(); ++c) {
    const Grid& s = sequences[c];
    if (static_cast<std::size_t>(s.rows()) != h || static_cast<std::size_t>(s.cols()) != w) {
      throw ContractError("stack_channels: channel " + std::to_string(c) + " is " + std::to_string(s.rows()) + "x" +
                          std::to_string(s.cols()) + ", expected " + std::to_string(h) + "x" + std::to_string(w));
    }
    const double lo = s.minCoeff();
    const double range = s.maxCoeff() - lo;
    double* dst = out.data.data() + c * out.plane();
    for (std::size_t k = 0; k < out.plane(); ++k) dst[k] = range > 0.0 ? (s.data()[k] - lo) / range : 0.0;
  }
  return out;
}

struct IndexEntry {
  std::string sample_id;
  std::string label;
  std::string image;  // relative to root
  std::string mask;   // relative to root; empty -> boxes
};

struct DatasetIndex {
  std::filesystem::path root;
  std::vector<IndexEntry> entries;
  std::vector<std::string> class_catalog;
  std::map<std::string, std::vector<BoundingBox>> boxes;
  bool allow_empty_masks = false;
  SampleSource source = SampleSource::brats_style;

  std::size_t class_index(const std::string& label) const {
    const auto it = std::find(class_catalog.begin(), class_catalog.end(), label);
    if (it == class_catalog.end()) throw DataError("unknown label " + label);
    return static_cast<std::size_t>(it - class_catalog.begin());
  }

  bool operator==(const DatasetIndex& o) const {
    if (root != o.root || class_catalog != o.class_catalog || allow_empty_masks != o.allow_empty_masks ||
        source != o.source || entries.size() != o.entries.size() || boxes.size() != o.boxes.size()) {
      return false;
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& a = entries[i];
      const auto& b = o.entries[i];
      if (a.sample_id != b.sample_id || a.label != b.label || a.image != b.image || a.mask != b.mask) return false;
    }
    for (const auto& [id, list] : boxes) {
      const auto it = o.boxes.find(id);
      if (it == o.boxes.end() || it->second.size() != list.size()) return false;
      for (std::size_t i = 0; i < list.size(); ++i) {
        const auto& a = list[i];
        const auto& b = it->second[i];
        if (a.x_min != b.x_min || a.y_min != b.y_min || a.x_max != b.x_max || a.y_max != b.y_max) return false;
      }
    }
    return true;
  }
};

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, sep)) out.emplace_back(trim(field));
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path,
                                                      const std::vector<std::string>& header) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  if (split(std::string(trim(line)), ',') != header) {
    std::string expected;
    for (const auto& h : header) expected += (expected.empty() ? "" : ",") + h;
    throw DataError(path.string() + ": expected header '" + expected + "'");
  }
  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto row = split(std::string(trim(line)), ',');
    if (row.size() != header.size()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " fields");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<std::string> image_parts(const std::string& field) { return split(field, ';'); }

}  // namespace detail

inline DatasetIndex load_index(const std::filesystem::path& root) {
  DatasetIndex idx;
  idx.root = root;
  const auto index_path = root / "index.csv";
  if (!std::filesystem::exists(index_path)) throw DataError("missing " + index_path.string());

  if (std::filesystem::exists(root / "dataset.cfg")) {
    const auto cfg = KeyValues::load((root / "dataset.cfg").string());
    idx.allow_empty_masks = cfg.integer("allow_empty_masks", 0) != 0;
    if (auto s = cfg.get("source")) idx.source = parse_source(*s);
  }

  const bool fixed_catalog = std::filesystem::exists(root / "classes.txt");
  if (fixed_catalog) {
    std::ifstream in(root / "classes.txt");
    std::string line;
    while (std::getline(in, line)) {
      const auto name = std::string(trim(line));
      if (name.empty()) continue;
      if (std::find(idx.class_catalog.begin(), idx.class_catalog.end(), name) != idx.class_catalog.end()) {
        throw DataError("classes.txt: duplicate class " + name);
      }
      idx.class_catalog.push_back(name);
    }
  }

  std::set<std::string> seen;
  for (auto& row : detail::read_csv(index_path, {"sample_id", "label", "image", "mask"})) {
    IndexEntry e{row[0], row[1], row[2], row[3]};
    if (e.sample_id.empty()) throw DataError("index.csv: empty sample_id");
    if (!seen.insert(e.sample_id).second) throw DataError("index.csv: duplicate sample_id " + e.sample_id);
    if (std::find(idx.class_catalog.begin(), idx.class_catalog.end(), e.label) == idx.class_catalog.end()) {
      if (fixed_catalog) throw DataError("sample " + e.sample_id + ": unknown label " + e.label);
      idx.class_catalog.push_back(e.label);
    }
    if (e.image.empty()) throw DataError("sample " + e.sample_id + ": no image");
    for (const auto& part : detail::image_parts(e.image)) {
      if (!std::filesystem::exists(root / part)) {
        throw DataError("sample " + e.sample_id + ": missing image file " + (root / part).string());
      }
    }
    if (!e.mask.empty() && !std::filesystem::exists(root / e.mask)) {
      throw DataError("sample " + e.sample_id + ": missing mask file " + (root / e.mask).string());
    }
    idx.entries.push_back(std::move(e));
  }

  if (std::filesystem::exists(root / "boxes.csv")) {
    for (const auto& row : detail::read_csv(root / "boxes.csv", {"sample_id", "x_min", "y_min", "x_max", "y_max"})) {
      if (!seen.count(row[0])) throw DataError("boxes.csv: unknown sample_id " + row[0]);
      BoundingBox b;
      try {
        b = {std::stol(row[1]), std::stol(row[2]), std::stol(row[3]), std::stol(row[4])};
      } catch (const std::exception&) {
        throw DataError("boxes.csv: non-integer coordinate for " + row[0]);
      }
      idx.boxes[row[0]].push_back(b);
    }
  }

  for (const auto& e : idx.entries) {
    if (e.mask.empty() && !idx.boxes.count(e.sample_id) && !idx.allow_empty_masks) {
      throw DataError("sample " + e.sample_id + ": no mask or boxes and the dataset does not allow empty masks");
    }
  }
  return idx;
}

struct LoadedSample {
  AnnotatedSample sample;
  std::vector<std::string> warnings;
};

inline LoadedSample load_sample(const DatasetIndex& idx, std::size_t i, std::size_t input_channels) {
  const auto& e = idx.entries.at(i);
  LoadedSample out;
  auto& s = out.sample;
  s.sample_id = e.sample_id;
  s.label = e.label;
  s.label_index = idx.class_index(e.label);

  std::vector<Grid> planes;
  const auto parts = detail::image_parts(e.image);
  for (const auto& part : parts) {
    auto ch = read_channels((idx.root / part).string());
    if (parts.size() > 1 && ch.size() != 1) {
      throw DataError("sample " + e.sample_id + ": stacked sequence " + part + " is not single-channel");
    }
    planes.insert(planes.end(), ch.begin(), ch.end());
  }
  if (planes.size() == 1 && input_channels > 1) planes.resize(input_channels, planes.front());
  try {
    s.image = stack_channels(planes, input_channels);
  } catch (const ContractError& err) {
    throw DataError("sample " + e.sample_id + ": " + err.what());
  }

  if (!e.mask.empty()) {
    s.roi_mask = read_mask((idx.root / e.mask).string());
    s.source = idx.source;
  } else {
    const auto it = idx.boxes.find(e.sample_id);
    auto r = rasterize_boxes(it == idx.boxes.end() ? std::vector<BoundingBox>{} : it->second, s.image.height,
                             s.image.width);
    s.roi_mask = std::move(r.mask);
    for (auto& w : r.warnings) out.warnings.push_back(e.sample_id + ": " + w);
    s.source = idx.source == SampleSource::synthetic ? SampleSource::synthetic : SampleSource::cxr_style;
  }
  if (static_cast<std::size_t>(s.roi_mask.rows()) != s.image.height ||
      static_cast<std::size_t>(s.roi_mask.cols()) != s.image.width) {
    throw DataError("sample " + e.sample_id + ": mask size differs from image size");
  }
  if (!s.has_mask() && !idx.allow_empty_masks) throw DataError("sample " + e.sample_id + ": empty ROI mask");
  return out;
}

/// A dataset index with every sample loaded into memory.
struct Dataset {
  DatasetIndex index;
  std::vector<std::shared_ptr<const AnnotatedSample>> samples;
  std::vector<std::string> warnings;

  std::size_t num_classes() const { return index.class_catalog.size(); }

  std::vector<std::size_t> members(std::size_t class_index) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i]->label_index == class_index) out.push_back(i);
    }
    return out;
  }

  std::optional<std::size_t> find(const std::string& sample_id) const {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i]->sample_id == sample_id) return i;
    }
    return std::nullopt;
  }

  /// In-memory dataset; labels must already carry their catalog indices.
  static Dataset from_samples(std::vector<AnnotatedSample> samples, std::vector<std::string> catalog,
                              bool allow_empty_masks = false) {
    Dataset ds;
    ds.index.class_catalog = std::move(catalog);
    ds.index.allow_empty_masks = allow_empty_masks;
    for (auto& s : samples) {
      ds.index.entries.push_back({s.sample_id, s.label, "", ""});
      ds.samples.push_back(std::make_shared<const AnnotatedSample>(std::move(s)));
    }
    return ds;
  }
};

inline Dataset load_dataset(const std::filesystem::path& root, std::size_t input_channels) {
  Dataset ds;
  ds.index = load_index(root);
  for (std::size_t i = 0; i < ds.index.entries.size(); ++i) {
    auto loaded = load_sample(ds.index, i, input_channels);
    ds.samples.push_back(std::make_shared<const AnnotatedSample>(std::move(loaded.sample)));
    ds.warnings.insert(ds.warnings.end(), loaded.warnings.begin(), loaded.warnings.end());
  }
  return ds;
}

}  // namespace protoxplain
