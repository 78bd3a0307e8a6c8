#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "parefine/errors.hpp"
#include "parefine/pnm.hpp"
#include "parefine/tensor.hpp"

namespace parefine {

/// One image with its label and field-of-view mask.
/// image: 3 x H x W in [0, 1]; label, fov_mask: 1 x H x W, strictly 0/1.
template <typename T>
struct Sample {
  Tensor<T> image, label, fov_mask;
  std::string id;
};

/// Basenames per split. Text form:
///   # convention: <name>
///   [train]
///   <basename>
///   [test]
///   <basename>
struct SplitManifest {
  std::string convention;
  std::vector<std::string> train, test;
};

inline SplitManifest parse_manifest(const std::string& text) {
  SplitManifest m;
  std::istringstream in(text);
  std::string line;
  std::vector<std::string>* section = nullptr;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string key = "# convention:";
      if (line.rfind(key, 0) == 0) {
        m.convention = line.substr(key.size());
        m.convention.erase(0, m.convention.find_first_not_of(' '));
      }
      continue;
    }
    if (line == "[train]") {
      section = &m.train;
    } else if (line == "[test]") {
      section = &m.test;
    } else if (section == nullptr) {
      throw DataError("split manifest line " + std::to_string(lineno) + ": entry before [train]/[test] header");
    } else {
      section->push_back(line);
    }
  }
  return m;
}

inline std::string format_manifest(const SplitManifest& m) {
  std::string s;
  if (!m.convention.empty()) s += "# convention: " + m.convention + "\n";
  s += "[train]\n";
  for (const auto& b : m.train) s += b + "\n";
  s += "[test]\n";
  for (const auto& b : m.test) s += b + "\n";
  return s;
}

/// Builds a manifest from lexicographically sorted basenames using a named
/// benchmark convention:
///   official / drive: basenames tagged "_training" / "_test" go to their split;
///                     untagged lists split 20 / 20 by position.
///   chase:  first 20 train, last 8 test.
///   stare:  first 16 train, last 4 test.
///   first:<n>: first n train, the rest test.
inline SplitManifest make_manifest(const std::string& convention, std::vector<std::string> basenames) {
  std::sort(basenames.begin(), basenames.end());
  SplitManifest m;
  m.convention = convention;
  auto positional = [&](std::size_t n_train, std::size_t n_test) {
    if (basenames.size() != n_train + n_test) {
      throw DataError("split convention '" + convention + "' expects " + std::to_string(n_train + n_test) +
                      " images, found " + std::to_string(basenames.size()));
    }
    m.train.assign(basenames.begin(), basenames.begin() + static_cast<std::ptrdiff_t>(n_train));
    m.test.assign(basenames.begin() + static_cast<std::ptrdiff_t>(n_train), basenames.end());
  };
  if (convention == "official" || convention == "drive") {
    const bool tagged = std::all_of(basenames.begin(), basenames.end(), [](const std::string& b) {
      return b.find("_training") != std::string::npos || b.find("_test") != std::string::npos;
    });
    if (tagged) {
      for (const auto& b : basenames) (b.find("_training") != std::string::npos ? m.train : m.test).push_back(b);
    } else {
      positional(20, 20);
    }
  } else if (convention == "chase") {
    positional(20, 8);
  } else if (convention == "stare") {
    positional(16, 4);
  } else if (convention.rfind("first:", 0) == 0) {
    const std::size_t n = std::stoul(convention.substr(6));
    if (n > basenames.size()) throw DataError("split convention '" + convention + "' exceeds image count");
    positional(n, basenames.size() - n);
  } else {
    throw DataError("unknown split convention '" + convention + "'");
  }
  return m;
}

struct DatasetLayout {
  static constexpr const char* kImages = "images";
  static constexpr const char* kLabels = "labels";
  static constexpr const char* kMasks = "masks";
  static constexpr const char* kManifest = "split.txt";
};

namespace dataset_detail {

inline std::map<std::string, std::filesystem::path> list_pnm(const std::filesystem::path& dir) {
  std::map<std::string, std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension().string();
    if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") out[e.path().stem().string()] = e.path();
  }
  return out;
}

// Thresholds at 0.5; reports whether any value was not exactly 0 or 1.
template <typename T>
bool binarize(Tensor<T>& t) {
  bool soft = false;
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (t[i] != T(0) && t[i] != T(1)) soft = true;
    t[i] = t[i] >= T(0.5) ? T(1) : T(0);
  }
  return soft;
}

}  // namespace dataset_detail

/// Loads one image/label(/mask) triple.
template <typename T>
Sample<T> load_sample(const std::filesystem::path& image, const std::filesystem::path& label,
                      const std::filesystem::path& mask, std::vector<std::string>* warnings = nullptr) {
  Sample<T> s;
  s.id = image.stem().string();
  s.image = load_image<T>(image, true);
  s.label = load_image<T>(label);
  if (s.label.dim(0) != 1) throw DataError("label " + label.string() + " must be single-channel (P5)");
  if (dataset_detail::binarize(s.label) && warnings) warnings->push_back("label " + s.id + " was not binary; thresholded at 0.5");
  if (!mask.empty()) {
    s.fov_mask = load_image<T>(mask);
    if (s.fov_mask.dim(0) != 1) throw DataError("mask " + mask.string() + " must be single-channel (P5)");
    dataset_detail::binarize(s.fov_mask);
  } else {
    s.fov_mask = Tensor<T>(s.label.shape(), T(1));
  }
  const Shape spatial{1, s.image.dim(1), s.image.dim(2)};
  if (s.label.shape() != spatial || s.fov_mask.shape() != spatial) {
    throw DataError("sample " + s.id + ": image, label and mask sizes differ");
  }
  return s;
}

/// Loads `split` ("train", "test" or "all") from root/{images,labels,masks}.
/// train/test membership comes from root/split.txt; "all" ignores it.
/// Order is lexicographic by basename.
template <typename T>
std::vector<Sample<T>> load_dataset(const std::filesystem::path& root, const std::string& split,
                                    std::vector<std::string>* warnings = nullptr) {
  const auto images = dataset_detail::list_pnm(root / DatasetLayout::kImages);
  const auto labels = dataset_detail::list_pnm(root / DatasetLayout::kLabels);
  const auto masks = dataset_detail::list_pnm(root / DatasetLayout::kMasks);
  if (images.empty()) throw DataError("no images under " + (root / DatasetLayout::kImages).string());

  std::vector<std::string> wanted;
  if (split == "all") {
    for (const auto& [b, _] : images) wanted.push_back(b);
  } else if (split == "train" || split == "test") {
    const auto manifest_path = root / DatasetLayout::kManifest;
    if (!std::filesystem::exists(manifest_path)) throw DataError("missing split manifest " + manifest_path.string());
    std::ifstream in(manifest_path);
    std::stringstream ss;
    ss << in.rdbuf();
    const SplitManifest m = parse_manifest(ss.str());
    wanted = split == "train" ? m.train : m.test;
    std::sort(wanted.begin(), wanted.end());
  } else {
    throw DataError("unknown split '" + split + "' (expected train, test or all)");
  }

  std::vector<Sample<T>> out;
  for (const auto& b : wanted) {
    const auto img = images.find(b);
    if (img == images.end()) throw DataError("split lists '" + b + "' but no such image exists");
    const auto lbl = labels.find(b);
    if (lbl == labels.end()) throw DataError("missing label for image '" + b + "'");
    const auto msk = masks.find(b);
    out.push_back(load_sample<T>(img->second, lbl->second, msk == masks.end() ? std::filesystem::path{} : msk->second,
                                 warnings));
  }
  return out;
}

/// Writes samples as images/<id>.ppm, labels/<id>.pgm, masks/<id>.pgm plus the manifest.
template <typename T>
void write_dataset(const std::filesystem::path& root, const std::vector<Sample<T>>& samples,
                   const SplitManifest& manifest) {
  for (const char* sub : {DatasetLayout::kImages, DatasetLayout::kLabels, DatasetLayout::kMasks})
    std::filesystem::create_directories(root / sub);
  for (const auto& s : samples) {
    write_image(root / DatasetLayout::kImages / (s.id + ".ppm"), s.image);
    write_image(root / DatasetLayout::kLabels / (s.id + ".pgm"), s.label);
    write_image(root / DatasetLayout::kMasks / (s.id + ".pgm"), s.fov_mask);
  }
  std::ofstream(root / DatasetLayout::kManifest) << format_manifest(manifest);
}

}  // namespace parefine
