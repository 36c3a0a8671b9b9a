// Copyright 2026 The r2r Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dataset ingestion (CSV manifest + PGM/PPM images) and the synthetic
// localizable multi-label benchmark.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "r2r/errors.hpp"
#include "r2r/rng.hpp"
#include "r2r/tensor.hpp"

namespace r2r {

/// Row-major binary mask.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  static BinaryMask empty(std::size_t h, std::size_t w) { return {h, w, std::vector<std::uint8_t>(h * w, 0)}; }
  bool at(std::size_t y, std::size_t x) const { return bits[y * width + x] != 0; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
};

struct Sample {
  Tensor image;                       // [c x h x w], values in [0, 1]
  std::vector<std::uint8_t> labels;   // multi-hot, one entry per class
  // One entry per class; present only for positive classes of synthetic data.
  std::vector<std::optional<BinaryMask>> gt_regions;

  Tensor targets() const {
    return Tensor::from_data({labels.size()}, std::vector<double>(labels.begin(), labels.end()));
  }
  bool has_gt() const {
    return std::any_of(gt_regions.begin(), gt_regions.end(),
                       [](const auto& r) { return r.has_value(); });
  }
  /// Union of all ground-truth regions.
  std::optional<BinaryMask> gt_union() const {
    std::optional<BinaryMask> out;
    for (const auto& r : gt_regions) {
      if (!r) continue;
      if (!out) out = BinaryMask::empty(r->height, r->width);
      for (std::size_t i = 0; i < r->bits.size(); ++i) out->bits[i] |= r->bits[i];
    }
    return out;
  }
};

/// Column order of the 14-finding chest X-ray label set.
inline const std::vector<std::string>& nih_class_names() {
  static const std::vector<std::string> names{
      "Atelectasis", "Cardiomegaly", "Effusion",      "Infiltration",       "Mass",
      "Nodule",      "Pneumonia",    "Pneumothorax",  "Consolidation",      "Edema",
      "Emphysema",   "Fibrosis",     "Pleural_Thickening", "Hernia"};
  return names;
}

inline const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names{"disc", "square"};
  return names;
}

// ---------------------------------------------------------------------------
// Images

namespace detail {

inline std::string read_pnm_token(std::istream& in, const std::string& path) {
  std::string tok;
  while (in) {
    int ch = in.peek();
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
  in >> tok;
  if (tok.empty()) throw FormatError(path + ": truncated header");
  return tok;
}

inline std::size_t parse_pnm_number(const std::string& tok, const std::string& path) {
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw FormatError(path + ": bad header field '" + tok + "'");
  }
  return static_cast<std::size_t>(std::stoull(tok));
}

}  // namespace detail

/// Reads a binary PGM (P5) as [1 x h x w] or PPM (P6) as [3 x h x w], scaled
/// by maxval into [0, 1].
inline Tensor read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  const std::string name = path.string();
  std::string magic;
  in >> magic;
  std::size_t channels = 0;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw FormatError(name + ": bad magic '" + magic.substr(0, 8) + "', expected P5 or P6");
  }
  const std::size_t w = detail::parse_pnm_number(detail::read_pnm_token(in, name), name);
  const std::size_t h = detail::parse_pnm_number(detail::read_pnm_token(in, name), name);
  const std::size_t maxval = detail::parse_pnm_number(detail::read_pnm_token(in, name), name);
  if (w == 0 || h == 0) throw FormatError(name + ": zero image extent");
  if (maxval == 0 || maxval > 65535) throw FormatError(name + ": maxval out of range");
  in.get();  // single whitespace byte before the raster
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  const std::size_t count = w * h * channels;
  std::vector<unsigned char> raw(count * bytes_per);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
    throw FormatError(name + ": truncated payload (" + std::to_string(in.gcount()) + " of " +
                      std::to_string(raw.size()) + " bytes)");
  }
  std::vector<double> data(count);
  const auto scale = static_cast<double>(maxval);
  // Interleaved RGB on disk, planar in the tensor.
  for (std::size_t p = 0; p < w * h; ++p) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t i = p * channels + c;
      const double v = bytes_per == 2 ? static_cast<double>((raw[2 * i] << 8) | raw[2 * i + 1])
                                      : static_cast<double>(raw[i]);
      data[c * w * h + p] = std::min(v, scale) / scale;
    }
  }
  return Tensor::from_data({channels, h, w}, std::move(data));
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Writes an 8-bit P5 file from values in [0, 1] (clamped).
inline void write_pgm(const std::filesystem::path& path, std::size_t h, std::size_t w,
                      std::span<const double> values) {
  if (values.size() != h * w) throw DimensionError("write_pgm: value count does not match extent");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<char> raw(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) raw[i] = static_cast<char>(to_byte(values[i]));
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

/// Writes an 8-bit P6 file from interleaved RGB bytes.
inline void write_ppm(const std::filesystem::path& path, std::size_t h, std::size_t w,
                      std::span<const std::uint8_t> rgb) {
  if (rgb.size() != 3 * h * w) throw DimensionError("write_ppm: byte count does not match extent");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

/// Writes a tensor [1 x h x w] (P5) or [3 x h x w] (P6) as 8 bits per channel.
inline void write_image(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw DimensionError("write_image: expected [1|3 x h x w], got " + to_string(image.shape()));
  }
  const std::size_t h = image.dim(1);
  const std::size_t w = image.dim(2);
  if (image.dim(0) == 1) {
    write_pgm(path, h, w, image.data());
    return;
  }
  std::vector<std::uint8_t> rgb(3 * h * w);
  for (std::size_t p = 0; p < h * w; ++p) {
    for (std::size_t c = 0; c < 3; ++c) rgb[p * 3 + c] = to_byte(image[c * h * w + p]);
  }
  write_ppm(path, h, w, rgb);
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string image;
  std::vector<std::uint8_t> labels;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace detail

/// Parses `image,<class_1>,...,<class_k>` with one 0/1 cell per class.
/// Image paths are resolved relative to the CSV's directory.
inline DatasetManifest load_manifest(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("cannot open manifest " + csv_path.string());
  DatasetManifest m;
  m.root = csv_path.parent_path();
  std::string line;
  if (!std::getline(in, line)) throw ParseError(csv_path.string() + ": empty manifest");
  auto header = detail::split_csv_line(line);
  if (header.size() < 2 || header[0] != "image") {
    throw ParseError(csv_path.string() + ": header must be 'image,<class_1>,...'");
  }
  m.class_names.assign(header.begin() + 1, header.end());
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ParseError(csv_path.string() + ": row " + std::to_string(row) + " has " +
                       std::to_string(cells.size()) + " cells, header has " +
                       std::to_string(header.size()));
    }
    ManifestEntry e;
    e.image = cells[0];
    for (std::size_t c = 1; c < cells.size(); ++c) {
      if (cells[c] != "0" && cells[c] != "1") {
        throw ParseError(csv_path.string() + ": row " + std::to_string(row) + " column '" +
                         header[c] + "' is '" + cells[c] + "', expected 0 or 1");
      }
      e.labels.push_back(cells[c] == "1" ? 1 : 0);
    }
    if (!std::filesystem::exists(m.root / e.image)) {
      throw IngestionError(csv_path.string() + ": row " + std::to_string(row) + " image '" +
                           e.image + "' not found");
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

/// Reads every manifest image. A ground-truth region for class c is picked up
/// from regions/<image stem>_<class c>.pgm (pixels > 0.5 are inside) when
/// that file exists, which is the layout export_dataset writes.
inline std::vector<Sample> load_samples(const DatasetManifest& manifest) {
  std::vector<Sample> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    Sample s;
    s.image = read_image(manifest.root / e.image);
    s.labels = e.labels;
    s.gt_regions.resize(e.labels.size());
    const std::string stem = std::filesystem::path(e.image).stem().string();
    for (std::size_t c = 0; c < e.labels.size(); ++c) {
      const auto region_path =
          manifest.root / "regions" / (stem + "_" + manifest.class_names[c] + ".pgm");
      if (!std::filesystem::exists(region_path)) continue;
      const Tensor r = read_image(region_path);
      if (r.dim(1) != s.image.dim(1) || r.dim(2) != s.image.dim(2)) {
        throw IngestionError(region_path.string() + ": region size differs from its image");
      }
      BinaryMask mask = BinaryMask::empty(r.dim(1), r.dim(2));
      for (std::size_t p = 0; p < mask.bits.size(); ++p) mask.bits[p] = r[p] > 0.5 ? 1 : 0;
      s.gt_regions[c] = std::move(mask);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

/// Noisy-background images carrying a bright filled disc (class 0) and/or a
/// bright filled square (class 1). Each class is present independently with
/// probability 0.5; ground truth is the exact shape footprint.
inline std::vector<Sample> generate_synthetic(std::size_t n, std::size_t size, std::uint64_t seed) {
  if (n < 1) throw ContractError("generate_synthetic: n must be >= 1");
  if (size < 16) throw ContractError("generate_synthetic: size must be >= 16");
  constexpr double kNoise = 0.2;
  constexpr double kBrightness = 0.8;
  const double s = static_cast<double>(size);
  Rng rng(seed);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> px(size * size);
    for (double& v : px) v = rng.uniform(0.0, kNoise);
    const bool has_disc = rng.bernoulli(0.5);
    const bool has_square = rng.bernoulli(0.5);
    const double radius = rng.uniform(s * 3.0 / 32.0, s * 5.0 / 32.0);
    const double side = rng.uniform(s * 3.0 / 16.0, s * 5.0 / 16.0);
    // Centers; resampled until the two bounding boxes are at least 2px apart.
    double dcx = 0, dcy = 0, sx = 0, sy = 0;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      dcx = rng.uniform(radius + 1, s - radius - 1);
      dcy = rng.uniform(radius + 1, s - radius - 1);
      sx = rng.uniform(1, s - side - 1);
      sy = rng.uniform(1, s - side - 1);
      if (!(has_disc && has_square)) break;
      const bool apart = dcx + radius + 2 <= sx || sx + side + 2 <= dcx - radius ||
                         dcy + radius + 2 <= sy || sy + side + 2 <= dcy - radius;
      if (apart) break;
    }
    Sample smp;
    smp.labels = {static_cast<std::uint8_t>(has_disc), static_cast<std::uint8_t>(has_square)};
    smp.gt_regions.resize(2);
    if (has_disc) {
      BinaryMask m = BinaryMask::empty(size, size);
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          const double dx = x + 0.5 - dcx;
          const double dy = y + 0.5 - dcy;
          if (dx * dx + dy * dy <= radius * radius) m.bits[y * size + x] = 1;
        }
      }
      smp.gt_regions[0] = std::move(m);
    }
    if (has_square) {
      BinaryMask m = BinaryMask::empty(size, size);
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          if (x + 0.5 >= sx && x + 0.5 <= sx + side && y + 0.5 >= sy && y + 0.5 <= sy + side) {
            m.bits[y * size + x] = 1;
          }
        }
      }
      smp.gt_regions[1] = std::move(m);
    }
    for (const auto& r : smp.gt_regions) {
      if (!r) continue;
      for (std::size_t p = 0; p < px.size(); ++p) {
        if (r->bits[p]) px[p] = std::min(1.0, px[p] + kBrightness);
      }
    }
    smp.image = Tensor::from_data({1, size, size}, std::move(px));
    out.push_back(std::move(smp));
  }
  return out;
}

/// Writes samples in the manifest layout: manifest.csv, images/NNNNN.pgm and
/// regions/NNNNN_<class>.pgm for every ground-truth region.
inline void export_dataset(const std::vector<Sample>& samples,
                           const std::vector<std::string>& class_names,
                           const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "regions");
  std::ofstream csv(dir / "manifest.csv");
  if (!csv) throw IoError("cannot write " + (dir / "manifest.csv").string());
  csv << "image";
  for (const auto& c : class_names) csv << ',' << c;
  csv << '\n';
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::ostringstream stem;
    stem << std::setw(5) << std::setfill('0') << i;
    const std::string rel = "images/" + stem.str() + ".pgm";
    write_image(dir / rel, samples[i].image);
    csv << rel;
    for (auto l : samples[i].labels) csv << ',' << static_cast<int>(l);
    csv << '\n';
    for (std::size_t c = 0; c < samples[i].gt_regions.size(); ++c) {
      const auto& r = samples[i].gt_regions[c];
      if (!r) continue;
      std::vector<double> v(r->bits.begin(), r->bits.end());
      write_pgm(dir / "regions" / (stem.str() + "_" + class_names.at(c) + ".pgm"), r->height,
                r->width, v);
    }
  }
}

// ---------------------------------------------------------------------------
// Batching

/// Index batches for one epoch: a permutation seeded by (shuffle_seed, epoch),
/// cut into chunks of batch_size with the partial tail kept.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                           std::uint64_t shuffle_seed,
                                                           std::size_t epoch = 0) {
  if (n == 0) throw ContractError("batching an empty dataset");
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  Rng rng(shuffle_seed * 0x9E3779B97F4A7C15ULL + epoch);
  const auto perm = rng.permutation(n);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

/// Epoch-by-epoch batch source over a sample list.
class BatchIterator {
 public:
  BatchIterator(const std::vector<Sample>& samples, std::size_t batch_size,
                std::uint64_t shuffle_seed)
      : samples_(&samples), batch_size_(batch_size), seed_(shuffle_seed) {
    if (samples.empty()) throw ContractError("batching an empty dataset");
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  }

  /// Batches of the next epoch, as pointers into the sample list.
  std::vector<std::vector<const Sample*>> next_epoch() {
    std::vector<std::vector<const Sample*>> out;
    for (const auto& idx : epoch_batches(samples_->size(), batch_size_, seed_, epoch_++)) {
      auto& batch = out.emplace_back();
      for (std::size_t i : idx) batch.push_back(&(*samples_)[i]);
    }
    return out;
  }

  std::size_t epoch() const { return epoch_; }

 private:
  const std::vector<Sample>* samples_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
};

}  // namespace r2r
