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

// Checkpoint file layout (all integers little-endian):
//
//   "R2RP"  u32 version (=1)  u32 tensor_count
//   tensor_count x { u16 name_len, name bytes (UTF-8), u8 rank,
//                    rank x u32 dim, numel x f32 }
//   u32 CRC-32 of every byte between the header and the CRC
//
// A checkpoint stores the model parameters under their inventory names, the
// model configuration as the tensor "meta.model_config", and optionally the
// optimizer state under "optim.*".

#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "r2r/errors.hpp"
#include "r2r/model.hpp"
#include "r2r/optim.hpp"
#include "r2r/tensor.hpp"

namespace r2r {

inline constexpr char kCheckpointMagic[4] = {'R', '2', 'R', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    u32(bits);
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, std::string path)
      : bytes_(bytes), path_(std::move(path)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError("checkpoint " + path_ + ": truncated " + what + " at offset " +
                        std::to_string(pos_));
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw FormatError("checkpoint " + path_ + ": " + msg + " at offset " + std::to_string(at));
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

inline std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensors(const std::vector<StoredTensor>& tensors) {
  if (tensors.empty()) throw ContractError("checkpoint must contain at least one tensor");
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  const std::size_t body_start = w.bytes().size();
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw ContractError("tensor name too long: " + t.name);
    if (t.shape.size() > 0xFF) throw ContractError("tensor rank too large: " + t.name);
    if (numel(t.shape) != t.values.size()) {
      throw DimensionError("stored tensor " + t.name + " has inconsistent shape");
    }
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.raw(t.name.data(), t.name.size());
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float f : t.values) w.f32(f);
  }
  auto& bytes = w.bytes();
  const std::uint32_t crc =
      detail::crc32_of(bytes.data() + body_start, bytes.size() - body_start);
  w.u32(crc);
  return std::move(bytes);
}

inline std::vector<StoredTensor> decode_tensors(const std::vector<std::uint8_t>& bytes,
                                                const std::string& path = "<memory>") {
  detail::ByteReader r(bytes, path);
  const std::string magic = r.str(4, "magic");
  if (magic != std::string(kCheckpointMagic, 4)) r.fail("bad magic", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    r.fail("unsupported version " + std::to_string(version), 4);
  }
  const std::uint32_t count = r.u32("tensor count");
  if (count == 0) r.fail("empty tensor table", 8);
  const std::size_t body_start = r.offset();
  std::vector<StoredTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const std::uint16_t len = r.u16("name length");
    t.name = r.str(len, "name");
    const std::uint8_t rank = r.u8("rank");
    for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(r.u32("dims"));
    const std::size_t n = numel(t.shape);
    r.need(n * 4, "payload");
    t.values.resize(n);
    for (std::size_t j = 0; j < n; ++j) t.values[j] = r.f32("payload");
    out.push_back(std::move(t));
  }
  const std::size_t body_end = r.offset();
  const std::uint32_t stored = r.u32("CRC");
  const std::uint32_t actual = detail::crc32_of(bytes.data() + body_start, body_end - body_start);
  if (stored != actual) r.fail("CRC mismatch", body_end);
  if (r.remaining() != 0) r.fail("trailing bytes", r.offset());
  return out;
}

/// CRC field of a checkpoint file (its last four bytes).
inline std::uint32_t checkpoint_crc(const std::filesystem::path& path) {
  const auto bytes = detail::read_all(path);
  if (bytes.size() < 16) throw FormatError("checkpoint " + path.string() + ": too short");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
  return v;
}

namespace detail {

inline StoredTensor store(const std::string& name, Shape shape, std::span<const double> values) {
  StoredTensor t{name, std::move(shape), {}};
  t.values.reserve(values.size());
  for (double v : values) t.values.push_back(static_cast<float>(v));
  return t;
}

inline std::vector<double> encode_config(const ModelConfig& c) {
  std::vector<double> v{1.0,
                        static_cast<double>(c.stages.size()),
                        static_cast<double>(c.n_classes),
                        static_cast<double>(c.input_channels),
                        static_cast<double>(c.input_size),
                        c.pooling == Pooling::kSum ? 0.0 : 1.0};
  for (int i = 0; i < 4; ++i) v.push_back(static_cast<double>((c.seed >> (16 * i)) & 0xFFFF));
  for (const auto& s : c.stages) {
    v.insert(v.end(), {static_cast<double>(s.embed_channels), static_cast<double>(s.blocks),
                       static_cast<double>(s.masks), static_cast<double>(s.query_width),
                       static_cast<double>(s.patch_stride), s.mlp_ratio});
  }
  return v;
}

inline ModelConfig decode_config(const std::vector<float>& v, const std::string& path) {
  auto bad = [&]() -> FormatError {
    return FormatError("checkpoint " + path + ": malformed meta.model_config");
  };
  if (v.size() < 10 || v[0] != 1.0f) throw bad();
  ModelConfig c;
  const auto n_stages = static_cast<std::size_t>(v[1]);
  if (v.size() != 10 + 6 * n_stages) throw bad();
  c.n_classes = static_cast<std::size_t>(v[2]);
  c.input_channels = static_cast<std::size_t>(v[3]);
  c.input_size = static_cast<std::size_t>(v[4]);
  c.pooling = v[5] == 0.0f ? Pooling::kSum : Pooling::kNormalized;
  c.seed = 0;
  for (int i = 0; i < 4; ++i) c.seed |= static_cast<std::uint64_t>(v[6 + i]) << (16 * i);
  for (std::size_t s = 0; s < n_stages; ++s) {
    const float* p = v.data() + 10 + 6 * s;
    c.stages.push_back(StageConfig{static_cast<std::size_t>(p[0]), static_cast<std::size_t>(p[1]),
                                   static_cast<std::size_t>(p[2]), static_cast<std::size_t>(p[3]),
                                   static_cast<std::size_t>(p[4]), static_cast<double>(p[5])});
  }
  return c;
}

}  // namespace detail

inline void save_checkpoint(const Model& model, const OptimState* state,
                            const std::filesystem::path& path) {
  std::vector<StoredTensor> tensors;
  const auto cfg = detail::encode_config(model.config());
  tensors.push_back(detail::store("meta.model_config", {cfg.size()}, cfg));
  for (const auto& p : model.parameters()) {
    tensors.push_back(detail::store(p.name, p.tensor.shape(), p.tensor.data()));
  }
  if (state) {
    const auto& h = state->hyper;
    const std::vector<double> hyper{h.lr, h.weight_decay, h.beta1, h.beta2, h.eps};
    tensors.push_back(detail::store("optim.hyper", {hyper.size()}, hyper));
    const std::vector<double> step{static_cast<double>(state->step >> 20),
                                   static_cast<double>(state->step & 0xFFFFF)};
    tensors.push_back(detail::store("optim.step", {2}, step));
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
      const auto& p = model.parameters()[i];
      tensors.push_back(detail::store("optim.m." + p.name, p.tensor.shape(), state->first_moment[i]));
      tensors.push_back(detail::store("optim.v." + p.name, p.tensor.shape(), state->second_moment[i]));
    }
  }
  const auto bytes = encode_tensors(tensors);
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

struct LoadedCheckpoint {
  Model model;
  std::optional<OptimState> state;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto tensors = decode_tensors(detail::read_all(path), path.string());
  auto find = [&](const std::string& name) -> const StoredTensor* {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  };
  const StoredTensor* meta = find("meta.model_config");
  if (!meta) throw FormatError("checkpoint " + path.string() + ": missing meta.model_config");
  ModelConfig config = detail::decode_config(meta->values, path.string());
  LoadedCheckpoint out{Model::build(config), std::nullopt};
  auto fill = [&](const std::string& name, const Shape& shape, std::span<double> dst) {
    const StoredTensor* t = find(name);
    if (!t) throw FormatError("checkpoint " + path.string() + ": missing tensor " + name);
    if (t->shape != shape) {
      throw FormatError("checkpoint " + path.string() + ": tensor " + name + " has shape " +
                        to_string(t->shape) + ", model expects " + to_string(shape));
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(t->values[i]);
  };
  for (const auto& p : out.model.parameters()) {
    Tensor handle = p.tensor;
    fill(p.name, p.tensor.shape(), handle.mutable_data());
  }
  if (const StoredTensor* hyper = find("optim.hyper")) {
    OptimState s = OptimState::for_parameters(out.model.parameters());
    if (hyper->values.size() != 5) throw FormatError("checkpoint " + path.string() + ": bad optim.hyper");
    s.hyper = {hyper->values[0], hyper->values[1], hyper->values[2], hyper->values[3],
               hyper->values[4]};
    const StoredTensor* step = find("optim.step");
    if (!step || step->values.size() != 2) {
      throw FormatError("checkpoint " + path.string() + ": bad optim.step");
    }
    s.step = (static_cast<std::uint64_t>(step->values[0]) << 20) +
             static_cast<std::uint64_t>(step->values[1]);
    for (std::size_t i = 0; i < out.model.parameters().size(); ++i) {
      const auto& p = out.model.parameters()[i];
      fill("optim.m." + p.name, p.tensor.shape(), s.first_moment[i]);
      fill("optim.v." + p.name, p.tensor.shape(), s.second_moment[i]);
    }
    out.state = std::move(s);
  }
  return out;
}

}  // namespace r2r
