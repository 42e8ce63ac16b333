#pragma once

// Per-image visual feature tensors: the MMTF file format, depth-wise L2
// normalization, global average pooling, congruence index maps and the
// synthetic feature generator.
//
// MMTF layout (little-endian):
//   "MMTF" | u32 version=1 | u32 layout (0 pooled, 1 spatial) | u32 rows |
//   u32 C | u32 H | u32 W | rows*C*H*W float32, channel-major per row.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mmtprobe/binio.hpp"
#include "mmtprobe/errors.hpp"
#include "mmtprobe/hash.hpp"
#include "mmtprobe/random.hpp"
#include "mmtprobe/tensor.hpp"

namespace mmtprobe {

enum class FeatureLayout : std::uint32_t { pooled = 0, spatial = 1 };

class FeatureSet {
 public:
  FeatureSet() = default;

  FeatureSet(FeatureLayout layout, std::size_t rows, std::size_t channels, std::size_t height = 1, std::size_t width = 1)
      : layout_(layout), rows_(rows), channels_(channels), height_(height), width_(width),
        data_(rows * channels * height * width, 0.0) {
    if (rows == 0 || channels == 0 || height == 0 || width == 0) throw DimensionError("feature set dimensions must be positive");
    if (layout == FeatureLayout::pooled && (height != 1 || width != 1)) {
      throw DimensionError("pooled features must have H = W = 1");
    }
  }

  FeatureLayout layout() const noexcept { return layout_; }
  bool spatial() const noexcept { return layout_ == FeatureLayout::spatial; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t positions() const noexcept { return height_ * width_; }
  std::size_t row_size() const noexcept { return channels_ * positions(); }

  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * row_size(), row_size()); }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * row_size(), row_size());
  }

  // Channel c at spatial position p (= h * W + w) of row r.
  double& at(std::size_t r, std::size_t c, std::size_t p) { return data_[r * row_size() + c * positions() + p]; }
  double at(std::size_t r, std::size_t c, std::size_t p) const { return data_[r * row_size() + c * positions() + p]; }

  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  bool operator==(const FeatureSet&) const = default;

 private:
  FeatureLayout layout_ = FeatureLayout::pooled;
  std::size_t rows_ = 0, channels_ = 0, height_ = 1, width_ = 1;
  std::vector<double> data_;
};

inline constexpr char kFeatureMagic[4] = {'M', 'M', 'T', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 28;

inline std::string serialize_features(const FeatureSet& fs) {
  ByteWriter w;
  w.bytes(std::string_view(kFeatureMagic, 4));
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(fs.layout()));
  w.u32(static_cast<std::uint32_t>(fs.rows()));
  w.u32(static_cast<std::uint32_t>(fs.channels()));
  w.u32(static_cast<std::uint32_t>(fs.height()));
  w.u32(static_cast<std::uint32_t>(fs.width()));
  for (double v : fs.storage()) w.f32(static_cast<float>(v));
  return w.take();
}

inline FeatureSet parse_features(std::string_view bytes) {
  ByteReader r(bytes);
  const auto magic = r.bytes(4, "magic");
  if (magic != std::string_view(kFeatureMagic, 4)) throw FormatError("bad feature-file magic", 0);
  const auto version = r.u32("version");
  if (version != kFeatureVersion) throw FormatError("unsupported feature-file version " + std::to_string(version), 4);
  const auto layout = r.u32("layout");
  if (layout > 1) throw FormatError("unknown feature layout " + std::to_string(layout), 8);
  const auto rows = r.u32("rows");
  const auto C = r.u32("channels");
  const auto H = r.u32("height");
  const auto W = r.u32("width");
  if (rows == 0 || C == 0 || H == 0 || W == 0) throw FormatError("feature dimensions must be positive", 12);
  if (layout == 0 && (H != 1 || W != 1)) throw FormatError("pooled features must declare H = W = 1", 20);
  FeatureSet fs(static_cast<FeatureLayout>(layout), rows, C, H, W);
  const std::uint64_t expected = kFeatureHeaderBytes + std::uint64_t{4} * rows * C * H * W;
  if (bytes.size() < expected) {
    throw FormatError("feature file truncated: expected " + std::to_string(expected) + " bytes", bytes.size());
  }
  if (bytes.size() > expected) throw FormatError("trailing bytes after feature data", expected);
  for (double& v : fs.storage()) v = static_cast<double>(r.f32("feature value"));
  return fs;
}

inline void write_features(const std::filesystem::path& path, const FeatureSet& fs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto bytes = serialize_features(fs);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// float32 values on disk are widened to double in memory.
inline FeatureSet load_features(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return parse_features(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// Rounds every value to float32 precision, i.e. what a file round trip keeps.
inline void quantize_to_float(FeatureSet& fs) {
  for (double& v : fs.storage()) v = static_cast<double>(static_cast<float>(v));
}

// L2-normalizes the C-dim depth vector at every spatial position.
inline FeatureSet normalize_depth(const FeatureSet& fs) {
  if (!fs.spatial()) throw ContractError("normalize_depth expects spatial features");
  FeatureSet out = fs;
  const std::size_t P = fs.positions();
  std::vector<double> v(fs.channels());
  for (std::size_t r = 0; r < fs.rows(); ++r) {
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t c = 0; c < fs.channels(); ++c) v[c] = fs.at(r, c, p);
      l2_normalize_inplace(v);
      for (std::size_t c = 0; c < fs.channels(); ++c) out.at(r, c, p) = v[c];
    }
  }
  return out;
}

inline FeatureSet global_average_pool(const FeatureSet& fs) {
  if (!fs.spatial()) throw ContractError("global_average_pool expects spatial features");
  FeatureSet out(FeatureLayout::pooled, fs.rows(), fs.channels());
  const std::size_t P = fs.positions();
  for (std::size_t r = 0; r < fs.rows(); ++r) {
    for (std::size_t c = 0; c < fs.channels(); ++c) {
      double s = 0.0;
      for (std::size_t p = 0; p < P; ++p) s += fs.at(r, c, p);
      out.at(r, c, 0) = s / static_cast<double>(P);
    }
  }
  return out;
}

// Returns a feature set whose row i is row `map[i]` of `fs`.
inline FeatureSet permute_rows(const FeatureSet& fs, std::span<const std::size_t> map) {
  FeatureSet out(fs.layout(), map.size(), fs.channels(), fs.height(), fs.width());
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (map[i] >= fs.rows()) throw IndexError("feature row " + std::to_string(map[i]) + " out of range");
    std::copy(fs.row(map[i]).begin(), fs.row(map[i]).end(), out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Congruence

enum class CongruenceMode { congruent, incongruent, blinded };
enum class BlindOrder { shuffled, reversed };

inline std::string to_string(CongruenceMode m) {
  switch (m) {
    case CongruenceMode::congruent: return "congruent";
    case CongruenceMode::incongruent: return "incongruent";
    case CongruenceMode::blinded: return "blinded";
  }
  return "?";
}

inline CongruenceMode parse_congruence(std::string_view s) {
  if (s == "congruent") return CongruenceMode::congruent;
  if (s == "incongruent" || s == "incongruent-reversed") return CongruenceMode::incongruent;
  if (s == "blinded") return CongruenceMode::blinded;
  throw ConfigError("unknown congruence mode '" + std::string(s) + "'");
}

inline BlindOrder parse_blind_order(std::string_view s) {
  if (s == "shuffled") return BlindOrder::shuffled;
  if (s == "reversed") return BlindOrder::reversed;
  throw ConfigError("unknown blind order '" + std::string(s) + "'");
}

// Sample index -> feature row. congruent: identity; incongruent: reversed;
// blinded: a seeded derangement (or the reversed order when requested), fixed
// for the whole run.
inline std::vector<std::size_t> remap_order(CongruenceMode mode, std::size_t n, std::uint64_t seed = 0,
                                            BlindOrder blind = BlindOrder::shuffled) {
  std::vector<std::size_t> map(n);
  std::iota(map.begin(), map.end(), std::size_t{0});
  if (mode == CongruenceMode::incongruent || (mode == CongruenceMode::blinded && blind == BlindOrder::reversed)) {
    std::reverse(map.begin(), map.end());
  } else if (mode == CongruenceMode::blinded && n > 1) {
    Rng rng(derive_seed(seed, 0xb11d));
    shuffle(std::span<std::size_t>(map), rng);
    for (std::size_t i = 0; i < n; ++i) {
      if (map[i] == i) std::swap(map[i], map[(i + 1) % n]);
    }
  }
  return map;
}

inline std::vector<std::size_t> remap_order(const FeatureSet& fs, CongruenceMode mode, std::size_t n, std::uint64_t seed = 0,
                                            BlindOrder blind = BlindOrder::shuffled) {
  if (n != fs.rows()) {
    throw DimensionError("corpus has " + std::to_string(n) + " samples but the feature set has " +
                         std::to_string(fs.rows()) + " rows");
  }
  return remap_order(mode, n, seed, blind);
}

// ---------------------------------------------------------------------------
// Synthetic features

struct SyntheticFeatureSpec {
  std::size_t classes = 8;   // K
  std::size_t channels = 32; // C
  double sigma = 0.1;
  std::uint64_t seed = 1;
  bool spatial = true;
  std::size_t height = 2, width = 2;
};

// Row i = one-hot(label[i]) over the first K channels plus N(0, sigma^2)
// noise on all C channels, L2-normalized, rounded to float32. Spatial sets
// tile the same vector over every position.
inline FeatureSet synthesize_features(std::span<const std::size_t> labels, const SyntheticFeatureSpec& spec) {
  if (spec.classes > spec.channels) {
    throw ConfigError("synthetic features: " + std::to_string(spec.classes) + " classes exceed " +
                      std::to_string(spec.channels) + " channels");
  }
  if (labels.empty()) throw ConfigError("synthetic features: no samples");
  FeatureSet fs = spec.spatial ? FeatureSet(FeatureLayout::spatial, labels.size(), spec.channels, spec.height, spec.width)
                               : FeatureSet(FeatureLayout::pooled, labels.size(), spec.channels);
  Rng rng(derive_seed(spec.seed, 0xfea7));
  std::vector<double> v(spec.channels);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= spec.classes) throw IndexError("synthetic features: label " + std::to_string(labels[i]) + " >= K");
    std::fill(v.begin(), v.end(), 0.0);
    v[labels[i]] = 1.0;
    for (double& x : v) x += spec.sigma * standard_normal(rng);
    l2_normalize_inplace(v);
    for (std::size_t c = 0; c < spec.channels; ++c) {
      for (std::size_t p = 0; p < fs.positions(); ++p) fs.at(i, c, p) = v[c];
    }
  }
  quantize_to_float(fs);
  return fs;
}


// Label value that leaves a position as pure noise.
inline constexpr std::size_t kBackgroundLabel = static_cast<std::size_t>(-1);

// Spatial variant with one label per position: labels holds rows*H*W entries,
// row by row. Each position gets its own one-hot plus independent noise and is
// L2-normalized on its own, so different regions can carry different content.
inline FeatureSet synthesize_region_features(std::span<const std::size_t> labels, const SyntheticFeatureSpec& spec) {
  if (spec.classes > spec.channels) {
    throw ConfigError("synthetic features: " + std::to_string(spec.classes) + " classes exceed " +
                      std::to_string(spec.channels) + " channels");
  }
  const std::size_t positions = spec.height * spec.width;
  if (positions == 0 || labels.empty() || labels.size() % positions) {
    throw ConfigError("synthetic features: " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(positions) + " positions per row");
  }
  const std::size_t rows = labels.size() / positions;
  FeatureSet fs(FeatureLayout::spatial, rows, spec.channels, spec.height, spec.width);
  Rng rng(derive_seed(spec.seed, 0xfea8));
  std::vector<double> v(spec.channels);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t p = 0; p < positions; ++p) {
      const std::size_t label = labels[i * positions + p];
      if (label != kBackgroundLabel && label >= spec.classes) {
        throw IndexError("synthetic features: label " + std::to_string(label) + " >= K");
      }
      std::fill(v.begin(), v.end(), 0.0);
      if (label != kBackgroundLabel) v[label] = 1.0;
      for (double& x : v) x += spec.sigma * standard_normal(rng);
      l2_normalize_inplace(v);
      for (std::size_t c = 0; c < spec.channels; ++c) fs.at(i, c, p) = v[c];
    }
  }
  quantize_to_float(fs);
  return fs;
}

}  // namespace mmtprobe
