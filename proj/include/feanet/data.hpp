#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "feanet/tensor.hpp"

namespace feanet::data {

// ---------------------------------------------------------------- rasters

/// 8-bit interleaved raster with 1 (gray) or 3 (RGB) channels.
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  bool operator==(const Raster&) const = default;
};

/// Binary P5 (1 channel) or P6 (3 channels), maxval 255.
void write_pnm(std::ostream& out, const Raster& raster);
/// Throws std::runtime_error with the byte offset of malformed headers,
/// unsupported maxval or truncated payloads.
Raster read_pnm(std::istream& in);
void write_pnm(const std::filesystem::path& path, const Raster& raster);
Raster read_pnm(const std::filesystem::path& path);

/// [0,1] tensor plane(s) of batch item 0 <-> 8-bit raster (rounded, clamped).
Raster to_raster(const Tensor& image);
Tensor to_tensor(const Raster& raster);
Raster labels_to_raster(const std::vector<int>& labels, std::size_t height, std::size_t width);
std::vector<int> raster_to_labels(const Raster& raster);

// ---------------------------------------------------------------- palette

using Rgb = std::array<std::uint8_t, 3>;
inline constexpr std::array<Rgb, 9> kPalette{{{0, 0, 0},
                                              {64, 0, 128},
                                              {64, 64, 0},
                                              {0, 128, 192},
                                              {0, 0, 192},
                                              {128, 128, 0},
                                              {64, 64, 128},
                                              {192, 128, 128},
                                              {192, 64, 0}}};

/// Palette rendering of a label map; throws on ids without a palette entry.
Raster colorize(const std::vector<int>& labels, std::size_t height, std::size_t width);
/// Inverse palette lookup; throws on colors outside the palette.
std::vector<int> decolorize(const Raster& raster);

// ---------------------------------------------------------------- scenes

enum class Lighting { day, night };

struct ScenePair {
  Tensor rgb;               // (1, 3, h, w), multiples of 1/255 in [0, 1]
  Tensor thermal;           // (1, 1, h, w), multiples of 1/255 in [0, 1]
  std::vector<int> labels;  // (h, w) row-major, 0 = unlabeled background
  std::uint64_t seed = 0;
  Lighting mode = Lighting::day;

  std::size_t height() const { return rgb.shape().h; }
  std::size_t width() const { return rgb.shape().w; }
};

struct SceneOptions {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t num_objects = 6;
  std::size_t num_classes = 9;  // including background
  Lighting mode = Lighting::day;
};

/// Night-time RGB contrast factor and thermal noise level of the generator.
inline constexpr double kNightContrast = 0.15;
inline constexpr double kThermalNoise = 0.05;

/// Deterministic synthetic RGB-T scene. Object layout and thermal signal do
/// not depend on the lighting mode; night mode compresses RGB contrast and
/// adds sensor noise.
ScenePair generate_scene(std::uint64_t seed, const SceneOptions& options);

/// Mean absolute horizontal+vertical finite difference over all RGB channels.
double mean_abs_gradient(const Tensor& image);

// ---------------------------------------------------------------- datasets

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

/// Shuffles ids 0..n-1 with `seed` and cuts them by `ratios` (normalized):
/// train = floor(n r0), val = floor(n r1), test = the rest. Each list is
/// sorted.
DatasetSplit make_splits(std::size_t num_samples, std::array<double, 3> ratios, std::uint64_t seed);

std::string sample_id(std::size_t index);

struct Sample {
  std::string id;
  Tensor rgb;
  Tensor thermal;
  std::vector<int> labels;
};

/// root/{rgb,thermal,labels}/<id>.{ppm,pgm,pgm}
void write_sample(const std::filesystem::path& root, const std::string& id, const ScenePair& scene);
void write_splits(const std::filesystem::path& root, const DatasetSplit& split);
DatasetSplit read_splits(const std::filesystem::path& root);
Sample read_sample(const std::filesystem::path& root, const std::string& id);
std::vector<Sample> load_split(const std::filesystem::path& root, const std::string& split_name);

struct GenerateOptions {
  std::size_t num_samples = 64;
  SceneOptions scene;
  double night_fraction = 0.5;
  std::array<double, 3> ratios{0.5, 0.25, 0.25};
  std::uint64_t seed = 1;
};

/// Generates a whole dataset directory. Sample i uses seed
/// derive_seed(options.seed, i) and is night with probability
/// night_fraction (decided by a separate deterministic draw).
DatasetSplit generate_dataset(const std::filesystem::path& root, const GenerateOptions& options);

/// In-memory counterpart of generate_dataset for the same options.
std::vector<Sample> generate_samples(const GenerateOptions& options);

}  // namespace feanet::data
