#include "feanet/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace feanet::data {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- rasters

void write_pnm(std::ostream& out, const Raster& raster) {
  if (raster.channels != 1 && raster.channels != 3) {
    throw std::invalid_argument("write_pnm: only 1- or 3-channel rasters are supported");
  }
  if (raster.pixels.size() != raster.width * raster.height * raster.channels) {
    throw std::invalid_argument("write_pnm: pixel buffer does not match raster extent");
  }
  out << (raster.channels == 1 ? "P5" : "P6") << '\n'
      << raster.width << ' ' << raster.height << '\n'
      << 255 << '\n';
  out.write(reinterpret_cast<const char*>(raster.pixels.data()),
            static_cast<std::streamsize>(raster.pixels.size()));
  if (!out) throw std::runtime_error("write_pnm: write failed");
}

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::istream& in) : in_(in) {}

  std::size_t offset() const { return offset_; }

  int get() {
    const int c = in_.get();
    if (c != std::char_traits<char>::eof()) ++offset_;
    return c;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error("read_pnm: " + what + " at byte " + std::to_string(offset_));
  }

  std::size_t number(const char* field) {
    int c = get();
    // Whitespace and comments may precede every header field.
    while (true) {
      if (c == '#') {
        while (c != '\n' && c != std::char_traits<char>::eof()) c = get();
      } else if (c != std::char_traits<char>::eof() && std::isspace(c)) {
        c = get();
      } else {
        break;
      }
    }
    if (c == std::char_traits<char>::eof()) fail(std::string("unexpected end of header reading ") + field);
    if (!std::isdigit(c)) fail(std::string("expected digits for ") + field);
    std::size_t value = 0;
    while (c != std::char_traits<char>::eof() && std::isdigit(c)) {
      value = value * 10 + static_cast<std::size_t>(c - '0');
      if (value > (std::size_t{1} << 31)) fail(std::string(field) + " is too large");
      c = get();
    }
    if (c == std::char_traits<char>::eof() || !std::isspace(c)) {
      fail(std::string("expected whitespace after ") + field);
    }
    return value;
  }

 private:
  std::istream& in_;
  std::size_t offset_ = 0;
};

}  // namespace

Raster read_pnm(std::istream& in) {
  HeaderReader header(in);
  const int m0 = header.get();
  const int m1 = header.get();
  if (m0 != 'P' || (m1 != '5' && m1 != '6')) header.fail("magic is not P5 or P6");
  Raster r;
  r.channels = m1 == '5' ? 1 : 3;
  r.width = header.number("width");
  r.height = header.number("height");
  const std::size_t maxval = header.number("maxval");
  if (r.width == 0 || r.height == 0) header.fail("zero image extent");
  if (maxval != 255) header.fail("maxval " + std::to_string(maxval) + " is not 255");
  r.pixels.resize(r.width * r.height * r.channels);
  in.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got != r.pixels.size()) {
    throw std::runtime_error("read_pnm: truncated payload at byte " +
                             std::to_string(header.offset() + got) + ": expected " +
                             std::to_string(r.pixels.size()) + " bytes, got " + std::to_string(got));
  }
  return r;
}

void write_pnm(const fs::path& path, const Raster& raster) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pnm: cannot open " + path.string());
  write_pnm(out, raster);
}

Raster read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pnm: cannot open " + path.string());
  try {
    return read_pnm(in);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

namespace {

std::uint8_t quantize(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0));
}

double dequantize(std::uint8_t v) { return static_cast<double>(v) / 255.0; }

}  // namespace

Raster to_raster(const Tensor& image) {
  const Shape& s = image.shape();
  if (s.c != 1 && s.c != 3) throw std::invalid_argument("to_raster: expected 1 or 3 channels");
  Raster r{s.w, s.h, s.c, std::vector<std::uint8_t>(s.c * s.plane())};
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x)
      for (std::size_t c = 0; c < s.c; ++c)
        r.pixels[(y * s.w + x) * s.c + c] = quantize(image.at(0, c, y, x));
  return r;
}

Tensor to_tensor(const Raster& raster) {
  Tensor t({1, raster.channels, raster.height, raster.width});
  for (std::size_t y = 0; y < raster.height; ++y)
    for (std::size_t x = 0; x < raster.width; ++x)
      for (std::size_t c = 0; c < raster.channels; ++c)
        t.at(0, c, y, x) = dequantize(raster.pixels[(y * raster.width + x) * raster.channels + c]);
  return t;
}

Raster labels_to_raster(const std::vector<int>& labels, std::size_t height, std::size_t width) {
  if (labels.size() != height * width) throw std::invalid_argument("labels_to_raster: size mismatch");
  Raster r{width, height, 1, std::vector<std::uint8_t>(labels.size())};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 255) throw std::invalid_argument("labels_to_raster: label out of byte range");
    r.pixels[i] = static_cast<std::uint8_t>(labels[i]);
  }
  return r;
}

std::vector<int> raster_to_labels(const Raster& raster) {
  if (raster.channels != 1) throw std::invalid_argument("raster_to_labels: label maps are single-channel");
  return {raster.pixels.begin(), raster.pixels.end()};
}

// ---------------------------------------------------------------- palette

Raster colorize(const std::vector<int>& labels, std::size_t height, std::size_t width) {
  if (labels.size() != height * width) throw std::invalid_argument("colorize: size mismatch");
  Raster r{width, height, 3, std::vector<std::uint8_t>(3 * labels.size())};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int id = labels[i];
    if (id < 0 || static_cast<std::size_t>(id) >= kPalette.size()) {
      throw std::invalid_argument("colorize: class id " + std::to_string(id) + " has no palette entry");
    }
    std::copy(kPalette[static_cast<std::size_t>(id)].begin(),
              kPalette[static_cast<std::size_t>(id)].end(), r.pixels.begin() + 3 * i);
  }
  return r;
}

std::vector<int> decolorize(const Raster& raster) {
  if (raster.channels != 3) throw std::invalid_argument("decolorize: expected an RGB raster");
  std::map<Rgb, int> inverse;
  for (std::size_t id = 0; id < kPalette.size(); ++id) inverse[kPalette[id]] = static_cast<int>(id);
  std::vector<int> labels(raster.width * raster.height);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Rgb px{raster.pixels[3 * i], raster.pixels[3 * i + 1], raster.pixels[3 * i + 2]};
    auto it = inverse.find(px);
    if (it == inverse.end()) {
      throw std::invalid_argument("decolorize: pixel " + std::to_string(i) + " is not a palette color");
    }
    labels[i] = it->second;
  }
  return labels;
}

// ---------------------------------------------------------------- scenes

namespace {

enum class ShapeKind { rectangle, ellipse, thin_bar, small_blob };

struct ClassLook {
  ShapeKind kind;
  std::array<double, 3> color;
  double heat;
};

// Nominal appearance of the labeled classes 1..8 (car, person, bike, curve,
// car stop, guardrail, color cone, bump). Ids beyond 8 cycle through it.
constexpr std::array<ClassLook, 8> kLooks{{
    {ShapeKind::rectangle, {0.85, 0.15, 0.15}, 0.85},
    {ShapeKind::ellipse, {0.15, 0.75, 0.20}, 0.95},
    {ShapeKind::ellipse, {0.20, 0.30, 0.90}, 0.70},
    {ShapeKind::thin_bar, {0.90, 0.85, 0.20}, 0.40},
    {ShapeKind::rectangle, {0.80, 0.30, 0.80}, 0.55},
    {ShapeKind::thin_bar, {0.20, 0.85, 0.85}, 0.50},
    {ShapeKind::small_blob, {1.00, 0.55, 0.10}, 0.65},
    {ShapeKind::rectangle, {0.55, 0.35, 0.20}, 0.32},
}};

constexpr std::array<double, 3> kBackgroundColor{0.45, 0.47, 0.50};
constexpr double kBackgroundHeat = 0.18;
constexpr double kTextureNoise = 0.04;
constexpr double kNightFloor = 0.05;
constexpr double kNightNoise = 0.02;

const ClassLook& look_of(int label) { return kLooks[static_cast<std::size_t>(label - 1) % kLooks.size()]; }

struct Wave {
  double fx, fy, phase, amplitude;
  double at(double x, double y) const { return amplitude * std::sin(fx * x + fy * y + phase); }
};

Wave random_wave(Rng& rng, double amplitude) {
  return {rng.uniform(0.05, 0.35), rng.uniform(0.05, 0.35), rng.uniform(0.0, 6.283185307179586),
          amplitude};
}

struct Placed {
  int label;
  std::array<double, 3> color;
  double heat;
};

}  // namespace

ScenePair generate_scene(std::uint64_t seed, const SceneOptions& o) {
  if (o.height < 16 || o.width < 16) {
    throw std::invalid_argument("generate_scene: size " + std::to_string(o.height) + "x" +
                                std::to_string(o.width) + " is below the 16x16 minimum");
  }
  if (o.num_objects * 128 > o.height * o.width) {
    throw std::invalid_argument("generate_scene: " + std::to_string(o.num_objects) +
                                " objects do not fit a " + std::to_string(o.height) + "x" +
                                std::to_string(o.width) + " scene (at most one per 128 pixels)");
  }
  if (o.num_classes < 2 && o.num_objects > 0) {
    throw std::invalid_argument("generate_scene: objects need at least one labeled class");
  }
  const std::size_t h = o.height;
  const std::size_t w = o.width;
  const double side = static_cast<double>(std::min(h, w));

  Rng layout(derive_seed(seed, 0));
  Rng appearance(derive_seed(seed, 1));
  Rng heat_rng(derive_seed(seed, 2));
  Rng night_rng(derive_seed(seed, 3));

  // Layout: later objects occlude earlier ones.
  std::vector<int> owner(h * w, -1);
  std::vector<Placed> objects;
  for (std::size_t k = 0; k < o.num_objects; ++k) {
    const int label = static_cast<int>(layout.uniform_int(1, static_cast<std::int64_t>(o.num_classes) - 1));
    const ClassLook& lk = look_of(label);
    const double cy = layout.uniform(0.0, static_cast<double>(h));
    const double cx = layout.uniform(0.0, static_cast<double>(w));
    double ry = 0, rx = 0;
    bool elliptic = false;
    switch (lk.kind) {
      case ShapeKind::rectangle:
        ry = layout.uniform(side / 10.0, side / 5.0);
        rx = layout.uniform(side / 10.0, side / 5.0);
        break;
      case ShapeKind::ellipse:
        ry = layout.uniform(side / 9.0, side / 5.0);
        rx = layout.uniform(side / 14.0, side / 7.0);
        elliptic = true;
        break;
      case ShapeKind::thin_bar: {
        const double length = layout.uniform(side / 5.0, side / 2.5);
        const double thickness = layout.uniform(1.5, 2.5);
        if (layout.uniform() < 0.5) {
          ry = thickness;
          rx = length;
        } else {
          ry = length;
          rx = thickness;
        }
        break;
      }
      case ShapeKind::small_blob:
        ry = rx = layout.uniform(3.0, 3.0 + side / 16.0);
        elliptic = true;
        break;
    }
    const int id = static_cast<int>(objects.size());
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
        const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
        const bool inside = elliptic ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (inside) owner[y * w + x] = id;
      }
    }
    objects.push_back({label, lk.color, lk.heat});
  }

  // Day appearance. Per-object jitter is drawn even for fully occluded
  // objects so the stream does not depend on visibility.
  for (auto& obj : objects) {
    for (auto& ch : obj.color) ch = std::clamp(ch + appearance.uniform(-0.05, 0.05), 0.0, 1.0);
  }
  const Wave bg_a = random_wave(appearance, 0.08);
  const Wave bg_b = random_wave(appearance, 0.05);

  ScenePair scene;
  scene.seed = seed;
  scene.mode = o.mode;
  scene.rgb = Tensor({1, 3, h, w});
  scene.thermal = Tensor({1, 1, h, w});
  scene.labels.assign(h * w, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const int id = owner[y * w + x];
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      const double texture = bg_a.at(fx, fy) + bg_b.at(fx, fy);
      for (std::size_t c = 0; c < 3; ++c) {
        const double base = id < 0 ? kBackgroundColor[c] + texture : objects[static_cast<std::size_t>(id)].color[c];
        scene.rgb.at(0, c, y, x) = base + kTextureNoise * appearance.normal();
      }
      if (id >= 0) scene.labels[y * w + x] = objects[static_cast<std::size_t>(id)].label;
    }
  }

  // Thermal: per-class heat plus sensor noise, independent of lighting.
  const Wave heat_wave = random_wave(heat_rng, 0.05);
  std::vector<double> object_heat(objects.size());
  for (std::size_t k = 0; k < objects.size(); ++k) {
    object_heat[k] = objects[k].heat + heat_rng.uniform(-0.03, 0.03);
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const int id = owner[y * w + x];
      const double base = id < 0 ? kBackgroundHeat + heat_wave.at(static_cast<double>(x), static_cast<double>(y))
                                 : object_heat[static_cast<std::size_t>(id)];
      scene.thermal.at(0, 0, y, x) = base + kThermalNoise * heat_rng.normal();
    }
  }

  if (o.mode == Lighting::night) {
    for (auto& v : scene.rgb.values()) {
      v = kNightFloor + kNightContrast * v + kNightNoise * night_rng.normal();
    }
  }

  for (auto& v : scene.rgb.values()) v = dequantize(quantize(v));
  for (auto& v : scene.thermal.values()) v = dequantize(quantize(v));
  return scene;
}

double mean_abs_gradient(const Tensor& image) {
  const Shape& s = image.shape();
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x) {
          if (x + 1 < s.w) {
            acc += std::abs(image.at(n, c, y, x + 1) - image.at(n, c, y, x));
            ++count;
          }
          if (y + 1 < s.h) {
            acc += std::abs(image.at(n, c, y + 1, x) - image.at(n, c, y, x));
            ++count;
          }
        }
  return count ? acc / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------- datasets

DatasetSplit make_splits(std::size_t num_samples, std::array<double, 3> ratios, std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (!(total > 0.0) || ratios[0] < 0.0 || ratios[1] < 0.0 || ratios[2] < 0.0) {
    throw std::invalid_argument("make_splits: ratios must be non-negative with a positive sum");
  }
  std::vector<std::size_t> order(num_samples);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5117));
  for (std::size_t i = num_samples; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(num_samples) * ratios[0] / total));
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(num_samples) * ratios[1] / total));
  DatasetSplit split;
  for (std::size_t k = 0; k < num_samples; ++k) {
    auto& dst = k < n_train ? split.train : (k < n_train + n_val ? split.val : split.test);
    dst.push_back(sample_id(order[k]));
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

std::string sample_id(std::size_t index) {
  std::ostringstream os;
  os << std::setw(5) << std::setfill('0') << index;
  return os.str();
}

void write_sample(const fs::path& root, const std::string& id, const ScenePair& scene) {
  fs::create_directories(root / "rgb");
  fs::create_directories(root / "thermal");
  fs::create_directories(root / "labels");
  write_pnm(root / "rgb" / (id + ".ppm"), to_raster(scene.rgb));
  write_pnm(root / "thermal" / (id + ".pgm"), to_raster(scene.thermal));
  write_pnm(root / "labels" / (id + ".pgm"), labels_to_raster(scene.labels, scene.height(), scene.width()));
}

void write_splits(const fs::path& root, const DatasetSplit& split) {
  fs::create_directories(root / "splits");
  auto dump = [&](const char* name, const std::vector<std::string>& ids) {
    std::ofstream out(root / "splits" / (std::string(name) + ".txt"));
    if (!out) throw std::runtime_error("write_splits: cannot write " + std::string(name) + ".txt");
    for (const auto& id : ids) out << id << '\n';
  };
  dump("train", split.train);
  dump("val", split.val);
  dump("test", split.test);
}

namespace {

std::vector<std::string> read_ids(const fs::path& file) {
  std::ifstream in(file);
  if (!in) {
    throw std::runtime_error("dataset: missing split file " + file.string() +
                             " (create a dataset with the 'generate' subcommand)");
  }
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

}  // namespace

DatasetSplit read_splits(const fs::path& root) {
  return {read_ids(root / "splits" / "train.txt"), read_ids(root / "splits" / "val.txt"),
          read_ids(root / "splits" / "test.txt")};
}

Sample read_sample(const fs::path& root, const std::string& id) {
  Sample s;
  s.id = id;
  const Raster rgb = read_pnm(root / "rgb" / (id + ".ppm"));
  const Raster thermal = read_pnm(root / "thermal" / (id + ".pgm"));
  const Raster labels = read_pnm(root / "labels" / (id + ".pgm"));
  if (rgb.channels != 3 || thermal.channels != 1 || labels.channels != 1) {
    throw std::runtime_error("dataset: sample " + id + " has unexpected channel counts");
  }
  if (rgb.width != thermal.width || rgb.height != thermal.height || rgb.width != labels.width ||
      rgb.height != labels.height) {
    throw std::runtime_error("dataset: sample " + id + " rasters disagree in size");
  }
  s.rgb = to_tensor(rgb);
  s.thermal = to_tensor(thermal);
  s.labels = raster_to_labels(labels);
  return s;
}

std::vector<Sample> load_split(const fs::path& root, const std::string& split_name) {
  if (!fs::exists(root)) {
    throw std::runtime_error("dataset: " + root.string() +
                             " does not exist (create it with the 'generate' subcommand)");
  }
  std::vector<Sample> out;
  for (const auto& id : read_ids(root / "splits" / (split_name + ".txt"))) {
    out.push_back(read_sample(root, id));
  }
  return out;
}

namespace {

ScenePair scene_for(const GenerateOptions& options, std::size_t index) {
  const std::uint64_t seed = derive_seed(options.seed, index);
  SceneOptions so = options.scene;
  Rng coin(derive_seed(seed, 99));
  so.mode = coin.uniform() < options.night_fraction ? Lighting::night : Lighting::day;
  return generate_scene(seed, so);
}

}  // namespace

DatasetSplit generate_dataset(const fs::path& root, const GenerateOptions& options) {
  const DatasetSplit split = make_splits(options.num_samples, options.ratios, options.seed);
  for (std::size_t i = 0; i < options.num_samples; ++i) {
    write_sample(root, sample_id(i), scene_for(options, i));
  }
  write_splits(root, split);
  return split;
}

std::vector<Sample> generate_samples(const GenerateOptions& options) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < options.num_samples; ++i) {
    ScenePair scene = scene_for(options, i);
    out.push_back({sample_id(i), std::move(scene.rgb), std::move(scene.thermal), std::move(scene.labels)});
  }
  return out;
}

}  // namespace feanet::data
