#include "feanet/model.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace feanet::model {

namespace {

using nn::ConvSpec;
using nn::Mode;

ConvSpec conv3x3(std::size_t in, std::size_t out) {
  return {.in_channels = in, .out_channels = out, .kh = 3, .kw = 3, .stride = 1, .padding = 1};
}

// Stride-2 convs use even kernels so the output size divides exactly.
ConvSpec down4x4(std::size_t in, std::size_t out) {
  return {.in_channels = in, .out_channels = out, .kh = 4, .kw = 4, .stride = 2, .padding = 1};
}

ConvSpec up2x2(std::size_t in, std::size_t out, bool bias) {
  return {.in_channels = in,
          .out_channels = out,
          .kh = 2,
          .kw = 2,
          .stride = 2,
          .padding = 0,
          .has_bias = bias};
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != value.size()) {
    throw std::invalid_argument("model config: '" + key + "' expects an integer, got '" + value +
                                "'");
  }
  return static_cast<std::size_t>(v);
}

}  // namespace

void ModelConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("model config: num_classes must be >= 2");
  if (stage_widths.empty()) throw std::invalid_argument("model config: stage_widths is empty");
  if (stage_widths.size() > 16) throw std::invalid_argument("model config: too many stages");
  for (std::size_t i = 0; i < stage_widths.size(); ++i) {
    if (stage_widths[i] == 0 || stage_widths[i] % 2 != 0) {
      throw std::invalid_argument("model config: stage width " + std::to_string(stage_widths[i]) +
                                  " must be positive and even");
    }
    if (i > 0 && stage_widths[i] <= stage_widths[i - 1]) {
      throw std::invalid_argument("model config: stage_widths must be strictly increasing");
    }
    feam::validate(stage_widths[i], feam_reduction, feam_kernel);
  }
  validate_input(input_h, input_w);
}

void ModelConfig::validate_input(std::size_t h, std::size_t w) const {
  const std::size_t f = downsample_factor();
  if (h == 0 || w == 0 || h % f != 0 || w % f != 0) {
    throw std::invalid_argument("model config: input " + std::to_string(h) + "x" +
                                std::to_string(w) + " is not divisible by " + std::to_string(f) +
                                " (2^" + std::to_string(stage_widths.size()) + " stages)");
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "num_classes = " << num_classes << '\n';
  os << "stage_widths = ";
  for (std::size_t i = 0; i < stage_widths.size(); ++i) os << (i ? "," : "") << stage_widths[i];
  os << '\n';
  os << "input_h = " << input_h << '\n';
  os << "input_w = " << input_w << '\n';
  os << "feam_reduction = " << feam_reduction << '\n';
  os << "feam_kernel = " << feam_kernel << '\n';
  os << "fuse_after_feam = " << (fuse_after_feam ? 1 : 0) << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("model config: malformed line '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "num_classes") {
      cfg.num_classes = parse_size(key, value);
    } else if (key == "stage_widths") {
      cfg.stage_widths.clear();
      std::istringstream vs(value);
      std::string item;
      while (std::getline(vs, item, ',')) cfg.stage_widths.push_back(parse_size(key, trim(item)));
    } else if (key == "input_h") {
      cfg.input_h = parse_size(key, value);
    } else if (key == "input_w") {
      cfg.input_w = parse_size(key, value);
    } else if (key == "feam_reduction") {
      cfg.feam_reduction = parse_size(key, value);
    } else if (key == "feam_kernel") {
      cfg.feam_kernel = parse_size(key, value);
    } else if (key == "fuse_after_feam") {
      cfg.fuse_after_feam = parse_size(key, value) != 0;
    }
    // Unknown keys belong to other sections of a run config.
  }
  return cfg;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::frts: return "FRTS";
    case Variant::nfrs: return "NFRS";
    case Variant::nfts: return "NFTS";
    case Variant::nfrts: return "NFRTS";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  std::string s = name;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "frts") return Variant::frts;
  if (s == "nfrs") return Variant::nfrs;
  if (s == "nfts") return Variant::nfts;
  if (s == "nfrts") return Variant::nfrts;
  throw std::invalid_argument("unknown variant '" + name + "' (expected frts, nfrs, nfts, nfrts)");
}

FeamMask FeamMask::of(Variant v) {
  switch (v) {
    case Variant::frts: return {true, true};
    case Variant::nfrs: return {false, true};
    case Variant::nfts: return {true, false};
    case Variant::nfrts: return {false, false};
  }
  return {};
}

StemBlock::StemBlock(std::size_t in_channels, std::size_t out_channels, Rng& rng)
    : conv(down4x4(in_channels, out_channels), false, rng), bn(out_channels) {}

Var StemBlock::forward(const Var& x, Mode mode) { return nn::relu(bn(conv(x), mode)); }

void StemBlock::collect(const std::string& prefix, nn::StateList& out) {
  conv.collect(prefix + ".conv", out);
  bn.collect(prefix + ".bn", out);
}

ResidualBlock::ResidualBlock(std::size_t in_channels, std::size_t out_channels, std::size_t stride_,
                             Rng& rng)
    : stride(stride_),
      conv1(stride_ == 1 ? conv3x3(in_channels, out_channels) : down4x4(in_channels, out_channels),
            false, rng),
      bn1(out_channels),
      conv2(conv3x3(out_channels, out_channels), false, rng),
      bn2(out_channels) {
  if (stride_ != 1 && stride_ != 2) throw std::invalid_argument("residual_block: stride must be 1 or 2");
  if (stride_ != 1 || in_channels != out_channels) {
    const ConvSpec proj{.in_channels = in_channels,
                        .out_channels = out_channels,
                        .kh = stride_,
                        .kw = stride_,
                        .stride = stride_,
                        .padding = 0};
    projection.emplace(proj, false, rng);
    projection_bn.emplace(out_channels);
  }
}

Var ResidualBlock::forward(const Var& x, Mode mode) {
  Var main = nn::relu(bn1(conv1(x), mode));
  main = bn2(conv2(main), mode);
  Var shortcut = projection ? (*projection_bn)((*projection)(x), mode) : x;
  return nn::relu(nn::add(main, shortcut));
}

void ResidualBlock::collect(const std::string& prefix, nn::StateList& out) {
  conv1.collect(prefix + ".conv1", out);
  bn1.collect(prefix + ".bn1", out);
  conv2.collect(prefix + ".conv2", out);
  bn2.collect(prefix + ".bn2", out);
  if (projection) {
    projection->collect(prefix + ".proj", out);
    projection_bn->collect(prefix + ".proj_bn", out);
  }
}

DecoderBlockA::DecoderBlockA(std::size_t channels, Rng& rng)
    : conv1(conv3x3(channels, channels), false, rng),
      bn1(channels),
      conv2(conv3x3(channels, channels), false, rng),
      bn2(channels) {}

Var DecoderBlockA::forward(const Var& x, Mode mode) {
  Var y = nn::relu(bn1(conv1(x), mode));
  y = bn2(conv2(y), mode);
  return nn::add(y, x);
}

void DecoderBlockA::collect(const std::string& prefix, nn::StateList& out) {
  conv1.collect(prefix + ".conv1", out);
  bn1.collect(prefix + ".bn1", out);
  conv2.collect(prefix + ".conv2", out);
  bn2.collect(prefix + ".bn2", out);
}

DecoderBlockB::DecoderBlockB(std::size_t in_channels, std::size_t out_channels, bool logits,
                             Rng& rng)
    : emits_logits(logits) {
  if (in_channels % 2 != 0) {
    throw std::invalid_argument("decoder_block_b: channel count " + std::to_string(in_channels) +
                                " is odd");
  }
  conv1 = nn::Conv2d(conv3x3(in_channels, out_channels), false, rng);
  bn1 = nn::BatchNorm2d(out_channels);
  trans1 = nn::Conv2d(up2x2(out_channels, out_channels, false), true, rng);
  trans2 = nn::Conv2d(up2x2(in_channels, out_channels, logits), true, rng);
  if (!logits) bn_out.emplace(out_channels);
}

Var DecoderBlockB::forward(const Var& x, Mode mode) {
  if (x.shape().c != conv1.spec().in_channels) {
    throw std::invalid_argument("decoder_block_b: input has " + std::to_string(x.shape().c) +
                                " channels, block expects " +
                                std::to_string(conv1.spec().in_channels));
  }
  Var main = trans1(nn::relu(bn1(conv1(x), mode)));
  Var merged = nn::add(main, trans2(x));
  if (emits_logits) return merged;
  return nn::relu((*bn_out)(merged, mode));
}

void DecoderBlockB::collect(const std::string& prefix, nn::StateList& out) {
  conv1.collect(prefix + ".conv1", out);
  bn1.collect(prefix + ".bn1", out);
  trans1.collect(prefix + ".trans1", out);
  trans2.collect(prefix + ".trans2", out);
  if (bn_out) bn_out->collect(prefix + ".bn_out", out);
}

Var EncoderStream::block(std::size_t level, const Var& x, Mode mode) {
  return level == 0 ? stem.forward(x, mode) : stages[level - 1].forward(x, mode);
}

namespace {

EncoderStream make_stream(const ModelConfig& cfg, std::size_t in_channels, Rng& layers,
                          Rng& attention) {
  EncoderStream s;
  const auto& widths = cfg.stage_widths;
  s.stem = StemBlock(in_channels, widths[0], layers);
  for (std::size_t i = 1; i < widths.size(); ++i) {
    s.stages.emplace_back(widths[i - 1], widths[i], 2, layers);
  }
  for (std::size_t width : widths) {
    s.feams.push_back(feam::make_params(width, cfg.feam_reduction, cfg.feam_kernel, attention));
  }
  return s;
}

}  // namespace

Model Model::build(const ModelConfig& config, Variant variant, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  m.variant_ = variant;
  m.mask_ = FeamMask::of(variant);

  // Independent streams per component keep shared layers identical across
  // variants and configurations that only differ elsewhere.
  Rng rgb_layers(derive_seed(seed, 1));
  Rng thermal_layers(derive_seed(seed, 2));
  Rng rgb_attention(derive_seed(seed, 3));
  Rng thermal_attention(derive_seed(seed, 4));
  Rng decoder(derive_seed(seed, 5));

  m.rgb_ = make_stream(config, 3, rgb_layers, rgb_attention);
  m.thermal_ = make_stream(config, 1, thermal_layers, thermal_attention);

  const auto& widths = config.stage_widths;
  const std::size_t levels = widths.size();
  m.block_a_ = DecoderBlockA(widths.back(), decoder);
  for (std::size_t j = 0; j < levels; ++j) {
    const std::size_t in = widths[levels - 1 - j];
    const bool last = j + 1 == levels;
    const std::size_t out = last ? config.num_classes : widths[levels - 2 - j];
    m.blocks_b_.emplace_back(in, out, last, decoder);
  }
  return m;
}

Var Model::encode_fuse(const Var& rgb, const Var& thermal, Mode mode) {
  const Shape& rs = rgb.shape();
  const Shape& ts = thermal.shape();
  if (rs.c != 3) throw std::invalid_argument("encode_fuse: rgb must have 3 channels, got " + rs.str());
  if (ts.c != 1) {
    throw std::invalid_argument("encode_fuse: thermal must have 1 channel, got " + ts.str());
  }
  if (rs.n != ts.n || rs.h != ts.h || rs.w != ts.w) {
    throw std::invalid_argument("encode_fuse: rgb " + rs.str() + " and thermal " + ts.str() +
                                " disagree on batch or spatial size");
  }
  config_.validate_input(rs.h, rs.w);

  Var r = rgb;
  Var t = thermal;
  for (std::size_t level = 0; level < rgb_.levels(); ++level) {
    t = thermal_.block(level, t, mode);
    if (mask_.thermal) t = feam::feam_apply(t, thermal_.feams[level]);
    r = rgb_.block(level, r, mode);
    if (config_.fuse_after_feam) {
      if (mask_.rgb) r = feam::feam_apply(r, rgb_.feams[level]);
      r = nn::add(r, t);
    } else {
      r = nn::add(r, t);
      if (mask_.rgb) r = feam::feam_apply(r, rgb_.feams[level]);
    }
  }
  return r;
}

Var Model::forward(const Var& rgb, const Var& thermal, Mode mode) {
  Var x = block_a_.forward(encode_fuse(rgb, thermal, mode), mode);
  for (auto& b : blocks_b_) x = b.forward(x, mode);
  return x;
}

nn::StateList Model::state() {
  nn::StateList out;
  auto collect_stream = [&](const std::string& name, EncoderStream& s) {
    s.stem.collect(name + ".stem", out);
    for (std::size_t i = 0; i < s.stages.size(); ++i) {
      s.stages[i].collect(name + ".stage" + std::to_string(i + 1), out);
    }
    for (std::size_t i = 0; i < s.feams.size(); ++i) {
      s.feams[i].collect(name + ".feam" + std::to_string(i), out);
    }
  };
  collect_stream("rgb", rgb_);
  collect_stream("thermal", thermal_);
  block_a_.collect("decoder.a", out);
  for (std::size_t j = 0; j < blocks_b_.size(); ++j) {
    blocks_b_[j].collect("decoder.b" + std::to_string(j + 1), out);
  }
  return out;
}

std::vector<Var> Model::parameters() {
  auto st = state();
  std::vector<Var> out;
  for (auto& p : st.params) {
    const bool rgb_feam = p.name.starts_with("rgb.feam");
    const bool thermal_feam = p.name.starts_with("thermal.feam");
    if ((rgb_feam && !mask_.rgb) || (thermal_feam && !mask_.thermal)) continue;
    out.push_back(p.var);
  }
  return out;
}

std::size_t Model::parameter_count() {
  std::size_t total = 0;
  for (const auto& p : parameters()) total += p.value().size();
  return total;
}

std::vector<NamedTensor> Model::state_dict() {
  auto st = state();
  std::vector<NamedTensor> out;
  for (const auto& p : st.params) {
    out.push_back({p.name, Tensor(p.var.value().shape(),
                                  std::vector<double>(p.var.value().values().begin(),
                                                      p.var.value().values().end()))});
  }
  for (const auto& b : st.buffers) {
    out.push_back({b.name, Tensor(b.tensor->shape(),
                                  std::vector<double>(b.tensor->values().begin(),
                                                      b.tensor->values().end()))});
  }
  return out;
}

void Model::load_state_dict(const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.tensor;
  auto copy_into = [&](const std::string& name, Tensor& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    if (!(it->second->shape() == dst.shape())) {
      throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " +
                               it->second->shape().str() + ", model expects " + dst.shape().str());
    }
    std::copy(it->second->values().begin(), it->second->values().end(), dst.values().begin());
  };
  auto st = state();
  for (auto& p : st.params) copy_into(p.name, p.var.mutable_value());
  for (auto& b : st.buffers) copy_into(b.name, *b.tensor);
}

std::vector<int> predict_labels(const Tensor& logits) {
  const Shape& s = logits.shape();
  const std::size_t plane = s.plane();
  std::vector<int> labels(s.n * plane, 0);
  for (std::size_t n = 0; n < s.n; ++n) {
    const double* x = logits.data() + n * s.c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < s.c; ++c)
        if (x[c * plane + i] > x[best * plane + i]) best = c;
      labels[n * plane + i] = static_cast<int>(best);
    }
  }
  return labels;
}

std::vector<int> predict_labels(Model& model, const Tensor& rgb, const Tensor& thermal) {
  NoGradGuard no_grad;
  Var logits = model.forward(Var::constant(rgb), Var::constant(thermal), Mode::eval);
  return predict_labels(logits.value());
}

void save_checkpoint(Model& model, const std::filesystem::path& path) {
  save_tensors(path, model.state_dict());
  std::ofstream cfg(path.string() + ".cfg");
  if (!cfg) throw std::runtime_error("checkpoint: cannot write " + path.string() + ".cfg");
  cfg << model.config().to_text() << "variant = " << to_string(model.variant()) << '\n';
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream cfg_in(path.string() + ".cfg");
  if (!cfg_in) throw std::runtime_error("checkpoint: missing config " + path.string() + ".cfg");
  std::stringstream buf;
  buf << cfg_in.rdbuf();
  const std::string text = buf.str();
  Variant variant = Variant::frts;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos && trim(line.substr(0, eq)) == "variant") {
      variant = parse_variant(trim(line.substr(eq + 1)));
    }
  }
  Model m = Model::build(ModelConfig::from_text(text), variant, 0);
  m.load_state_dict(load_tensors(path));
  return m;
}

}  // namespace feanet::model
