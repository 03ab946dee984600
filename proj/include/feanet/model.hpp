#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "feanet/checkpoint.hpp"
#include "feanet/feam.hpp"
#include "feanet/layers.hpp"

namespace feanet::model {

struct ModelConfig {
  std::size_t num_classes = 9;
  /// Widths of the stem followed by each residual stage. Each entry halves
  /// the resolution, so inputs must be divisible by 2^stage_widths.size().
  std::vector<std::size_t> stage_widths{16, 32, 64, 128, 256};
  std::size_t input_h = 64;
  std::size_t input_w = 64;
  std::size_t feam_reduction = 4;
  std::size_t feam_kernel = 7;
  /// Thermal features join the RGB stream after its FEAM (true) or before it.
  bool fuse_after_feam = true;

  std::size_t stem_width() const { return stage_widths.front(); }
  std::size_t downsample_factor() const { return std::size_t{1} << stage_widths.size(); }
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  void validate_input(std::size_t h, std::size_t w) const;

  /// `key = value` lines, one per field.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
};

enum class Variant { frts, nfrs, nfts, nfrts };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);
inline constexpr Variant kAllVariants[] = {Variant::frts, Variant::nfrs, Variant::nfts,
                                           Variant::nfrts};

/// Which encoder streams apply their FEAMs. Disabled modules act as identity.
struct FeamMask {
  bool rgb = true;
  bool thermal = true;
  static FeamMask of(Variant v);
  bool operator==(const FeamMask&) const = default;
};

/// conv(s2) - BN - ReLU.
struct StemBlock {
  nn::Conv2d conv;
  nn::BatchNorm2d bn;

  StemBlock() = default;
  StemBlock(std::size_t in_channels, std::size_t out_channels, Rng& rng);
  Var forward(const Var& x, nn::Mode mode);
  void collect(const std::string& prefix, nn::StateList& out);
};

/// conv - BN - ReLU - conv - BN, plus identity or projection shortcut,
/// then ReLU.
struct ResidualBlock {
  std::size_t stride = 1;
  nn::Conv2d conv1;
  nn::BatchNorm2d bn1;
  nn::Conv2d conv2;
  nn::BatchNorm2d bn2;
  std::optional<nn::Conv2d> projection;
  std::optional<nn::BatchNorm2d> projection_bn;

  ResidualBlock() = default;
  ResidualBlock(std::size_t in_channels, std::size_t out_channels, std::size_t stride, Rng& rng);
  Var forward(const Var& x, nn::Mode mode);
  void collect(const std::string& prefix, nn::StateList& out);
};

/// Transposed block A: 3x3 conv - BN - ReLU - 3x3 conv - BN, added to the
/// input. Shape preserving.
struct DecoderBlockA {
  nn::Conv2d conv1;
  nn::BatchNorm2d bn1;
  nn::Conv2d conv2;
  nn::BatchNorm2d bn2;

  DecoderBlockA() = default;
  DecoderBlockA(std::size_t channels, Rng& rng);
  Var forward(const Var& x, nn::Mode mode);
  void collect(const std::string& prefix, nn::StateList& out);
};

/// Transposed block B: main path 3x3 conv (c -> out) - BN - ReLU - 2x2/s2
/// transposed conv (out -> out); branch 2x2/s2 transposed conv (c -> out);
/// the sum passes through BN - ReLU. When `emits_logits` the block is the
/// classifier: the transposed convs carry biases and the sum is returned raw.
struct DecoderBlockB {
  bool emits_logits = false;
  nn::Conv2d conv1;
  nn::BatchNorm2d bn1;
  nn::Conv2d trans1;
  nn::Conv2d trans2;
  std::optional<nn::BatchNorm2d> bn_out;

  DecoderBlockB() = default;
  DecoderBlockB(std::size_t in_channels, std::size_t out_channels, bool emits_logits, Rng& rng);
  Var forward(const Var& x, nn::Mode mode);
  void collect(const std::string& prefix, nn::StateList& out);
};

struct EncoderStream {
  StemBlock stem;
  std::vector<ResidualBlock> stages;
  std::vector<feam::FeamParams> feams;  // one per level: stem, then each stage

  std::size_t levels() const { return stages.size() + 1; }
  Var block(std::size_t level, const Var& x, nn::Mode mode);
};

class Model {
 public:
  /// Deterministic in (config, seed). Every variant draws the same
  /// parameters; the variant only selects which FEAMs are applied.
  static Model build(const ModelConfig& config, Variant variant, std::uint64_t seed);

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  Variant variant() const { return variant_; }
  FeamMask& feam_mask() { return mask_; }
  const FeamMask& feam_mask() const { return mask_; }

  /// Two-stream encoder with per-level FEAM refinement and thermal -> RGB
  /// summation; returns the deepest fused map.
  Var encode_fuse(const Var& rgb, const Var& thermal, nn::Mode mode);
  /// Logits at full input resolution, (n, num_classes, h, w).
  Var forward(const Var& rgb, const Var& thermal, nn::Mode mode);

  /// Learnable tensors of the active computation (disabled FEAMs excluded).
  std::vector<Var> parameters();
  /// Every parameter and buffer, including disabled FEAMs.
  nn::StateList state();
  std::size_t parameter_count();

  std::vector<NamedTensor> state_dict();
  /// Copies matching tensors in; throws on missing names or shape mismatch.
  void load_state_dict(const std::vector<NamedTensor>& tensors);

  EncoderStream& rgb_stream() { return rgb_; }
  EncoderStream& thermal_stream() { return thermal_; }
  DecoderBlockA& decoder_a() { return block_a_; }
  std::vector<DecoderBlockB>& decoder_b() { return blocks_b_; }

 private:
  Model() = default;

  ModelConfig config_;
  Variant variant_ = Variant::frts;
  FeamMask mask_;
  EncoderStream rgb_;
  EncoderStream thermal_;
  DecoderBlockA block_a_;
  std::vector<DecoderBlockB> blocks_b_;
};

/// Per-pixel argmax over classes; ties go to the lower class index.
/// Softmax is monotone, so the argmax is taken on the logits directly.
std::vector<int> predict_labels(const Tensor& logits);
std::vector<int> predict_labels(Model& model, const Tensor& rgb, const Tensor& thermal);

/// Writes `<path>` (tensor container) and `<path>.cfg` (ModelConfig text +
/// variant).
void save_checkpoint(Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace feanet::model
