#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "feanet/model.hpp"
#include "feanet/nn.hpp"
#include "oracles.hpp"

using namespace feanet;
using model::Model;
using model::ModelConfig;
using model::Variant;
using nn::Mode;

namespace {

Var cst(const Tensor& t) { return Var::constant(t); }

ModelConfig small_config() {
  ModelConfig c;
  c.num_classes = 3;
  c.stage_widths = {4, 8, 16};
  c.input_h = 16;
  c.input_w = 16;
  c.feam_kernel = 3;
  return c;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) return false;
  return std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

// Forward pass assembled from the model's components, with FEAMs selected
// explicitly and fusion after the RGB FEAM.
Tensor composed_forward(Model& m, const Tensor& rgb, const Tensor& thermal, bool rgb_feam, bool thermal_feam,
                        Mode mode) {
  Var r = cst(rgb), t = cst(thermal);
  auto& rs = m.rgb_stream();
  auto& ts = m.thermal_stream();
  for (std::size_t level = 0; level < rs.levels(); ++level) {
    t = ts.block(level, t, mode);
    if (thermal_feam) t = feam::feam_apply(t, ts.feams[level]);
    r = rs.block(level, r, mode);
    if (rgb_feam) r = feam::feam_apply(r, rs.feams[level]);
    r = nn::add(r, t);
  }
  Var x = m.decoder_a().forward(r, mode);
  for (auto& b : m.decoder_b()) x = b.forward(x, mode);
  return x.value();
}

std::size_t conv_params(std::size_t in, std::size_t out, std::size_t k, bool bias) {
  return in * out * k * k + (bias ? out : 0);
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const auto& w = c.stage_widths;
  auto stream = [&](std::size_t in) {
    std::size_t total = conv_params(in, w[0], 4, false) + 2 * w[0];
    for (std::size_t i = 1; i < w.size(); ++i) {
      total += conv_params(w[i - 1], w[i], 4, false) + 2 * w[i];  // strided conv1 + BN
      total += conv_params(w[i], w[i], 3, false) + 2 * w[i];      // conv2 + BN
      total += conv_params(w[i - 1], w[i], 2, false) + 2 * w[i];  // projection + BN
    }
    for (std::size_t width : w) {
      const std::size_t hidden = width / c.feam_reduction;
      total += 2 * width * hidden + 2 * c.feam_kernel * c.feam_kernel + 1;
    }
    return total;
  };
  std::size_t total = stream(3) + stream(1);
  total += 2 * (conv_params(w.back(), w.back(), 3, false) + 2 * w.back());
  for (std::size_t j = 0; j < w.size(); ++j) {
    const std::size_t in = w[w.size() - 1 - j];
    const bool last = j + 1 == w.size();
    const std::size_t out = last ? c.num_classes : w[w.size() - 2 - j];
    total += conv_params(in, out, 3, false) + 2 * out;
    total += conv_params(out, out, 2, false);
    total += conv_params(in, out, 2, last);
    if (!last) total += 2 * out;
  }
  return total;
}

}  // namespace

TEST_CASE("model config validation and text round trip") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.input_h = 48;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.stage_widths = {16, 16, 32};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.fuse_after_feam = false;
  const ModelConfig back = ModelConfig::from_text(c.to_text());
  CHECK(back.num_classes == c.num_classes);
  CHECK(back.stage_widths == c.stage_widths);
  CHECK(back.feam_kernel == c.feam_kernel);
  CHECK_FALSE(back.fuse_after_feam);
  CHECK(model::parse_variant("NfRtS") == Variant::nfrts);
  CHECK_THROWS_AS(model::parse_variant("frt"), std::invalid_argument);
  CHECK_THROWS_AS(Model::build(ModelConfig{.num_classes = 1}, Variant::frts, 1), std::invalid_argument);
}

TEST_CASE("build is deterministic and variants share parameters") {
  Model a = Model::build(small_config(), Variant::frts, 99);
  Model b = Model::build(small_config(), Variant::frts, 99);
  Model n = Model::build(small_config(), Variant::nfrts, 99);
  Model other = Model::build(small_config(), Variant::frts, 100);
  const auto sa = a.state_dict(), sb = b.state_dict(), sn = n.state_dict(), so = other.state_dict();
  REQUIRE(sa.size() == sb.size());
  bool differs = false;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    CHECK(sa[i].name == sb[i].name);
    CHECK(bit_equal(sa[i].tensor, sb[i].tensor));
    CHECK(bit_equal(sa[i].tensor, sn[i].tensor));
    differs = differs || !bit_equal(sa[i].tensor, so[i].tensor);
  }
  CHECK(differs);
}

TEST_CASE("parameter count matches shape accounting") {
  ModelConfig c;
  Model m = Model::build(c, Variant::frts, 1);
  CHECK(m.parameter_count() == expected_parameter_count(c));
  const ModelConfig s = small_config();
  Model ms = Model::build(s, Variant::frts, 1);
  CHECK(ms.parameter_count() == expected_parameter_count(s));
  // Disabled FEAMs are not trained.
  Model nf = Model::build(s, Variant::nfrts, 1);
  std::size_t feam_total = 0;
  for (std::size_t w : s.stage_widths) feam_total += 2 * w * (w / s.feam_reduction) + 2 * 9 + 1;
  CHECK(nf.parameter_count() == expected_parameter_count(s) - 2 * feam_total);
}

TEST_CASE("residual block") {
  Rng rng(3);
  model::ResidualBlock same(4, 4, 1, rng);
  same.conv1.zero_weights();
  same.conv2.zero_weights();
  const Tensor x = random_tensor({2, 4, 6, 6}, rng);
  CHECK(oracle::max_abs_diff(same.forward(cst(x), Mode::train).value(), oracle::relu(x)) == 0.0);

  model::ResidualBlock down(4, 8, 2, rng);
  const Tensor y = down.forward(cst(x), Mode::train).value();
  CHECK(y.shape() == Shape{2, 8, 3, 3});

  auto bn = [](const Tensor& v, const nn::BatchNorm2d& b) { return oracle::bn_train(v, b.gamma.value(), b.beta.value()); };
  Tensor main = oracle::relu(bn(oracle::conv(x, down.conv1.weight.value(), nullptr, 2, 1), down.bn1));
  main = bn(oracle::conv(main, down.conv2.weight.value(), nullptr, 1, 1), down.bn2);
  const Tensor shortcut = bn(oracle::conv(x, down.projection->weight.value(), nullptr, 2, 0), *down.projection_bn);
  CHECK(oracle::max_abs_diff(y, oracle::relu(oracle::add(main, shortcut))) < 1e-12);
}

TEST_CASE("decoder block A") {
  Rng rng(4);
  model::DecoderBlockA a(4, rng);
  const Tensor x = random_tensor({2, 4, 5, 3}, rng);
  const Tensor y = a.forward(cst(x), Mode::train).value();
  CHECK(y.shape() == x.shape());
  auto bn = [](const Tensor& v, const nn::BatchNorm2d& b) { return oracle::bn_train(v, b.gamma.value(), b.beta.value()); };
  Tensor want = oracle::relu(bn(oracle::conv(x, a.conv1.weight.value(), nullptr, 1, 1), a.bn1));
  want = oracle::add(bn(oracle::conv(want, a.conv2.weight.value(), nullptr, 1, 1), a.bn2), x);
  CHECK(oracle::max_abs_diff(y, want) < 1e-12);
  a.conv1.zero_weights();
  a.conv2.zero_weights();
  CHECK(oracle::max_abs_diff(a.forward(cst(x), Mode::train).value(), x) == 0.0);
}

TEST_CASE("decoder block B") {
  Rng rng(5);
  CHECK_THROWS_AS(model::DecoderBlockB(7, 3, false, rng), std::invalid_argument);
  model::DecoderBlockB b(8, 4, false, rng);
  const Tensor x = random_tensor({1, 8, 4, 4}, rng);
  const Tensor y = b.forward(cst(x), Mode::train).value();
  CHECK(y.shape() == Shape{1, 4, 8, 8});
  auto bn = [](const Tensor& v, const nn::BatchNorm2d& n) { return oracle::bn_train(v, n.gamma.value(), n.beta.value()); };
  const Tensor main = oracle::tconv(oracle::relu(bn(oracle::conv(x, b.conv1.weight.value(), nullptr, 1, 1), b.bn1)),
                                    b.trans1.weight.value(), nullptr, 2, 0);
  const Tensor branch = oracle::tconv(x, b.trans2.weight.value(), nullptr, 2, 0);
  CHECK(oracle::max_abs_diff(y, oracle::relu(bn(oracle::add(main, branch), *b.bn_out))) < 1e-12);

  b.conv1.zero_weights();
  b.trans1.zero_weights();
  CHECK(oracle::max_abs_diff(b.forward(cst(x), Mode::train).value(), oracle::relu(bn(branch, *b.bn_out))) < 1e-12);

  model::DecoderBlockB head(8, 3, true, rng);
  REQUIRE(head.trans2.bias.has_value());
  const Tensor logits = head.forward(cst(x), Mode::train).value();
  const Tensor bias = head.trans2.bias->value();
  const Tensor hm = oracle::tconv(oracle::relu(bn(oracle::conv(x, head.conv1.weight.value(), nullptr, 1, 1), head.bn1)),
                                  head.trans1.weight.value(), nullptr, 2, 0);
  CHECK(oracle::max_abs_diff(logits, oracle::add(hm, oracle::tconv(x, head.trans2.weight.value(), &bias, 2, 0))) < 1e-12);
}

TEST_CASE("default model shapes and resolution round trip") {
  Model m = Model::build(ModelConfig{}, Variant::frts, 7);
  Rng rng(1);
  NoGradGuard ng;
  const Tensor rgb = random_tensor({1, 3, 64, 64}, rng, 0, 1), th = random_tensor({1, 1, 64, 64}, rng, 0, 1);
  CHECK(m.encode_fuse(cst(rgb), cst(th), Mode::eval).shape() == Shape{1, 256, 2, 2});
  CHECK(m.forward(cst(rgb), cst(th), Mode::eval).shape() == Shape{1, 9, 64, 64});
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{32, 96}, {96, 32}, {128, 64}}) {
    const Tensor r = random_tensor({1, 3, h, w}, rng, 0, 1), t = random_tensor({1, 1, h, w}, rng, 0, 1);
    CHECK(m.forward(cst(r), cst(t), Mode::eval).shape() == Shape{1, 9, h, w});
  }
  CHECK_THROWS_AS(m.forward(cst(random_tensor({1, 3, 48, 64}, rng)), cst(random_tensor({1, 1, 48, 64}, rng)), Mode::eval),
                  std::invalid_argument);
  CHECK_THROWS_AS(m.forward(cst(rgb), cst(random_tensor({1, 1, 32, 32}, rng)), Mode::eval), std::invalid_argument);
  CHECK_THROWS_AS(m.forward(cst(th), cst(th), Mode::eval), std::invalid_argument);
}

TEST_CASE("zero thermal stream leaves gated rgb features") {
  const ModelConfig c = small_config();
  Model m = Model::build(c, Variant::frts, 8);
  auto& ts = m.thermal_stream();
  ts.stem.conv.zero_weights();
  for (auto& st : ts.stages) {
    st.conv1.zero_weights();
    st.conv2.zero_weights();
    st.projection->zero_weights();
  }
  auto& rs = m.rgb_stream();
  for (std::size_t i = 0; i < rs.feams.size(); ++i) {
    rs.feams[i] = feam::zero_params(c.stage_widths[i], c.feam_reduction, c.feam_kernel);
  }
  Rng rng(2);
  const Tensor rgb = random_tensor({2, 3, 16, 16}, rng, 0, 1), th = random_tensor({2, 1, 16, 16}, rng, 0, 1);
  const Tensor fused = m.encode_fuse(cst(rgb), cst(th), Mode::train).value();
  Var r = cst(rgb);
  for (std::size_t level = 0; level < rs.levels(); ++level) r = nn::scale(rs.block(level, r, Mode::train), 0.25);
  CHECK(oracle::max_abs_diff(fused, r.value()) < 1e-14);
}

TEST_CASE("variants equal FRTS with identity in place of the disabled FEAMs") {
  const ModelConfig c = small_config();
  Rng rng(3);
  const Tensor rgb = random_tensor({2, 3, 16, 16}, rng, 0, 1), th = random_tensor({2, 1, 16, 16}, rng, 0, 1);
  for (Variant v : model::kAllVariants) {
    // Train mode moves BN running stats, so each comparison starts fresh.
    Model frts = Model::build(c, Variant::frts, 5);
    Model m = Model::build(c, v, 5);
    const auto mask = model::FeamMask::of(v);
    for (Mode mode : {Mode::eval, Mode::train}) {
      const Tensor got = m.forward(cst(rgb), cst(th), mode).value();
      CHECK(bit_equal(got, composed_forward(frts, rgb, th, mask.rgb, mask.thermal, mode)));
    }
  }
  Model frts = Model::build(c, Variant::frts, 5);
  Model n = Model::build(c, Variant::nfrts, 5);
  CHECK_FALSE(bit_equal(frts.forward(cst(rgb), cst(th), Mode::eval).value(), n.forward(cst(rgb), cst(th), Mode::eval).value()));
}

TEST_CASE("fusion placement switch changes the network") {
  ModelConfig c = small_config();
  Rng rng(4);
  const Tensor rgb = random_tensor({1, 3, 16, 16}, rng, 0, 1), th = random_tensor({1, 1, 16, 16}, rng, 0, 1);
  Model after = Model::build(c, Variant::frts, 6);
  c.fuse_after_feam = false;
  Model before = Model::build(c, Variant::frts, 6);
  CHECK(oracle::max_abs_diff(after.forward(cst(rgb), cst(th), Mode::eval).value(),
                             before.forward(cst(rgb), cst(th), Mode::eval).value()) > 1e-9);
}

TEST_CASE("eval mode is batch equivariant and inputs are not symmetric") {
  Model m = Model::build(small_config(), Variant::frts, 9);
  Rng rng(5);
  const Tensor rgb = random_tensor({3, 3, 16, 16}, rng, 0, 1), th = random_tensor({3, 1, 16, 16}, rng, 0, 1);
  const std::size_t perm[3] = {2, 0, 1};
  Tensor prgb(rgb.shape()), pth(th.shape());
  for (std::size_t k = 0; k < 3; ++k) {
    std::copy_n(rgb.data() + perm[k] * 768, 768, prgb.data() + k * 768);
    std::copy_n(th.data() + perm[k] * 256, 256, pth.data() + k * 256);
  }
  const Tensor y = m.forward(cst(rgb), cst(th), Mode::eval).value();
  const Tensor py = m.forward(cst(prgb), cst(pth), Mode::eval).value();
  const std::size_t per = y.size() / 3;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < per; ++i) CHECK(py[k * per + i] == y[perm[k] * per + i]);

  // Swap modalities: thermal replicated as RGB, RGB luminance as thermal.
  Tensor srgb(rgb.shape()), sth(th.shape());
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 256; ++i) {
      for (std::size_t c = 0; c < 3; ++c) srgb[(n * 3 + c) * 256 + i] = th[n * 256 + i];
      sth[n * 256 + i] = (rgb[(n * 3) * 256 + i] + rgb[(n * 3 + 1) * 256 + i] + rgb[(n * 3 + 2) * 256 + i]) / 3.0;
    }
  Tensor same_rgb(rgb.shape()), same_th(th.shape());
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 256; ++i) {
      for (std::size_t c = 0; c < 3; ++c) same_rgb[(n * 3 + c) * 256 + i] = sth[n * 256 + i];
      same_th[n * 256 + i] = th[n * 256 + i];
    }
  // Gray inputs (every channel equal) make the swap well defined.
  const Tensor a = m.forward(cst(same_rgb), cst(same_th), Mode::eval).value();
  const Tensor b = m.forward(cst(srgb), cst(sth), Mode::eval).value();
  CHECK(oracle::max_abs_diff(a, b) > 1e-6);
}

TEST_CASE("predict_labels") {
  Tensor dom({1, 4, 2, 3}, 0.0);
  for (std::size_t i = 0; i < 6; ++i) dom[3 * 6 + i] = 1.0;
  for (int l : model::predict_labels(dom)) CHECK(l == 3);
  Tensor tie({1, 3, 1, 1}, std::vector<double>{0.2, 0.7, 0.7});
  CHECK(model::predict_labels(tie)[0] == 1);

  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = random_tensor({2, 5, 4, 4}, rng, -3, 3);
    const auto got = model::predict_labels(logits);
    Tensor shifted = logits;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) {
          const double shift = rng.uniform(-50, 50);
          std::size_t best = 0;
          for (std::size_t c = 0; c < 5; ++c) {
            if (logits.at(n, c, y, x) > logits.at(n, best, y, x)) best = c;
            shifted.at(n, c, y, x) += shift;
          }
          CHECK(got[n * 16 + y * 4 + x] == static_cast<int>(best));
        }
    CHECK(model::predict_labels(shifted) == got);
    CHECK(model::predict_labels(oracle::softmax_channels(logits)) == got);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "feanet_test_ckpt";
  std::filesystem::create_directories(dir);
  ModelConfig c = small_config();
  c.fuse_after_feam = false;
  Model m = Model::build(c, Variant::nfts, 12);
  Rng rng(7);
  const Tensor rgb = random_tensor({1, 3, 16, 16}, rng, 0, 1), th = random_tensor({1, 1, 16, 16}, rng, 0, 1);
  m.forward(cst(rgb), cst(th), Mode::train);  // move running stats off their defaults
  model::save_checkpoint(m, dir / "m.ckpt");
  Model back = model::load_checkpoint(dir / "m.ckpt");
  CHECK(back.variant() == Variant::nfts);
  CHECK_FALSE(back.config().fuse_after_feam);
  CHECK(bit_equal(m.forward(cst(rgb), cst(th), Mode::eval).value(), back.forward(cst(rgb), cst(th), Mode::eval).value()));

  auto sd = m.state_dict();
  sd.pop_back();
  CHECK_THROWS(back.load_state_dict(sd));
  sd = m.state_dict();
  sd[0].tensor = Tensor({1, 1, 1, 1});
  CHECK_THROWS(back.load_state_dict(sd));
  std::filesystem::remove_all(dir);
}
