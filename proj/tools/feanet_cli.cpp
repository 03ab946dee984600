#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "feanet/app.hpp"

namespace {

struct SharedFlags {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> variant;
  std::optional<std::string> data;
  std::optional<std::string> checkpoint;
  std::optional<std::string> split;
  std::optional<std::size_t> epochs;
  std::vector<std::string> overrides;
};

void add_shared(CLI::App* cmd, SharedFlags& f) {
  cmd->add_option("--config", f.config, "key = value run configuration file");
  cmd->add_option("--seed", f.seed, "Base random seed");
  cmd->add_option("--out", f.out, "Output directory (for generate: the dataset root)");
  cmd->add_option("--variant", f.variant, "Ablation variant: frts, nfrs, nfts or nfrts");
  cmd->add_option("--data", f.data, "Dataset root directory");
  cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint path (default <out>/best.ckpt)");
  cmd->add_option("--split", f.split, "Dataset split to evaluate, render or test on");
  cmd->add_option("--epochs", f.epochs, "Training epochs");
  cmd->add_option("--set", f.overrides, "Extra key=value override (repeatable)");
}

feanet::app::RunConfig resolve(const SharedFlags& f, bool out_is_data_root) {
  feanet::app::RunConfig cfg;
  if (f.config) cfg.apply_file(*f.config);
  for (const auto& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.seed) cfg.seed = *f.seed;
  if (f.variant) cfg.set("variant", *f.variant);
  if (f.data) cfg.data_root = *f.data;
  if (f.out) (out_is_data_root ? cfg.data_root : cfg.out_dir) = *f.out;
  if (f.checkpoint) cfg.checkpoint = std::filesystem::path(*f.checkpoint);
  if (f.split) cfg.split = *f.split;
  if (f.epochs) cfg.epochs = *f.epochs;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stream RGB-thermal segmentation with feature-enhanced attention"};
  app.require_subcommand(1);

  SharedFlags f;
  auto* generate = app.add_subcommand("generate", "Write a synthetic RGB-T dataset");
  auto* train = app.add_subcommand("train", "Train and keep the best validation checkpoint");
  auto* eval = app.add_subcommand("eval", "Per-class Acc/IoU and means for a split");
  auto* predict = app.add_subcommand("predict", "Render colorized predictions for a split");
  auto* ablate = app.add_subcommand("ablate", "Train and score all four attention variants");
  auto* bench = app.add_subcommand("bench", "Time forward passes");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference audit of every op");
  bool inject_fault = false;
  gradcheck->add_flag("--inject-conv-fault", inject_fault, "Corrupt the conv backward pass");
  for (auto* cmd : {generate, train, eval, predict, ablate, bench, gradcheck}) add_shared(cmd, f);

  CLI11_PARSE(app, argc, argv);

  try {
    namespace fa = feanet::app;
    if (generate->parsed()) {
      const auto cfg = resolve(f, true);
      const auto split = fa::run_generate(cfg);
      std::cout << "wrote " << cfg.num_samples << " samples to " << cfg.data_root.string() << " (train "
                << split.train.size() << ", val " << split.val.size() << ", test " << split.test.size()
                << ")\n";
    } else if (train->parsed()) {
      const auto cfg = resolve(f, false);
      const auto r = fa::run_train(cfg);
      for (const auto& e : r.log) {
        std::cout << "epoch " << e.epoch << " steps " << e.steps << " loss " << e.train_loss;
        if (e.val_miou) std::cout << " val_mIoU " << *e.val_miou;
        std::cout << '\n';
      }
      std::cout << "checkpoint " << r.checkpoint.string() << '\n';
    } else if (eval->parsed()) {
      const auto cfg = resolve(f, false);
      feanet::metrics::write_csv(std::cout, fa::run_eval(cfg));
    } else if (predict->parsed()) {
      const auto cfg = resolve(f, false);
      const std::size_t n = fa::run_predict(cfg);
      std::cout << "rendered " << n << " samples under " << (cfg.out_dir / "predict").string() << '\n';
    } else if (ablate->parsed()) {
      const auto cfg = resolve(f, false);
      const auto r = fa::run_ablation(cfg, &std::cout);
      std::cout << "variant,mAcc,mIoU\n";
      for (const auto& row : r.medians) {
        std::cout << feanet::model::to_string(row.variant) << ',' << row.macc << ',' << row.miou << '\n';
      }
    } else if (bench->parsed()) {
      const auto cfg = resolve(f, false);
      const auto r = fa::run_bench(cfg);
      std::cout << r.height << "x" << r.width << ": " << r.ms_per_image << " ms/image, " << r.fps
                << " fps\n";
    } else if (gradcheck->parsed()) {
      const auto cfg = resolve(f, false);
      return fa::run_gradcheck(cfg, inject_fault, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
