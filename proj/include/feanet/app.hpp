#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "feanet/data.hpp"
#include "feanet/metrics.hpp"
#include "feanet/model.hpp"
#include "feanet/optim.hpp"

namespace feanet::app {

/// Everything a subcommand needs. Every field has a default, so a bare
/// invocation runs the toy pipeline end to end.
struct RunConfig {
  std::filesystem::path data_root = "data";
  std::filesystem::path out_dir = "runs";
  std::optional<std::filesystem::path> checkpoint;  // default: <out_dir>/best.ckpt
  std::string split = "test";                       // eval / predict / ablate target

  model::ModelConfig model;
  model::Variant variant = model::Variant::frts;
  optim::SgdConfig sgd;
  optim::LossOptions loss;
  std::size_t epochs = 10;
  std::size_t batch_size = 5;
  std::size_t max_steps = 0;  // 0: no cap
  std::uint64_t seed = 1;

  // generate
  std::size_t num_samples = 64;
  std::size_t num_objects = 6;
  double night_fraction = 0.5;
  std::array<double, 3> split_ratios{0.5, 0.25, 0.25};

  // ablate
  std::size_t ablation_seeds = 3;

  // bench
  std::size_t bench_iters = 10;
  std::size_t bench_warmup = 2;
  std::size_t bench_batch = 1;
  std::optional<std::size_t> bench_h;  // default: model input size
  std::optional<std::size_t> bench_w;

  std::filesystem::path checkpoint_path() const;

  /// Applies one `key = value` setting; throws std::invalid_argument on an
  /// unknown key or unparsable value.
  void set(const std::string& key, const std::string& value);
  /// Applies a config file: `key = value` lines, `#` comments, blank lines.
  void apply_text(const std::string& text, const std::string& origin = "config");
  void apply_file(const std::filesystem::path& path);
  std::string to_text() const;
};

// ---------------------------------------------------------------- training

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;  // optimizer steps taken so far
  double lr = 0.0;        // rate used by the last step of the epoch
  double train_loss = 0.0;
  std::optional<double> val_miou;
};

/// Stacks samples [first, first + count) of `order` into one batch.
struct Batch {
  Tensor rgb;
  Tensor thermal;
  std::vector<int> labels;
};
Batch make_batch(const std::vector<data::Sample>& samples, const std::vector<std::size_t>& order,
                 std::size_t first, std::size_t count);

/// One optimization step on a batch: softmax, combined loss, backward, SGD.
/// Returns the loss value.
double train_step(model::Model& model, optim::Sgd& sgd, const Batch& batch,
                  const optim::LossOptions& loss);

/// Trains for cfg.epochs (bounded by cfg.max_steps) on `train`. Each epoch
/// visits the samples in a seeded shuffled order; a trailing partial batch
/// is kept. `on_epoch` runs after every epoch with the record (val_miou
/// filled when `val` is non-empty).
std::vector<EpochRecord> fit(model::Model& model, const std::vector<data::Sample>& train,
                             const std::vector<data::Sample>& val, const RunConfig& cfg,
                             const std::function<void(const EpochRecord&, model::Model&)>& on_epoch = {});

/// Eval-mode predictions over `samples`, aggregated into one matrix.
metrics::ConfusionMatrix evaluate(model::Model& model, const std::vector<data::Sample>& samples,
                                  std::size_t batch_size = 5);

// ---------------------------------------------------------------- subcommands

data::GenerateOptions generate_options(const RunConfig& cfg);
data::DatasetSplit run_generate(const RunConfig& cfg);

struct TrainResult {
  std::vector<EpochRecord> log;
  std::optional<double> best_val_miou;
  std::filesystem::path checkpoint;
};
/// Writes <out>/train_log.csv, <out>/best.ckpt (+ .cfg) and <out>/run.cfg.
TrainResult run_train(const RunConfig& cfg);

/// Writes <out>/eval_<split>.csv and returns the matrix.
metrics::ConfusionMatrix run_eval(const RunConfig& cfg);

/// Writes <out>/predict/<id>_{rgb.ppm,thermal.pgm,pred.ppm,truth.ppm}.
std::size_t run_predict(const RunConfig& cfg);

struct AblationRow {
  model::Variant variant;
  double macc = 0.0;
  double miou = 0.0;
};
struct AblationResult {
  std::vector<AblationRow> medians;                  // FRTS, NFRS, NFTS, NFRTS
  std::vector<std::vector<AblationRow>> per_seed;    // [seed][variant]
};
double median(std::vector<double> values);
/// Trains and scores every variant on identical data for each seed.
AblationResult ablate(const std::vector<data::Sample>& train, const std::vector<data::Sample>& test,
                      const RunConfig& cfg, std::ostream* progress = nullptr);
/// Writes <out>/ablation.csv and <out>/ablation_runs.csv.
AblationResult run_ablation(const RunConfig& cfg, std::ostream* progress = nullptr);

struct BenchResult {
  double ms_per_image = 0.0;
  double fps = 0.0;
  std::size_t height = 0;
  std::size_t width = 0;
};
BenchResult bench(model::Model& model, std::size_t height, std::size_t width, std::size_t batch,
                  std::size_t warmup, std::size_t iters);
/// Uses the checkpoint when it exists, a freshly seeded model otherwise.
/// Writes <out>/bench.csv.
BenchResult run_bench(const RunConfig& cfg);

struct GradcheckEntry {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t elements = 0;
};
inline constexpr double kGradTolerance = 1e-4;
/// Reduced model used by the full-network audit: 2 classes, widths {4, 8},
/// 16x16 inputs.
model::ModelConfig reduced_model_config();
/// Audits every differentiable op once, then the reduced model.
std::vector<GradcheckEntry> gradcheck_all(std::uint64_t seed, bool include_model = true);
/// Writes <out>/gradcheck.csv; returns the process exit code (nonzero when
/// any error reaches kGradTolerance).
int run_gradcheck(const RunConfig& cfg, bool inject_conv_fault, std::ostream& report);

}  // namespace feanet::app
