#include "feanet/app.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "feanet/feam.hpp"
#include "feanet/nn.hpp"

namespace feanet::app {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw std::invalid_argument("config: '" + key + "' expects " + expected + ", got '" + value + "'");
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) bad_value(key, v, "a finite number");
    return d;
  } catch (const std::logic_error&) {
    bad_value(key, v, "a finite number");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::string join_sizes(const std::vector<std::size_t>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

fs::path RunConfig::checkpoint_path() const { return checkpoint ? *checkpoint : out_dir / "best.ckpt"; }

void RunConfig::set(const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key);
  const std::string v = trim(raw_value);
  if (key == "data_root") data_root = v;
  else if (key == "out_dir" || key == "out") out_dir = v;
  else if (key == "checkpoint") checkpoint = fs::path(v);
  else if (key == "split") split = v;
  else if (key == "num_classes") model.num_classes = parse_size(key, v);
  else if (key == "stage_widths") {
    model.stage_widths.clear();
    for (const auto& item : split_list(v)) model.stage_widths.push_back(parse_size(key, item));
  } else if (key == "input_h") model.input_h = parse_size(key, v);
  else if (key == "input_w") model.input_w = parse_size(key, v);
  else if (key == "feam_reduction") model.feam_reduction = parse_size(key, v);
  else if (key == "feam_kernel") model.feam_kernel = parse_size(key, v);
  else if (key == "fuse_after_feam") model.fuse_after_feam = parse_bool(key, v);
  else if (key == "variant") variant = model::parse_variant(v);
  else if (key == "lr_max") sgd.lr_max = parse_double(key, v);
  else if (key == "momentum") sgd.momentum = parse_double(key, v);
  else if (key == "weight_decay") sgd.weight_decay = parse_double(key, v);
  else if (key == "t0") sgd.t0 = parse_size(key, v);
  else if (key == "t_mult") sgd.t_mult = parse_size(key, v);
  else if (key == "lr_min") sgd.lr_min = parse_double(key, v);
  else if (key == "dice_epsilon") loss.dice_epsilon = parse_double(key, v);
  else if (key == "log_floor") loss.log_floor = parse_double(key, v);
  else if (key == "label_smoothing") loss.label_smoothing = parse_double(key, v);
  else if (key == "epochs") epochs = parse_size(key, v);
  else if (key == "batch_size") batch_size = parse_size(key, v);
  else if (key == "max_steps") max_steps = parse_size(key, v);
  else if (key == "seed") seed = parse_u64(key, v);
  else if (key == "num_samples") num_samples = parse_size(key, v);
  else if (key == "num_objects") num_objects = parse_size(key, v);
  else if (key == "night_fraction") night_fraction = parse_double(key, v);
  else if (key == "split_ratios") {
    const auto items = split_list(v);
    if (items.size() != 3) bad_value(key, v, "three comma-separated ratios");
    for (std::size_t i = 0; i < 3; ++i) split_ratios[i] = parse_double(key, items[i]);
  } else if (key == "ablation_seeds") ablation_seeds = parse_size(key, v);
  else if (key == "bench_iters") bench_iters = parse_size(key, v);
  else if (key == "bench_warmup") bench_warmup = parse_size(key, v);
  else if (key == "bench_batch") bench_batch = parse_size(key, v);
  else if (key == "bench_h") bench_h = parse_size(key, v);
  else if (key == "bench_w") bench_w = parse_size(key, v);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

void RunConfig::apply_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      set(line.substr(0, eq), line.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::apply_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_text(ss.str(), path.string());
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "data_root = " << data_root.string() << '\n'
     << "out_dir = " << out_dir.string() << '\n';
  if (checkpoint) os << "checkpoint = " << checkpoint->string() << '\n';
  os << "split = " << split << '\n'
     << "num_classes = " << model.num_classes << '\n'
     << "stage_widths = " << join_sizes(model.stage_widths) << '\n'
     << "input_h = " << model.input_h << '\n'
     << "input_w = " << model.input_w << '\n'
     << "feam_reduction = " << model.feam_reduction << '\n'
     << "feam_kernel = " << model.feam_kernel << '\n'
     << "fuse_after_feam = " << (model.fuse_after_feam ? "true" : "false") << '\n'
     << "variant = " << model::to_string(variant) << '\n'
     << "lr_max = " << fmt(sgd.lr_max) << '\n'
     << "momentum = " << fmt(sgd.momentum) << '\n'
     << "weight_decay = " << fmt(sgd.weight_decay) << '\n'
     << "t0 = " << sgd.t0 << '\n'
     << "t_mult = " << sgd.t_mult << '\n'
     << "lr_min = " << fmt(sgd.lr_min) << '\n'
     << "dice_epsilon = " << fmt(loss.dice_epsilon) << '\n'
     << "log_floor = " << fmt(loss.log_floor) << '\n'
     << "label_smoothing = " << fmt(loss.label_smoothing) << '\n'
     << "epochs = " << epochs << '\n'
     << "batch_size = " << batch_size << '\n'
     << "max_steps = " << max_steps << '\n'
     << "seed = " << seed << '\n'
     << "num_samples = " << num_samples << '\n'
     << "num_objects = " << num_objects << '\n'
     << "night_fraction = " << fmt(night_fraction) << '\n'
     << "split_ratios = " << fmt(split_ratios[0]) << ',' << fmt(split_ratios[1]) << ','
     << fmt(split_ratios[2]) << '\n'
     << "ablation_seeds = " << ablation_seeds << '\n'
     << "bench_iters = " << bench_iters << '\n'
     << "bench_warmup = " << bench_warmup << '\n'
     << "bench_batch = " << bench_batch << '\n';
  if (bench_h) os << "bench_h = " << *bench_h << '\n';
  if (bench_w) os << "bench_w = " << *bench_w << '\n';
  return os.str();
}

// ---------------------------------------------------------------- training

Batch make_batch(const std::vector<data::Sample>& samples, const std::vector<std::size_t>& order,
                 std::size_t first, std::size_t count) {
  if (count == 0 || first + count > order.size()) throw std::invalid_argument("make_batch: bad range");
  const data::Sample& head = samples[order[first]];
  const Shape rs = head.rgb.shape();
  const Shape ts = head.thermal.shape();
  Batch b{Tensor({count, rs.c, rs.h, rs.w}), Tensor({count, ts.c, ts.h, ts.w}), {}};
  b.labels.reserve(count * rs.plane());
  for (std::size_t k = 0; k < count; ++k) {
    const data::Sample& s = samples[order[first + k]];
    if (!(s.rgb.shape() == rs) || !(s.thermal.shape() == ts) || s.labels.size() != rs.plane()) {
      throw std::invalid_argument("make_batch: sample " + s.id + " differs in size from " + head.id);
    }
    std::copy(s.rgb.values().begin(), s.rgb.values().end(), b.rgb.values().begin() + k * rs.size());
    std::copy(s.thermal.values().begin(), s.thermal.values().end(),
              b.thermal.values().begin() + k * ts.size());
    b.labels.insert(b.labels.end(), s.labels.begin(), s.labels.end());
  }
  return b;
}

double train_step(model::Model& model, optim::Sgd& sgd, const Batch& batch,
                  const optim::LossOptions& loss_opts) {
  sgd.zero_grad();
  const Var rgb = Var::constant(batch.rgb);
  const Var thermal = Var::constant(batch.thermal);
  const Var logits = model.forward(rgb, thermal, nn::Mode::train);
  const Var loss = optim::combined_loss(nn::softmax_channel(logits), batch.labels, loss_opts);
  backward(loss);
  sgd.step();
  return loss.value()[0];
}

std::vector<EpochRecord> fit(model::Model& model, const std::vector<data::Sample>& train,
                             const std::vector<data::Sample>& val, const RunConfig& cfg,
                             const std::function<void(const EpochRecord&, model::Model&)>& on_epoch) {
  if (train.empty()) throw std::invalid_argument("fit: empty training set");
  if (cfg.batch_size == 0) throw std::invalid_argument("fit: batch_size must be positive");
  optim::Sgd sgd(model.parameters(), cfg.sgd);
  std::vector<EpochRecord> records;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.max_steps && sgd.steps_taken() >= cfg.max_steps) break;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, 7000 + epoch));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      if (cfg.max_steps && sgd.steps_taken() >= cfg.max_steps) break;
      const std::size_t count = std::min(cfg.batch_size, order.size() - first);
      rec.lr = sgd.current_lr();
      loss_sum += train_step(model, sgd, make_batch(train, order, first, count), cfg.loss);
      ++batches;
    }
    rec.steps = sgd.steps_taken();
    rec.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    if (!val.empty()) rec.val_miou = metrics::mean_metrics(evaluate(model, val, cfg.batch_size)).miou;
    records.push_back(rec);
    if (on_epoch) on_epoch(rec, model);
  }
  return records;
}

metrics::ConfusionMatrix evaluate(model::Model& model, const std::vector<data::Sample>& samples,
                                  std::size_t batch_size) {
  metrics::ConfusionMatrix cm(model.config().num_classes);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t step = std::max<std::size_t>(batch_size, 1);
  for (std::size_t first = 0; first < order.size(); first += step) {
    const Batch b = make_batch(samples, order, first, std::min(step, order.size() - first));
    const std::vector<int> pred = model::predict_labels(model, b.rgb, b.thermal);
    cm.accumulate(pred, b.labels);
  }
  return cm;
}

// ---------------------------------------------------------------- subcommands

data::GenerateOptions generate_options(const RunConfig& cfg) {
  data::GenerateOptions o;
  o.num_samples = cfg.num_samples;
  o.scene.height = cfg.model.input_h;
  o.scene.width = cfg.model.input_w;
  o.scene.num_objects = cfg.num_objects;
  o.scene.num_classes = cfg.model.num_classes;
  o.night_fraction = cfg.night_fraction;
  o.ratios = cfg.split_ratios;
  o.seed = cfg.seed;
  return o;
}

data::DatasetSplit run_generate(const RunConfig& cfg) {
  return data::generate_dataset(cfg.data_root, generate_options(cfg));
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<data::Sample> load_checked(const RunConfig& cfg, const std::string& split) {
  auto samples = data::load_split(cfg.data_root, split);
  for (const auto& s : samples) {
    cfg.model.validate_input(s.rgb.shape().h, s.rgb.shape().w);
    for (int label : s.labels) {
      if (label < 0 || static_cast<std::size_t>(label) >= cfg.model.num_classes) {
        throw std::runtime_error("dataset: sample " + s.id + " has label " + std::to_string(label) +
                                 " but the model has " + std::to_string(cfg.model.num_classes) +
                                 " classes");
      }
    }
  }
  return samples;
}

}  // namespace

TrainResult run_train(const RunConfig& cfg) {
  const auto train = load_checked(cfg, "train");
  const auto val = load_checked(cfg, "val");
  fs::create_directories(cfg.out_dir);
  write_text(cfg.out_dir / "run.cfg", cfg.to_text());

  model::Model model = model::Model::build(cfg.model, cfg.variant, cfg.seed);
  TrainResult result;
  result.checkpoint = cfg.out_dir / "best.ckpt";

  std::ofstream log(cfg.out_dir / "train_log.csv", std::ios::binary);
  if (!log) throw std::runtime_error("cannot write " + (cfg.out_dir / "train_log.csv").string());
  log << "epoch,steps,lr,train_loss,val_miou\n" << std::setprecision(17);

  if (cfg.epochs == 0) model::save_checkpoint(model, result.checkpoint);

  result.log = fit(model, train, val, cfg, [&](const EpochRecord& rec, model::Model& m) {
    log << rec.epoch << ',' << rec.steps << ',' << rec.lr << ',' << rec.train_loss << ',';
    if (rec.val_miou) log << *rec.val_miou;
    log << '\n' << std::flush;
    // Without a validation split the latest epoch is kept.
    const bool better = !rec.val_miou || !result.best_val_miou || *rec.val_miou > *result.best_val_miou;
    if (better) {
      if (rec.val_miou) result.best_val_miou = rec.val_miou;
      model::save_checkpoint(m, result.checkpoint);
    }
  });
  if (result.log.empty() && cfg.epochs != 0) model::save_checkpoint(model, result.checkpoint);
  return result;
}

metrics::ConfusionMatrix run_eval(const RunConfig& cfg) {
  model::Model model = model::load_checkpoint(cfg.checkpoint_path());
  const auto samples = data::load_split(cfg.data_root, cfg.split);
  const metrics::ConfusionMatrix cm = evaluate(model, samples, cfg.batch_size);
  fs::create_directories(cfg.out_dir);
  std::ofstream out(cfg.out_dir / ("eval_" + cfg.split + ".csv"), std::ios::binary);
  if (!out) throw std::runtime_error("cannot write evaluation CSV under " + cfg.out_dir.string());
  metrics::write_csv(out, cm);
  return cm;
}

std::size_t run_predict(const RunConfig& cfg) {
  model::Model model = model::load_checkpoint(cfg.checkpoint_path());
  const auto samples = data::load_split(cfg.data_root, cfg.split);
  const fs::path dir = cfg.out_dir / "predict";
  fs::create_directories(dir);
  for (const auto& s : samples) {
    const std::vector<int> pred = model::predict_labels(model, s.rgb, s.thermal);
    const std::size_t h = s.rgb.shape().h, w = s.rgb.shape().w;
    data::write_pnm(dir / (s.id + "_rgb.ppm"), data::to_raster(s.rgb));
    data::write_pnm(dir / (s.id + "_thermal.pgm"), data::to_raster(s.thermal));
    data::write_pnm(dir / (s.id + "_pred.ppm"), data::colorize(pred, h, w));
    data::write_pnm(dir / (s.id + "_truth.ppm"), data::colorize(s.labels, h, w));
  }
  return samples.size();
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median: no values");
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

AblationResult ablate(const std::vector<data::Sample>& train, const std::vector<data::Sample>& test,
                      const RunConfig& cfg, std::ostream* progress) {
  if (cfg.ablation_seeds == 0) throw std::invalid_argument("ablate: need at least one seed");
  AblationResult result;
  for (std::size_t s = 0; s < cfg.ablation_seeds; ++s) {
    RunConfig run = cfg;
    run.seed = derive_seed(cfg.seed, 100 + s);
    std::vector<AblationRow> rows;
    for (model::Variant v : model::kAllVariants) {
      model::Model model = model::Model::build(run.model, v, run.seed);
      fit(model, train, {}, run);
      const metrics::MeanMetrics mm = metrics::mean_metrics(evaluate(model, test, run.batch_size));
      rows.push_back({v, mm.macc, mm.miou});
      if (progress) {
        *progress << "seed " << s << " " << model::to_string(v) << " mAcc=" << mm.macc
                  << " mIoU=" << mm.miou << std::endl;
      }
    }
    result.per_seed.push_back(rows);
  }
  for (std::size_t k = 0; k < std::size(model::kAllVariants); ++k) {
    std::vector<double> accs, ious;
    for (const auto& rows : result.per_seed) {
      accs.push_back(rows[k].macc);
      ious.push_back(rows[k].miou);
    }
    result.medians.push_back({model::kAllVariants[k], median(accs), median(ious)});
  }
  return result;
}

AblationResult run_ablation(const RunConfig& cfg, std::ostream* progress) {
  const auto train = load_checked(cfg, "train");
  const auto test = load_checked(cfg, cfg.split);
  const AblationResult result = ablate(train, test, cfg, progress);
  fs::create_directories(cfg.out_dir);
  std::ofstream summary(cfg.out_dir / "ablation.csv", std::ios::binary);
  summary << "variant,mAcc,mIoU\n" << std::setprecision(17);
  for (const auto& row : result.medians) {
    summary << model::to_string(row.variant) << ',' << row.macc << ',' << row.miou << '\n';
  }
  std::ofstream runs(cfg.out_dir / "ablation_runs.csv", std::ios::binary);
  runs << "seed_index,variant,mAcc,mIoU\n" << std::setprecision(17);
  for (std::size_t s = 0; s < result.per_seed.size(); ++s) {
    for (const auto& row : result.per_seed[s]) {
      runs << s << ',' << model::to_string(row.variant) << ',' << row.macc << ',' << row.miou << '\n';
    }
  }
  if (!summary || !runs) throw std::runtime_error("cannot write ablation CSVs under " + cfg.out_dir.string());
  return result;
}

BenchResult bench(model::Model& model, std::size_t height, std::size_t width, std::size_t batch,
                  std::size_t warmup, std::size_t iters) {
  if (iters == 0 || batch == 0) throw std::invalid_argument("bench: iterations and batch must be positive");
  model.config().validate_input(height, width);
  Rng rng(derive_seed(0xbe7c, height * 100003 + width));
  const Var rgb = Var::constant(random_tensor({batch, 3, height, width}, rng, 0.0, 1.0));
  const Var thermal = Var::constant(random_tensor({batch, 1, height, width}, rng, 0.0, 1.0));
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < warmup; ++i) model.forward(rgb, thermal, nn::Mode::eval);
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < iters; ++i) model.forward(rgb, thermal, nn::Mode::eval);
  const std::chrono::duration<double, std::milli> elapsed = std::chrono::steady_clock::now() - start;
  BenchResult r;
  r.height = height;
  r.width = width;
  r.ms_per_image = elapsed.count() / static_cast<double>(iters * batch);
  r.fps = 1000.0 / r.ms_per_image;
  return r;
}

BenchResult run_bench(const RunConfig& cfg) {
  const fs::path ckpt = cfg.checkpoint_path();
  model::Model model = fs::exists(ckpt) ? model::load_checkpoint(ckpt)
                                        : model::Model::build(cfg.model, cfg.variant, cfg.seed);
  const std::size_t h = cfg.bench_h.value_or(model.config().input_h);
  const std::size_t w = cfg.bench_w.value_or(model.config().input_w);
  const BenchResult r = bench(model, h, w, cfg.bench_batch, cfg.bench_warmup, cfg.bench_iters);
  fs::create_directories(cfg.out_dir);
  std::ofstream out(cfg.out_dir / "bench.csv", std::ios::binary);
  out << "height,width,batch,ms_per_image,fps\n" << std::setprecision(10) << r.height << ','
      << r.width << ',' << cfg.bench_batch << ',' << r.ms_per_image << ',' << r.fps << '\n';
  if (!out) throw std::runtime_error("cannot write bench.csv under " + cfg.out_dir.string());
  return r;
}

// ---------------------------------------------------------------- gradient audit

model::ModelConfig reduced_model_config() {
  model::ModelConfig c;
  c.num_classes = 2;
  c.stage_widths = {4, 8};
  c.input_h = 16;
  c.input_w = 16;
  c.feam_reduction = 4;
  c.feam_kernel = 3;
  return c;
}

namespace {

class Audit {
 public:
  explicit Audit(std::uint64_t seed) : rng_(seed) {}

  Rng& rng() { return rng_; }

  Var input(Shape s, double lo = -1.0, double hi = 1.0) {
    return Var::leaf(random_tensor(s, rng_, lo, hi), true);
  }

  // Weighted sum with fixed random weights so every output entry matters.
  Var probe(const Var& y) {
    const Var w = Var::constant(random_tensor(y.shape(), rng_, -1.0, 1.0));
    return nn::sum(nn::mul(y, w));
  }

  void check(const std::string& name, std::vector<Var> wrt, const std::function<Var()>& loss) {
    std::size_t elements = 0;
    for (const auto& v : wrt) elements += v.value().size();
    entries_.push_back({name, grad_check(loss, wrt), elements});
  }

  // `op` maps inputs to a tensor; the probe weights are drawn once.
  void check_op(const std::string& name, std::vector<Var> wrt, const std::function<Var()>& op) {
    Var sample = [&] {
      NoGradGuard g;
      return op();
    }();
    const Var w = Var::constant(random_tensor(sample.shape(), rng_, -1.0, 1.0));
    check(name, std::move(wrt), [op, w] { return nn::sum(nn::mul(op(), w)); });
  }

  std::vector<GradcheckEntry> take() { return std::move(entries_); }

 private:
  Rng rng_;
  std::vector<GradcheckEntry> entries_;
};

std::vector<Var> with_params(std::vector<Var> head, const nn::StateList& state) {
  for (const auto& p : state.params) head.push_back(p.var);
  return head;
}

std::vector<int> random_labels(std::size_t count, std::size_t classes, Rng& rng) {
  std::vector<int> out(count);
  for (auto& l : out) l = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(classes) - 1));
  return out;
}

}  // namespace

std::vector<GradcheckEntry> gradcheck_all(std::uint64_t seed, bool include_model) {
  Audit a(seed);
  using nn::PoolKind;

  {
    const nn::ConvSpec spec{3, 4, 4, 4, 2, 1, true};
    Var x = a.input({2, 3, 6, 6}), w = a.input({4, 3, 4, 4}), b = a.input({1, 4, 1, 1});
    a.check_op("conv2d", {x, w, b}, [=] { return nn::conv2d(x, spec, w, b); });
  }
  {
    const nn::ConvSpec spec{3, 4, 2, 2, 2, 0, true};
    Var x = a.input({2, 3, 3, 3}), w = a.input({3, 4, 2, 2}), b = a.input({1, 4, 1, 1});
    a.check_op("transposed_conv2d", {x, w, b}, [=] { return nn::transposed_conv2d(x, spec, w, b); });
  }
  {
    Var x = a.input({2, 3, 4, 4}), g = a.input({1, 3, 1, 1}, 0.5, 1.5), b = a.input({1, 3, 1, 1});
    auto state = std::make_shared<nn::BatchNormState>(3);
    a.check_op("batchnorm2d", {x, g, b},
               [=] { return nn::batchnorm2d(x, g, b, nn::Mode::train, *state); });
  }
  {
    Var x = a.input({2, 2, 4, 4});
    a.check_op("pool2d_max", {x}, [=] { return nn::pool2d(x, PoolKind::max, 2, 2); });
    Var y = a.input({2, 2, 4, 4});
    a.check_op("pool2d_avg", {y}, [=] { return nn::pool2d(y, PoolKind::avg, 2, 2); });
  }
  {
    Var x = a.input({2, 3, 3, 3});
    a.check_op("global_pool_max", {x}, [=] { return nn::global_pool(x, PoolKind::max); });
    Var y = a.input({2, 3, 3, 3});
    a.check_op("global_pool_avg", {y}, [=] { return nn::global_pool(y, PoolKind::avg); });
  }
  {
    Var x = a.input({2, 4, 3, 3});
    a.check_op("channel_reduce_max", {x}, [=] { return nn::channel_reduce(x, PoolKind::max); });
    Var y = a.input({2, 4, 3, 3});
    a.check_op("channel_reduce_avg", {y}, [=] { return nn::channel_reduce(y, PoolKind::avg); });
  }
  {
    Var x = a.input({3, 5, 1, 1}), w = a.input({4, 5, 1, 1}), b = a.input({1, 4, 1, 1});
    a.check_op("dense", {x, w, b}, [=] { return nn::dense(x, w, b); });
  }
  {
    Var x = a.input({2, 4, 3, 3});
    a.check_op("relu", {x}, [=] { return nn::relu(x); });
    Var y = a.input({2, 4, 3, 3}, -3.0, 3.0);
    a.check_op("sigmoid", {y}, [=] { return nn::sigmoid(y); });
    Var z = a.input({2, 4, 3, 3}, -3.0, 3.0);
    a.check_op("softmax_channel", {z}, [=] { return nn::softmax_channel(z); });
  }
  {
    Var x = a.input({2, 3, 4, 4}), y = a.input({1, 3, 1, 1});
    a.check_op("add", {x, y}, [=] { return nn::add(x, y); });
    Var p = a.input({2, 3, 4, 4}), q = a.input({2, 1, 4, 4});
    a.check_op("mul", {p, q}, [=] { return nn::mul(p, q); });
    Var s = a.input({2, 3, 2, 2});
    a.check_op("scale", {s}, [=] { return nn::scale(s, 0.7); });
    Var c1 = a.input({2, 2, 3, 3}), c2 = a.input({2, 3, 3, 3});
    a.check_op("concat_channels", {c1, c2}, [=] { return nn::concat_channels(c1, c2); });
    Var t = a.input({2, 3, 3, 3});
    a.check("sum", {t}, [=] { return nn::sum(t); });
  }
  {
    const Shape s{2, 3, 4, 4};
    const std::vector<int> labels = random_labels(s.n * s.plane(), s.c, a.rng());
    const Tensor target = optim::one_hot(labels, s);
    Var p = a.input(s, 0.05, 0.95);
    a.check("dice_loss", {p}, [=] { return optim::dice_loss(p, target); });
    Var q = a.input(s, 0.05, 0.95);
    a.check("soft_cross_entropy", {q}, [=] { return optim::soft_cross_entropy(q, labels); });
    Var z = a.input(s, -2.0, 2.0);
    a.check("combined_loss", {z}, [=] { return optim::combined_loss(nn::softmax_channel(z), labels); });
  }
  {
    const feam::FeamParams p = feam::make_params(8, 4, 3, a.rng());
    nn::StateList st;
    p.collect("feam", st);
    Var x = a.input({2, 8, 5, 5});
    a.check_op("channel_attention", with_params({x}, st), [=] { return feam::channel_attention(x, p); });
    Var y = a.input({2, 8, 5, 5});
    a.check_op("spatial_attention", with_params({y}, st), [=] { return feam::spatial_attention(y, p); });
    Var z = a.input({2, 8, 5, 5});
    a.check_op("feam_apply", with_params({z}, st), [=] { return feam::feam_apply(z, p); });
  }
  {
    auto stem = std::make_shared<model::StemBlock>(3, 4, a.rng());
    nn::StateList st;
    stem->collect("stem", st);
    Var x = a.input({2, 3, 8, 8});
    a.check_op("stem_block", with_params({x}, st), [=] { return stem->forward(x, nn::Mode::train); });
  }
  {
    auto block = std::make_shared<model::ResidualBlock>(4, 8, 2, a.rng());
    nn::StateList st;
    block->collect("res", st);
    Var x = a.input({2, 4, 8, 8});
    a.check_op("residual_block", with_params({x}, st), [=] { return block->forward(x, nn::Mode::train); });
  }
  {
    auto block = std::make_shared<model::DecoderBlockA>(4, a.rng());
    nn::StateList st;
    block->collect("a", st);
    Var x = a.input({2, 4, 4, 4});
    a.check_op("decoder_block_a", with_params({x}, st), [=] { return block->forward(x, nn::Mode::train); });
  }
  {
    auto block = std::make_shared<model::DecoderBlockB>(8, 4, false, a.rng());
    nn::StateList st;
    block->collect("b", st);
    Var x = a.input({2, 8, 3, 3});
    a.check_op("decoder_block_b", with_params({x}, st), [=] { return block->forward(x, nn::Mode::train); });
  }
  if (include_model) {
    const model::ModelConfig cfg = reduced_model_config();
    auto net = std::make_shared<model::Model>(model::Model::build(cfg, model::Variant::frts, a.rng().next_u64()));
    const Var rgb = Var::constant(random_tensor({1, 3, cfg.input_h, cfg.input_w}, a.rng(), 0.0, 1.0));
    const Var thermal = Var::constant(random_tensor({1, 1, cfg.input_h, cfg.input_w}, a.rng(), 0.0, 1.0));
    const std::vector<int> labels = random_labels(cfg.input_h * cfg.input_w, cfg.num_classes, a.rng());
    a.check("model", net->parameters(), [=] {
      return optim::combined_loss(nn::softmax_channel(net->forward(rgb, thermal, nn::Mode::train)), labels);
    });
  }
  return a.take();
}

int run_gradcheck(const RunConfig& cfg, bool inject_conv_fault, std::ostream& report) {
  nn::testing::set_conv_backward_fault(inject_conv_fault);
  std::vector<GradcheckEntry> entries;
  try {
    entries = gradcheck_all(cfg.seed);
  } catch (...) {
    nn::testing::set_conv_backward_fault(false);
    throw;
  }
  nn::testing::set_conv_backward_fault(false);

  fs::create_directories(cfg.out_dir);
  std::ofstream csv(cfg.out_dir / "gradcheck.csv", std::ios::binary);
  csv << "op,max_relative_error,elements,status\n" << std::setprecision(6);
  bool ok = true;
  for (const auto& e : entries) {
    const bool pass = e.max_relative_error < kGradTolerance;
    ok = ok && pass;
    report << std::left << std::setw(20) << e.name << " max_rel_err=" << std::scientific
           << std::setprecision(3) << e.max_relative_error << std::defaultfloat
           << " elements=" << e.elements << (pass ? "  PASS" : "  FAIL") << '\n';
    csv << e.name << ',' << e.max_relative_error << ',' << e.elements << ','
        << (pass ? "PASS" : "FAIL") << '\n';
  }
  report << (ok ? "all gradient checks passed" : "gradient check FAILED") << " (tolerance "
         << kGradTolerance << ")\n";
  return ok ? 0 : 1;
}

}  // namespace feanet::app
