#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mflow/dataset.hpp"
#include "mflow/error.hpp"
#include "mflow/flowsolve.hpp"
#include "mflow/image.hpp"
#include "mflow/kernels.hpp"
#include "mflow/metrics.hpp"
#include "mflow/models.hpp"
#include "mflow/train.hpp"

namespace mflow::cli {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

// Raised for conditions the operator can fix (exit 1).
struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int threads_from_env() {
  const char* raw = std::getenv("MFLOW_THREADS");
  if (raw == nullptr || *raw == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(raw, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) throw UserError("MFLOW_THREADS must be a positive integer, got '" + std::string(raw) + "'");
  return static_cast<int>(n);
}

flow::Mode parse_mode(const std::string& s) { return s == "channel" ? flow::Mode::channel : flow::Mode::duct; }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UserError("cannot create directory " + dir.string());
}

void require_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw UserError("no such file: " + p.string());
}

double ms_since(Clock::time_point t0) { return std::chrono::duration<double, std::milli>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

const dataset::FieldSample& find_sample(const dataset::Dataset& data, std::uint64_t id) {
  for (const auto& s : data.samples)
    if (s.id == id) return s;
  throw UserError("sample id " + std::to_string(id) + " not in dataset");
}

void write_heatmap(const fs::path& path, std::span<const float> values, const geometry::RasterMask& mask, bool diverging) {
  const auto rgb = image::render_heatmap(values, mask.height(), mask.width(), mask.cells(),
                                         diverging ? image::ColorMap::diverging : image::ColorMap::sequential);
  image::write_ppm(path, rgb, mask.height(), mask.width());
}

dataset::TargetMode target_of(const models::Model<float>& model) {
  return model.spec().out_channels == 2 ? dataset::TargetMode::components : dataset::TargetMode::magnitude;
}

// Channel names and ids of a model output.
std::vector<std::pair<std::string, flow::ChannelId>> output_channels(dataset::TargetMode t) {
  if (t == dataset::TargetMode::components) return {{"u", flow::ChannelId::u}, {"v", flow::ChannelId::v}};
  return {{"magnitude", flow::ChannelId::magnitude}};
}

// ---- subcommands ----------------------------------------------------------

struct GenerateArgs {
  int n = 200;
  std::uint64_t seed = 0;
  std::string mode = "duct";
  std::string out;
};

void run_generate(const GenerateArgs& a, int threads, std::ostream& log) {
  ensure_dir(a.out);
  dataset::GenerateConfig cfg;
  cfg.count = a.n;
  cfg.seed = a.seed;
  cfg.solver.mode = parse_mode(a.mode);
  cfg.threads = threads;
  cfg.log = [&](const std::string& line) { log << line << '\n'; };
  const auto t0 = Clock::now();
  const dataset::Dataset data = dataset::generate(cfg);
  const fs::path file = fs::path(a.out) / "dataset.mflo";
  dataset::save(data, file);
  log << "wrote " << data.samples.size() << " " << a.mode << " samples to " << file.string() << " in "
      << ms_since(t0) / 1000.0 << " s\n";
}

struct SolveArgs {
  std::optional<std::uint64_t> seed;
  std::vector<double> params;
  std::string mode = "duct";
  std::string out;
};

void run_solve(const SolveArgs& a, std::ostream& log) {
  geometry::WMParams p;
  if (a.seed) {
    p = geometry::sample_params(*a.seed);
  } else {
    if (a.params.size() != 6) throw UserError("--params expects D,gamma,A,N,R0,amp");
    p.fractal_dim = a.params[0];
    p.spectral_exp = a.params[1];
    p.scale_const = a.params[2];
    if (a.params[3] < 1 || a.params[3] != static_cast<int>(a.params[3])) throw UserError("--params N must be a positive integer");
    p.n_terms = static_cast<int>(a.params[3]);
    p.base_radius = a.params[4];
    p.amplitude = a.params[5];
    p.validate();
  }
  ensure_dir(a.out);
  flow::SolverConfig cfg;
  cfg.mode = parse_mode(a.mode);
  const auto mask = dataset::build_mask(p, cfg.mode, geometry::kCanvasHeight, geometry::kCanvasWidth);
  const auto t0 = Clock::now();
  const flow::FlowField field = flow::solve(mask, cfg);
  const double ms = ms_since(t0);

  const fs::path dir(a.out);
  geometry::write_pgm(mask, dir / "mask.pgm");
  const auto chans = flow::nondimensionalize(field, mask, cfg, flow::Target::all);
  const std::pair<const char*, flow::ChannelId> names[] = {
      {"u", flow::ChannelId::u}, {"v", flow::ChannelId::v}, {"magnitude", flow::ChannelId::magnitude}};
  for (std::size_t k = 0; k < 3; ++k) {
    flow::write_field_dump(dir / (std::string(names[k].first) + ".mfld"), chans[k], mask.height(), mask.width(),
                           names[k].second);
    write_heatmap(dir / (std::string(names[k].first) + ".ppm"), chans[k], mask, k < 2);
  }
  std::vector<float> pressure(field.pressure.begin(), field.pressure.end());
  if (pressure.empty()) pressure.assign(mask.size(), 0.0f);
  flow::write_field_dump(dir / "pressure.mfld", pressure, mask.height(), mask.width(), flow::ChannelId::pressure);

  const auto res = flow::residual_report(field, mask, cfg).normalized(cfg);
  log << "mode " << a.mode << "  D " << p.fractal_dim << "  gamma " << p.spectral_exp << "  N " << p.n_terms
      << "  R0 " << p.base_radius << "  amp " << p.amplitude << '\n'
      << "iterations " << field.iterations << "  residual " << field.converged_residual << "  continuity_linf "
      << res.continuity_linf << "  time " << ms << " ms\n";
}

struct TrainArgs {
  std::string data;
  std::string model;
  std::string target = "mag";
  int epochs = 0;
  int batch = 16;
  double lr = 4e-4;
  std::uint64_t seed = 0;
  int base_width = 64;
  std::string out;
};

void run_train(const TrainArgs& a, std::ostream& log) {
  require_file(a.data);
  ensure_dir(a.out);
  const dataset::Dataset data = dataset::load(a.data);
  train::TrainConfig cfg;
  cfg.target = dataset::parse_target(a.target);
  cfg.epochs = a.epochs > 0 ? a.epochs : train::TrainConfig::default_epochs(cfg.target);
  cfg.batch_size = a.batch;
  cfg.initial_lr = a.lr;
  cfg.seed = a.seed;
  if (cfg.target == dataset::TargetMode::components && data.mode != flow::Mode::channel) {
    throw UserError("--target uv needs a channel-mode dataset");
  }

  models::ModelSpec spec;
  spec.arch = models::parse_arch(a.model);
  spec.out_channels = cfg.target == dataset::TargetMode::components ? 2 : 1;
  spec.base_width = a.base_width;
  spec.seed = a.seed;
  models::Model<float> model(spec);
  const auto split = dataset::split(data.samples.size(), a.seed);
  log << models::arch_name(spec.arch) << ": " << models::param_count(model) << " parameters, " << split.train.size()
      << " train / " << split.validation.size() << " validation samples\n";

  auto result = train::fit(model, data, split, cfg, [&](const train::EpochRecord& e) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "epoch %3d  lr %.3e  loss %.5f / %.5f  mre %.4f / %.4f  dice %.4f / %.4f  %.1f s\n",
                  e.epoch, e.lr, e.train_loss, e.val_loss, e.train_mre, e.val_mre, e.train_dice, e.val_dice, e.seconds);
    log << buf << std::flush;
  });
  const fs::path dir(a.out);
  result.history.write(dir / "history.txt");
  models::save(result.best, dir / "best.mfck");
  log << "best epoch " << result.history.best_epoch << "; wrote " << (dir / "history.txt").string() << " and "
      << (dir / "best.mfck").string() << '\n';
}

struct EvalArgs {
  std::string data;
  std::string ckpt;
  std::string variant = "soft_squared";
  int batch = 16;
};

void run_eval(const EvalArgs& a, std::ostream& out) {
  require_file(a.data);
  require_file(a.ckpt);
  metrics::MetricsConfig mcfg;
  mcfg.variant = metrics::parse_variant(a.variant);
  const dataset::Dataset data = dataset::load(a.data);
  const auto model = models::load<float>(a.ckpt);
  const auto target = target_of(model);
  if (target == dataset::TargetMode::components && data.mode != flow::Mode::channel) {
    throw UserError("checkpoint predicts u,v but the dataset holds duct magnitudes");
  }
  // train stores its seed as the model seed, so the split is reproducible
  const auto split = dataset::split(data.samples.size(), model.spec().seed);
  const auto tr = train::evaluate(model, data, split.train, target, a.batch, mcfg);
  const auto va = train::evaluate(model, data, split.validation, target, a.batch, mcfg);
  char buf[256];
  out << "model " << models::arch_name(model.spec().arch) << "  target " << dataset::target_name(target)
      << "  variant " << metrics::variant_name(mcfg.variant) << '\n';
  std::snprintf(buf, sizeof buf, "%-12s %12s %12s %12s %12s\n", "split", "Loss", "MRE", "DICE", "IOU");
  out << buf;
  std::snprintf(buf, sizeof buf, "%-12s %12.5e %12.5e %12.5f %12.5f\n", "train", tr.loss, tr.mre, tr.dice, tr.iou);
  out << buf;
  std::snprintf(buf, sizeof buf, "%-12s %12.5e %12.5e %12.5f %12.5f\n", "validation", va.loss, va.mre, va.dice, va.iou);
  out << buf;
}

struct PredictArgs {
  std::string data;
  std::string ckpt;
  std::uint64_t sample_id = 0;
  std::string out;
};

void run_predict(const PredictArgs& a, std::ostream& log) {
  require_file(a.data);
  require_file(a.ckpt);
  ensure_dir(a.out);
  const dataset::Dataset data = dataset::load(a.data);
  const auto model = models::load<float>(a.ckpt);
  const auto target = target_of(model);
  if (target == dataset::TargetMode::components && data.mode != flow::Mode::channel) {
    throw UserError("checkpoint predicts u,v but the dataset holds duct magnitudes");
  }
  const auto& sample = find_sample(data, a.sample_id);
  const std::size_t index = static_cast<std::size_t>(&sample - data.samples.data());
  const auto batch = dataset::make_batch(data, {index}, target);
  const auto pred = model.predict(batch.masks);
  const int h = data.height, w = data.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const fs::path dir(a.out);
  const auto chans = output_channels(target);
  for (std::size_t c = 0; c < chans.size(); ++c) {
    std::vector<float> p(pred.data() + c * plane, pred.data() + (c + 1) * plane);
    std::vector<float> err(plane);
    const float* truth = batch.targets.data() + c * plane;
    for (std::size_t k = 0; k < plane; ++k) err[k] = std::abs(p[k] - truth[k]);
    const std::string& name = chans[c].first;
    flow::write_field_dump(dir / ("pred_" + name + ".mfld"), p, h, w, chans[c].second);
    flow::write_field_dump(dir / ("error_" + name + ".mfld"), err, h, w, flow::ChannelId::error);
    write_heatmap(dir / ("pred_" + name + ".ppm"), p, sample.mask, target == dataset::TargetMode::components);
    write_heatmap(dir / ("error_" + name + ".ppm"), err, sample.mask, false);
  }
  const double m = metrics::mre(pred, batch.targets);
  log << "sample " << a.sample_id << "  MRE " << m << "  wrote " << chans.size() << " channel(s) to " << dir.string() << '\n';
}

struct PlotArgs {
  std::string data;
  std::uint64_t sample_id = 0;
  std::string channel = "mag";
  std::string out;
};

void run_plot(const PlotArgs& a, std::ostream& log) {
  require_file(a.data);
  const dataset::Dataset data = dataset::load(a.data);
  const auto& s = find_sample(data, a.sample_id);
  std::size_t k = s.channels.size() - 1;  // magnitude is stored last
  if (a.channel != "mag") {
    if (data.mode != flow::Mode::channel) throw UserError("duct datasets only store the magnitude");
    k = a.channel == "u" ? 0 : 1;
  }
  write_heatmap(a.out, s.channels[k], s.mask, a.channel != "mag");
  log << "wrote " << a.out << '\n';
}

struct BenchArgs {
  std::string data;
  std::vector<std::string> ckpts;
  int repeats = 5;
  int samples = 3;
};

void run_bench(const BenchArgs& a, std::ostream& out) {
  require_file(a.data);
  for (const auto& c : a.ckpts) require_file(c);
  if (a.repeats < 5) throw UserError("--repeats must be at least 5");
  if (a.samples < 1) throw UserError("--samples must be at least 1");
  const dataset::Dataset data = dataset::load(a.data);
  const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(a.samples), data.samples.size());
  flow::SolverConfig scfg;
  scfg.mode = data.mode;

  // Per-sample medians, then the mean over samples.
  std::vector<double> solver_ms;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> t;
    for (int r = 0; r < a.repeats; ++r) {
      const auto t0 = Clock::now();
      (void)flow::solve(data.samples[i].mask, scfg);
      t.push_back(ms_since(t0));
    }
    solver_ms.push_back(median(t));
  }
  const auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double solver = mean(solver_ms);

  char buf[256];
  std::snprintf(buf, sizeof buf, "%-12s %12s %14s %14s\n", "model", "params", "ms/sample", "times_better");
  out << buf;
  std::snprintf(buf, sizeof buf, "%-12s %12s %14.3f %14s\n", "solver", "-", solver, "1");
  out << buf;
  for (const auto& path : a.ckpts) {
    const auto model = models::load<float>(path);
    const auto target = target_of(model);
    std::vector<double> model_ms;
    for (std::size_t i = 0; i < count; ++i) {
      // inputs only; the target mode is irrelevant to timing
      const auto batch = dataset::make_batch(data, {i}, data.mode == flow::Mode::channel ? target : dataset::TargetMode::magnitude);
      (void)model.predict(batch.masks);  // warm-up
      std::vector<double> t;
      for (int r = 0; r < a.repeats; ++r) {
        const auto t0 = Clock::now();
        (void)model.predict(batch.masks);
        t.push_back(ms_since(t0));
      }
      model_ms.push_back(median(t));
    }
    const double ms = mean(model_ms);
    std::snprintf(buf, sizeof buf, "%-12s %12zu %14.3f %14.1f\n", std::string(models::arch_name(model.spec().arch)).c_str(),
                  models::param_count(model), ms, solver / ms);
    out << buf;
  }
}

bool is_user_error(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidParams:
    case ErrorKind::InvalidSpec:
    case ErrorKind::IoFailure:
    case ErrorKind::CorruptContainer:
    case ErrorKind::CorruptCheckpoint:
    case ErrorKind::TooFewSamples:
    case ErrorKind::DegenerateRadius:
    case ErrorKind::OutOfCanvas:
    case ErrorKind::EmptyFluid:
    case ErrorKind::NoThroughPath:
      return true;
    default:
      return false;
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fractal microchannel flow surrogates", "mflow"};
  app.require_subcommand(1);

  const std::vector<std::string> modes{"duct", "channel"};

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Generate a dataset of solved geometries");
  g->add_option("--n", gen.n, "Sample count")->required()->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.seed, "Base seed")->required();
  g->add_option("--mode", gen.mode, "duct or channel")->check(CLI::IsMember(modes));
  g->add_option("--out", gen.out, "Output directory")->required();

  SolveArgs sol;
  auto* s = app.add_subcommand("solve", "Solve one geometry and write its fields");
  auto* s_seed = s->add_option("--seed", sol.seed, "Draw parameters from this seed");
  auto* s_params = s->add_option("--params", sol.params, "D,gamma,A,N,R0,amp")->delimiter(',')->expected(6);
  s_seed->excludes(s_params);
  s->add_option("--mode", sol.mode, "duct or channel")->check(CLI::IsMember(modes));
  s->add_option("--out", sol.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a surrogate");
  t->add_option("--data", tr.data, "Dataset container")->required();
  t->add_option("--model", tr.model, "unet, tnet or attn_unet")->required()->check(CLI::IsMember({"unet", "tnet", "attn_unet"}));
  t->add_option("--target", tr.target, "mag or uv")->check(CLI::IsMember({"mag", "uv"}));
  t->add_option("--epochs", tr.epochs, "Epochs (default 75 for mag, 100 for uv)")->check(CLI::PositiveNumber);
  t->add_option("--batch", tr.batch, "Batch size")->check(CLI::PositiveNumber);
  t->add_option("--lr", tr.lr, "Initial learning rate")->check(CLI::PositiveNumber);
  t->add_option("--seed", tr.seed, "Seed for weights, split, shuffling and dropout");
  t->add_option("--base-width", tr.base_width, "Channel width of the first stage")->check(CLI::PositiveNumber);
  t->add_option("--out", tr.out, "Output directory")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  e->add_option("--data", ev.data, "Dataset container")->required();
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  e->add_option("--variant", ev.variant, "soft_squared or paper_literal")->check(CLI::IsMember({"soft_squared", "paper_literal"}));

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Predict one sample and write the error map");
  p->add_option("--data", pr.data, "Dataset container")->required();
  p->add_option("--ckpt", pr.ckpt, "Checkpoint")->required();
  p->add_option("--sample-id", pr.sample_id, "Sample id")->required();
  p->add_option("--out", pr.out, "Output directory")->required();

  PlotArgs pl;
  auto* pt = app.add_subcommand("plot", "Render a stored channel as a PPM heatmap");
  pt->add_option("--data", pl.data, "Dataset container")->required();
  pt->add_option("--sample-id", pl.sample_id, "Sample id")->required();
  pt->add_option("--channel", pl.channel, "u, v or mag")->check(CLI::IsMember({"u", "v", "mag"}));
  pt->add_option("--out", pl.out, "Output .ppm")->required();

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "Time the solver against model inference");
  b->add_option("--data", be.data, "Dataset container")->required();
  b->add_option("--ckpts", be.ckpts, "Checkpoints")->required()->expected(1, 16);
  b->add_option("--repeats", be.repeats, "Timed repeats per sample (>= 5)");
  b->add_option("--samples", be.samples, "Samples timed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& ex) {
    err << "mflow: " << ex.what() << '\n';
    return 1;
  }

  try {
    const int threads = threads_from_env();
    kernels::set_worker_count(threads);
    if (*g) run_generate(gen, threads, err);
    else if (*s) run_solve(sol, out);
    else if (*t) run_train(tr, out);
    else if (*e) run_eval(ev, out);
    else if (*p) run_predict(pr, out);
    else if (*pt) run_plot(pl, out);
    else if (*b) run_bench(be, out);
    return 0;
  } catch (const UserError& ex) {
    err << "mflow: " << ex.what() << '\n';
    return 1;
  } catch (const Error& ex) {
    err << "mflow: " << ex.what() << '\n';
    return is_user_error(ex.kind()) ? 1 : 2;
  } catch (const std::exception& ex) {
    err << "mflow: internal error: " << ex.what() << '\n';
    return 2;
  }
}

}  // namespace mflow::cli
