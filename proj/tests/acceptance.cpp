// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.
//
//   acceptance [--criteria 1,2,...] [--workdir DIR]

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "mflow/dataset.hpp"
#include "mflow/error.hpp"
#include "mflow/flowsolve.hpp"
#include "mflow/geometry.hpp"
#include "mflow/metrics.hpp"
#include "mflow/models.hpp"
#include "mflow/nnblocks.hpp"
#include "mflow/train.hpp"
#include "support/gradcheck.hpp"

using namespace mflow;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using tensor::Graph;
using tensor::Mode;
using tensor::Shape;
using tensor::Tensor;
using tensor::Var;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::IoFailure;
}

constexpr std::uint64_t kStudySeed = 2024;
constexpr std::uint64_t kOverfitSeed = 6;
constexpr int kStudyCount = 200;
constexpr int kStudyEpochs = 30;
constexpr int kStudyWidth = 16;
const models::Arch kArchs[] = {models::Arch::attn_unet, models::Arch::tnet, models::Arch::unet};

// Shared state built on first use so criteria can run on their own.
struct Context {
  fs::path workdir;
  std::unique_ptr<dataset::Dataset> study;
  std::map<models::Arch, std::unique_ptr<models::Model<float>>> trained;

  dataset::GenerateConfig study_config() const {
    dataset::GenerateConfig c;
    c.count = kStudyCount;
    c.seed = kStudySeed;
    c.solver.mode = flow::Mode::channel;
    return c;
  }

  const dataset::Dataset& study_data() {
    if (!study) {
      const auto t0 = Clock::now();
      study = std::make_unique<dataset::Dataset>(dataset::generate(study_config()));
      std::printf("  [generated %d channel samples in %.0f s]\n", kStudyCount, seconds_since(t0));
      std::fflush(stdout);
    }
    return *study;
  }

  models::ModelSpec study_spec(models::Arch a) const {
    models::ModelSpec s;
    s.arch = a;
    s.base_width = kStudyWidth;
    s.seed = kStudySeed;
    return s;
  }

  // Trained model if criterion 7 ran, otherwise a fresh one of the same shape.
  const models::Model<float>& model(models::Arch a) {
    auto& slot = trained[a];
    if (!slot) slot = std::make_unique<models::Model<float>>(study_spec(a));
    return *slot;
  }
};

models::Model<double> circle_free_model(models::Arch a) {
  models::ModelSpec s;
  s.arch = a;
  s.base_width = 4;
  s.depth = 4;
  s.out_channels = 2;
  s.seed = 17;
  return models::Model<double>(s);
}

// ---- 1 --------------------------------------------------------------------

Outcome solver_analytics() {
  flow::SolverConfig duct;
  geometry::WMParams p;
  p.base_radius = 50;
  p.amplitude = 0;
  const auto circle = geometry::rasterize(geometry::sample_curve(p, geometry::kCurveVertices, {128, 64}), 128, 256);
  auto t0 = Clock::now();
  const auto fd = flow::solve_duct(circle, duct);
  const double t_duct = seconds_since(t0);
  const double centre = *std::max_element(fd.magnitude.begin(), fd.magnitude.end());
  const double e_duct = std::abs(centre - 0.1) / 0.1;

  flow::SolverConfig chan;
  chan.mode = flow::Mode::channel;
  geometry::RasterMask straight(128, 256, 1);
  for (int r = 24; r < 104; ++r)
    for (int c = 0; c < 256; ++c) straight.at(r, c) = 0;
  t0 = Clock::now();
  const auto fc = flow::solve_channel(straight, chan);
  const double t_chan = seconds_since(t0);
  double peak = 0;
  for (int r = 0; r < 128; ++r) peak = std::max(peak, fc.u[fc.index(r, 255)]);
  const double e_chan = std::abs(peak - 0.075) / 0.075;
  const auto q = flow::boundary_flux(fc, chan);
  const double e_flux = std::abs(q.outlet - q.inlet) / q.inlet;

  // a rough channel as well, for flux and time
  const auto rough_mask =
      geometry::rasterize(geometry::sample_channel(geometry::sample_params(5), 128, 256), 128, 256);
  t0 = Clock::now();
  const auto fr = flow::solve_channel(rough_mask, chan);
  const double t_rough = seconds_since(t0);
  const auto qr = flow::boundary_flux(fr, chan);
  const double e_rough = std::abs(qr.outlet - qr.inlet) / qr.inlet;

  const double t_max = std::max({t_duct, t_chan, t_rough});
  const bool ok = e_duct < 0.02 && e_chan < 0.02 && e_flux < 0.005 && e_rough < 0.005 && t_max < 10.0;
  return {ok, fmt("duct centreline %.5f (err %.2f%%), channel exit peak %.5f (err %.2f%%), flux err %.3f%% straight / "
                  "%.3f%% rough, slowest solve %.2f s",
                  centre, 100 * e_duct, peak, 100 * e_chan, 100 * e_flux, 100 * e_rough, t_max)};
}

// ---- 2 --------------------------------------------------------------------

Outcome gradient_checks() {
  using testing::check_inputs;
  using testing::probe;
  using testing::random_tensor;
  using Leaves = std::vector<Var<double>>;
  using Opt = std::optional<Var<double>>;
  const auto t0 = Clock::now();

  struct OpCase {
    const char* name;
    std::vector<Tensor<double>> inputs;
    testing::Builder build;
  };
  Tensor<double> rm = random_tensor({1, 3, 1, 1}, 7), rv = random_tensor({1, 3, 1, 1}, 8, 0.5, 2.0);
  const auto x4 = random_tensor({2, 3, 4, 4}, 1, -2, 2);
  const std::vector<OpCase> ops = {
      {"conv2d", {random_tensor({2, 2, 6, 8}, 1), random_tensor({3, 2, 3, 3}, 2), random_tensor({3, 1, 1, 1}, 3)},
       [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::conv2d<double>(v[0], v[1], Opt(v[2]), 2, 1), 4); }},
      {"conv_transpose2d", {random_tensor({2, 3, 3, 4}, 1), random_tensor({3, 2, 4, 4}, 2), random_tensor({2, 1, 1, 1}, 3)},
       [](Graph<double>& g, const Leaves& v) {
         return probe(g, tensor::conv_transpose2d<double>(v[0], v[1], Opt(v[2]), 2, 1), 5);
       }},
      {"batch_norm", {random_tensor({3, 3, 4, 5}, 1, -2, 3), random_tensor({1, 3, 1, 1}, 2, 0.5, 1.5), random_tensor({1, 3, 1, 1}, 3)},
       [&](Graph<double>& g, const Leaves& v) {
         Tensor<double> m = rm, r = rv;
         return probe(g, tensor::batch_norm(v[0], v[1], v[2], m, r, Mode::train), 6);
       }},
      {"relu", {x4}, [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::relu(v[0]), 2); }},
      {"leaky_relu", {x4}, [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::leaky_relu(v[0]), 3); }},
      {"sigmoid", {x4}, [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::sigmoid(v[0]), 4); }},
      {"max_pool2x2", {x4}, [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::max_pool2x2(v[0]), 5); }},
      {"upsample_bilinear2x", {x4}, [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::upsample_bilinear2x(v[0]), 6); }},
      {"gap_spatial", {x4}, [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::gap_spatial(v[0]), 7); }},
      {"gmp_spatial", {x4}, [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::gmp_spatial(v[0]), 8); }},
      {"avg_over_channels", {x4}, [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::avg_over_channels(v[0]), 9); }},
      {"max_over_channels", {x4}, [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::max_over_channels(v[0]), 10); }},
      {"concat_channels", {x4, random_tensor({2, 2, 4, 4}, 2)},
       [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::concat_channels(v[0], v[1]), 11); }},
      {"mul", {random_tensor({2, 3, 1, 1}, 4), x4}, [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::mul(v[0], v[1]), 12); }},
      {"add", {x4, random_tensor({2, 1, 4, 4}, 5)}, [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::add(v[0], v[1]), 13); }},
      {"dense", {random_tensor({3, 4, 2, 1}, 1), random_tensor({5, 8, 1, 1}, 2), random_tensor({5, 1, 1, 1}, 3)},
       [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::dense<double>(v[0], v[1], Opt(v[2])), 14); }},
      {"dropout", {x4}, [](Graph<double>& g, const Leaves& v) { return probe(g, tensor::dropout(v[0], 0.3, Mode::train, 99), 15); }},
      {"sum", {x4}, [](Graph<double>&, const Leaves& v) { return tensor::sum(v[0]); }},
      {"scaled_l1", {random_tensor({2, 2, 3, 4}, 1), random_tensor({2, 2, 3, 4}, 2)},
       [](Graph<double>&, const Leaves& v) { return tensor::scaled_l1(v[0], v[1]); }},
  };
  double worst_op = 0;
  std::string worst_name;
  for (const auto& op : ops) {
    const double err = check_inputs(op.inputs, op.build);
    if (!(err <= worst_op)) {
      worst_op = err;
      worst_name = op.name;
    }
  }

  std::string arch_report;
  double worst_model = 0;
  const auto x = random_tensor({2, 1, 16, 32}, 5);
  for (models::Arch a : kArchs) {
    const auto m = circle_free_model(a);
    const double err = std::max(testing::check_model(m, x, Mode::train, 23), testing::check_model(m, x, Mode::eval, 29));
    worst_model = std::max(worst_model, err);
    arch_report += fmt(" %s %.1e", std::string(models::arch_name(a)).c_str(), err);
  }
  const double t = seconds_since(t0);
  const bool ok = worst_op < 1e-4 && worst_model < 1e-3 && t < 120;
  return {ok, fmt("%zu ops, worst %.1e (%s); end-to-end:%s; %.1f s", ops.size(), worst_op, worst_name.c_str(),
                  arch_report.c_str(), t)};
}

// ---- 3 --------------------------------------------------------------------

Outcome attention_invariants() {
  nn::ParamStore<double> ps(1);
  nn::CAM<double> cam(ps, "cam", 32);
  nn::SAM<double> sam(ps, "sam");
  Graph<double> g(false);
  const auto x = testing::random_tensor({2, 32, 8, 16}, 2, -4, 4);
  const auto f = g.constant(x);
  const Tensor<double> cg = cam.gate(f).value(), sg = sam.gate(f).value();
  bool ok = cg.shape() == Shape{2, 32, 1, 1} && sg.shape() == Shape{2, 1, 8, 16};
  for (double v : cg.values()) ok = ok && v > 0 && v < 1;
  for (double v : sg.values()) ok = ok && v > 0 && v < 1;
  for (auto* p : ps.all()) p->value.fill(0.0);
  const Tensor<double> a = cam(f).value(), b = sam(f).value();
  bool half = true;
  for (std::size_t i = 0; i < x.size(); ++i) half = half && a[i] == 0.5 * x[i] && b[i] == 0.5 * x[i];
  return {ok && half, fmt("CAM gate %s, SAM gate %s, gates in (0,1): %s, zero weights give 0.5 F exactly: %s",
                          cg.shape().str().c_str(), sg.shape().str().c_str(), ok ? "yes" : "no", half ? "yes" : "no")};
}

// ---- 4 --------------------------------------------------------------------

Outcome metric_oracles() {
  using metrics::MetricsConfig;
  const auto f = testing::random_tensor({3, 2, 8, 16}, 1, 0, 2);
  const double d_id = metrics::dice(f, f), j_id = metrics::iou(f, f);

  Tensor<double> truth({1, 1, 2, 4}, 1.0), pred({1, 1, 2, 4});
  for (int c = 0; c < 4; ++c) pred.at(0, 0, 0, c) = 1.0;
  const MetricsConfig tight{1e-14, metrics::Variant::soft_squared};
  const double d = metrics::dice(pred, truth, tight), j = metrics::iou(pred, truth, tight);
  const double link = std::abs(d - 2 * j / (1 + j));
  const double m0 = metrics::mre(Tensor<double>(f.shape()), f);

  const auto t = testing::random_tensor({4, 2, 5, 7}, 5, -1, 1), p = testing::random_tensor({4, 2, 5, 7}, 6, -1, 1);
  const MetricsConfig soft;
  const auto dd = metrics::dice_per_sample(p, t, soft), jj = metrics::iou_per_sample(p, t, soft);
  const auto mm = metrics::mre_per_sample(p, t);
  double brute = 0;
  const std::size_t per = t.size() / 4;
  for (std::size_t n = 0; n < 4; ++n) {
    double vw = 0, v2 = 0, w2 = 0, v1 = 0, diff = 0;
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
      vw += std::abs(t[i] * p[i]);
      v2 += t[i] * t[i];
      w2 += p[i] * p[i];
      v1 += std::abs(t[i]);
      diff += std::abs(t[i] - p[i]);
    }
    brute = std::max({brute, std::abs(dd[n] - (2 * vw + soft.eps) / (v2 + w2 + soft.eps)),
                      std::abs(jj[n] - (vw + soft.eps) / (v2 + w2 - vw + soft.eps)), std::abs(mm[n] - diff / v1)});
  }
  const bool ok = std::abs(d_id - 1) < 1e-9 && std::abs(j_id - 1) < 1e-9 && std::abs(d - 2.0 / 3.0) < 1e-9 &&
                  std::abs(j - 0.5) < 1e-9 && link < 1e-9 && std::abs(m0 - 1) < 1e-12 && brute < 1e-6;
  return {ok, fmt("identity Dice %.12f IoU %.12f; half overlap Dice %.12f IoU %.12f link %.1e; MRE(0) %.12f; brute-force "
                  "max diff %.1e",
                  d_id, j_id, d, j, link, m0, brute)};
}

// ---- 5 --------------------------------------------------------------------

Outcome schedule_and_loss() {
  const train::TrainConfig cfg;
  const double l0 = train::lr_at(0, cfg), l25 = train::lr_at(25, cfg), l50 = train::lr_at(50, cfg);
  Graph<double> g(false);
  const auto loss = train::l1_components(g.constant(Tensor<double>({1, 2, 1, 1}, std::vector<double>{0.2, 0.4})),
                                         g.constant(Tensor<double>({1, 2, 1, 1}, 0.0)));
  const double l = loss.value()[0];
  const bool ok = std::abs(l0 - 4e-4) < 1e-15 && std::abs(l25 - 3.6e-4) < 1e-15 && std::abs(l50 - 3.24e-4) < 1e-15 &&
                  std::abs(l - 0.3) < 1e-15;
  return {ok, fmt("lr %.6g / %.6g / %.6g at epochs 0/25/50; single-pixel L1 %.17g", l0, l25, l50, l)};
}

// ---- 6 --------------------------------------------------------------------

Outcome overfit(Context& ctx) {
  const auto t0 = Clock::now();
  dataset::GenerateConfig gc;
  gc.count = 8;
  gc.seed = kOverfitSeed;
  const dataset::Dataset data = dataset::generate(gc);
  dataset::Split sp;
  for (std::size_t i = 0; i < data.samples.size(); ++i) sp.train.push_back(i);

  models::ModelSpec spec;
  spec.arch = models::Arch::attn_unet;
  spec.base_width = 16;
  spec.seed = kOverfitSeed;
  models::Model<float> model(spec);
  train::TrainConfig cfg;
  cfg.epochs = 300;
  cfg.seed = kOverfitSeed;
  const auto res = train::fit(model, data, sp, cfg, [](const train::EpochRecord& e) {
    if ((e.epoch + 1) % 50 == 0) {
      std::printf("  [overfit epoch %d: train-mode MRE %.4f, eval-mode MRE %.4f Dice %.4f]\n", e.epoch + 1, e.train_mre,
                  e.val_mre, e.val_dice);
      std::fflush(stdout);
    }
  });
  res.history.write(ctx.workdir / "overfit_history.txt");
  const auto ev = train::evaluate(model, data, sp.train, cfg.target, cfg.batch_size, cfg.metrics);
  const double t = seconds_since(t0);
  const bool ok = ev.mre < 0.02 && ev.dice > 0.95 && t < 1800;
  return {ok, fmt("after 300 epochs: MRE %.4f (need < 0.02), soft Dice %.4f (need > 0.95); %.0f s", ev.mre, ev.dice, t)};
}

// ---- 7 --------------------------------------------------------------------

struct Published {
  const char* name;
  double train[4], val[4];  // loss, MRE, Dice, IoU
};

Outcome comparative_study(Context& ctx) {
  const auto t0 = Clock::now();
  const auto& data = ctx.study_data();
  const auto sp = dataset::split(data.samples.size(), kStudySeed);
  train::TrainConfig cfg;
  cfg.epochs = kStudyEpochs;
  cfg.seed = kStudySeed;
  const std::map<models::Arch, Published> published = {
      {models::Arch::attn_unet, {"UnetAM", {0.00082, 0.00012, 0.92639, 0.86289}, {0.00085, 0.00013, 0.92636, 0.86281}}},
      {models::Arch::tnet, {"T-Net", {0.00399, 0.00060, 0.92535, 0.86109}, {0.0040, 0.00063, 0.92530, 0.86093}}},
      {models::Arch::unet, {"U-Net", {0.01243, 0.00189, 0.91980, 0.85149}, {0.01154, 0.00179, 0.91963, 0.85128}}},
  };

  std::ostringstream table;
  table << fmt("%-18s | %10s %10s %10s %10s | %10s %10s %10s %10s\n", "model", "train Loss", "MRE", "DICE", "IOU",
               "val Loss", "MRE", "DICE", "IOU");
  bool ok = true;
  std::map<models::Arch, double> val_dice;
  for (models::Arch a : kArchs) {
    const auto ta = Clock::now();
    models::Model<float> model(ctx.study_spec(a));
    auto res = train::fit(model, data, sp, cfg, [&](const train::EpochRecord& e) {
      if ((e.epoch + 1) % 10 == 0) {
        std::printf("  [%s epoch %d: val Dice %.4f MRE %.4f, %.0f s/epoch]\n", std::string(models::arch_name(a)).c_str(),
                    e.epoch + 1, e.val_dice, e.val_mre, e.seconds);
        std::fflush(stdout);
      }
    });
    res.history.write(ctx.workdir / ("study_" + std::string(models::arch_name(a)) + ".txt"));
    models::save(res.best, ctx.workdir / ("study_" + std::string(models::arch_name(a)) + ".mfck"));
    const auto tr = train::evaluate(res.best, data, sp.train, cfg.target, cfg.batch_size, cfg.metrics);
    const auto va = train::evaluate(res.best, data, sp.validation, cfg.target, cfg.batch_size, cfg.metrics);
    const Published& p = published.at(a);
    const char* row = "%-18s | %10.5f %10.5f %10.5f %10.5f | %10.5f %10.5f %10.5f %10.5f\n";
    table << fmt(row, (std::string(p.name) + " (measured)").c_str(), tr.loss, tr.mre, tr.dice, tr.iou, va.loss, va.mre,
                 va.dice, va.iou);
    table << fmt(row, (std::string(p.name) + " (published)").c_str(), p.train[0], p.train[1], p.train[2], p.train[3],
                 p.val[0], p.val[1], p.val[2], p.val[3]);
    std::printf("  [%s trained in %.0f s]\n", p.name, seconds_since(ta));
    val_dice[a] = va.dice;
    ok = ok && va.dice > 0.7;
    ctx.trained[a] = std::make_unique<models::Model<float>>(std::move(res.best));
  }
  const double t = seconds_since(t0);
  std::ofstream(ctx.workdir / "study_table.txt") << table.str();
  std::printf("%s", table.str().c_str());
  const bool ordered = val_dice[models::Arch::attn_unet] >= val_dice[models::Arch::unet];
  ok = ok && t < 4 * 3600;
  return {ok, fmt("validation soft Dice attn_unet %.4f, tnet %.4f, unet %.4f (need > 0.7 each); attention >= U-Net: %s "
                  "(reported only); %.0f s",
                  val_dice[models::Arch::attn_unet], val_dice[models::Arch::tnet], val_dice[models::Arch::unet],
                  ordered ? "yes" : "no", t)};
}

// ---- 8 --------------------------------------------------------------------

Outcome determinism(Context& ctx) {
  const auto& first = ctx.study_data();
  const fs::path a = ctx.workdir / "determinism_a.mflo", b = ctx.workdir / "determinism_b.mflo";
  dataset::save(first, a);
  const auto t0 = Clock::now();
  dataset::save(dataset::generate(ctx.study_config()), b);
  const double t_gen = seconds_since(t0);
  const bool same_data = slurp(a) == slurp(b) && slurp(dataset::manifest_path(a)) == slurp(dataset::manifest_path(b));

  // two identical short trainings
  std::vector<std::size_t> idx(48);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  dataset::Split sp;
  sp.train.assign(idx.begin(), idx.begin() + 40);
  sp.validation.assign(idx.begin() + 40, idx.end());
  train::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 3;
  std::string tables[2];
  for (auto& table : tables) {
    models::ModelSpec spec = ctx.study_spec(models::Arch::tnet);
    spec.seed = 3;
    models::Model<float> m(spec);
    table = train::fit(m, first, sp, cfg).history.table();
  }
  const bool same_history = tables[0] == tables[1];
  for (const auto& p : {a, b}) {
    fs::remove(p);
    fs::remove(dataset::manifest_path(p));
  }
  return {same_data && same_history,
          fmt("regenerated %d-sample container byte-identical: %s (%.0f s); repeated training history identical: %s",
              kStudyCount, same_data ? "yes" : "no", t_gen, same_history ? "yes" : "no")};
}

// ---- 9 --------------------------------------------------------------------

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome benchmark(Context& ctx) {
  const auto& data = ctx.study_data();
  constexpr int kSamples = 3, kRepeats = 5;
  flow::SolverConfig scfg;
  scfg.mode = flow::Mode::channel;
  std::vector<double> solver_ms;
  for (int i = 0; i < kSamples; ++i) {
    std::vector<double> t;
    for (int r = 0; r < kRepeats; ++r) {
      const auto t0 = Clock::now();
      (void)flow::solve(data.samples[static_cast<std::size_t>(i)].mask, scfg);
      t.push_back(1e3 * seconds_since(t0));
    }
    solver_ms.push_back(median(t));
  }

  std::ostringstream report;
  report << fmt("  %-10s %8s %12s %12s %10s\n", "model", "width", "params", "ms/sample", "min ratio");
  report << fmt("  %-10s %8s %12s %12.2f %10s\n", "solver", "-", "-", (solver_ms[0] + solver_ms[1] + solver_ms[2]) / 3, "1");
  auto time_model = [&](const models::Model<float>& m) {
    double worst = 1e300, mean_ms = 0;
    for (int i = 0; i < kSamples; ++i) {
      const auto b = dataset::make_batch(data, {static_cast<std::size_t>(i)}, dataset::TargetMode::magnitude);
      (void)m.predict(b.masks);
      std::vector<double> t;
      for (int r = 0; r < kRepeats; ++r) {
        const auto t0 = Clock::now();
        (void)m.predict(b.masks);
        t.push_back(1e3 * seconds_since(t0));
      }
      const double ms = median(t);
      mean_ms += ms / kSamples;
      worst = std::min(worst, solver_ms[static_cast<std::size_t>(i)] / ms);
    }
    return std::pair{mean_ms, worst};
  };
  bool ok = true;
  std::string summary;
  for (models::Arch a : kArchs) {
    const auto& m = ctx.model(a);
    const auto [ms, ratio] = time_model(m);
    ok = ok && ratio >= 100;
    report << fmt("  %-10s %8d %12zu %12.2f %10.1f\n", std::string(models::arch_name(a)).c_str(), m.spec().base_width,
                  models::param_count(m), ms, ratio);
    summary += fmt(" %s %.1f ms (%.0fx)", std::string(models::arch_name(a)).c_str(), ms, ratio);
  }
  for (models::Arch a : kArchs) {
    models::ModelSpec full = ctx.study_spec(a);
    full.base_width = 64;
    const models::Model<float> m(full);
    const auto [ms, ratio] = time_model(m);
    report << fmt("  %-10s %8d %12zu %12.2f %10.1f   (default width, untrained, timing only)\n",
                  std::string(models::arch_name(a)).c_str(), 64, models::param_count(m), ms, ratio);
  }
  std::printf("%s", report.str().c_str());
  std::ofstream(ctx.workdir / "bench_report.txt") << report.str();
  return {ok, fmt("channel solver %.0f ms/sample; width-%d models:%s (need >= 100x)", median(solver_ms), kStudyWidth,
                  summary.c_str())};
}

// ---- 10 -------------------------------------------------------------------

Outcome round_trips(Context& ctx) {
  const auto& data = ctx.study_data();
  const fs::path dpath = ctx.workdir / "roundtrip.mflo", dpath2 = ctx.workdir / "roundtrip2.mflo";
  dataset::save(data, dpath);
  const dataset::Dataset back = dataset::load(dpath);
  dataset::save(back, dpath2);
  const bool data_ok = back == data && slurp(dpath) == slurp(dpath2);

  bool ckpt_ok = true;
  const auto x = dataset::make_batch(data, {0, 1}, dataset::TargetMode::magnitude).masks;
  const fs::path cpath = ctx.workdir / "roundtrip.mfck";
  for (models::Arch a : kArchs) {
    const auto& m = ctx.model(a);
    models::save(m, cpath);
    const auto r = models::load<float>(cpath);
    ckpt_ok = ckpt_ok && r.predict(x) == m.predict(x);
  }

  // damaged files
  const std::string bytes = slurp(dpath), ck = slurp(cpath);
  int rejected = 0, trials = 0;
  auto expect = [&](ErrorKind want, const std::function<void()>& fn) {
    ++trials;
    rejected += kind_of(fn) == want;
  };
  for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{10}}) {
    std::ofstream(dpath, std::ios::binary | std::ios::trunc).write(bytes.data(), static_cast<std::streamsize>(cut));
    expect(ErrorKind::CorruptContainer, [&] { (void)dataset::load(dpath); });
  }
  std::string flipped = bytes;
  flipped[0] = 'X';
  std::ofstream(dpath, std::ios::binary | std::ios::trunc) << flipped;
  expect(ErrorKind::CorruptContainer, [&] { (void)dataset::load(dpath); });
  for (std::size_t cut : {ck.size() - 1, ck.size() / 2, std::size_t{6}}) {
    std::ofstream(cpath, std::ios::binary | std::ios::trunc).write(ck.data(), static_cast<std::streamsize>(cut));
    expect(ErrorKind::CorruptCheckpoint, [&] { (void)models::load<float>(cpath); });
  }
  std::ofstream(cpath, std::ios::binary | std::ios::trunc) << ck << 'x';
  expect(ErrorKind::CorruptCheckpoint, [&] { (void)models::load<float>(cpath); });

  for (const auto& p : {dpath, dpath2}) {
    fs::remove(p);
    fs::remove(dataset::manifest_path(p));
  }
  fs::remove(cpath);
  return {data_ok && ckpt_ok && rejected == trials,
          fmt("container round trip exact: %s; checkpoint forward outputs identical: %s; damaged files rejected %d/%d",
              data_ok ? "yes" : "no", ckpt_ok ? "yes" : "no", rejected, trials)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> selected;
  std::string workdir = "acceptance_out";
  app.add_option("--criteria", selected, "Subset to run")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--workdir", workdir, "Directory for histories, tables and checkpoints");
  CLI11_PARSE(app, argc, argv);
  if (selected.empty()) selected = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const std::set<int> want(selected.begin(), selected.end());

  Context ctx;
  ctx.workdir = workdir;
  fs::create_directories(ctx.workdir);

  const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria = {
      {1, {"solver analytics", solver_analytics}},
      {2, {"gradient correctness", gradient_checks}},
      {3, {"attention invariants", attention_invariants}},
      {4, {"metric oracles", metric_oracles}},
      {5, {"schedule and loss", schedule_and_loss}},
      {6, {"overfit sanity", [&] { return overfit(ctx); }}},
      {7, {"comparative study", [&] { return comparative_study(ctx); }}},
      {8, {"determinism", [&] { return determinism(ctx); }}},
      {9, {"benchmark", [&] { return benchmark(ctx); }}},
      {10, {"format round trips", [&] { return round_trips(ctx); }}},
  };

  std::map<int, Outcome> results;
  for (const auto& [id, entry] : criteria) {
    if (!want.count(id)) continue;
    std::printf("-- criterion %d (%s)\n", id, entry.first);
    std::fflush(stdout);
    Outcome o;
    try {
      o = entry.second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("criterion %d %s: %s  %s\n", id, entry.first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    results[id] = o;
  }

  std::printf("\n== summary\n");
  int failed = 0;
  for (const auto& [id, o] : results) {
    std::printf("criterion %2d: %s\n", id, o.pass ? "PASS" : "FAIL");
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
