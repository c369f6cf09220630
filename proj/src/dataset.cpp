#include "mflow/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "binio.hpp"
#include "mflow/error.hpp"
#include "mflow/rng.hpp"

namespace mflow::dataset {

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kHeaderBytes = 18;
constexpr float kValueBound = 5.0f;

[[noreturn]] void corrupt(const std::filesystem::path& path, const std::string& what) {
  throw Error(ErrorKind::CorruptContainer, path.string() + ": " + what);
}

std::string manifest_line(const FieldSample& s) {
  char buf[512];
  const WMParams& p = s.params;
  std::snprintf(buf, sizeof buf, "%llu %llu %.17g %.17g %.17g %d %.17g %.17g %.17g\n",
                static_cast<unsigned long long>(s.id), static_cast<unsigned long long>(s.seed), p.fractal_dim,
                p.spectral_exp, p.scale_const, p.n_terms, p.base_radius, p.amplitude, s.residual);
  return buf;
}

}  // namespace

std::string_view target_name(TargetMode t) { return t == TargetMode::components ? "uv" : "mag"; }

TargetMode parse_target(std::string_view name) {
  if (name == "uv") return TargetMode::components;
  if (name == "mag") return TargetMode::magnitude;
  throw Error(ErrorKind::InvalidParams, "unknown target '" + std::string(name) + "' (expected mag or uv)");
}

RasterMask build_mask(const WMParams& params, Mode mode, int height, int width) {
  if (mode == Mode::duct) {
    const geometry::Point center{0.5 * width, 0.5 * height};
    return geometry::rasterize(geometry::sample_curve(params, geometry::kCurveVertices, center), height, width);
  }
  return geometry::rasterize(geometry::sample_channel(params, height, width), height, width);
}

FieldSample make_sample(std::uint64_t id, std::uint64_t seed, const GenerateConfig& cfg) {
  FieldSample s;
  s.id = id;
  s.seed = seed;
  s.params = geometry::sample_params(seed, cfg.ranges);
  s.mask = build_mask(s.params, cfg.solver.mode, geometry::kCanvasHeight, geometry::kCanvasWidth);
  if (s.mask.fluid_count() == 0) throw Error(ErrorKind::EmptyFluid, "geometry has no fluid pixels");
  if (!geometry::fluid_connected(s.mask)) throw Error(ErrorKind::EmptyFluid, "fluid region is not connected");
  const flow::FlowField field = flow::solve(s.mask, cfg.solver);
  if (!(field.converged_residual < cfg.solver.tolerance)) {
    throw Error(ErrorKind::NotConverged, "residual above tolerance");
  }
  s.residual = field.converged_residual;
  const auto target = cfg.solver.mode == Mode::duct ? flow::Target::magnitude : flow::Target::all;
  s.channels = flow::nondimensionalize(field, s.mask, cfg.solver, target);
  for (const auto& ch : s.channels) {
    for (float v : ch) {
      if (!std::isfinite(v) || std::abs(v) > kValueBound) {
        throw Error(ErrorKind::NotConverged, "nondimensional value outside [-5, 5]");
      }
    }
  }
  return s;
}

Dataset generate(const GenerateConfig& cfg) {
  if (cfg.count < 1) throw Error(ErrorKind::InvalidParams, "sample count must be at least 1");
  if (cfg.max_retries < 0) throw Error(ErrorKind::InvalidParams, "max_retries must be nonnegative");
  cfg.solver.validate();

  const auto n = static_cast<std::size_t>(cfg.count);
  Dataset data;
  data.mode = cfg.solver.mode;
  data.samples.resize(n);
  std::vector<std::vector<std::string>> notes(n);
  std::vector<std::string> failures(n);
  std::vector<ErrorKind> failure_kind(n, ErrorKind::ExhaustedRetries);

#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, cfg.threads))
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t base = derive_seed(cfg.seed, i);
    bool done = false;
    for (int attempt = 0; attempt <= cfg.max_retries && !done; ++attempt) {
      const std::uint64_t seed = attempt == 0 ? base : derive_seed(base, static_cast<std::uint64_t>(attempt));
      try {
        data.samples[i] = make_sample(i, seed, cfg);
        done = true;
      } catch (const Error& e) {
        switch (e.kind()) {
          case ErrorKind::DegenerateRadius:
          case ErrorKind::OutOfCanvas:
          case ErrorKind::EmptyFluid:
          case ErrorKind::NotConverged:
          case ErrorKind::NoThroughPath:
          case ErrorKind::UnstableTimestep:
            notes[i].push_back("sample " + std::to_string(i) + " attempt " + std::to_string(attempt) +
                               " rejected: " + e.what());
            break;
          default:
            failures[i] = e.what();
            failure_kind[i] = e.kind();
            done = true;  // not retryable; rethrown below
        }
      }
    }
    if (!done) failures[i] = "sample " + std::to_string(i) + " failed after " + std::to_string(cfg.max_retries) + " retries";
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (cfg.log) {
      for (const auto& line : notes[i]) cfg.log(line);
    }
    if (!failures[i].empty()) throw Error(failure_kind[i], failures[i]);
  }
  return data;
}

std::filesystem::path manifest_path(const std::filesystem::path& container) {
  std::filesystem::path p = container;
  p += ".manifest";
  return p;
}

std::uint64_t container_size(int count, int height, int width, int channels) {
  const std::uint64_t plane = static_cast<std::uint64_t>(height) * static_cast<std::uint64_t>(width);
  return kHeaderBytes + static_cast<std::uint64_t>(count) * (8 + plane + static_cast<std::uint64_t>(channels) * plane * 4);
}

void save(const Dataset& data, const std::filesystem::path& path) {
  const int channels = data.channel_count();
  const std::size_t plane = static_cast<std::size_t>(data.height) * data.width;
  for (const auto& s : data.samples) {
    if (s.mask.size() != plane || s.channels.size() != static_cast<std::size_t>(channels)) {
      throw Error(ErrorKind::ShapeMismatch, "sample " + std::to_string(s.id) + " does not match the dataset layout");
    }
    for (const auto& ch : s.channels) {
      if (ch.size() != plane) throw Error(ErrorKind::ShapeMismatch, "channel size mismatch in sample " + std::to_string(s.id));
    }
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  binio::put_magic(out, "MFLO");
  binio::put_le(out, kVersion);
  binio::put_le(out, static_cast<std::uint32_t>(data.samples.size()));
  binio::put_le(out, static_cast<std::uint16_t>(data.height));
  binio::put_le(out, static_cast<std::uint16_t>(data.width));
  binio::put_le(out, static_cast<std::uint8_t>(channels));
  binio::put_le(out, static_cast<std::uint8_t>(data.mode));
  for (const auto& s : data.samples) {
    binio::put_le(out, s.id);
    const auto cells = s.mask.cells();
    out.write(reinterpret_cast<const char*>(cells.data()), static_cast<std::streamsize>(cells.size()));
    for (const auto& ch : s.channels) binio::put_f32s(out, ch);
  }
  if (!out) throw Error(ErrorKind::IoFailure, "write failed for " + path.string());

  std::ofstream manifest(manifest_path(path));
  if (!manifest) throw Error(ErrorKind::IoFailure, "cannot open " + manifest_path(path).string());
  for (const auto& s : data.samples) manifest << manifest_line(s);
  if (!manifest) throw Error(ErrorKind::IoFailure, "write failed for " + manifest_path(path).string());
}

Dataset load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);

  if (!binio::check_magic(in, "MFLO")) corrupt(path, "bad magic");
  std::uint32_t version = 0, count = 0;
  std::uint16_t h = 0, w = 0;
  std::uint8_t channels = 0, mode = 0;
  if (!binio::get_le(in, version) || !binio::get_le(in, count) || !binio::get_le(in, h) || !binio::get_le(in, w) ||
      !binio::get_le(in, channels) || !binio::get_le(in, mode)) {
    corrupt(path, "truncated header");
  }
  if (version != kVersion) corrupt(path, "unsupported version " + std::to_string(version));
  if (mode > 1) corrupt(path, "unknown mode " + std::to_string(mode));
  Dataset data;
  data.mode = static_cast<Mode>(mode);
  data.height = h;
  data.width = w;
  if (channels != data.channel_count()) corrupt(path, "channel count does not match the mode");
  const std::uint64_t expected = container_size(static_cast<int>(count), h, w, channels);
  if (file_size != expected) {
    corrupt(path, "length " + std::to_string(file_size) + " does not match " + std::to_string(expected));
  }

  const std::size_t plane = static_cast<std::size_t>(h) * w;
  data.samples.resize(count);
  for (auto& s : data.samples) {
    std::vector<std::uint8_t> cells(plane);
    if (!binio::get_le(in, s.id) ||
        !in.read(reinterpret_cast<char*>(cells.data()), static_cast<std::streamsize>(plane))) {
      corrupt(path, "truncated sample");
    }
    s.mask = RasterMask(h, w, std::move(cells));
    s.channels.assign(channels, std::vector<float>(plane));
    for (auto& ch : s.channels) {
      if (!binio::get_f32s(in, ch)) corrupt(path, "truncated sample");
    }
  }

  std::ifstream manifest(manifest_path(path));
  if (!manifest) corrupt(path, "missing manifest");
  std::string line;
  std::size_t row = 0;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    if (row >= data.samples.size()) corrupt(path, "manifest has more lines than samples");
    FieldSample& s = data.samples[row];
    std::istringstream fields(line);
    unsigned long long id = 0, seed = 0;
    WMParams& p = s.params;
    std::string d, g, a, r, amp, res;
    if (!(fields >> id >> seed >> d >> g >> a >> p.n_terms >> r >> amp >> res)) corrupt(path, "malformed manifest line");
    if (id != s.id) corrupt(path, "manifest id " + std::to_string(id) + " does not match sample " + std::to_string(s.id));
    s.seed = seed;
    // strtod round-trips %.17g exactly; iostream extraction is not guaranteed to.
    p.fractal_dim = std::strtod(d.c_str(), nullptr);
    p.spectral_exp = std::strtod(g.c_str(), nullptr);
    p.scale_const = std::strtod(a.c_str(), nullptr);
    p.base_radius = std::strtod(r.c_str(), nullptr);
    p.amplitude = std::strtod(amp.c_str(), nullptr);
    s.residual = std::strtod(res.c_str(), nullptr);
    ++row;
  }
  if (row != data.samples.size()) corrupt(path, "manifest has " + std::to_string(row) + " lines for " +
                                                    std::to_string(data.samples.size()) + " samples");
  return data;
}

Split split(std::size_t count, std::uint64_t seed) {
  if (count < 5) throw Error(ErrorKind::TooFewSamples, "need at least 5 samples, got " + std::to_string(count));
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x5eed5117ULL));
  for (std::size_t i = count - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i)));
    std::swap(order[i], order[j]);
  }
  const std::size_t n_train = count * 4 / 5;
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  return s;
}

std::vector<std::vector<std::size_t>> batch_order(const std::vector<std::size_t>& indices, int batch_size,
                                                  std::uint64_t epoch_seed) {
  if (batch_size < 1) throw Error(ErrorKind::InvalidParams, "batch size must be at least 1");
  std::vector<std::size_t> order = indices;
  Rng rng(epoch_seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i - 1)));
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return out;
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& members, TargetMode target) {
  if (target == TargetMode::components && data.mode != Mode::channel) {
    throw Error(ErrorKind::InvalidParams, "u,v targets need a channel-mode dataset");
  }
  const int n = static_cast<int>(members.size());
  const int h = data.height, w = data.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const int tc = target == TargetMode::components ? 2 : 1;
  Batch b;
  b.masks = tensor::Tensor<float>({n, 1, h, w});
  b.targets = tensor::Tensor<float>({n, tc, h, w});
  for (int k = 0; k < n; ++k) {
    const FieldSample& s = data.samples.at(members[static_cast<std::size_t>(k)]);
    b.ids.push_back(s.id);
    const auto cells = s.mask.cells();
    std::copy(cells.begin(), cells.end(), b.masks.data() + k * plane);
    // magnitude is always the last stored channel, (u, v) the first two
    const std::size_t first = target == TargetMode::components ? 0 : s.channels.size() - 1;
    for (int c = 0; c < tc; ++c) {
      const auto& src = s.channels[first + static_cast<std::size_t>(c)];
      std::copy(src.begin(), src.end(), b.targets.data() + (static_cast<std::size_t>(k) * tc + c) * plane);
    }
  }
  return b;
}

std::vector<Batch> batches(const Dataset& data, const std::vector<std::size_t>& indices, int batch_size,
                           std::uint64_t epoch_seed, TargetMode target) {
  std::vector<Batch> out;
  for (const auto& members : batch_order(indices, batch_size, epoch_seed)) out.push_back(make_batch(data, members, target));
  return out;
}

}  // namespace mflow::dataset
