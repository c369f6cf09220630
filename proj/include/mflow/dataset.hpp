#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mflow/flowsolve.hpp"
#include "mflow/geometry.hpp"
#include "mflow/tensor.hpp"

namespace mflow::dataset {

using flow::Mode;
using geometry::RasterMask;
using geometry::WMParams;

enum class TargetMode : std::uint8_t { components, magnitude };

std::string_view target_name(TargetMode t);  // "uv" / "mag"
TargetMode parse_target(std::string_view name);

struct FieldSample {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;  // seed that produced the accepted geometry
  WMParams params;
  RasterMask mask;
  // Nondimensional channels: duct (magnitude), channel (u, v, magnitude).
  std::vector<std::vector<float>> channels;
  double residual = 0.0;

  friend bool operator==(const FieldSample&, const FieldSample&) = default;
};

struct Dataset {
  Mode mode = Mode::duct;
  int height = geometry::kCanvasHeight;
  int width = geometry::kCanvasWidth;
  std::vector<FieldSample> samples;

  int channel_count() const { return mode == Mode::duct ? 1 : 3; }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct GenerateConfig {
  int count = 200;
  std::uint64_t seed = 0;
  flow::SolverConfig solver;  // solver.mode selects duct or channel
  geometry::ParamRanges ranges;
  int max_retries = 32;
  int threads = 1;
  // Retry notices, delivered in sample order after generation.
  std::function<void(const std::string&)> log;
};

// Duct geometries are centred on the canvas; channel geometries span it.
RasterMask build_mask(const WMParams& params, Mode mode, int height, int width);

// One sample from one seed, or throws the geometry/solver error.
FieldSample make_sample(std::uint64_t id, std::uint64_t seed, const GenerateConfig& cfg);

// Sample i starts from derive_seed(seed, i); each failure moves to the next
// retry sub-seed. Output is independent of the thread count.
Dataset generate(const GenerateConfig& cfg);

// Container "MFLO" plus a text manifest at <path>.manifest.
std::filesystem::path manifest_path(const std::filesystem::path& container);
std::uint64_t container_size(int count, int height, int width, int channels);
void save(const Dataset& data, const std::filesystem::path& path);
// CorruptContainer on bad magic, version, length or manifest mismatch.
Dataset load(const std::filesystem::path& path);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};
// Seeded permutation, first 80% train. TooFewSamples below 5 samples.
Split split(std::size_t count, std::uint64_t seed);

struct Batch {
  std::vector<std::uint64_t> ids;
  tensor::Tensor<float> masks;    // N x 1 x h x w, 1 = non-fluid
  tensor::Tensor<float> targets;  // N x 2 x h x w (uv) or N x 1 x h x w (mag)
};

// Samples `indices` in a shuffled order, chunked; the last chunk may be short.
std::vector<std::vector<std::size_t>> batch_order(const std::vector<std::size_t>& indices, int batch_size,
                                                  std::uint64_t epoch_seed);
Batch make_batch(const Dataset& data, const std::vector<std::size_t>& members, TargetMode target);
std::vector<Batch> batches(const Dataset& data, const std::vector<std::size_t>& indices, int batch_size,
                           std::uint64_t epoch_seed, TargetMode target);

}  // namespace mflow::dataset
