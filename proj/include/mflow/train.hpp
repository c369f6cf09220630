#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mflow/dataset.hpp"
#include "mflow/metrics.hpp"
#include "mflow/models.hpp"

namespace mflow::train {

using dataset::TargetMode;
using tensor::Parameter;
using tensor::Tensor;
using tensor::Var;

struct TrainConfig {
  double initial_lr = 4e-4;
  double decay_factor = 0.9;
  int decay_every = 25;
  int batch_size = 16;
  int epochs = 75;
  std::uint64_t seed = 0;
  TargetMode target = TargetMode::magnitude;
  metrics::MetricsConfig metrics;

  static int default_epochs(TargetMode t) { return t == TargetMode::components ? 100 : 75; }
  void validate() const;
};

double lr_at(int epoch, const TrainConfig& cfg);

// sum |pred - truth| / (2 m nx ny). N x 2 x H x W for components, N x 1 x H x W
// for the magnitude.
template <typename T>
Var<T> l1_components(Var<T> pred, Var<T> truth);
template <typename T>
Var<T> l1_magnitude(Var<T> pred, Var<T> truth);

template <typename T>
struct AdamState {
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double eps = 1e-8;

  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t step = 0;
};

// Bias-corrected Adam on p.value from p.grad. Moment buffers are created on
// the first call; ShapeMismatch if the parameter list changes shape later.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state, double lr);

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0, val_loss = 0;
  double train_mre = 0, val_mre = 0;
  double train_dice = 0, val_dice = 0;
  double train_iou = 0, val_iou = 0;
  int steps = 0;
  double seconds = 0;  // wall clock, excluded from equality
};

struct History {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  std::int64_t optimizer_steps = 0;

  // One line per epoch: epoch lr train_loss val_loss train_mre val_mre
  // train_dice val_dice train_iou val_iou. Deterministic (no timings).
  std::string table() const;
  void write(const std::filesystem::path& path) const;
};

// Scores for one pass over a sample set in eval mode.
struct Evaluation {
  double loss = 0, mre = 0, dice = 0, iou = 0;
};

template <typename T>
Var<T> loss_for(Var<T> pred, Var<T> truth, TargetMode target);

Evaluation evaluate(const models::Model<float>& model, const dataset::Dataset& data,
                    const std::vector<std::size_t>& indices, TargetMode target, int batch_size,
                    const metrics::MetricsConfig& mcfg);

struct FitResult {
  History history;
  models::Model<float> best;  // parameters at the lowest validation loss
};

// Trains `model` in place. With an empty validation split the eval-mode pass
// runs over the training samples instead.
FitResult fit(models::Model<float>& model, const dataset::Dataset& data, const dataset::Split& split,
              const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace mflow::train
