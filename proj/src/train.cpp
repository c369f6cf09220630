#include "mflow/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "mflow/error.hpp"
#include "mflow/rng.hpp"

namespace mflow::train {

namespace {

// Per-sample accumulation so the epoch scores are sample means regardless
// of how the last batch is cut.
struct Tally {
  double loss_weighted = 0;
  double mre = 0, dice = 0, iou = 0;
  std::size_t samples = 0;

  void add(double batch_loss, const Tensor<float>& pred, const Tensor<float>& truth, const metrics::MetricsConfig& m) {
    const auto n = static_cast<std::size_t>(pred.shape().n);
    loss_weighted += batch_loss * static_cast<double>(n);
    for (double x : metrics::mre_per_sample(pred, truth)) mre += x;
    for (double x : metrics::dice_per_sample(pred, truth, m)) dice += x;
    for (double x : metrics::iou_per_sample(pred, truth, m)) iou += x;
    samples += n;
  }

  Evaluation result() const {
    const double d = samples ? static_cast<double>(samples) : 1.0;
    return {loss_weighted / d, mre / d, dice / d, iou / d};
  }
};

constexpr std::uint64_t kShuffleStream = 0x5111ffULL;
constexpr std::uint64_t kDropoutStream = 0xd209ULL;

}  // namespace

void TrainConfig::validate() const {
  if (!(initial_lr > 0.0) || !std::isfinite(initial_lr)) throw Error(ErrorKind::InvalidParams, "learning rate must be positive");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw Error(ErrorKind::InvalidParams, "decay factor must lie in (0, 1]");
  if (decay_every < 1) throw Error(ErrorKind::InvalidParams, "decay interval must be at least 1 epoch");
  if (batch_size < 1) throw Error(ErrorKind::InvalidParams, "batch size must be at least 1");
  if (epochs < 1) throw Error(ErrorKind::InvalidParams, "epochs must be at least 1");
  metrics.validate();
}

double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw Error(ErrorKind::InvalidParams, "negative epoch");
  return cfg.initial_lr * std::pow(cfg.decay_factor, epoch / cfg.decay_every);
}

template <typename T>
Var<T> l1_components(Var<T> pred, Var<T> truth) {
  if (pred.shape() != truth.shape() || pred.shape().c != 2) {
    throw Error(ErrorKind::ShapeMismatch, "l1_components expects two matching N x 2 x H x W operands");
  }
  return tensor::scaled_l1(pred, truth);
}

template <typename T>
Var<T> l1_magnitude(Var<T> pred, Var<T> truth) {
  if (pred.shape() != truth.shape() || pred.shape().c != 1) {
    throw Error(ErrorKind::ShapeMismatch, "l1_magnitude expects two matching N x 1 x H x W operands");
  }
  return tensor::scaled_l1(pred, truth);
}

template <typename T>
Var<T> loss_for(Var<T> pred, Var<T> truth, TargetMode target) {
  return target == TargetMode::components ? l1_components(pred, truth) : l1_magnitude(pred, truth);
}

template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state, double lr) {
  if (state.m.empty() && state.step == 0) {
    for (const auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) throw Error(ErrorKind::ShapeMismatch, "optimizer state does not match parameters");
  ++state.step;
  const double b1 = AdamState<T>::beta1, b2 = AdamState<T>::beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = *params[k];
    Tensor<T>& m = state.m[k];
    Tensor<T>& v = state.v[k];
    if (m.shape() != p.value.shape()) throw Error(ErrorKind::ShapeMismatch, "moment shape differs for " + p.name);
    if (p.grad.empty()) continue;  // never reached by backward
    if (p.grad.shape() != p.value.shape()) throw Error(ErrorKind::ShapeMismatch, "gradient shape differs for " + p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      p.value[i] = static_cast<T>(p.value[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + AdamState<T>::eps));
    }
  }
}

std::string History::table() const {
  std::string out = "# epoch lr train_loss val_loss train_mre val_mre train_dice val_dice train_iou val_iou\n";
  char buf[512];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%d %.6e %.9e %.9e %.9e %.9e %.9e %.9e %.9e %.9e\n", e.epoch, e.lr, e.train_loss,
                  e.val_loss, e.train_mre, e.val_mre, e.train_dice, e.val_dice, e.train_iou, e.val_iou);
    out += buf;
  }
  return out;
}

void History::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  out << table();
  if (!out) throw Error(ErrorKind::IoFailure, "write failed for " + path.string());
}

Evaluation evaluate(const models::Model<float>& model, const dataset::Dataset& data,
                    const std::vector<std::size_t>& indices, TargetMode target, int batch_size,
                    const metrics::MetricsConfig& mcfg) {
  if (batch_size < 1) throw Error(ErrorKind::InvalidParams, "batch size must be at least 1");
  Tally tally;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    const std::vector<std::size_t> members(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                           indices.begin() + static_cast<std::ptrdiff_t>(stop));
    const dataset::Batch b = dataset::make_batch(data, members, target);
    tensor::Graph<float> g(false);
    const Var<float> pred = model.forward(g.constant(b.masks), nn::Context{tensor::Mode::eval, 0});
    const Var<float> truth = g.constant(b.targets);
    const Var<float> loss = loss_for(pred, truth, target);
    tally.add(loss.value()[0], pred.value(), b.targets, mcfg);
  }
  return tally.result();
}

FitResult fit(models::Model<float>& model, const dataset::Dataset& data, const dataset::Split& split,
              const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (split.train.empty()) throw Error(ErrorKind::InvalidParams, "training split is empty");
  const int out_channels = cfg.target == TargetMode::components ? 2 : 1;
  if (model.spec().out_channels != out_channels) {
    throw Error(ErrorKind::InvalidSpec, "model output channels do not match the target mode");
  }
  const auto& val_indices = split.validation.empty() ? split.train : split.validation;

  const auto params = model.trainable();
  AdamState<float> adam;
  History history;
  std::vector<Tensor<float>> best_values;
  double best_loss = std::numeric_limits<double>::infinity();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_at(epoch, cfg);
    Tally tally;
    const auto order = dataset::batch_order(split.train, cfg.batch_size, derive_seed(cfg.seed ^ kShuffleStream, epoch));
    int batch_index = 0;
    for (const auto& members : order) {
      const dataset::Batch b = dataset::make_batch(data, members, cfg.target);
      for (auto* p : params) p->zero_grad();
      tensor::Graph<float> g;
      const std::uint64_t dropout_seed = derive_seed(cfg.seed ^ kDropoutStream, static_cast<std::uint64_t>(history.optimizer_steps));
      const Var<float> pred = model.forward(g.constant(b.masks), nn::Context{tensor::Mode::train, dropout_seed});
      const Var<float> loss = loss_for(pred, g.constant(b.targets), cfg.target);
      const double loss_value = loss.value()[0];
      if (!std::isfinite(loss_value)) {
        throw Error(ErrorKind::NonFiniteLoss, "loss " + std::to_string(loss_value) + " at epoch " + std::to_string(epoch) +
                                                  ", batch " + std::to_string(batch_index));
      }
      const Tensor<float> pred_value = pred.value();  // backward releases it
      g.backward(loss);
      adam_step(params, adam, rec.lr);
      ++history.optimizer_steps;
      ++rec.steps;
      tally.add(loss_value, pred_value, b.targets, cfg.metrics);
      ++batch_index;
    }
    const Evaluation tr = tally.result();
    rec.train_loss = tr.loss;
    rec.train_mre = tr.mre;
    rec.train_dice = tr.dice;
    rec.train_iou = tr.iou;

    const Evaluation va = evaluate(model, data, val_indices, cfg.target, cfg.batch_size, cfg.metrics);
    rec.val_loss = va.loss;
    rec.val_mre = va.mre;
    rec.val_dice = va.dice;
    rec.val_iou = va.iou;
    if (!std::isfinite(va.loss)) {
      throw Error(ErrorKind::NonFiniteLoss, "validation loss at epoch " + std::to_string(epoch));
    }
    if (va.loss < best_loss) {
      best_loss = va.loss;
      history.best_epoch = epoch;
      best_values.clear();
      for (const auto* p : model.parameters()) best_values.push_back(p->value);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }

  FitResult result{std::move(history), models::Model<float>(model.spec())};
  const auto dst = result.best.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = best_values[i];
  return result;
}

#define MFLOW_INSTANTIATE(T)                                                     \
  template Var<T> l1_components<T>(Var<T>, Var<T>);                              \
  template Var<T> l1_magnitude<T>(Var<T>, Var<T>);                               \
  template Var<T> loss_for<T>(Var<T>, Var<T>, TargetMode);                       \
  template void adam_step<T>(const std::vector<Parameter<T>*>&, AdamState<T>&, double);

MFLOW_INSTANTIATE(float)
MFLOW_INSTANTIATE(double)
#undef MFLOW_INSTANTIATE

}  // namespace mflow::train
