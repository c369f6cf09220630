#include "mflow/metrics.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "mflow/error.hpp"

namespace mflow::metrics {

namespace {

struct Sums {
  double abs_v = 0;    // S|V|
  double abs_w = 0;    // S|W|
  double abs_err = 0;  // S|V - W|
  double sq_v = 0;     // S V^2
  double sq_w = 0;     // S W^2
  double cross = 0;    // S|V W|
};

template <typename T>
std::vector<Sums> per_sample(const Tensor<T>& pred, const Tensor<T>& truth) {
  if (pred.shape() != truth.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "metric operands " + pred.shape().str() + " and " + truth.shape().str());
  }
  const int n = pred.shape().n;
  const std::size_t stride = n > 0 ? pred.size() / static_cast<std::size_t>(n) : 0;
  std::vector<Sums> out(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    Sums& a = out[static_cast<std::size_t>(s)];
    const T* w = pred.data() + s * stride;
    const T* v = truth.data() + s * stride;
    for (std::size_t i = 0; i < stride; ++i) {
      const double vi = v[i], wi = w[i];
      a.abs_v += std::abs(vi);
      a.abs_w += std::abs(wi);
      a.abs_err += std::abs(vi - wi);
      a.sq_v += vi * vi;
      a.sq_w += wi * wi;
      a.cross += std::abs(vi * wi);
    }
  }
  return out;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::string_view variant_name(Variant v) {
  return v == Variant::soft_squared ? "soft_squared" : "paper_literal";
}

Variant parse_variant(std::string_view name) {
  if (name == "soft_squared") return Variant::soft_squared;
  if (name == "paper_literal") return Variant::paper_literal;
  throw Error(ErrorKind::InvalidParams, "unknown metric variant '" + std::string(name) + "'");
}

void MetricsConfig::validate() const {
  if (!(eps > 0.0)) throw Error(ErrorKind::InvalidParams, "metric eps must be positive");
}

template <typename T>
std::vector<double> mre_per_sample(const Tensor<T>& pred, const Tensor<T>& truth) {
  std::vector<double> out;
  int index = 0;
  for (const Sums& s : per_sample(pred, truth)) {
    if (s.abs_v == 0.0) throw Error(ErrorKind::ZeroReference, "sample " + std::to_string(index) + " has zero truth");
    out.push_back(s.abs_err / s.abs_v);
    ++index;
  }
  return out;
}

template <typename T>
std::vector<double> dice_per_sample(const Tensor<T>& pred, const Tensor<T>& truth, const MetricsConfig& cfg) {
  cfg.validate();
  std::vector<double> out;
  for (const Sums& s : per_sample(pred, truth)) {
    if (cfg.variant == Variant::soft_squared) out.push_back((2 * s.cross + cfg.eps) / (s.sq_v + s.sq_w + cfg.eps));
    else out.push_back((2 * s.cross + cfg.eps) / (s.abs_v + cfg.eps));
  }
  return out;
}

template <typename T>
std::vector<double> iou_per_sample(const Tensor<T>& pred, const Tensor<T>& truth, const MetricsConfig& cfg) {
  cfg.validate();
  std::vector<double> out;
  for (const Sums& s : per_sample(pred, truth)) {
    if (cfg.variant == Variant::soft_squared) {
      out.push_back((s.cross + cfg.eps) / (s.sq_v + s.sq_w - s.cross + cfg.eps));
    } else {
      const double denom = s.abs_v + s.abs_w - s.cross;
      out.push_back(denom == 0.0 ? 1.0 : s.cross / denom);
    }
  }
  return out;
}

template <typename T>
double mre(const Tensor<T>& pred, const Tensor<T>& truth) {
  return mean(mre_per_sample(pred, truth));
}

template <typename T>
double dice(const Tensor<T>& pred, const Tensor<T>& truth, const MetricsConfig& cfg) {
  return mean(dice_per_sample(pred, truth, cfg));
}

template <typename T>
double iou(const Tensor<T>& pred, const Tensor<T>& truth, const MetricsConfig& cfg) {
  return mean(iou_per_sample(pred, truth, cfg));
}

#define MFLOW_INSTANTIATE(T)                                                                                  \
  template std::vector<double> mre_per_sample<T>(const Tensor<T>&, const Tensor<T>&);                         \
  template std::vector<double> dice_per_sample<T>(const Tensor<T>&, const Tensor<T>&, const MetricsConfig&);  \
  template std::vector<double> iou_per_sample<T>(const Tensor<T>&, const Tensor<T>&, const MetricsConfig&);   \
  template double mre<T>(const Tensor<T>&, const Tensor<T>&);                                                 \
  template double dice<T>(const Tensor<T>&, const Tensor<T>&, const MetricsConfig&);                          \
  template double iou<T>(const Tensor<T>&, const Tensor<T>&, const MetricsConfig&);

MFLOW_INSTANTIATE(float)
MFLOW_INSTANTIATE(double)
#undef MFLOW_INSTANTIATE

}  // namespace mflow::metrics
