#pragma once

#include <string_view>
#include <vector>

#include "mflow/tensor.hpp"

namespace mflow::metrics {

using tensor::Tensor;

enum class Variant : std::uint8_t { soft_squared, paper_literal };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);  // InvalidParams on unknown names

struct MetricsConfig {
  double eps = 1e-6;
  Variant variant = Variant::soft_squared;

  void validate() const;
};

// Each sample (all channels, full grid) is scored separately.
// soft_squared: Dice = (2 S|VW| + e) / (S V^2 + S W^2 + e),
//               IoU = (S|VW| + e) / (S V^2 + S W^2 - S|VW| + e).
// paper_literal: Dice = (2 S|VW| + e) / (S|V| + e),
//                IoU = S|VW| / (S|V| + S|W| - S|VW|), 1 when that is 0/0.
// V is the truth, W the prediction.
template <typename T>
std::vector<double> mre_per_sample(const Tensor<T>& pred, const Tensor<T>& truth);
template <typename T>
std::vector<double> dice_per_sample(const Tensor<T>& pred, const Tensor<T>& truth, const MetricsConfig& cfg);
template <typename T>
std::vector<double> iou_per_sample(const Tensor<T>& pred, const Tensor<T>& truth, const MetricsConfig& cfg);

// Batch means of the above. mre throws ZeroReference when some sample's
// truth is identically zero.
template <typename T>
double mre(const Tensor<T>& pred, const Tensor<T>& truth);
template <typename T>
double dice(const Tensor<T>& pred, const Tensor<T>& truth, const MetricsConfig& cfg = {});
template <typename T>
double iou(const Tensor<T>& pred, const Tensor<T>& truth, const MetricsConfig& cfg = {});

}  // namespace mflow::metrics
