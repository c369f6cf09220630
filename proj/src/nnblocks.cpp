#include "mflow/nnblocks.hpp"

#include <cmath>

#include "mflow/error.hpp"

namespace mflow::nn {

namespace ts = mflow::tensor;

template <typename T>
Parameter<T>* ParamStore<T>::push(const std::string& name, Tensor<T> value, bool trainable) {
  auto p = std::make_unique<Parameter<T>>();
  p->name = name;
  p->value = std::move(value);
  p->trainable = trainable;
  params_.push_back(std::move(p));
  return params_.back().get();
}

template <typename T>
Parameter<T>* ParamStore<T>::weight(const std::string& name, Shape shape, int fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor<T> v(shape);
  for (auto& x : v.values()) x = static_cast<T>(rng_.uniform(-bound, bound));
  return push(name, std::move(v), true);
}

template <typename T>
Parameter<T>* ParamStore<T>::bias(const std::string& name, int count, int fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor<T> v(Shape{count, 1, 1, 1});
  for (auto& x : v.values()) x = static_cast<T>(rng_.uniform(-bound, bound));
  return push(name, std::move(v), true);
}

template <typename T>
Parameter<T>* ParamStore<T>::constant(const std::string& name, Shape shape, T value, bool trainable) {
  return push(name, Tensor<T>(shape, value), trainable);
}

template <typename T>
std::vector<Parameter<T>*> ParamStore<T>::all() const {
  std::vector<Parameter<T>*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename T>
Conv2d<T>::Conv2d(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k, int stride, int padding)
    : stride(stride), padding(padding) {
  const int fan_in = cin * k * k;
  weight = ps.weight(name + ".weight", Shape{cout, cin, k, k}, fan_in);
  bias = ps.bias(name + ".bias", cout, fan_in);
}

template <typename T>
Var<T> Conv2d<T>::operator()(Var<T> x) const {
  Graph<T>& g = *x.graph;
  return ts::conv2d(x, g.param(*weight), std::optional<Var<T>>(g.param(*bias)), stride, padding);
}

template <typename T>
ConvTranspose2d<T>::ConvTranspose2d(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k, int stride,
                                    int padding)
    : stride(stride), padding(padding) {
  if (stride < 1 || k % stride != 0) {
    throw Error(ErrorKind::CheckerboardRisk,
                name + ": kernel " + std::to_string(k) + " not divisible by stride " + std::to_string(stride));
  }
  // Fan-in taken from dim 1 of the (C_in, C_out, k, k) layout.
  const int fan_in = cout * k * k;
  weight = ps.weight(name + ".weight", Shape{cin, cout, k, k}, fan_in);
  bias = ps.bias(name + ".bias", cout, fan_in);
}

template <typename T>
Var<T> ConvTranspose2d<T>::operator()(Var<T> x) const {
  Graph<T>& g = *x.graph;
  return ts::conv_transpose2d(x, g.param(*weight), std::optional<Var<T>>(g.param(*bias)), stride, padding);
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(ParamStore<T>& ps, const std::string& name, int channels) {
  const Shape s{channels, 1, 1, 1};
  gain = ps.constant(name + ".gain", s, T(1), true);
  shift = ps.constant(name + ".shift", s, T(0), true);
  running_mean = ps.constant(name + ".running_mean", s, T(0), false);
  running_var = ps.constant(name + ".running_var", s, T(1), false);
}

template <typename T>
Var<T> BatchNorm2d<T>::operator()(Var<T> x, Mode mode) const {
  Graph<T>& g = *x.graph;
  return ts::batch_norm(x, g.param(*gain), g.param(*shift), running_mean->value, running_var->value, mode);
}

template <typename T>
Dense<T>::Dense(ParamStore<T>& ps, const std::string& name, int fin, int fout) {
  weight = ps.weight(name + ".weight", Shape{fout, fin, 1, 1}, fin);
  bias = ps.bias(name + ".bias", fout, fin);
}

template <typename T>
Var<T> Dense<T>::operator()(Var<T> x) const {
  Graph<T>& g = *x.graph;
  return ts::dense(x, g.param(*weight), std::optional<Var<T>>(g.param(*bias)));
}

template <typename T>
int CAM<T>::hidden_width(int channels) {
  return std::max(channels / kReduction, kMinHidden);
}

template <typename T>
CAM<T>::CAM(ParamStore<T>& ps, const std::string& name, int channels)
    : fc1(ps, name + ".fc1", channels, hidden_width(channels)), fc2(ps, name + ".fc2", hidden_width(channels), channels) {}

template <typename T>
Var<T> CAM<T>::gate(Var<T> f) const {
  const int c = static_cast<int>(fc1.weight->value.shape().c);
  if (f.shape().c != c) {
    throw Error(ErrorKind::ShapeMismatch, "CAM expects " + std::to_string(c) + " channels, got " + f.shape().str());
  }
  const auto mlp = [&](Var<T> v) { return fc2(ts::relu(fc1(v))); };
  return ts::sigmoid(ts::add(mlp(ts::gap_spatial(f)), mlp(ts::gmp_spatial(f))));
}

template <typename T>
Var<T> CAM<T>::operator()(Var<T> f) const {
  return ts::mul(gate(f), f);
}

template <typename T>
SAM<T>::SAM(ParamStore<T>& ps, const std::string& name) : conv(ps, name + ".conv", 2, 1, 7, 1, 3) {}

template <typename T>
Var<T> SAM<T>::gate(Var<T> f) const {
  return ts::sigmoid(conv(ts::concat_channels(ts::avg_over_channels(f), ts::max_over_channels(f))));
}

template <typename T>
Var<T> SAM<T>::operator()(Var<T> f) const {
  return ts::mul(gate(f), f);
}

template <typename T>
DownBlock<T>::DownBlock(ParamStore<T>& ps, const std::string& name, int cin, int cout)
    : conv(ps, name + ".conv", cin, cout, 3, 1, 1), bn(ps, name + ".bn", cout) {}

template <typename T>
Var<T> DownBlock<T>::operator()(Var<T> x, Mode mode) const {
  return ts::max_pool2x2(ts::relu(bn(conv(x), mode)));
}

template <typename T>
Bottleneck<T>::Bottleneck(ParamStore<T>& ps, const std::string& name, int cin, int cout)
    : conv(ps, name + ".conv", cin, cout, 3, 1, 1), bn(ps, name + ".bn", cout) {}

template <typename T>
Var<T> Bottleneck<T>::operator()(Var<T> x, Mode mode) const {
  return ts::relu(bn(conv(x), mode));
}

template <typename T>
UpBlock<T>::UpBlock(ParamStore<T>& ps, const std::string& name, int cin, int skip_channels, int cout, int up_kernel)
    : up(ps, name + ".up", cin, skip_channels, up_kernel, 2, (up_kernel - 2) / 2),
      conv(ps, name + ".conv", 2 * skip_channels, cout, 3, 1, 1),
      bn(ps, name + ".bn", cout) {}

template <typename T>
Var<T> UpBlock<T>::operator()(Var<T> x, Var<T> skip, Mode mode) const {
  const Var<T> u = up(x);
  if (u.shape().h != skip.shape().h || u.shape().w != skip.shape().w) {
    throw Error(ErrorKind::ShapeMismatch, "upsampled " + u.shape().str() + " vs skip " + skip.shape().str());
  }
  return ts::relu(bn(conv(ts::concat_channels(u, skip)), mode));
}

void TNetBlockSpec::validate() const {
  if (factor < 1 || kernel < 1 || (stride != 1 && stride != 2)) {
    throw Error(ErrorKind::InvalidSpec, "T-Net block needs factor >= 1, kernel >= 1, stride 1 or 2");
  }
}

template <typename T>
TNetBlock<T>::TNetBlock(ParamStore<T>& ps, const std::string& name, const TNetBlockSpec& s, int cin, int cout)
    : spec(s), layer_id(ps.next_layer_id()) {
  spec.validate();
  // Stride-2 encoder convs with even kernels pad by k/2 - 1 so they halve
  // exactly; odd decoder kernels pad by k/2 to keep the size.
  const int pad = spec.kernel % 2 == 1 ? spec.kernel / 2 : spec.kernel / 2 - 1;
  conv = Conv2d<T>(ps, name + ".conv", cin, cout, spec.kernel, spec.stride, pad);
  if (spec.batch_norm) bn = BatchNorm2d<T>(ps, name + ".bn", cout);
}

template <typename T>
Var<T> TNetBlock<T>::operator()(Var<T> x, const Context& ctx) const {
  using Act = TNetBlockSpec::Act;
  if (spec.act == Act::leaky) x = ts::leaky_relu(x, 0.2);
  else if (spec.act == Act::relu) x = ts::relu(x);
  x = conv(x);
  if (spec.batch_norm) x = bn(x, ctx.mode);
  if (spec.dropout) x = ts::dropout(x, kDropout, ctx.mode, derive_seed(ctx.seed, layer_id));
  if (spec.upsample) x = ts::upsample_bilinear2x(x);
  return x;
}

#define MFLOW_INSTANTIATE(T)         \
  template class ParamStore<T>;      \
  template struct Conv2d<T>;         \
  template struct ConvTranspose2d<T>; \
  template struct BatchNorm2d<T>;    \
  template struct Dense<T>;          \
  template struct CAM<T>;            \
  template struct SAM<T>;            \
  template struct DownBlock<T>;      \
  template struct Bottleneck<T>;     \
  template struct UpBlock<T>;        \
  template struct TNetBlock<T>;

MFLOW_INSTANTIATE(float)
MFLOW_INSTANTIATE(double)
#undef MFLOW_INSTANTIATE

}  // namespace mflow::nn
