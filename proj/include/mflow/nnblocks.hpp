#pragma once

// Layers and composite blocks. Blocks do not own their weights: they hold
// pointers into a ParamStore, which keeps parameters in build order (the
// order checkpoints use).

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mflow/rng.hpp"
#include "mflow/tensor.hpp"

namespace mflow::nn {

using tensor::Graph;
using tensor::Mode;
using tensor::Parameter;
using tensor::Shape;
using tensor::Tensor;
using tensor::Var;

// Per-forward settings shared by every layer.
struct Context {
  Mode mode = Mode::eval;
  std::uint64_t seed = 0;  // dropout stream; each layer derives its own
};

template <typename T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : rng_(seed) {}

  // Uniform in +-1/sqrt(fan_in) (Kaiming-uniform with a = sqrt(5)).
  Parameter<T>* weight(const std::string& name, Shape shape, int fan_in);
  // Uniform in +-1/sqrt(fan_in).
  Parameter<T>* bias(const std::string& name, int count, int fan_in);
  Parameter<T>* constant(const std::string& name, Shape shape, T value, bool trainable);

  std::vector<Parameter<T>*> all() const;
  std::size_t size() const { return params_.size(); }
  std::uint64_t next_layer_id() { return layer_ids_++; }

 private:
  Parameter<T>* push(const std::string& name, Tensor<T> value, bool trainable);

  Rng rng_;
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::uint64_t layer_ids_ = 0;
};

template <typename T>
struct Conv2d {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  int stride = 1;
  int padding = 0;

  Conv2d() = default;
  Conv2d(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k, int stride, int padding);
  Var<T> operator()(Var<T> x) const;
};

// Weight layout (C_in, C_out, k, k).
template <typename T>
struct ConvTranspose2d {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  int stride = 2;
  int padding = 0;

  ConvTranspose2d() = default;
  ConvTranspose2d(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k, int stride, int padding);
  Var<T> operator()(Var<T> x) const;
};

template <typename T>
struct BatchNorm2d {
  Parameter<T>* gain = nullptr;
  Parameter<T>* shift = nullptr;
  Parameter<T>* running_mean = nullptr;
  Parameter<T>* running_var = nullptr;

  BatchNorm2d() = default;
  BatchNorm2d(ParamStore<T>& ps, const std::string& name, int channels);
  Var<T> operator()(Var<T> x, Mode mode) const;
};

template <typename T>
struct Dense {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  Dense() = default;
  Dense(ParamStore<T>& ps, const std::string& name, int fin, int fout);
  Var<T> operator()(Var<T> x) const;
};

// Channel attention: sigma(MLP(GAP(F)) + MLP(GMP(F))) with one shared MLP.
template <typename T>
struct CAM {
  static constexpr int kReduction = 16;
  static constexpr int kMinHidden = 4;
  Dense<T> fc1;
  Dense<T> fc2;

  CAM() = default;
  CAM(ParamStore<T>& ps, const std::string& name, int channels);
  static int hidden_width(int channels);
  Var<T> gate(Var<T> f) const;  // N x C x 1 x 1
  Var<T> operator()(Var<T> f) const;
};

// Spatial attention: sigma(conv7x7([GAP_c(F), GMP_c(F)])).
template <typename T>
struct SAM {
  Conv2d<T> conv;

  SAM() = default;
  SAM(ParamStore<T>& ps, const std::string& name);
  Var<T> gate(Var<T> f) const;  // N x 1 x H x W
  Var<T> operator()(Var<T> f) const;
};

// MaxPool(ReLU(BN(conv3x3(x)))).
template <typename T>
struct DownBlock {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;

  DownBlock() = default;
  DownBlock(ParamStore<T>& ps, const std::string& name, int cin, int cout);
  Var<T> operator()(Var<T> x, Mode mode) const;
};

// ReLU(BN(conv3x3(x))).
template <typename T>
struct Bottleneck {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;

  Bottleneck() = default;
  Bottleneck(ParamStore<T>& ps, const std::string& name, int cin, int cout);
  Var<T> operator()(Var<T> x, Mode mode) const;
};

// Transposed-conv upsample to the skip's channel count, concatenation with
// the skip, then ReLU(BN(conv3x3)).
template <typename T>
struct UpBlock {
  ConvTranspose2d<T> up;
  Conv2d<T> conv;
  BatchNorm2d<T> bn;

  UpBlock() = default;
  UpBlock(ParamStore<T>& ps, const std::string& name, int cin, int skip_channels, int cout, int up_kernel = 2);
  Var<T> operator()(Var<T> x, Var<T> skip, Mode mode) const;
};

struct TNetBlockSpec {
  enum class Act : std::uint8_t { none, leaky, relu };
  int factor = 1;  // output channels = factor * base width
  int kernel = 4;
  int stride = 2;
  Act act = Act::none;
  bool batch_norm = false;
  bool upsample = false;  // bilinear 2x after the block (decoder)
  bool dropout = true;

  void validate() const;
};

// act -> conv -> BN -> dropout(0.01), optionally followed by up().
template <typename T>
struct TNetBlock {
  static constexpr double kDropout = 0.01;
  TNetBlockSpec spec;
  Conv2d<T> conv;
  BatchNorm2d<T> bn;
  std::uint64_t layer_id = 0;

  TNetBlock() = default;
  TNetBlock(ParamStore<T>& ps, const std::string& name, const TNetBlockSpec& spec, int cin, int cout);
  Var<T> operator()(Var<T> x, const Context& ctx) const;
};

}  // namespace mflow::nn
