#pragma once

// Dense NCHW tensors and a tape-based reverse-mode differentiation engine.
// Everything is templated on the element type: float for training, double
// for finite-difference checks.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mflow/error.hpp"

namespace mflow::tensor {

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const { return static_cast<std::size_t>(n) * c * h * w; }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::string str() const;
  friend bool operator==(const Shape&, const Shape&) = default;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) throw Error(ErrorKind::ShapeMismatch, "data length does not match " + shape_.str());
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void release() {
    data_.clear();
    data_.shrink_to_fit();
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

enum class Mode : std::uint8_t { train, eval };

// A named model parameter. Non-trainable entries (batch-norm running
// statistics) are state that is saved with the model but never optimised.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  void zero_grad() {
    if (grad.shape() != value.shape() || grad.empty()) grad = Tensor<T>(value.shape());
    else grad.fill(T(0));
  }
};

template <typename T>
class Graph;

template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

// Append-only record of one forward pass. Node ids are topologically
// ordered by construction, so backward is a single reverse sweep.
template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Tensor<T>& grad_out, const Tensor<T>& out)>;

  Graph() = default;
  // With tracking off no node requires a gradient, so nothing is saved for
  // backward (inference).
  explicit Graph(bool track_gradients) : track_(track_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> input(Tensor<T> value);  // leaf with a gradient buffer
  Var<T> param(Parameter<T>& p);  // gradient accumulates into p.grad

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward);

  const Tensor<T>& value(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  // Gradient buffer of node `id`, allocated as zeros on first use; null when
  // the node does not require a gradient.
  Tensor<T>* grad_buffer(int id);

  // Gradient of a leaf after backward(); empty if none reached it.
  const Tensor<T>& grad(Var<T> v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

  // Throws NotScalar unless `loss` holds exactly one element.
  void backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Tensor<T>* sink = nullptr;
    bool requires_grad = false;
    bool leaf = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  bool track_ = true;
};

// ---- operations ---------------------------------------------------------

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, int stride, int padding);

// weight layout: (C_in, C_out, k, k). Throws CheckerboardRisk when k % stride != 0.
template <typename T>
Var<T> conv_transpose2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, int stride, int padding);

// Running statistics are updated in train mode (unbiased variance).
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gain, Var<T> shift, Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                  double momentum = 0.1, double eps = 1e-5);

template <typename T>
Var<T> relu(Var<T> x);
template <typename T>
Var<T> leaky_relu(Var<T> x, double slope = 0.2);
template <typename T>
Var<T> sigmoid(Var<T> x);

template <typename T>
Var<T> max_pool2x2(Var<T> x);
// Align-corners-false bilinear interpolation to twice the spatial size.
template <typename T>
Var<T> upsample_bilinear2x(Var<T> x);

template <typename T>
Var<T> gap_spatial(Var<T> x);
template <typename T>
Var<T> gmp_spatial(Var<T> x);
template <typename T>
Var<T> avg_over_channels(Var<T> x);
template <typename T>
Var<T> max_over_channels(Var<T> x);

template <typename T>
Var<T> concat_channels(Var<T> x, Var<T> y);
// Broadcasting elementwise ops: each dimension must match or be 1.
template <typename T>
Var<T> mul(Var<T> x, Var<T> y);
template <typename T>
Var<T> add(Var<T> x, Var<T> y);

// x: N x F (features = C*H*W), weight: (F_out, F_in, 1, 1), bias: F_out.
// Output N x F_out x 1 x 1.
template <typename T>
Var<T> dense(Var<T> x, Var<T> weight, std::optional<Var<T>> bias);

template <typename T>
Var<T> dropout(Var<T> x, double rate, Mode mode, std::uint64_t seed);

template <typename T>
Var<T> sum(Var<T> x);

// sum |pred - truth| / (2 N H W): the L1 losses with their 1/(2 m nx ny)
// prefactor. For two channels this is the mean absolute error.
template <typename T>
Var<T> scaled_l1(Var<T> pred, Var<T> truth);

}  // namespace mflow::tensor
