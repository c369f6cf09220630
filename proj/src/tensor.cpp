#include "mflow/tensor.hpp"

#include <cmath>
#include <limits>

#include "mflow/error.hpp"
#include "mflow/kernels.hpp"
#include "mflow/rng.hpp"

namespace mflow::tensor {

namespace {

[[noreturn]] void mismatch(const std::string& what) { throw Error(ErrorKind::ShapeMismatch, what); }

template <typename T>
Graph<T>& graph_of(Var<T> v) {
  if (!v.graph) mismatch("operation on a detached variable");
  return *v.graph;
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph->value(id);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return graph->requires_grad(id);
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::input(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.leaf = true;
  n.requires_grad = track_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::param(Parameter<T>& p) {
  Node n;
  n.external = &p.value;
  n.leaf = true;
  n.requires_grad = p.trainable && track_;
  if (n.requires_grad) n.sink = &p.grad;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const auto& v : inputs) {
    if (v.id < 0) continue;
    if (v.graph != this) mismatch("inputs belong to different graphs");
    n.requires_grad |= nodes_[static_cast<std::size_t>(v.id)].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
const Tensor<T>& Graph<T>::value(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.external ? *n.external : n.value;
}

template <typename T>
Tensor<T>* Graph<T>::grad_buffer(int id) {
  if (id < 0) return nullptr;
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor<T>(value(id).shape());
  return &n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (loss.graph != this) mismatch("loss belongs to another graph");
  if (value(loss.id).size() != 1) {
    throw Error(ErrorKind::NotScalar, "backward needs a scalar, got " + value(loss.id).shape().str());
  }
  if (!requires_grad(loss.id)) return;
  grad_buffer(loss.id)->fill(T(1));
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad, value(i));
    if (n.sink) {
      if (n.sink->shape() != n.grad.shape() || n.sink->empty()) *n.sink = Tensor<T>(n.grad.shape());
      add_into(*n.sink, n.grad);
    }
    // Every consumer of node i has a larger id and has already run, so the
    // intermediate buffers can go.
    if (!n.leaf) {
      n.grad.release();
      if (i != loss.id) n.value.release();
      n.backward = nullptr;
    }
  }
}

// ---- convolution ---------------------------------------------------------

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, int stride, int padding) {
  Graph<T>& g = graph_of(x);
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != xs.c || ws.h != ws.w) mismatch("conv2d weight " + ws.str() + " vs input " + xs.str());
  if (bias && bias->value().size() != static_cast<std::size_t>(ws.n)) mismatch("conv2d bias length");
  const kernels::ConvGeom geom{xs.n, xs.c, xs.h, xs.w, ws.n, ws.h, stride, padding};
  if (!geom.valid()) mismatch("conv2d geometry yields no output for input " + xs.str());
  Tensor<T> y(Shape{xs.n, ws.n, geom.oh(), geom.ow()});
  kernels::conv2d_forward(geom, x.value().data(), weight.value().data(), bias ? bias->value().data() : nullptr,
                          y.data());
  const int xi = x.id, wi = weight.id, bi = bias ? bias->id : -1;
  return g.record(std::move(y), {x, weight, bias.value_or(Var<T>{})},
                  [geom, xi, wi, bi](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
                    if (Tensor<T>* gx = gr.grad_buffer(xi)) {
                      kernels::conv2d_backward_input(geom, gy.data(), gr.value(wi).data(), gx->data());
                    }
                    Tensor<T>* gw = gr.grad_buffer(wi);
                    Tensor<T>* gb = gr.grad_buffer(bi);
                    if (!gw && !gb) return;
                    Tensor<T> scratch;
                    if (!gw) {
                      scratch = Tensor<T>(gr.value(wi).shape());
                      gw = &scratch;
                    }
                    kernels::conv2d_backward_weight(geom, gr.value(xi).data(), gy.data(), gw->data(),
                                                    gb ? gb->data() : nullptr);
                  });
}

template <typename T>
Var<T> conv_transpose2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, int stride, int padding) {
  Graph<T>& g = graph_of(x);
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.n != xs.c || ws.h != ws.w) mismatch("conv_transpose2d weight " + ws.str() + " vs input " + xs.str());
  if (stride < 1 || ws.h % stride != 0) {
    throw Error(ErrorKind::CheckerboardRisk,
                "kernel " + std::to_string(ws.h) + " is not divisible by stride " + std::to_string(stride));
  }
  if (bias && bias->value().size() != static_cast<std::size_t>(ws.c)) mismatch("conv_transpose2d bias length");
  const int oh = (xs.h - 1) * stride - 2 * padding + ws.h;
  const int ow = (xs.w - 1) * stride - 2 * padding + ws.w;
  if (oh < 1 || ow < 1 || padding < 0) mismatch("conv_transpose2d geometry yields no output");
  // The adjoint conv maps the output space back onto x.
  const kernels::ConvGeom adj{xs.n, ws.c, oh, ow, xs.c, ws.h, stride, padding};
  Tensor<T> y(Shape{xs.n, ws.c, oh, ow});
  kernels::conv2d_backward_input(adj, x.value().data(), weight.value().data(), y.data());
  if (bias) {
    const T* b = bias->value().data();
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < ws.c; ++c) {
        T* p = &y.at(n, c, 0, 0);
        for (std::size_t i = 0; i < y.shape().plane(); ++i) p[i] += b[c];
      }
  }
  const int xi = x.id, wi = weight.id, bi = bias ? bias->id : -1;
  return g.record(std::move(y), {x, weight, bias.value_or(Var<T>{})},
                  [adj, xi, wi, bi](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
                    if (Tensor<T>* gx = gr.grad_buffer(xi)) {
                      Tensor<T> tmp(gx->shape());
                      kernels::conv2d_forward(adj, gy.data(), gr.value(wi).data(), static_cast<const T*>(nullptr),
                                              tmp.data());
                      add_into(*gx, tmp);
                    }
                    if (Tensor<T>* gw = gr.grad_buffer(wi)) {
                      kernels::conv2d_backward_weight(adj, gy.data(), gr.value(xi).data(), gw->data(),
                                                      static_cast<T*>(nullptr));
                    }
                    if (Tensor<T>* gb = gr.grad_buffer(bi)) {
                      const Shape s = gy.shape();
                      for (int n = 0; n < s.n; ++n)
                        for (int c = 0; c < s.c; ++c) {
                          const T* p = &gy.at(n, c, 0, 0);
                          double acc = 0;
                          for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
                          (*gb)[static_cast<std::size_t>(c)] += static_cast<T>(acc);
                        }
                    }
                  });
}

// ---- normalisation -------------------------------------------------------

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gain, Var<T> shift, Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                  double momentum, double eps) {
  Graph<T>& g = graph_of(x);
  const Shape s = x.shape();
  const auto C = static_cast<std::size_t>(s.c);
  if (gain.value().size() != C || shift.value().size() != C || running_mean.size() != C || running_var.size() != C) {
    mismatch("batch_norm parameters do not match " + std::to_string(s.c) + " channels");
  }
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(s.n) * plane;
  const Tensor<T>& xv = x.value();
  const T* gam = gain.value().data();
  const T* bet = shift.value().data();
  Tensor<T> y(s);
  Tensor<T> xhat(s);
  std::vector<T> inv(C);

#pragma omp parallel for schedule(static)
  for (int c = 0; c < s.c; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (mode == Mode::train) {
      for (int n = 0; n < s.n; ++n) {
        const T* p = &xv.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) mean += p[i];
      }
      mean /= count;
      for (int n = 0; n < s.n; ++n) {
        const T* p = &xv.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      var /= count;
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] + momentum * mean);
      running_var[c] = static_cast<T>((1 - momentum) * running_var[c] + momentum * unbiased);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const double ic = 1.0 / std::sqrt(var + eps);
    inv[c] = static_cast<T>(ic);
    for (int n = 0; n < s.n; ++n) {
      const T* p = &xv.at(n, c, 0, 0);
      T* h = &xhat.at(n, c, 0, 0);
      T* o = &y.at(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        h[i] = static_cast<T>((p[i] - mean) * ic);
        o[i] = gam[c] * h[i] + bet[c];
      }
    }
  }

  const int xi = x.id, gi = gain.id, bi = shift.id;
  return g.record(std::move(y), {x, gain, shift},
                  [xhat = std::move(xhat), inv = std::move(inv), mode, xi, gi, bi](
                      Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
                    const Shape s = gy.shape();
                    const std::size_t plane = s.plane();
                    const double count = static_cast<double>(s.n) * plane;
                    Tensor<T>* gx = gr.grad_buffer(xi);
                    Tensor<T>* gg = gr.grad_buffer(gi);
                    Tensor<T>* gb = gr.grad_buffer(bi);
                    const T* gam = gr.value(gi).data();
#pragma omp parallel for schedule(static)
                    for (int c = 0; c < s.c; ++c) {
                      double sdy = 0.0, sdyx = 0.0;
                      for (int n = 0; n < s.n; ++n) {
                        const T* d = &gy.at(n, c, 0, 0);
                        const T* h = &xhat.at(n, c, 0, 0);
                        for (std::size_t i = 0; i < plane; ++i) {
                          sdy += d[i];
                          sdyx += static_cast<double>(d[i]) * h[i];
                        }
                      }
                      if (gg) (*gg)[static_cast<std::size_t>(c)] += static_cast<T>(sdyx);
                      if (gb) (*gb)[static_cast<std::size_t>(c)] += static_cast<T>(sdy);
                      if (!gx) continue;
                      const double scale = static_cast<double>(gam[c]) * inv[static_cast<std::size_t>(c)];
                      const double mdy = mode == Mode::train ? sdy / count : 0.0;
                      const double mdyx = mode == Mode::train ? sdyx / count : 0.0;
                      for (int n = 0; n < s.n; ++n) {
                        const T* d = &gy.at(n, c, 0, 0);
                        const T* h = &xhat.at(n, c, 0, 0);
                        T* o = &gx->at(n, c, 0, 0);
                        for (std::size_t i = 0; i < plane; ++i) o[i] += static_cast<T>(scale * (d[i] - mdy - h[i] * mdyx));
                      }
                    }
                  });
}

// ---- activations ---------------------------------------------------------

template <typename T>
Var<T> relu(Var<T> x) {
  Graph<T>& g = graph_of(x);
  Tensor<T> y(x.value());
  for (auto& v : y.values()) v = v > T(0) ? v : T(0);
  const int xi = x.id;
  return g.record(std::move(y), {x}, [xi](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>& out) {
    Tensor<T>* gx = gr.grad_buffer(xi);
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (out[i] > T(0)) (*gx)[i] += gy[i];
  });
}

template <typename T>
Var<T> leaky_relu(Var<T> x, double slope) {
  Graph<T>& g = graph_of(x);
  const T a = static_cast<T>(slope);
  Tensor<T> y(x.value());
  for (auto& v : y.values()) v = v > T(0) ? v : a * v;
  const int xi = x.id;
  return g.record(std::move(y), {x}, [xi, a](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
    Tensor<T>* gx = gr.grad_buffer(xi);
    const Tensor<T>& xv = gr.value(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += xv[i] > T(0) ? gy[i] : a * gy[i];
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Graph<T>& g = graph_of(x);
  Tensor<T> y(x.value());
  for (auto& v : y.values()) v = T(1) / (T(1) + std::exp(-v));
  const int xi = x.id;
  return g.record(std::move(y), {x}, [xi](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>& out) {
    Tensor<T>* gx = gr.grad_buffer(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i] * out[i] * (T(1) - out[i]);
  });
}

// ---- resampling ----------------------------------------------------------

template <typename T>
Var<T> max_pool2x2(Var<T> x) {
  Graph<T>& g = graph_of(x);
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) mismatch("max_pool2x2 needs even spatial dims, got " + s.str());
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<T> y(os);
  std::vector<std::uint32_t> arg(os.numel());
  const Tensor<T>& xv = x.value();
  const int planes = s.n * s.c;
#pragma omp parallel for schedule(static)
  for (int pc = 0; pc < planes; ++pc) {
    const std::size_t ib = static_cast<std::size_t>(pc) * s.plane();
    const std::size_t ob = static_cast<std::size_t>(pc) * os.plane();
    for (int i = 0; i < os.h; ++i)
      for (int j = 0; j < os.w; ++j) {
        std::size_t best = ib + static_cast<std::size_t>(2 * i) * s.w + 2 * j;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj) {
            const std::size_t k = ib + static_cast<std::size_t>(2 * i + di) * s.w + 2 * j + dj;
            if (xv[k] > xv[best]) best = k;
          }
        const std::size_t o = ob + static_cast<std::size_t>(i) * os.w + j;
        y[o] = xv[best];
        arg[o] = static_cast<std::uint32_t>(best);
      }
  }
  const int xi = x.id;
  return g.record(std::move(y), {x}, [xi, arg = std::move(arg)](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
    Tensor<T>* gx = gr.grad_buffer(xi);
    for (std::size_t o = 0; o < gy.size(); ++o) (*gx)[arg[o]] += gy[o];
  });
}

namespace {

// Source taps for one axis of align-corners-false 2x upsampling.
struct Taps {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

Taps upsample_taps(int in) {
  Taps t;
  const int out = 2 * in;
  t.lo.resize(static_cast<std::size_t>(out));
  t.hi.resize(static_cast<std::size_t>(out));
  t.frac.resize(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    const double src = std::max(0.0, (o + 0.5) / 2.0 - 0.5);
    const int i0 = std::min(static_cast<int>(src), in - 1);
    t.lo[static_cast<std::size_t>(o)] = i0;
    t.hi[static_cast<std::size_t>(o)] = std::min(i0 + 1, in - 1);
    t.frac[static_cast<std::size_t>(o)] = src - i0;
  }
  return t;
}

}  // namespace

template <typename T>
Var<T> upsample_bilinear2x(Var<T> x) {
  Graph<T>& g = graph_of(x);
  const Shape s = x.shape();
  const Shape os{s.n, s.c, 2 * s.h, 2 * s.w};
  const Taps ty = upsample_taps(s.h);
  const Taps tx = upsample_taps(s.w);
  Tensor<T> y(os);
  const Tensor<T>& xv = x.value();
  const int planes = s.n * s.c;
#pragma omp parallel for schedule(static)
  for (int pc = 0; pc < planes; ++pc) {
    const T* src = xv.data() + static_cast<std::size_t>(pc) * s.plane();
    T* dst = y.data() + static_cast<std::size_t>(pc) * os.plane();
    for (int i = 0; i < os.h; ++i) {
      const double fy = ty.frac[i];
      const T* r0 = src + static_cast<std::size_t>(ty.lo[i]) * s.w;
      const T* r1 = src + static_cast<std::size_t>(ty.hi[i]) * s.w;
      for (int j = 0; j < os.w; ++j) {
        const double fx = tx.frac[j];
        const double top = (1 - fx) * r0[tx.lo[j]] + fx * r0[tx.hi[j]];
        const double bot = (1 - fx) * r1[tx.lo[j]] + fx * r1[tx.hi[j]];
        dst[static_cast<std::size_t>(i) * os.w + j] = static_cast<T>((1 - fy) * top + fy * bot);
      }
    }
  }
  const int xi = x.id;
  return g.record(std::move(y), {x}, [xi, ty, tx](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
    Tensor<T>* gx = gr.grad_buffer(xi);
    const Shape s = gx->shape();
    const Shape os = gy.shape();
    const int planes = s.n * s.c;
#pragma omp parallel for schedule(static)
    for (int pc = 0; pc < planes; ++pc) {
      T* dst = gx->data() + static_cast<std::size_t>(pc) * s.plane();
      const T* src = gy.data() + static_cast<std::size_t>(pc) * os.plane();
      for (int i = 0; i < os.h; ++i) {
        const double fy = ty.frac[i];
        T* r0 = dst + static_cast<std::size_t>(ty.lo[i]) * s.w;
        T* r1 = dst + static_cast<std::size_t>(ty.hi[i]) * s.w;
        for (int j = 0; j < os.w; ++j) {
          const double fx = tx.frac[j];
          const double d = src[static_cast<std::size_t>(i) * os.w + j];
          r0[tx.lo[j]] += static_cast<T>((1 - fy) * (1 - fx) * d);
          r0[tx.hi[j]] += static_cast<T>((1 - fy) * fx * d);
          r1[tx.lo[j]] += static_cast<T>(fy * (1 - fx) * d);
          r1[tx.hi[j]] += static_cast<T>(fy * fx * d);
        }
      }
    }
  });
}

// ---- reductions ----------------------------------------------------------

template <typename T>
Var<T> gap_spatial(Var<T> x) {
  Graph<T>& g = graph_of(x);
  const Shape s = x.shape();
  Tensor<T> y(Shape{s.n, s.c, 1, 1});
  const Tensor<T>& xv = x.value();
  for (std::size_t pc = 0; pc < y.size(); ++pc) {
    double acc = 0;
    const T* p = xv.data() + pc * s.plane();
    for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
    y[pc] = static_cast<T>(acc / static_cast<double>(s.plane()));
  }
  const int xi = x.id;
  return g.record(std::move(y), {x}, [xi](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
    Tensor<T>* gx = gr.grad_buffer(xi);
    const std::size_t plane = gx->shape().plane();
    for (std::size_t pc = 0; pc < gy.size(); ++pc) {
      const T d = static_cast<T>(gy[pc] / static_cast<double>(plane));
      T* p = gx->data() + pc * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += d;
    }
  });
}

template <typename T>
Var<T> gmp_spatial(Var<T> x) {
  Graph<T>& g = graph_of(x);
  const Shape s = x.shape();
  Tensor<T> y(Shape{s.n, s.c, 1, 1});
  std::vector<std::size_t> arg(y.size());
  const Tensor<T>& xv = x.value();
  for (std::size_t pc = 0; pc < y.size(); ++pc) {
    std::size_t best = pc * s.plane();
    for (std::size_t i = best; i < (pc + 1) * s.plane(); ++i)
      if (xv[i] > xv[best]) best = i;
    y[pc] = xv[best];
    arg[pc] = best;
  }
  const int xi = x.id;
  return g.record(std::move(y), {x}, [xi, arg = std::move(arg)](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
    Tensor<T>* gx = gr.grad_buffer(xi);
    for (std::size_t pc = 0; pc < gy.size(); ++pc) (*gx)[arg[pc]] += gy[pc];
  });
}

template <typename T>
Var<T> avg_over_channels(Var<T> x) {
  Graph<T>& g = graph_of(x);
  const Shape s = x.shape();
  Tensor<T> y(Shape{s.n, 1, s.h, s.w});
  const Tensor<T>& xv = x.value();
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    T* o = &y.at(n, 0, 0, 0);
    for (std::size_t i = 0; i < plane; ++i) {
      double acc = 0;
      for (int c = 0; c < s.c; ++c) acc += xv[xv.offset(n, c, 0, 0) + i];
      o[i] = static_cast<T>(acc / s.c);
    }
  }
  const int xi = x.id;
  return g.record(std::move(y), {x}, [xi](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
    Tensor<T>* gx = gr.grad_buffer(xi);
    const Shape s = gx->shape();
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        T* p = &gx->at(n, c, 0, 0);
        const T* d = &gy.at(n, 0, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) p[i] += d[i] / static_cast<T>(s.c);
      }
  });
}

template <typename T>
Var<T> max_over_channels(Var<T> x) {
  Graph<T>& g = graph_of(x);
  const Shape s = x.shape();
  Tensor<T> y(Shape{s.n, 1, s.h, s.w});
  std::vector<std::size_t> arg(y.size());
  const Tensor<T>& xv = x.value();
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = xv.offset(n, 0, 0, 0) + i;
      for (int c = 1; c < s.c; ++c) {
        const std::size_t k = xv.offset(n, c, 0, 0) + i;
        if (xv[k] > xv[best]) best = k;
      }
      const std::size_t o = static_cast<std::size_t>(n) * plane + i;
      y[o] = xv[best];
      arg[o] = best;
    }
  }
  const int xi = x.id;
  return g.record(std::move(y), {x}, [xi, arg = std::move(arg)](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
    Tensor<T>* gx = gr.grad_buffer(xi);
    for (std::size_t o = 0; o < gy.size(); ++o) (*gx)[arg[o]] += gy[o];
  });
}

// ---- combination ---------------------------------------------------------

template <typename T>
Var<T> concat_channels(Var<T> x, Var<T> y) {
  Graph<T>& g = graph_of(x);
  const Shape a = x.shape();
  const Shape b = y.shape();
  if (a.n != b.n || a.h != b.h || a.w != b.w) mismatch("concat of " + a.str() + " and " + b.str());
  Tensor<T> out(Shape{a.n, a.c + b.c, a.h, a.w});
  const std::size_t sa = static_cast<std::size_t>(a.c) * a.plane();
  const std::size_t sb = static_cast<std::size_t>(b.c) * b.plane();
  for (int n = 0; n < a.n; ++n) {
    std::copy_n(x.value().data() + n * sa, sa, out.data() + n * (sa + sb));
    std::copy_n(y.value().data() + n * sb, sb, out.data() + n * (sa + sb) + sa);
  }
  const int xi = x.id, yi = y.id;
  return g.record(std::move(out), {x, y}, [xi, yi, sa, sb](Graph<T>& gr, const Tensor<T>& go, const Tensor<T>&) {
    const int n_batch = go.shape().n;
    if (Tensor<T>* gx = gr.grad_buffer(xi))
      for (int n = 0; n < n_batch; ++n)
        for (std::size_t i = 0; i < sa; ++i) (*gx)[n * sa + i] += go[n * (sa + sb) + i];
    if (Tensor<T>* gy = gr.grad_buffer(yi))
      for (int n = 0; n < n_batch; ++n)
        for (std::size_t i = 0; i < sb; ++i) (*gy)[n * sb + i] += go[n * (sa + sb) + sa + i];
  });
}

namespace {

struct Broadcast {
  Shape out;
  std::size_t xs[4];
  std::size_t ys[4];
};

Broadcast broadcast(const Shape& a, const Shape& b) {
  const int da[4] = {a.n, a.c, a.h, a.w};
  const int db[4] = {b.n, b.c, b.h, b.w};
  int d[4];
  for (int k = 0; k < 4; ++k) {
    if (da[k] != db[k] && da[k] != 1 && db[k] != 1) mismatch("cannot broadcast " + a.str() + " with " + b.str());
    d[k] = std::max(da[k], db[k]);
  }
  Broadcast bc{{d[0], d[1], d[2], d[3]}, {}, {}};
  std::size_t sx = 1, sy = 1;
  for (int k = 3; k >= 0; --k) {
    bc.xs[k] = da[k] == 1 ? 0 : sx;
    bc.ys[k] = db[k] == 1 ? 0 : sy;
    sx *= static_cast<std::size_t>(da[k]);
    sy *= static_cast<std::size_t>(db[k]);
  }
  return bc;
}

// Visits every output element with the matching input offsets.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  std::size_t o = 0;
  for (int n = 0; n < bc.out.n; ++n)
    for (int c = 0; c < bc.out.c; ++c)
      for (int h = 0; h < bc.out.h; ++h) {
        const std::size_t xb = n * bc.xs[0] + c * bc.xs[1] + h * bc.xs[2];
        const std::size_t yb = n * bc.ys[0] + c * bc.ys[1] + h * bc.ys[2];
        for (int w = 0; w < bc.out.w; ++w, ++o) f(o, xb + w * bc.xs[3], yb + w * bc.ys[3]);
      }
}

}  // namespace

template <typename T>
Var<T> mul(Var<T> x, Var<T> y) {
  Graph<T>& g = graph_of(x);
  const Broadcast bc = broadcast(x.shape(), y.shape());
  Tensor<T> out(bc.out);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& yv = y.value();
  for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = xv[i] * yv[j]; });
  const int xi = x.id, yi = y.id;
  return g.record(std::move(out), {x, y}, [bc, xi, yi](Graph<T>& gr, const Tensor<T>& go, const Tensor<T>&) {
    Tensor<T>* gx = gr.grad_buffer(xi);
    Tensor<T>* gy = gr.grad_buffer(yi);
    const Tensor<T>& xv = gr.value(xi);
    const Tensor<T>& yv = gr.value(yi);
    for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (gx) (*gx)[i] += go[o] * yv[j];
      if (gy) (*gy)[j] += go[o] * xv[i];
    });
  });
}

template <typename T>
Var<T> add(Var<T> x, Var<T> y) {
  Graph<T>& g = graph_of(x);
  const Broadcast bc = broadcast(x.shape(), y.shape());
  Tensor<T> out(bc.out);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& yv = y.value();
  for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = xv[i] + yv[j]; });
  const int xi = x.id, yi = y.id;
  return g.record(std::move(out), {x, y}, [bc, xi, yi](Graph<T>& gr, const Tensor<T>& go, const Tensor<T>&) {
    Tensor<T>* gx = gr.grad_buffer(xi);
    Tensor<T>* gy = gr.grad_buffer(yi);
    for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (gx) (*gx)[i] += go[o];
      if (gy) (*gy)[j] += go[o];
    });
  });
}

// ---- dense, dropout, scalars ---------------------------------------------

template <typename T>
Var<T> dense(Var<T> x, Var<T> weight, std::optional<Var<T>> bias) {
  Graph<T>& g = graph_of(x);
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  const int fin = xs.c * xs.h * xs.w;
  const int fout = ws.n;
  if (ws.c * ws.h * ws.w != fin) mismatch("dense weight " + ws.str() + " vs input " + xs.str());
  if (bias && bias->value().size() != static_cast<std::size_t>(fout)) mismatch("dense bias length");
  Tensor<T> y(Shape{xs.n, fout, 1, 1});
  const T* xv = x.value().data();
  const T* wv = weight.value().data();
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < fout; ++o) {
      double acc = bias ? bias->value()[static_cast<std::size_t>(o)] : 0.0;
      for (int i = 0; i < fin; ++i) acc += static_cast<double>(wv[o * fin + i]) * xv[n * fin + i];
      y[static_cast<std::size_t>(n) * fout + o] = static_cast<T>(acc);
    }
  const int xi = x.id, wi = weight.id, bi = bias ? bias->id : -1;
  return g.record(std::move(y), {x, weight, bias.value_or(Var<T>{})},
                  [xi, wi, bi, fin, fout](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
                    const int batch = gy.shape().n;
                    const T* xv = gr.value(xi).data();
                    const T* wv = gr.value(wi).data();
                    Tensor<T>* gx = gr.grad_buffer(xi);
                    Tensor<T>* gw = gr.grad_buffer(wi);
                    Tensor<T>* gb = gr.grad_buffer(bi);
                    for (int n = 0; n < batch; ++n)
                      for (int o = 0; o < fout; ++o) {
                        const T d = gy[static_cast<std::size_t>(n) * fout + o];
                        if (gb) (*gb)[static_cast<std::size_t>(o)] += d;
                        for (int i = 0; i < fin; ++i) {
                          if (gx) (*gx)[static_cast<std::size_t>(n) * fin + i] += d * wv[o * fin + i];
                          if (gw) (*gw)[static_cast<std::size_t>(o) * fin + i] += d * xv[n * fin + i];
                        }
                      }
                  });
}

template <typename T>
Var<T> dropout(Var<T> x, double rate, Mode mode, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error(ErrorKind::InvalidParams, "dropout rate must lie in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return x;
  Graph<T>& g = graph_of(x);
  Rng rng(seed);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> y(x.value());
  std::vector<T> keep(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    keep[i] = rng.uniform() < rate ? T(0) : scale;
    y[i] *= keep[i];
  }
  const int xi = x.id;
  return g.record(std::move(y), {x}, [xi, keep = std::move(keep)](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
    Tensor<T>* gx = gr.grad_buffer(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i] * keep[i];
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  Graph<T>& g = graph_of(x);
  double acc = 0;
  for (T v : x.value().values()) acc += v;
  Tensor<T> y(Shape{1, 1, 1, 1}, static_cast<T>(acc));
  const int xi = x.id;
  return g.record(std::move(y), {x}, [xi](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
    Tensor<T>* gx = gr.grad_buffer(xi);
    for (auto& v : gx->values()) v += gy[0];
  });
}

template <typename T>
Var<T> scaled_l1(Var<T> pred, Var<T> truth) {
  Graph<T>& g = graph_of(pred);
  const Shape s = pred.shape();
  if (s != truth.shape()) mismatch("loss operands " + s.str() + " and " + truth.shape().str());
  const double denom = 2.0 * s.n * s.plane();
  const Tensor<T>& p = pred.value();
  const Tensor<T>& t = truth.value();
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(static_cast<double>(p[i]) - t[i]);
  Tensor<T> y(Shape{1, 1, 1, 1}, static_cast<T>(acc / denom));
  const int pi = pred.id, ti = truth.id;
  return g.record(std::move(y), {pred, truth}, [pi, ti, denom](Graph<T>& gr, const Tensor<T>& gy, const Tensor<T>&) {
    const Tensor<T>& p = gr.value(pi);
    const Tensor<T>& t = gr.value(ti);
    Tensor<T>* gp = gr.grad_buffer(pi);
    Tensor<T>* gt = gr.grad_buffer(ti);
    const T scale = static_cast<T>(gy[0] / denom);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T sgn = p[i] > t[i] ? T(1) : (p[i] < t[i] ? T(-1) : T(0));
      if (gp) (*gp)[i] += sgn * scale;
      if (gt) (*gt)[i] -= sgn * scale;
    }
  });
}

#define MFLOW_INSTANTIATE(T)                                                                                 \
  template struct Var<T>;                                                                                    \
  template class Graph<T>;                                                                                   \
  template Var<T> conv2d<T>(Var<T>, Var<T>, std::optional<Var<T>>, int, int);                                \
  template Var<T> conv_transpose2d<T>(Var<T>, Var<T>, std::optional<Var<T>>, int, int);                      \
  template Var<T> batch_norm<T>(Var<T>, Var<T>, Var<T>, Tensor<T>&, Tensor<T>&, Mode, double, double);       \
  template Var<T> relu<T>(Var<T>);                                                                           \
  template Var<T> leaky_relu<T>(Var<T>, double);                                                             \
  template Var<T> sigmoid<T>(Var<T>);                                                                        \
  template Var<T> max_pool2x2<T>(Var<T>);                                                                    \
  template Var<T> upsample_bilinear2x<T>(Var<T>);                                                            \
  template Var<T> gap_spatial<T>(Var<T>);                                                                    \
  template Var<T> gmp_spatial<T>(Var<T>);                                                                    \
  template Var<T> avg_over_channels<T>(Var<T>);                                                              \
  template Var<T> max_over_channels<T>(Var<T>);                                                              \
  template Var<T> concat_channels<T>(Var<T>, Var<T>);                                                        \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                                    \
  template Var<T> add<T>(Var<T>, Var<T>);                                                                    \
  template Var<T> dense<T>(Var<T>, Var<T>, std::optional<Var<T>>);                                           \
  template Var<T> dropout<T>(Var<T>, double, Mode, std::uint64_t);                                           \
  template Var<T> sum<T>(Var<T>);                                                                            \
  template Var<T> scaled_l1<T>(Var<T>, Var<T>);

MFLOW_INSTANTIATE(float)
MFLOW_INSTANTIATE(double)
#undef MFLOW_INSTANTIATE

}  // namespace mflow::tensor
