#pragma once

// Raw convolution kernels on contiguous NCHW buffers. The default path
// lowers to GEMM (im2col + BLAS) and splits the batch across OpenMP threads;
// `reference` holds plain serial loops used as a test oracle and benchmark
// baseline.
//
// Backward kernels accumulate into their outputs (+=).

#include <cstddef>

namespace mflow::kernels {

// Geometry of a cross-correlation: x is n x cin x h x w, weights are
// cout x cin x k x k, y is n x cout x oh x ow.
struct ConvGeom {
  int n = 1;
  int cin = 1;
  int h = 1;
  int w = 1;
  int cout = 1;
  int k = 1;
  int stride = 1;
  int pad = 0;

  int oh() const { return (h + 2 * pad - k) / stride + 1; }
  int ow() const { return (w + 2 * pad - k) / stride + 1; }
  std::size_t in_size() const { return static_cast<std::size_t>(n) * cin * h * w; }
  std::size_t out_size() const { return static_cast<std::size_t>(n) * cout * oh() * ow(); }
  std::size_t weight_size() const { return static_cast<std::size_t>(cout) * cin * k * k; }
  bool valid() const;
};

// y = conv(x, w) + b; b may be null. y is overwritten.
template <typename T>
void conv2d_forward(const ConvGeom& g, const T* x, const T* w, const T* b, T* y);

// dx += conv^T(dy, w)
template <typename T>
void conv2d_backward_input(const ConvGeom& g, const T* dy, const T* w, T* dx);

// dw += dy (x) x, db += sum(dy); db may be null.
template <typename T>
void conv2d_backward_weight(const ConvGeom& g, const T* x, const T* dy, T* dw, T* db);

// Row-major C = alpha op(A) op(B) + beta C.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb, T beta,
          T* c, int ldc);

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeom& g, const T* x, const T* w, const T* b, T* y);

template <typename T>
void conv2d_backward_input(const ConvGeom& g, const T* dy, const T* w, T* dx);

template <typename T>
void conv2d_backward_weight(const ConvGeom& g, const T* x, const T* dy, T* dw, T* db);

}  // namespace reference

// Number of OpenMP workers used by the batched kernels.
int worker_count();
void set_worker_count(int n);

}  // namespace mflow::kernels
