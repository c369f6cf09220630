#include "mflow/kernels.hpp"

#include <cblas.h>
#include <omp.h>

#include <algorithm>
#include <atomic>
#include <vector>

namespace mflow::kernels {

namespace {

std::atomic<int> g_workers{0};

// OpenBLAS runs single-threaded: parallelism lives in the batch loop, which
// keeps results independent of BLAS-internal scheduling.
struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit blas_init;

template <typename T>
void im2col(const ConvGeom& g, const T* x, T* cols) {
  const int oh = g.oh(), ow = g.ow();
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* xc = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        T* row = cols + (static_cast<std::size_t>(ci) * g.k * g.k + ki * g.k + kj) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          T* out = row + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + ow, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * g.w;
          if (g.stride == 1) {
            const int shift = kj - g.pad;
            const int lo = std::clamp(-shift, 0, ow);
            const int hi = std::clamp(g.w - shift, lo, ow);
            std::fill(out, out + lo, T(0));
            std::copy(src + lo + shift, src + hi + shift, out + lo);
            std::fill(out + hi, out + ow, T(0));
          } else {
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * g.stride - g.pad + kj;
              out[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeom& g, const T* cols, T* x) {
  const int oh = g.oh(), ow = g.ow();
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < g.cin; ++ci) {
    T* xc = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row = cols + (static_cast<std::size_t>(ci) * g.k * g.k + ki * g.k + kj) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = xc + static_cast<std::size_t>(iy) * g.w;
          const T* in = row + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

bool pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

}  // namespace

bool ConvGeom::valid() const {
  return n >= 1 && cin >= 1 && cout >= 1 && k >= 1 && stride >= 1 && pad >= 0 && h + 2 * pad >= k &&
         w + 2 * pad >= k;
}

int worker_count() {
  const int n = g_workers.load();
  return n > 0 ? n : omp_get_max_threads();
}

void set_worker_count(int n) { g_workers.store(std::max(n, 1)); }

template <>
void gemm<float>(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda, const float* b, int ldb,
                 float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda,
              b, ldb, beta, c, ldc);
}

template <>
void gemm<double>(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda, const double* b,
                  int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda,
              b, ldb, beta, c, ldc);
}

template <typename T>
void conv2d_forward(const ConvGeom& g, const T* x, const T* w, const T* b, T* y) {
  const int P = g.oh() * g.ow();
  const int K = g.cin * g.k * g.k;
  const std::size_t xs = static_cast<std::size_t>(g.cin) * g.h * g.w;
  const std::size_t ys = static_cast<std::size_t>(g.cout) * P;
#pragma omp parallel num_threads(worker_count())
  {
    std::vector<T> cols(pointwise(g) ? 0 : static_cast<std::size_t>(K) * P);
#pragma omp for schedule(static)
    for (int n = 0; n < g.n; ++n) {
      const T* src = x + n * xs;
      if (!pointwise(g)) {
        im2col(g, src, cols.data());
        src = cols.data();
      }
      T* out = y + n * ys;
      gemm<T>(false, false, g.cout, P, K, T(1), w, K, src, P, T(0), out, P);
      if (b) {
        for (int co = 0; co < g.cout; ++co) {
          T* row = out + static_cast<std::size_t>(co) * P;
          const T bias = b[co];
          for (int p = 0; p < P; ++p) row[p] += bias;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeom& g, const T* dy, const T* w, T* dx) {
  const int P = g.oh() * g.ow();
  const int K = g.cin * g.k * g.k;
  const std::size_t xs = static_cast<std::size_t>(g.cin) * g.h * g.w;
  const std::size_t ys = static_cast<std::size_t>(g.cout) * P;
#pragma omp parallel num_threads(worker_count())
  {
    std::vector<T> cols(pointwise(g) ? 0 : static_cast<std::size_t>(K) * P);
#pragma omp for schedule(static)
    for (int n = 0; n < g.n; ++n) {
      if (pointwise(g)) {
        gemm<T>(true, false, K, P, g.cout, T(1), w, K, dy + n * ys, P, T(1), dx + n * xs, P);
      } else {
        gemm<T>(true, false, K, P, g.cout, T(1), w, K, dy + n * ys, P, T(0), cols.data(), P);
        col2im_add(g, cols.data(), dx + n * xs);
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeom& g, const T* x, const T* dy, T* dw, T* db) {
  const int P = g.oh() * g.ow();
  const int K = g.cin * g.k * g.k;
  const std::size_t xs = static_cast<std::size_t>(g.cin) * g.h * g.w;
  const std::size_t ys = static_cast<std::size_t>(g.cout) * P;
  const int workers = std::min(worker_count(), g.n);
  // Each worker accumulates a private partial sum; partials are reduced in
  // worker order so the result depends only on the worker count.
  std::vector<std::vector<T>> partial_w(static_cast<std::size_t>(workers));
  std::vector<std::vector<T>> partial_b(static_cast<std::size_t>(workers));
#pragma omp parallel num_threads(workers)
  {
    const int t = omp_get_thread_num();
    T* acc_w = dw;
    T* acc_b = db;
    if (workers > 1) {
      partial_w[t].assign(g.weight_size(), T(0));
      partial_b[t].assign(static_cast<std::size_t>(g.cout), T(0));
      acc_w = partial_w[t].data();
      acc_b = partial_b[t].data();
    }
    std::vector<T> cols(pointwise(g) ? 0 : static_cast<std::size_t>(K) * P);
#pragma omp for schedule(static)
    for (int n = 0; n < g.n; ++n) {
      const T* src = x + n * xs;
      if (!pointwise(g)) {
        im2col(g, src, cols.data());
        src = cols.data();
      }
      const T* d = dy + n * ys;
      gemm<T>(false, true, g.cout, K, P, T(1), d, P, src, P, T(1), acc_w, K);
      if (acc_b) {
        for (int co = 0; co < g.cout; ++co) {
          const T* row = d + static_cast<std::size_t>(co) * P;
          T s = 0;
          for (int p = 0; p < P; ++p) s += row[p];
          acc_b[co] += s;
        }
      }
    }
  }
  if (workers > 1) {
    for (int t = 0; t < workers; ++t) {
      for (std::size_t i = 0; i < g.weight_size(); ++i) dw[i] += partial_w[t][i];
      if (db)
        for (int co = 0; co < g.cout; ++co) db[co] += partial_b[t][co];
    }
  }
}

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeom& g, const T* x, const T* w, const T* b, T* y) {
  const int oh = g.oh(), ow = g.ow();
  for (int n = 0; n < g.n; ++n)
    for (int co = 0; co < g.cout; ++co)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          T s = b ? b[co] : T(0);
          for (int ci = 0; ci < g.cin; ++ci)
            for (int ki = 0; ki < g.k; ++ki) {
              const int iy = oy * g.stride - g.pad + ki;
              if (iy < 0 || iy >= g.h) continue;
              for (int kj = 0; kj < g.k; ++kj) {
                const int ix = ox * g.stride - g.pad + kj;
                if (ix < 0 || ix >= g.w) continue;
                s += w[((static_cast<std::size_t>(co) * g.cin + ci) * g.k + ki) * g.k + kj] *
                     x[((static_cast<std::size_t>(n) * g.cin + ci) * g.h + iy) * g.w + ix];
              }
            }
          y[((static_cast<std::size_t>(n) * g.cout + co) * oh + oy) * ow + ox] = s;
        }
}

template <typename T>
void conv2d_backward_input(const ConvGeom& g, const T* dy, const T* w, T* dx) {
  const int oh = g.oh(), ow = g.ow();
  for (int n = 0; n < g.n; ++n)
    for (int co = 0; co < g.cout; ++co)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const T d = dy[((static_cast<std::size_t>(n) * g.cout + co) * oh + oy) * ow + ox];
          for (int ci = 0; ci < g.cin; ++ci)
            for (int ki = 0; ki < g.k; ++ki) {
              const int iy = oy * g.stride - g.pad + ki;
              if (iy < 0 || iy >= g.h) continue;
              for (int kj = 0; kj < g.k; ++kj) {
                const int ix = ox * g.stride - g.pad + kj;
                if (ix < 0 || ix >= g.w) continue;
                dx[((static_cast<std::size_t>(n) * g.cin + ci) * g.h + iy) * g.w + ix] +=
                    d * w[((static_cast<std::size_t>(co) * g.cin + ci) * g.k + ki) * g.k + kj];
              }
            }
        }
}

template <typename T>
void conv2d_backward_weight(const ConvGeom& g, const T* x, const T* dy, T* dw, T* db) {
  const int oh = g.oh(), ow = g.ow();
  for (int n = 0; n < g.n; ++n)
    for (int co = 0; co < g.cout; ++co)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const T d = dy[((static_cast<std::size_t>(n) * g.cout + co) * oh + oy) * ow + ox];
          if (db) db[co] += d;
          for (int ci = 0; ci < g.cin; ++ci)
            for (int ki = 0; ki < g.k; ++ki) {
              const int iy = oy * g.stride - g.pad + ki;
              if (iy < 0 || iy >= g.h) continue;
              for (int kj = 0; kj < g.k; ++kj) {
                const int ix = ox * g.stride - g.pad + kj;
                if (ix < 0 || ix >= g.w) continue;
                dw[((static_cast<std::size_t>(co) * g.cin + ci) * g.k + ki) * g.k + kj] +=
                    d * x[((static_cast<std::size_t>(n) * g.cin + ci) * g.h + iy) * g.w + ix];
              }
            }
        }
}

}  // namespace reference

#define MFLOW_INSTANTIATE(T)                                                                   \
  template void conv2d_forward<T>(const ConvGeom&, const T*, const T*, const T*, T*);           \
  template void conv2d_backward_input<T>(const ConvGeom&, const T*, const T*, T*);              \
  template void conv2d_backward_weight<T>(const ConvGeom&, const T*, const T*, T*, T*);         \
  template void reference::conv2d_forward<T>(const ConvGeom&, const T*, const T*, const T*, T*); \
  template void reference::conv2d_backward_input<T>(const ConvGeom&, const T*, const T*, T*);    \
  template void reference::conv2d_backward_weight<T>(const ConvGeom&, const T*, const T*, T*, T*);

MFLOW_INSTANTIATE(float)
MFLOW_INSTANTIATE(double)
#undef MFLOW_INSTANTIATE

}  // namespace mflow::kernels
