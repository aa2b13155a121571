#include "pdl/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <vector>

namespace pdl::kernels {
namespace {

std::atomic<Backend> g_backend{Backend::openmp};
std::atomic<std::uint64_t> g_multiplies{0};

void count(std::uint64_t n) { g_multiplies.fetch_add(n, std::memory_order_relaxed); }

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// Rows below this many multiply-adds are not worth a parallel region.
constexpr std::size_t kParallelGrain = 1u << 14;

constexpr std::size_t kColBlock = 32;

// c[j] += sum_p a[p * a_stride] * b[p * n + j] for j < n, p ascending. The
// column block is accumulated in locals so it stays in registers.
inline void accumulate_row(const double* a, std::size_t a_stride, const double* b, double* c, std::size_t k,
                           std::size_t n) {
  std::size_t j0 = 0;
  for (; j0 + kColBlock <= n; j0 += kColBlock) {
    double acc[kColBlock];
    for (std::size_t j = 0; j < kColBlock; ++j) acc[j] = c[j0 + j];
    for (std::size_t p = 0; p < k; ++p) {
      const double ap = a[p * a_stride];
      const double* bp = b + p * n + j0;
      for (std::size_t j = 0; j < kColBlock; ++j) acc[j] += ap * bp[j];
    }
    for (std::size_t j = 0; j < kColBlock; ++j) c[j0 + j] = acc[j];
  }
  if (j0 == n) return;
  const std::size_t w = n - j0;
  double acc[kColBlock];
  for (std::size_t j = 0; j < w; ++j) acc[j] = c[j0 + j];
  for (std::size_t p = 0; p < k; ++p) {
    const double ap = a[p * a_stride];
    const double* bp = b + p * n + j0;
    for (std::size_t j = 0; j < w; ++j) acc[j] += ap * bp[j];
  }
  for (std::size_t j = 0; j < w; ++j) c[j0 + j] = acc[j];
}

}  // namespace

void set_backend(Backend backend) { g_backend.store(backend); }
Backend backend() { return g_backend.load(); }

std::uint64_t multiply_count() { return g_multiplies.load(); }
void reset_multiply_count() { g_multiplies.store(0); }

namespace {

// tanh through a single exp; cheaper than std::tanh and the same bits on
// every code path that evaluates an activation.
inline double tanh_exp(double y) {
  const double a = std::fabs(y);
  if (a > 20.0) return std::copysign(1.0, y);
  const double e = std::exp(-2.0 * a);
  return std::copysign((1.0 - e) / (1.0 + e), y);
}

inline void activate_with_grad(Activation act, double x, double& f, double& df) {
  f = x;
  df = 1.0;
  switch (act) {
    case Activation::identity:
      return;
    case Activation::relu:
      f = x > 0.0 ? x : 0.0;
      df = x > 0.0 ? 1.0 : 0.0;
      return;
    case Activation::gelu: {
      const double t = tanh_exp(kGeluC * (x + kGeluA * x * x * x));
      f = 0.5 * x * (1.0 + t);
      df = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      return;
    }
  }
}

}  // namespace

double activate(Activation act, double x) {
  switch (act) {
    case Activation::identity:
      return x;
    case Activation::relu:
      return x > 0.0 ? x : 0.0;
    case Activation::gelu: {
      const double t = tanh_exp(kGeluC * (x + kGeluA * x * x * x));
      return 0.5 * x * (1.0 + t);
    }
  }
  return x;
}

double activate_grad(Activation act, double x) {
  double f, df;
  activate_with_grad(act, x, f, df);
  return df;
}

void softmax_inplace(double* x, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    x[j] = std::exp(x[j] - mx);
    sum += x[j];
  }
  for (std::size_t j = 0; j < n; ++j) x[j] /= sum;
}

void layer_norm_row(const double* x, std::size_t n, const double* gamma, const double* beta, double eps,
                    double* out, double* xhat, double* rstd) {
  double mu = 0.0;
  for (std::size_t j = 0; j < n; ++j) mu += x[j];
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
  var /= static_cast<double>(n);
  const double r = 1.0 / std::sqrt(var + eps);
  if (rstd) *rstd = r;
  for (std::size_t j = 0; j < n; ++j) {
    const double h = (x[j] - mu) * r;
    if (xhat) xhat[j] = h;
    out[j] = h * gamma[j] + beta[j];
  }
}

void attention_row(const double* q, const double* keys, std::size_t key_stride, const double* values,
                   std::size_t value_stride, std::size_t n_keys, std::size_t heads, std::size_t head_dim,
                   const double* depth_table, const int* tape_row, double* probs,
                   std::size_t probs_head_stride, double* out) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const std::size_t model_dim = heads * head_dim;
  for (std::size_t h = 0; h < heads; ++h) {
    const double* qh = q + h * head_dim;
    double* p = probs + h * probs_head_stride;
    for (std::size_t j = 0; j < n_keys; ++j) {
      const double* kj = keys + j * key_stride + h * head_dim;
      double s = 0.0;
      if (depth_table) {
        const double* e = depth_table + static_cast<std::size_t>(tape_row[j]) * model_dim + h * head_dim;
        for (std::size_t c = 0; c < head_dim; ++c) s += qh[c] * ((kj[c] + e[c]) * inv);
      } else {
        for (std::size_t c = 0; c < head_dim; ++c) s += qh[c] * (kj[c] * inv);
      }
      p[j] = s;
    }
    softmax_inplace(p, n_keys);
    double* oh = out + h * head_dim;
    std::fill(oh, oh + head_dim, 0.0);
    for (std::size_t j = 0; j < n_keys; ++j) {
      const double* vj = values + j * value_stride + h * head_dim;
      const double pj = p[j];
      for (std::size_t c = 0; c < head_dim; ++c) oh[c] += pj * vj[c];
    }
  }
}

void attach_row(const double* u, const double* kpre, std::size_t n_keys, const double* dpre, const int* tape_row,
                std::size_t hidden, Activation act, double row_bias, double self_score, double scale,
                double* logits) {
  for (std::size_t j = 0; j < n_keys; ++j) {
    const double* kj = kpre + j * hidden;
    double s = 0.0;
    if (dpre) {
      const double* dj = dpre + static_cast<std::size_t>(tape_row[j]) * hidden;
      for (std::size_t c = 0; c < hidden; ++c) s += u[c] * activate(act, kj[c] + dj[c]);
    } else {
      for (std::size_t c = 0; c < hidden; ++c) s += u[c] * activate(act, kj[c]);
    }
    logits[j] = (s + row_bias) * scale;
  }
  logits[n_keys] = self_score * scale;
}

// ---------------------------------------------------------------------------
// Dispatch

#define PDL_DISPATCH(fn, ...)                       \
  do {                                              \
    if (backend() == Backend::serial) {             \
      serial::fn(__VA_ARGS__);                      \
    } else {                                        \
      omp::fn(__VA_ARGS__);                         \
    }                                               \
  } while (0)

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  PDL_DISPATCH(matmul, a, b, c, m, k, n);
}
void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  PDL_DISPATCH(matmul_tn, a, b, c, m, k, n);
}
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  PDL_DISPATCH(matmul_nt, a, b, c, m, n, k);
}
void batched_matmul_3d(const double* q, const double* keys, double* out, std::size_t batch, std::size_t n_s,
                       std::size_t d) {
  PDL_DISPATCH(batched_matmul_3d, q, keys, out, batch, n_s, d);
}
void attention_forward(const AttentionDims& dims, const double* qkv, const double* depth_table, const int* tape,
                       double* probs, double* out) {
  PDL_DISPATCH(attention_forward, dims, qkv, depth_table, tape, probs, out);
}
void attention_backward(const AttentionDims& dims, const double* qkv, const double* depth_table, const int* tape,
                        const double* probs, const double* dout, double* dqkv, double* ddepth,
                        std::size_t depth_rows) {
  PDL_DISPATCH(attention_backward, dims, qkv, depth_table, tape, probs, dout, dqkv, ddepth, depth_rows);
}
void attach_forward(const AttachDims& dims, const double* u, const double* kpre, const double* dpre, const int* tape,
                    const double* row_bias, const double* self_score, Activation act, double scale, double* logits) {
  PDL_DISPATCH(attach_forward, dims, u, kpre, dpre, tape, row_bias, self_score, act, scale, logits);
}
void attach_backward(const AttachDims& dims, const double* u, const double* kpre, const double* dpre, const int* tape,
                     Activation act, double scale, const double* dlogits, double* du, double* dkpre, double* ddpre,
                     std::size_t dpre_rows, double* drow_bias, double* dself) {
  PDL_DISPATCH(attach_backward, dims, u, kpre, dpre, tape, act, scale, dlogits, du, dkpre, ddpre, dpre_rows,
               drow_bias, dself);
}

#undef PDL_DISPATCH

// ---------------------------------------------------------------------------
// Serial reference

namespace serial {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  count(static_cast<std::uint64_t>(m) * k * n);
  for (std::size_t i = 0; i < m; ++i) accumulate_row(a + i * k, 1, b, c + i * n, k, n);
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  count(static_cast<std::uint64_t>(m) * k * n);
  for (std::size_t p = 0; p < k; ++p) accumulate_row(a + p, k, b, c + p * n, m, n);
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  matmul(a, bt.data(), c, m, n, k);
}

void batched_matmul_3d(const double* q, const double* keys, double* out, std::size_t batch, std::size_t n_s,
                       std::size_t d) {
  count(static_cast<std::uint64_t>(batch) * n_s * d);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* qb = q + b * d;
    for (std::size_t j = 0; j < n_s; ++j) {
      const double* kj = keys + (b * n_s + j) * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += qb[c] * kj[c];
      out[b * n_s + j] = s;
    }
  }
}

void attention_forward(const AttentionDims& dims, const double* qkv, const double* depth_table, const int* tape,
                       double* probs, double* out) {
  const std::size_t T = dims.seq_len, H = dims.heads, d = dims.model_dim, hd = dims.head_dim();
  const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> kd(T * T * hd), q(T * hd), scores(T * T);
  for (std::size_t b = 0; b < dims.batch; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      // Depth-augmented keys K_D[t][j] for every (destination, source) pair.
      std::fill(kd.begin(), kd.end(), 0.0);
      for (std::size_t t = 0; t < T; ++t) {
        const double* qrow = qkv + (b * T + t) * 3 * d + h * hd;
        std::copy(qrow, qrow + hd, q.begin() + t * hd);
        for (std::size_t j = 0; j <= t; ++j) {
          const double* kj = qkv + (b * T + j) * 3 * d + d + h * hd;
          double* dst = kd.data() + (t * T + j) * hd;
          if (depth_table) {
            const int depth = tape[(b * T + t) * T + j];
            const double* e = depth_table + static_cast<std::size_t>(depth) * d + h * hd;
            for (std::size_t c = 0; c < hd; ++c) dst[c] = (kj[c] + e[c]) * inv;
          } else {
            for (std::size_t c = 0; c < hd; ++c) dst[c] = kj[c] * inv;
          }
        }
      }
      batched_matmul_3d(q.data(), kd.data(), scores.data(), T, T, hd);
      for (std::size_t t = 0; t < T; ++t) {
        double* p = probs + ((b * H + h) * T + t) * T;
        std::fill(p, p + T, 0.0);
        std::copy(scores.begin() + t * T, scores.begin() + t * T + t + 1, p);
        softmax_inplace(p, t + 1);
        double* o = out + (b * T + t) * d + h * hd;
        std::fill(o, o + hd, 0.0);
        for (std::size_t j = 0; j <= t; ++j) {
          const double* vj = qkv + (b * T + j) * 3 * d + 2 * d + h * hd;
          for (std::size_t c = 0; c < hd; ++c) o[c] += p[j] * vj[c];
        }
      }
    }
  }
}

void attention_backward(const AttentionDims& dims, const double* qkv, const double* depth_table, const int* tape,
                        const double* probs, const double* dout, double* dqkv, double* ddepth, std::size_t) {
  const std::size_t T = dims.seq_len, H = dims.heads, d = dims.model_dim, hd = dims.head_dim();
  const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> dp(T);
  for (std::size_t b = 0; b < dims.batch; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* p = probs + ((b * H + h) * T + t) * T;
        const double* go = dout + (b * T + t) * d + h * hd;
        const double* qt = qkv + (b * T + t) * 3 * d + h * hd;
        double* dq = dqkv + (b * T + t) * 3 * d + h * hd;
        double dot = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          const double* vj = qkv + (b * T + j) * 3 * d + 2 * d + h * hd;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += go[c] * vj[c];
          dp[j] = s;
          dot += p[j] * s;
        }
        for (std::size_t j = 0; j <= t; ++j) {
          const double ds = p[j] * (dp[j] - dot);
          const double* kj = qkv + (b * T + j) * 3 * d + d + h * hd;
          double* dk = dqkv + (b * T + j) * 3 * d + d + h * hd;
          double* dv = dqkv + (b * T + j) * 3 * d + 2 * d + h * hd;
          const double* e = nullptr;
          double* de = nullptr;
          if (depth_table) {
            const auto depth = static_cast<std::size_t>(tape[(b * T + t) * T + j]);
            e = depth_table + depth * d + h * hd;
            if (ddepth) de = ddepth + depth * d + h * hd;
          }
          const double g = ds * inv;
          for (std::size_t c = 0; c < hd; ++c) {
            const double kdc = e ? (kj[c] + e[c]) * inv : kj[c] * inv;
            dq[c] += ds * kdc;
            dk[c] += g * qt[c];
            if (de) de[c] += g * qt[c];
            dv[c] += p[j] * go[c];
          }
        }
      }
    }
  }
}

void attach_forward(const AttachDims& dims, const double* u, const double* kpre, const double* dpre, const int* tape,
                    const double* row_bias, const double* self_score, Activation act, double scale, double* logits) {
  const std::size_t T = dims.seq_len, hid = dims.hidden, W = T + 1;
  for (std::size_t b = 0; b < dims.batch; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t row = b * T + t;
      double* out = logits + row * W;
      attach_row(u + row * hid, kpre + b * T * hid, t + 1, dpre, tape ? tape + row * T : nullptr, hid, act,
                 row_bias ? row_bias[row] : 0.0, self_score[row], scale, out);
      std::fill(out + t + 2, out + W, -std::numeric_limits<double>::infinity());
    }
  }
}

void attach_backward(const AttachDims& dims, const double* u, const double* kpre, const double* dpre, const int* tape,
                     Activation act, double scale, const double* dlogits, double* du, double* dkpre, double* ddpre,
                     std::size_t, double* drow_bias, double* dself) {
  const std::size_t T = dims.seq_len, hid = dims.hidden, W = T + 1;
  for (std::size_t b = 0; b < dims.batch; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t row = b * T + t;
      const double* gl = dlogits + row * W;
      const double* ut = u + row * hid;
      double* dut = du + row * hid;
      for (std::size_t j = 0; j <= t; ++j) {
        const double g = gl[j] * scale;
        if (g == 0.0) continue;
        if (drow_bias) drow_bias[row] += g;
        const std::size_t key = b * T + j;
        const double* dj = dpre ? dpre + static_cast<std::size_t>(tape[row * T + j]) * hid : nullptr;
        double* ddj = (dpre && ddpre) ? ddpre + static_cast<std::size_t>(tape[row * T + j]) * hid : nullptr;
        for (std::size_t c = 0; c < hid; ++c) {
          const double z = kpre[key * hid + c] + (dj ? dj[c] : 0.0);
          double f, df;
          activate_with_grad(act, z, f, df);
          dut[c] += g * f;
          const double dz = g * ut[c] * df;
          dkpre[key * hid + c] += dz;
          if (ddj) ddj[c] += dz;
        }
      }
      dself[row] += gl[t + 1] * scale;
    }
  }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP

namespace omp {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  count(static_cast<std::uint64_t>(m) * k * n);
  const bool par = m > 1 && m * k * n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t i = 0; i < m; ++i) accumulate_row(a + i * k, 1, b, c + i * n, k, n);
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  count(static_cast<std::uint64_t>(m) * k * n);
  const bool par = k > 1 && m * k * n >= kParallelGrain;
  // Each thread owns whole output rows, so every element still sums over i in order.
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t p = 0; p < k; ++p) accumulate_row(a + p, k, b, c + p * n, m, n);
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  matmul(a, bt.data(), c, m, n, k);
}

void batched_matmul_3d(const double* q, const double* keys, double* out, std::size_t batch, std::size_t n_s,
                       std::size_t d) {
  count(static_cast<std::uint64_t>(batch) * n_s * d);
#pragma omp parallel for schedule(static) if (batch * n_s * d >= kParallelGrain)
  for (std::size_t b = 0; b < batch; ++b) {
    const double* qb = q + b * d;
    for (std::size_t j = 0; j < n_s; ++j) {
      const double* kj = keys + (b * n_s + j) * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += qb[c] * kj[c];
      out[b * n_s + j] = s;
    }
  }
}

void attention_forward(const AttentionDims& dims, const double* qkv, const double* depth_table, const int* tape,
                       double* probs, double* out) {
  const std::size_t T = dims.seq_len, H = dims.heads, d = dims.model_dim;
  const std::size_t rows = dims.batch * T;
  std::fill(probs, probs + dims.batch * H * T * T, 0.0);
#pragma omp parallel for schedule(dynamic, 4) if (rows > 1)
  for (std::size_t row = 0; row < rows; ++row) {
    const std::size_t b = row / T, t = row % T;
    const double* base = qkv + b * T * 3 * d;
    attention_row(qkv + row * 3 * d, base + d, 3 * d, base + 2 * d, 3 * d, t + 1, H, dims.head_dim(), depth_table,
                  tape ? tape + row * T : nullptr, probs + (b * H * T + t) * T, T * T, out + row * d);
  }
}

void attention_backward(const AttentionDims& dims, const double* qkv, const double* depth_table, const int* tape,
                        const double* probs, const double* dout, double* dqkv, double* ddepth,
                        std::size_t depth_rows) {
  const std::size_t B = dims.batch, T = dims.seq_len, H = dims.heads, d = dims.model_dim, hd = dims.head_dim();
  const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
  const bool want_depth = depth_table && ddepth;
  // Depth-table gradients are shared across the batch: one private buffer per
  // sequence, summed in sequence order afterwards.
  std::vector<double> depth_bufs(want_depth ? B * depth_rows * d : 0, 0.0);

#pragma omp parallel for collapse(2) schedule(dynamic, 1) if (B * H > 1)
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      std::vector<double> dp(T);
      double* de_base = want_depth ? depth_bufs.data() + b * depth_rows * d : nullptr;
      for (std::size_t t = 0; t < T; ++t) {
        const double* go = dout + (b * T + t) * d + h * hd;
        bool any = false;
        for (std::size_t c = 0; c < hd; ++c) any |= go[c] != 0.0;
        if (!any) continue;
        const double* p = probs + ((b * H + h) * T + t) * T;
        const double* qt = qkv + (b * T + t) * 3 * d + h * hd;
        double* dq = dqkv + (b * T + t) * 3 * d + h * hd;
        double dot = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          const double* vj = qkv + (b * T + j) * 3 * d + 2 * d + h * hd;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += go[c] * vj[c];
          dp[j] = s;
          dot += p[j] * s;
        }
        for (std::size_t j = 0; j <= t; ++j) {
          const double ds = p[j] * (dp[j] - dot);
          const double* kj = qkv + (b * T + j) * 3 * d + d + h * hd;
          double* dk = dqkv + (b * T + j) * 3 * d + d + h * hd;
          double* dv = dqkv + (b * T + j) * 3 * d + 2 * d + h * hd;
          const double g = ds * inv;
          const double pj = p[j];
          if (depth_table) {
            const auto depth = static_cast<std::size_t>(tape[(b * T + t) * T + j]);
            const double* e = depth_table + depth * d + h * hd;
            double* de = de_base ? de_base + depth * d + h * hd : nullptr;
            for (std::size_t c = 0; c < hd; ++c) {
              dq[c] += ds * ((kj[c] + e[c]) * inv);
              dk[c] += g * qt[c];
              dv[c] += pj * go[c];
            }
            if (de)
              for (std::size_t c = 0; c < hd; ++c) de[c] += g * qt[c];
          } else {
            for (std::size_t c = 0; c < hd; ++c) {
              dq[c] += ds * (kj[c] * inv);
              dk[c] += g * qt[c];
              dv[c] += pj * go[c];
            }
          }
        }
      }
    }
  }

  if (want_depth) {
    const std::size_t n = depth_rows * d;
#pragma omp parallel for schedule(static) if (n * B >= kParallelGrain)
    for (std::size_t i = 0; i < n; ++i) {
      double s = ddepth[i];
      for (std::size_t b = 0; b < B; ++b) s += depth_bufs[b * n + i];
      ddepth[i] = s;
    }
  }
}

void attach_forward(const AttachDims& dims, const double* u, const double* kpre, const double* dpre, const int* tape,
                    const double* row_bias, const double* self_score, Activation act, double scale, double* logits) {
  const std::size_t T = dims.seq_len, hid = dims.hidden, W = T + 1;
  const std::size_t rows = dims.batch * T;
#pragma omp parallel for schedule(dynamic, 4) if (rows > 1)
  for (std::size_t row = 0; row < rows; ++row) {
    const std::size_t b = row / T, t = row % T;
    double* out = logits + row * W;
    attach_row(u + row * hid, kpre + b * T * hid, t + 1, dpre, tape ? tape + row * T : nullptr, hid, act,
               row_bias ? row_bias[row] : 0.0, self_score[row], scale, out);
    std::fill(out + t + 2, out + W, -std::numeric_limits<double>::infinity());
  }
}

void attach_backward(const AttachDims& dims, const double* u, const double* kpre, const double* dpre, const int* tape,
                     Activation act, double scale, const double* dlogits, double* du, double* dkpre, double* ddpre,
                     std::size_t dpre_rows, double* drow_bias, double* dself) {
  const std::size_t B = dims.batch, T = dims.seq_len, hid = dims.hidden, W = T + 1;
  const bool want_depth = dpre && ddpre;
  std::vector<double> bufs(want_depth ? B * dpre_rows * hid : 0, 0.0);

#pragma omp parallel for schedule(dynamic, 1) if (B > 1)
  for (std::size_t b = 0; b < B; ++b) {
    double* dd_base = want_depth ? bufs.data() + b * dpre_rows * hid : nullptr;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t row = b * T + t;
      const double* gl = dlogits + row * W;
      const double* ut = u + row * hid;
      double* dut = du + row * hid;
      for (std::size_t j = 0; j <= t; ++j) {
        const double g = gl[j] * scale;
        if (g == 0.0) continue;
        if (drow_bias) drow_bias[row] += g;
        const std::size_t key = b * T + j;
        const std::size_t depth = dpre ? static_cast<std::size_t>(tape[row * T + j]) : 0;
        const double* dj = dpre ? dpre + depth * hid : nullptr;
        double* ddj = dd_base ? dd_base + depth * hid : nullptr;
        for (std::size_t c = 0; c < hid; ++c) {
          const double z = kpre[key * hid + c] + (dj ? dj[c] : 0.0);
          double f, df;
          activate_with_grad(act, z, f, df);
          dut[c] += g * f;
          const double dz = g * ut[c] * df;
          dkpre[key * hid + c] += dz;
          if (ddj) ddj[c] += dz;
        }
      }
      dself[row] += gl[t + 1] * scale;
    }
  }

  if (want_depth) {
    const std::size_t n = dpre_rows * hid;
    for (std::size_t i = 0; i < n; ++i) {
      double s = ddpre[i];
      for (std::size_t b = 0; b < B; ++b) s += bufs[b * n + i];
      ddpre[i] = s;
    }
  }
}

}  // namespace omp
}  // namespace pdl::kernels
