#pragma once

// Numeric kernels behind the autodiff ops and the incremental decoder.
//
// Every kernel exists twice: `serial::` is the plain reference kept for
// testing, `omp::` is the OpenMP version used by default. The dispatching
// functions in `pdl::kernels` pick one according to `backend()`.
//
// Output elements are always accumulated in a fixed order that does not
// depend on the thread count or on how many rows are processed in one call,
// which is what lets the single-row decoder reproduce batched forward passes
// bit for bit.

#include <cstddef>
#include <cstdint>
#include <span>

namespace pdl::kernels {

enum class Backend { serial, openmp };

void set_backend(Backend backend);
Backend backend();

/// Scalar multiplications issued by the matmul family since the last reset.
std::uint64_t multiply_count();
void reset_multiply_count();

enum class Activation { identity, gelu, relu };

double activate(Activation act, double x);
double activate_grad(Activation act, double x);

/// Shape of a fused causal self-attention over a padded batch.
/// Activations are `[batch*seq_len x 3*model_dim]` with columns `[q | k | v]`.
struct AttentionDims {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t heads = 0;
  std::size_t model_dim = 0;
  std::size_t head_dim() const { return model_dim / heads; }
};

/// Shape of the attachment-score kernel. Rows are `batch*seq_len`, each with
/// `seq_len + 1` slots (reduce targets 0..t, then the shift slot t+1).
struct AttachDims {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t hidden = 0;
};

// -- single-row primitives shared by every backend --------------------------

/// One causal query row against `n_keys` keys, all heads. Keys of token j are
/// `(k_j + depth_table[tape_row[j]]) / sqrt(head_dim)` when a depth table is
/// given, `k_j / sqrt(head_dim)` otherwise. Attention weights of head h land
/// at `probs + h * probs_head_stride`.
void attention_row(const double* q, const double* keys, std::size_t key_stride, const double* values,
                   std::size_t value_stride, std::size_t n_keys, std::size_t heads, std::size_t head_dim,
                   const double* depth_table, const int* tape_row, double* probs,
                   std::size_t probs_head_stride, double* out);

/// Attachment logits of one row: slots 0..n_keys-1 score
/// `(sum_c u[c] * act(kpre_j[c] + dpre[tape_row[j]][c]) + row_bias) * scale`,
/// slot n_keys scores `self_score * scale`.
void attach_row(const double* u, const double* kpre, std::size_t n_keys, const double* dpre, const int* tape_row,
                std::size_t hidden, Activation act, double row_bias, double self_score, double scale,
                double* logits);

void softmax_inplace(double* x, std::size_t n);

/// Layer normalization of one row. `xhat` and `rstd` may be null; when given
/// they receive the normalized row and 1/sqrt(var + eps).
void layer_norm_row(const double* x, std::size_t n, const double* gamma, const double* beta, double eps,
                    double* out, double* xhat, double* rstd);

// -- dispatching entry points -----------------------------------------------

/// C[m x n] += A[m x k] B[k x n]
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
/// C[k x n] += A[m x k]^T B[m x n]
void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
/// C[m x k] += A[m x n] B[k x n]^T
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k);

/// out[b][0][j] = sum_c q[b][0][c] * keys[b][j][c] for q `[batch x 1 x d]` and
/// keys `[batch x n_s x d]`.
void batched_matmul_3d(const double* q, const double* keys, double* out, std::size_t batch, std::size_t n_s,
                       std::size_t d);

/// `depth_table` may be null (plain attention). `tape` is `[batch x T x T]`.
/// `probs` receives `[batch x heads x T x T]` (zero above the diagonal).
void attention_forward(const AttentionDims& dims, const double* qkv, const double* depth_table, const int* tape,
                       double* probs, double* out);
/// Accumulates into `dqkv` and, when non-null, `ddepth` (rows = `depth_rows`).
void attention_backward(const AttentionDims& dims, const double* qkv, const double* depth_table, const int* tape,
                        const double* probs, const double* dout, double* dqkv, double* ddepth,
                        std::size_t depth_rows);

void attach_forward(const AttachDims& dims, const double* u, const double* kpre, const double* dpre, const int* tape,
                    const double* row_bias, const double* self_score, Activation act, double scale, double* logits);
void attach_backward(const AttachDims& dims, const double* u, const double* kpre, const double* dpre, const int* tape,
                     Activation act, double scale, const double* dlogits, double* du, double* dkpre, double* ddpre,
                     std::size_t dpre_rows, double* drow_bias, double* dself);

namespace serial {
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k);
void batched_matmul_3d(const double* q, const double* keys, double* out, std::size_t batch, std::size_t n_s,
                       std::size_t d);
/// Reference path: materializes the `[T x T x head_dim]` depth-augmented key
/// tensor per (batch, head) and multiplies it with `batched_matmul_3d`.
void attention_forward(const AttentionDims& dims, const double* qkv, const double* depth_table, const int* tape,
                       double* probs, double* out);
void attention_backward(const AttentionDims& dims, const double* qkv, const double* depth_table, const int* tape,
                        const double* probs, const double* dout, double* dqkv, double* ddepth,
                        std::size_t depth_rows);
void attach_forward(const AttachDims& dims, const double* u, const double* kpre, const double* dpre, const int* tape,
                    const double* row_bias, const double* self_score, Activation act, double scale, double* logits);
void attach_backward(const AttachDims& dims, const double* u, const double* kpre, const double* dpre, const int* tape,
                     Activation act, double scale, const double* dlogits, double* du, double* dkpre, double* ddpre,
                     std::size_t dpre_rows, double* drow_bias, double* dself);
}  // namespace serial

namespace omp {
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k);
void batched_matmul_3d(const double* q, const double* keys, double* out, std::size_t batch, std::size_t n_s,
                       std::size_t d);
void attention_forward(const AttentionDims& dims, const double* qkv, const double* depth_table, const int* tape,
                       double* probs, double* out);
void attention_backward(const AttentionDims& dims, const double* qkv, const double* depth_table, const int* tape,
                        const double* probs, const double* dout, double* dqkv, double* ddepth,
                        std::size_t depth_rows);
void attach_forward(const AttachDims& dims, const double* u, const double* kpre, const double* dpre, const int* tape,
                    const double* row_bias, const double* self_score, Activation act, double scale, double* logits);
void attach_backward(const AttachDims& dims, const double* u, const double* kpre, const double* dpre, const int* tape,
                     Activation act, double scale, const double* dlogits, double* du, double* dkpre, double* ddpre,
                     std::size_t dpre_rows, double* drow_bias, double* dself);
}  // namespace omp

}  // namespace pdl::kernels
