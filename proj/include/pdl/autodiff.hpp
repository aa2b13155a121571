#pragma once

// Reverse-mode automatic differentiation over dense f64 tensors.
//
// A Graph is a tape: nodes are appended as ops execute, so creation order is
// already a topological order and `backward` walks it in reverse, visiting
// each node once. Gradients accumulate: parameter gradients add up across
// backward calls until `Parameter::zero_grad` is called.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pdl/kernels.hpp"
#include "pdl/tensor.hpp"

namespace pdl::ad {

enum class OpKind {
  constant,
  input,
  parameter,
  matmul,
  add,
  add_bias,
  mul,
  scale,
  activation,
  layer_norm,
  embedding,
  dropout,
  softmax_rows,
  mask_fill,
  cross_entropy,
  concat_cols,
  slice_cols,
  transpose,
  reshape,
  batched_matmul_3d,
  row_dot,
  sum,
  attention,
  attachment_logits,
};

const char* op_name(OpKind kind);

/// A named trainable tensor with its gradient buffer.
struct Parameter {
  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }

  std::string name;
  Tensor value;
  Tensor grad;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  Graph* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  explicit Graph(bool training = false, std::uint64_t seed = 0) : training_(training), rng_(seed) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Differentiable leaf; its gradient is readable through `Var::grad`.
  Var input(Tensor value);
  /// Leaf bound to a parameter; `backward` adds its gradient into `p.grad`.
  Var param(Parameter& p);

  Var record(OpKind kind, std::vector<int> inputs, Tensor value, BackwardFn backward);

  /// Reverse pass from a scalar. Node gradients are recomputed from zero on
  /// every call; parameter gradients accumulate.
  void backward(Var loss);

  const Tensor& value(int id) const { return nodes_[id].value; }
  const Tensor& grad(int id) const;
  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor& grad_buffer(int id);
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  OpKind kind(int id) const { return nodes_[id].kind; }
  const std::vector<int>& inputs(int id) const { return nodes_[id].inputs; }
  std::size_t size() const { return nodes_.size(); }

  bool training() const { return training_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  struct Node {
    OpKind kind = OpKind::constant;
    std::vector<int> inputs;
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool training_;
  std::mt19937_64 rng_;
};

/// Integer tape of depths, `[batch x T x T]`, shared by the ops that read it.
using DepthTape = std::shared_ptr<const std::vector<int>>;

// -- ops --------------------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
/// x[m x n] + bias[n], broadcast over rows.
Var add_bias(Var x, Var bias);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var activation(Var x, kernels::Activation act);
inline Var gelu(Var x) { return activation(x, kernels::Activation::gelu); }
inline Var relu(Var x) { return activation(x, kernels::Activation::relu); }
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Row gather from `table`; the backward pass scatter-adds.
Var embedding(Var table, const std::vector<int>& ids);
/// Inverted dropout while training; the identity otherwise.
Var dropout(Var x, double p);
/// Row softmax over entries where `keep` is nonzero; masked entries are 0.
Var softmax_rows(Var x, const std::vector<std::uint8_t>& keep);
/// Entries where `keep` is zero become -inf; gradients pass through the rest.
Var mask_fill(Var x, const std::vector<std::uint8_t>& keep);
/// Mean negative log-likelihood over rows whose `ignore` flag is zero.
/// Logits may contain -inf for impossible classes.
Var cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<std::uint8_t>& ignore);
Var concat_cols(Var a, Var b);
Var slice_cols(Var x, std::size_t start, std::size_t count);
Var transpose(Var x);
Var reshape(Var x, Shape shape);
/// q `[n_d x 1 x d]` times keys `[n_d x n_s x d]`^T -> `[n_d x 1 x n_s]`.
Var batched_matmul_3d(Var q, Var keys);
/// Row-wise inner products -> `[m x 1]`.
Var row_dot(Var a, Var b);
Var sum(Var x);
Var mean(Var x);

/// Fused causal multi-head attention over `qkv = [q | k | v]`. When
/// `depth_table` is given, keys are depth-augmented from `tape`.
/// If `probs_out` is non-null it receives the attention weights
/// `[batch x heads x T x T]`.
Var causal_attention(Var qkv, std::optional<Var> depth_table, DepthTape tape, const kernels::AttentionDims& dims,
                     std::vector<double>* probs_out = nullptr);

struct AttachmentInputs {
  Var u;                        // [BT x h]
  Var kpre;                     // [BT x h]
  std::optional<Var> dpre;      // [(D+1) x h]
  std::optional<Var> row_bias;  // [BT x 1]
  Var self_score;               // [BT x 1]
};

/// Attachment logits `[BT x (T+1)]`; see `kernels::attach_row`.
Var attachment_logits(const AttachmentInputs& in, DepthTape tape, const kernels::AttachDims& dims,
                      kernels::Activation act, double scale);

}  // namespace pdl::ad
