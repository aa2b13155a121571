#include "pdl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pdl/errors.hpp"

namespace pdl::ad {
namespace {

Graph& graph_of(Var a) {
  if (!a.valid()) throw Error("operation on an unbound Var");
  return *a.graph();
}

Graph& graph_of(Var a, Var b) {
  if (a.graph() != b.graph()) throw Error("operands belong to different graphs");
  return graph_of(a);
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
}

void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.data().data();
  const double* s = src.data().data();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += s[i];
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::constant: return "constant";
    case OpKind::input: return "input";
    case OpKind::parameter: return "parameter";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::add_bias: return "add_bias";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::activation: return "activation";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::embedding: return "embedding";
    case OpKind::dropout: return "dropout";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::mask_fill: return "mask_fill";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::batched_matmul_3d: return "batched_matmul_3d";
    case OpKind::row_dot: return "row_dot";
    case OpKind::sum: return "sum";
    case OpKind::attention: return "attention";
    case OpKind::attachment_logits: return "attachment_logits";
  }
  return "?";
}

const Tensor& Var::value() const { return graph_->value(id_); }
const Tensor& Var::grad() const { return graph_->grad(id_); }

// ---------------------------------------------------------------------------
// Graph

Var Graph::constant(Tensor value) {
  Node n;
  n.kind = OpKind::constant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::input(Tensor value) {
  Node n;
  n.kind = OpKind::input;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::param(Parameter& p) {
  Node n;
  n.kind = OpKind::parameter;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::record(OpKind kind, std::vector<int> inputs, Tensor value, BackwardFn backward) {
  Node n;
  n.kind = kind;
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](int i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

const Tensor& Graph::grad(int id) const {
  static const Tensor kEmpty;
  return nodes_[id].grad.empty() ? kEmpty : nodes_[id].grad;
}

Tensor& Graph::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph() != this) throw Error("backward: loss belongs to another graph");
  if (value(loss.id()).size() != 1) {
    throw DimensionError("backward needs a scalar loss, got " + shape_string(value(loss.id()).shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  grad_buffer(loss.id())[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.requires_grad) continue;
    if (n.backward) {
      // Copy out the gradient: the closure may allocate buffers and grow no
      // nodes, but keeping a stable reference is simpler than reasoning about it.
      const Tensor& g = n.grad;
      n.backward(*this, g);
    }
    if (n.param) add_into(n.param->grad, n.grad);
  }
}

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(av.shape()) + " by " + shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  kernels::matmul(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  const int ia = a.id(), ib = b.id();
  return g.record(OpKind::matmul, {ia, ib}, std::move(out), [ia, ib, m, k, n](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(ia)) {
      kernels::matmul_nt(go.data().data(), gr.value(ib).data().data(), gr.grad_buffer(ia).data().data(), m, n, k);
    }
    if (gr.requires_grad(ib)) {
      kernels::matmul_tn(gr.value(ia).data().data(), go.data().data(), gr.grad_buffer(ib).data().data(), m, k, n);
    }
  });
}

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  if (!a.value().same_shape(b.value())) {
    throw DimensionError("add: shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor out = a.value();
  add_into(out, b.value());
  const int ia = a.id(), ib = b.id();
  return g.record(OpKind::add, {ia, ib}, std::move(out), [ia, ib](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(ia)) add_into(gr.grad_buffer(ia), go);
    if (gr.requires_grad(ib)) add_into(gr.grad_buffer(ib), go);
  });
}

Var add_bias(Var x, Var bias) {
  Graph& g = graph_of(x, bias);
  const Tensor& xv = x.value();
  require_rank2(xv, "add_bias");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (bias.value().size() != n) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " for " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  const double* bv = bias.value().data().data();
  double* o = out.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] += bv[j];
  const int ix = x.id(), ib = bias.id();
  return g.record(OpKind::add_bias, {ix, ib}, std::move(out), [ix, ib, m, n](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(ix)) add_into(gr.grad_buffer(ix), go);
    if (gr.requires_grad(ib)) {
      double* db = gr.grad_buffer(ib).data().data();
      const double* gp = go.data().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) db[j] += gp[i * n + j];
    }
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  if (!a.value().same_shape(b.value())) {
    throw DimensionError("mul: shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const int ia = a.id(), ib = b.id();
  return g.record(OpKind::mul, {ia, ib}, std::move(out), [ia, ib](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(ia)) {
      Tensor& da = gr.grad_buffer(ia);
      const Tensor& bv = gr.value(ib);
      for (std::size_t i = 0; i < go.size(); ++i) da[i] += go[i] * bv[i];
    }
    if (gr.requires_grad(ib)) {
      Tensor& db = gr.grad_buffer(ib);
      const Tensor& av = gr.value(ia);
      for (std::size_t i = 0; i < go.size(); ++i) db[i] += go[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Graph& g = graph_of(a);
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= s;
  const int ia = a.id();
  return g.record(OpKind::scale, {ia}, std::move(out), [ia, s](Graph& gr, const Tensor& go) {
    Tensor& da = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) da[i] += go[i] * s;
  });
}

Var activation(Var x, kernels::Activation act) {
  Graph& g = graph_of(x);
  Tensor out = x.value();
  double* o = out.data().data();
  const std::size_t n = out.size();
#pragma omp parallel for schedule(static) if (n >= (1u << 15))
  for (std::size_t i = 0; i < n; ++i) o[i] = kernels::activate(act, o[i]);
  const int ix = x.id();
  return g.record(OpKind::activation, {ix}, std::move(out), [ix, act](Graph& gr, const Tensor& go) {
    Tensor& dx = gr.grad_buffer(ix);
    const double* xv = gr.value(ix).data().data();
    const std::size_t n = go.size();
#pragma omp parallel for schedule(static) if (n >= (1u << 15))
    for (std::size_t i = 0; i < n; ++i) dx[i] += go[i] * kernels::activate_grad(act, xv[i]);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Graph& g = graph_of(x, gamma);
  graph_of(x, beta);
  const Tensor& xv = x.value();
  require_rank2(xv, "layer_norm");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias of size " + std::to_string(gamma.value().size()) + " for " +
                         shape_string(xv.shape()));
  }
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto rstd = std::make_shared<std::vector<double>>(m);
  Tensor out({m, n});
  const double* gp = gamma.value().data().data();
  const double* bp = beta.value().data().data();
  const double* xp = xv.data().data();
  double* op = out.data().data();
#pragma omp parallel for schedule(static) if (m * n >= (1u << 15))
  for (std::size_t i = 0; i < m; ++i)
    kernels::layer_norm_row(xp + i * n, n, gp, bp, eps, op + i * n, xhat->data() + i * n, rstd->data() + i);
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return g.record(OpKind::layer_norm, {ix, ig, ib}, std::move(out),
                  [ix, ig, ib, m, n, xhat, rstd](Graph& gr, const Tensor& go) {
                    const double* gam = gr.value(ig).data().data();
                    const double* gp = go.data().data();
                    if (gr.requires_grad(ix)) {
                      double* dx = gr.grad_buffer(ix).data().data();
#pragma omp parallel for schedule(static) if (m * n >= (1u << 15))
                      for (std::size_t i = 0; i < m; ++i) {
                        double mean_d = 0.0, mean_dx = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                          const double d = gp[i * n + j] * gam[j];
                          mean_d += d;
                          mean_dx += d * (*xhat)[i * n + j];
                        }
                        mean_d /= static_cast<double>(n);
                        mean_dx /= static_cast<double>(n);
                        const double r = (*rstd)[i];
                        for (std::size_t j = 0; j < n; ++j) {
                          const double d = gp[i * n + j] * gam[j];
                          dx[i * n + j] += r * (d - mean_d - (*xhat)[i * n + j] * mean_dx);
                        }
                      }
                    }
                    if (gr.requires_grad(ig)) {
                      double* dg = gr.grad_buffer(ig).data().data();
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) dg[j] += gp[i * n + j] * (*xhat)[i * n + j];
                    }
                    if (gr.requires_grad(ib)) {
                      double* db = gr.grad_buffer(ib).data().data();
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) db[j] += gp[i * n + j];
                    }
                  });
}

Var embedding(Var table, const std::vector<int>& ids) {
  Graph& g = graph_of(table);
  const Tensor& tv = table.value();
  require_rank2(tv, "embedding");
  const std::size_t rows = tv.dim(0), d = tv.dim(1);
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(rows));
    }
    std::copy_n(tv.data().data() + ids[i] * d, d, out.data().data() + i * d);
  }
  const int it = table.id();
  return g.record(OpKind::embedding, {it}, std::move(out), [it, ids, d](Graph& gr, const Tensor& go) {
    double* dt = gr.grad_buffer(it).data().data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* dst = dt + static_cast<std::size_t>(ids[i]) * d;
      const double* src = go.data().data() + i * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

Var dropout(Var x, double p) {
  Graph& g = graph_of(x);
  if (!g.training() || p <= 0.0) return x;
  if (p >= 1.0) throw Error("dropout probability must be < 1");
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  auto& rng = g.rng();
  for (auto& m : *mask) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m = u >= p ? keep_scale : 0.0;
  }
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
  const int ix = x.id();
  return g.record(OpKind::dropout, {ix}, std::move(out), [ix, mask](Graph& gr, const Tensor& go) {
    Tensor& dx = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < go.size(); ++i) dx[i] += go[i] * (*mask)[i];
  });
}

Var softmax_rows(Var x, const std::vector<std::uint8_t>& keep) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  require_rank2(xv, "softmax_rows");
  if (keep.size() != xv.size()) throw DimensionError("softmax_rows: mask size does not match input");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out({m, n});
  std::vector<double> buf(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t cnt = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (keep[i * n + j]) buf[cnt++] = xv.at(i, j);
    if (cnt == 0) throw Error("softmax_rows: row " + std::to_string(i) + " is fully masked");
    kernels::softmax_inplace(buf.data(), cnt);
    cnt = 0;
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = keep[i * n + j] ? buf[cnt++] : 0.0;
  }
  const int ix = x.id();
  const int self = static_cast<int>(g.size());
  return g.record(OpKind::softmax_rows, {ix}, std::move(out), [ix, self, m, n](Graph& gr, const Tensor& go) {
    const Tensor& y = gr.value(self);
    Tensor& dx = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y.at(i, j) * go.at(i, j);
      for (std::size_t j = 0; j < n; ++j) dx.at(i, j) += y.at(i, j) * (go.at(i, j) - dot);
    }
  });
}

Var mask_fill(Var x, const std::vector<std::uint8_t>& keep) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  if (keep.size() != xv.size()) throw DimensionError("mask_fill: mask size does not match input");
  Tensor out = xv;
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (!keep[i]) out.data()[i] = -std::numeric_limits<double>::infinity();
  const int ix = x.id();
  return g.record(OpKind::mask_fill, {ix}, std::move(out), [ix, keep](Graph& gr, const Tensor& go) {
    Tensor& dx = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (keep[i]) dx.data()[i] += go.data()[i];
  });
}

Var cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<std::uint8_t>& ignore) {
  Graph& g = graph_of(logits);
  const Tensor& lv = logits.value();
  require_rank2(lv, "cross_entropy");
  const std::size_t m = lv.dim(0), v = lv.dim(1);
  if (targets.size() != m || ignore.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_string(lv.shape()));
  }
  auto probs = std::make_shared<std::vector<double>>(m * v, 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (ignore[i]) continue;
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw DimensionError("cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(v) + ")");
    }
    double* p = probs->data() + i * v;
    std::copy_n(lv.data().data() + i * v, v, p);
    const double mx = *std::max_element(p, p + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(p[j] - mx);
    const double log_z = mx + std::log(z);
    total += log_z - lv.at(i, static_cast<std::size_t>(t));
    for (std::size_t j = 0; j < v; ++j) p[j] = std::exp(p[j] - log_z);
    ++count;
  }
  if (count == 0) throw Error("cross_entropy: every position is ignored");
  const double inv = 1.0 / static_cast<double>(count);
  const int il = logits.id();
  return g.record(OpKind::cross_entropy, {il}, Tensor::scalar(total * inv),
                  [il, probs, targets, ignore, m, v, inv](Graph& gr, const Tensor& go) {
                    Tensor& dl = gr.grad_buffer(il);
                    const double s = go[0] * inv;
                    for (std::size_t i = 0; i < m; ++i) {
                      if (ignore[i]) continue;
                      const double* p = probs->data() + i * v;
                      double* d = dl.data().data() + i * v;
                      for (std::size_t j = 0; j < v; ++j) d[j] += s * p[j];
                      d[targets[i]] -= s;
                    }
                  });
}

Var concat_cols(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "concat_cols");
  require_rank2(bv, "concat_cols");
  if (av.dim(0) != bv.dim(0)) {
    throw DimensionError("concat_cols: " + shape_string(av.shape()) + " and " + shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), p = av.dim(1), q = bv.dim(1);
  Tensor out({m, p + q});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(av.data().data() + i * p, p, out.data().data() + i * (p + q));
    std::copy_n(bv.data().data() + i * q, q, out.data().data() + i * (p + q) + p);
  }
  const int ia = a.id(), ib = b.id();
  return g.record(OpKind::concat_cols, {ia, ib}, std::move(out), [ia, ib, m, p, q](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(ia)) {
      Tensor& da = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) da[i * p + j] += go[i * (p + q) + j];
    }
    if (gr.requires_grad(ib)) {
      Tensor& db = gr.grad_buffer(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < q; ++j) db[i * q + j] += go[i * (p + q) + p + j];
    }
  });
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  require_rank2(xv, "slice_cols");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (start + count > n) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + "," + std::to_string(start + count) +
                         ") of " + shape_string(xv.shape()));
  }
  Tensor out({m, count});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(xv.data().data() + i * n + start, count, out.data().data() + i * count);
  const int ix = x.id();
  return g.record(OpKind::slice_cols, {ix}, std::move(out), [ix, m, n, start, count](Graph& gr, const Tensor& go) {
    Tensor& dx = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) dx[i * n + start + j] += go[i * count + j];
  });
}

Var transpose(Var x) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  require_rank2(xv, "transpose");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  const int ix = x.id();
  return g.record(OpKind::transpose, {ix}, std::move(out), [ix, m, n](Graph& gr, const Tensor& go) {
    Tensor& dx = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += go[j * m + i];
  });
}

Var reshape(Var x, Shape shape) {
  Graph& g = graph_of(x);
  Tensor out = x.value().reshaped(std::move(shape));
  const int ix = x.id();
  return g.record(OpKind::reshape, {ix}, std::move(out), [ix](Graph& gr, const Tensor& go) {
    Tensor& dx = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < go.size(); ++i) dx[i] += go[i];
  });
}

Var batched_matmul_3d(Var q, Var keys) {
  Graph& g = graph_of(q, keys);
  const Tensor& qv = q.value();
  const Tensor& kv = keys.value();
  if (qv.rank() != 3 || kv.rank() != 3 || qv.dim(1) != 1) {
    throw DimensionError("batched_matmul_3d: expected [n_d x 1 x d] and [n_d x n_s x d], got " +
                         shape_string(qv.shape()) + " and " + shape_string(kv.shape()));
  }
  if (qv.dim(0) != kv.dim(0)) {
    throw DimensionError("batched_matmul_3d: batch " + shape_string(qv.shape()) + " vs " + shape_string(kv.shape()));
  }
  if (qv.dim(2) != kv.dim(2)) {
    throw DimensionError("batched_matmul_3d: inner " + shape_string(qv.shape()) + " vs " + shape_string(kv.shape()));
  }
  const std::size_t nd = qv.dim(0), ns = kv.dim(1), d = qv.dim(2);
  Tensor out({nd, 1, ns});
  kernels::batched_matmul_3d(qv.data().data(), kv.data().data(), out.data().data(), nd, ns, d);
  const int iq = q.id(), ik = keys.id();
  return g.record(OpKind::batched_matmul_3d, {iq, ik}, std::move(out), [iq, ik, nd, ns, d](Graph& gr, const Tensor& go) {
    const Tensor& qv = gr.value(iq);
    const Tensor& kv = gr.value(ik);
    if (gr.requires_grad(iq)) {
      Tensor& dq = gr.grad_buffer(iq);
      for (std::size_t b = 0; b < nd; ++b)
        for (std::size_t j = 0; j < ns; ++j)
          for (std::size_t c = 0; c < d; ++c) dq[b * d + c] += go[b * ns + j] * kv[(b * ns + j) * d + c];
    }
    if (gr.requires_grad(ik)) {
      Tensor& dk = gr.grad_buffer(ik);
      for (std::size_t b = 0; b < nd; ++b)
        for (std::size_t j = 0; j < ns; ++j)
          for (std::size_t c = 0; c < d; ++c) dk[(b * ns + j) * d + c] += go[b * ns + j] * qv[b * d + c];
    }
  });
}

Var row_dot(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "row_dot");
  if (!av.same_shape(bv)) {
    throw DimensionError("row_dot: " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), n = av.dim(1);
  Tensor out({m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += av[i * n + j] * bv[i * n + j];
    out[i] = s;
  }
  const int ia = a.id(), ib = b.id();
  return g.record(OpKind::row_dot, {ia, ib}, std::move(out), [ia, ib, m, n](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(ia)) {
      Tensor& da = gr.grad_buffer(ia);
      const Tensor& bv = gr.value(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[i * n + j] += go[i] * bv[i * n + j];
    }
    if (gr.requires_grad(ib)) {
      Tensor& db = gr.grad_buffer(ib);
      const Tensor& av = gr.value(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) db[i * n + j] += go[i] * av[i * n + j];
    }
  });
}

Var sum(Var x) {
  Graph& g = graph_of(x);
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const int ix = x.id();
  return g.record(OpKind::sum, {ix}, Tensor::scalar(s), [ix](Graph& gr, const Tensor& go) {
    Tensor& dx = gr.grad_buffer(ix);
    for (auto& v : dx.storage()) v += go[0];
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var causal_attention(Var qkv, std::optional<Var> depth_table, DepthTape tape, const kernels::AttentionDims& dims,
                     std::vector<double>* probs_out) {
  Graph& g = graph_of(qkv);
  const Tensor& xv = qkv.value();
  const std::size_t rows = dims.batch * dims.seq_len, d = dims.model_dim, T = dims.seq_len;
  if (xv.rank() != 2 || xv.dim(0) != rows || xv.dim(1) != 3 * d) {
    throw DimensionError("causal_attention: qkv " + shape_string(xv.shape()) + " for batch " +
                         std::to_string(dims.batch) + ", length " + std::to_string(T) + ", width " +
                         std::to_string(d));
  }
  if (dims.heads == 0 || d % dims.heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
  const double* table = nullptr;
  std::size_t depth_rows = 0;
  if (depth_table) {
    graph_of(qkv, *depth_table);
    const Tensor& tv = depth_table->value();
    if (tv.rank() != 2 || tv.dim(1) != d) {
      throw DimensionError("causal_attention: depth table " + shape_string(tv.shape()) + " for width " +
                           std::to_string(d));
    }
    if (!tape || tape->size() != dims.batch * T * T) throw DimensionError("causal_attention: tape size mismatch");
    table = tv.data().data();
    depth_rows = tv.dim(0);
    for (int v : *tape) {
      if (v < 0 || static_cast<std::size_t>(v) >= depth_rows) {
        throw DimensionError("causal_attention: tape depth " + std::to_string(v) + " outside depth table of " +
                             std::to_string(depth_rows) + " rows");
      }
    }
  }
  auto probs = std::make_shared<std::vector<double>>(dims.batch * dims.heads * T * T);
  Tensor out({rows, d});
  kernels::attention_forward(dims, xv.data().data(), table, tape ? tape->data() : nullptr, probs->data(),
                             out.data().data());
  if (probs_out) *probs_out = *probs;
  const int ix = qkv.id();
  std::vector<int> inputs{ix};
  const int it = depth_table ? depth_table->id() : -1;
  if (depth_table) inputs.push_back(it);
  return g.record(OpKind::attention, std::move(inputs), std::move(out),
                  [ix, it, dims, tape, probs, depth_rows](Graph& gr, const Tensor& go) {
                    const double* table = it >= 0 ? gr.value(it).data().data() : nullptr;
                    double* dtable = (it >= 0 && gr.requires_grad(it)) ? gr.grad_buffer(it).data().data() : nullptr;
                    kernels::attention_backward(dims, gr.value(ix).data().data(), table,
                                                tape ? tape->data() : nullptr, probs->data(), go.data().data(),
                                                gr.grad_buffer(ix).data().data(), dtable, depth_rows);
                  });
}

Var attachment_logits(const AttachmentInputs& in, DepthTape tape, const kernels::AttachDims& dims,
                      kernels::Activation act, double scale) {
  Graph& g = graph_of(in.u, in.kpre);
  graph_of(in.u, in.self_score);
  const std::size_t rows = dims.batch * dims.seq_len, T = dims.seq_len, hid = dims.hidden;
  auto check = [&](Var v, std::size_t r, std::size_t c, const char* what) {
    const Tensor& t = v.value();
    if (t.size() != r * c) {
      throw DimensionError(std::string("attachment_logits: ") + what + " has shape " + shape_string(t.shape()) +
                           ", expected " + std::to_string(r) + "x" + std::to_string(c));
    }
  };
  check(in.u, rows, hid, "u");
  check(in.kpre, rows, hid, "kpre");
  check(in.self_score, rows, 1, "self_score");
  if (in.row_bias) check(*in.row_bias, rows, 1, "row_bias");
  std::size_t dpre_rows = 0;
  if (in.dpre) {
    const Tensor& dv = in.dpre->value();
    if (dv.rank() != 2 || dv.dim(1) != hid) throw DimensionError("attachment_logits: dpre width mismatch");
    dpre_rows = dv.dim(0);
    if (!tape || tape->size() != dims.batch * T * T) throw DimensionError("attachment_logits: tape size mismatch");
    for (int v : *tape) {
      if (v < 0 || static_cast<std::size_t>(v) >= dpre_rows) {
        throw DimensionError("attachment_logits: tape depth " + std::to_string(v) + " outside table");
      }
    }
  }
  Tensor out({rows, T + 1});
  kernels::attach_forward(dims, in.u.value().data().data(), in.kpre.value().data().data(),
                          in.dpre ? in.dpre->value().data().data() : nullptr, tape ? tape->data() : nullptr,
                          in.row_bias ? in.row_bias->value().data().data() : nullptr,
                          in.self_score.value().data().data(), act, scale, out.data().data());

  const int iu = in.u.id(), ik = in.kpre.id(), is = in.self_score.id();
  const int id = in.dpre ? in.dpre->id() : -1;
  const int ib = in.row_bias ? in.row_bias->id() : -1;
  std::vector<int> inputs{iu, ik, is};
  if (id >= 0) inputs.push_back(id);
  if (ib >= 0) inputs.push_back(ib);
  return g.record(OpKind::attachment_logits, std::move(inputs), std::move(out),
                  [=](Graph& gr, const Tensor& go) {
                    const double* dpre = id >= 0 ? gr.value(id).data().data() : nullptr;
                    double* ddpre = (id >= 0 && gr.requires_grad(id)) ? gr.grad_buffer(id).data().data() : nullptr;
                    double* drb = (ib >= 0 && gr.requires_grad(ib)) ? gr.grad_buffer(ib).data().data() : nullptr;
                    kernels::attach_backward(dims, gr.value(iu).data().data(), gr.value(ik).data().data(), dpre,
                                             tape ? tape->data() : nullptr, act, scale, go.data().data(),
                                             gr.grad_buffer(iu).data().data(), gr.grad_buffer(ik).data().data(),
                                             ddpre, dpre_rows, drb, gr.grad_buffer(is).data().data());
                  });
}

}  // namespace pdl::ad
