#include "pdl/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "pdl/binary_io.hpp"
#include "pdl/errors.hpp"
#include "pdl/stack_machine.hpp"

namespace pdl {
namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

// Box-Muller on top of mt19937_64, so initialization does not depend on the
// standard library's distribution implementations.
double normal(std::mt19937_64& rng) {
  double u1;
  do {
    u1 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  } while (u1 <= 0.0);
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<int>(x);
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected an integer, got \"" + v + "\"");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected a number, got \"" + v + "\"");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ConfigError("config key " + key + ": expected a boolean, got \"" + v + "\"");
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

const char* mode_name(ModelMode m) {
  switch (m) {
    case ModelMode::pushdown: return "pushdown";
    case ModelMode::base_multitask: return "base-multitask";
    case ModelMode::base_plain: return "base-plain";
  }
  return "?";
}

ModelMode parse_mode(const std::string& s) {
  if (s == "pushdown") return ModelMode::pushdown;
  if (s == "base-multitask" || s == "base") return ModelMode::base_multitask;
  if (s == "base-plain") return ModelMode::base_plain;
  throw ConfigError("unknown model mode \"" + s + "\" (pushdown, base-multitask, base-plain)");
}

const char* attach_variant_name(AttachVariant v) { return v == AttachVariant::mlp ? "mlp" : "bilinear"; }

AttachVariant parse_attach_variant(const std::string& s) {
  if (s == "mlp") return AttachVariant::mlp;
  if (s == "bilinear") return AttachVariant::bilinear;
  throw ConfigError("unknown attachment variant \"" + s + "\" (mlp, bilinear)");
}

// ---------------------------------------------------------------------------
// ModelConfig

bool ModelConfig::is_pushdown_layer(int layer) const {
  if (mode != ModelMode::pushdown) return false;
  if (pushdown_layers.empty()) return true;
  return std::find(pushdown_layers.begin(), pushdown_layers.end(), layer) != pushdown_layers.end();
}

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model: layers must be >= 1");
  if (heads < 1 || dim < 1 || dim % heads != 0) {
    throw ConfigError("model: dim " + std::to_string(dim) + " must be a positive multiple of heads " +
                      std::to_string(heads));
  }
  if (vocab < 2) throw ConfigError("model: vocabulary must hold at least ROOT and EOS");
  if (max_seq_len < 2) throw ConfigError("model: max_seq_len must be >= 2");
  if (max_depth < 1) throw ConfigError("model: max_depth must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must lie in [0, 1)");
  if (mode != ModelMode::pushdown && !pushdown_layers.empty()) {
    throw ConfigError("model: pushdown_layers must be empty in base modes");
  }
  for (int l : pushdown_layers)
    if (l < 0 || l >= layers) throw ConfigError("model: pushdown layer " + std::to_string(l) + " out of range");
  if (init_std <= 0.0) throw ConfigError("model: init_std must be positive");
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
  std::map<std::string, std::string> kv;
  kv["layers"] = std::to_string(layers);
  kv["heads"] = std::to_string(heads);
  kv["dim"] = std::to_string(dim);
  kv["ff_dim"] = std::to_string(ff_dim);
  kv["vocab"] = std::to_string(vocab);
  kv["max_seq_len"] = std::to_string(max_seq_len);
  kv["max_depth"] = std::to_string(max_depth);
  std::string pl;
  for (std::size_t i = 0; i < pushdown_layers.size(); ++i) pl += (i ? "," : "") + std::to_string(pushdown_layers[i]);
  kv["pushdown_layers"] = pl.empty() ? "all" : pl;
  kv["dropout"] = format_double(dropout);
  kv["mode"] = mode_name(mode);
  kv["attach_variant"] = attach_variant_name(attach);
  kv["attach_dim"] = std::to_string(attach_dim);
  kv["clamp_depth"] = clamp_depth ? "true" : "false";
  kv["model_seed"] = std::to_string(seed);
  kv["init_std"] = format_double(init_std);
  return kv;
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "layers") c.layers = parse_int(k, v);
    else if (k == "heads") c.heads = parse_int(k, v);
    else if (k == "dim") c.dim = parse_int(k, v);
    else if (k == "ff_dim") c.ff_dim = parse_int(k, v);
    else if (k == "vocab") c.vocab = parse_int(k, v);
    else if (k == "max_seq_len") c.max_seq_len = parse_int(k, v);
    else if (k == "max_depth") c.max_depth = parse_int(k, v);
    else if (k == "pushdown_layers") {
      c.pushdown_layers.clear();
      if (v != "all" && !v.empty()) {
        std::stringstream ss(v);
        for (std::string item; std::getline(ss, item, ',');) c.pushdown_layers.push_back(parse_int(k, item));
      }
    } else if (k == "dropout") c.dropout = parse_double(k, v);
    else if (k == "mode") c.mode = parse_mode(v);
    else if (k == "attach_variant") c.attach = parse_attach_variant(v);
    else if (k == "attach_dim") c.attach_dim = parse_int(k, v);
    else if (k == "clamp_depth") c.clamp_depth = parse_bool(k, v);
    else if (k == "model_seed") c.seed = static_cast<std::uint64_t>(std::stoull(v));
    else if (k == "init_std") c.init_std = parse_double(k, v);
    else throw ConfigError("unknown model config key \"" + k + "\"");
  }
  return c;
}

// ---------------------------------------------------------------------------
// PushdownModel

ad::Parameter* PushdownModel::add(const std::string& name, Shape shape, double std, double fill) {
  Tensor t(std::move(shape), fill);
  if (std > 0.0) {
    std::seed_seq seq{static_cast<std::uint32_t>(config_.seed), static_cast<std::uint32_t>(config_.seed >> 32),
                      static_cast<std::uint32_t>(fnv1a(name)), static_cast<std::uint32_t>(fnv1a(name) >> 32)};
    std::mt19937_64 rng(seq);
    for (auto& v : t.storage()) v = std * normal(rng);
  }
  storage_.push_back(std::make_unique<ad::Parameter>(name, std::move(t)));
  order_.push_back(storage_.back().get());
  return order_.back();
}

PushdownModel::PushdownModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto d = static_cast<std::size_t>(config_.dim);
  const auto f = static_cast<std::size_t>(config_.ff());
  const auto V = static_cast<std::size_t>(config_.vocab);
  const auto D = static_cast<std::size_t>(config_.max_depth) + 1;
  const double s = config_.init_std;

  tok_emb_ = add("tok_emb", {V, d}, s);
  pos_emb_ = add("pos_emb", {static_cast<std::size_t>(config_.max_seq_len), d}, s);
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Layer L{};
    L.ln1_g = add(p + "ln1.g", {d}, 0.0, 1.0);
    L.ln1_b = add(p + "ln1.b", {d}, 0.0);
    L.w_qkv = add(p + "attn.w_qkv", {d, 3 * d}, s);
    L.b_qkv = add(p + "attn.b_qkv", {3 * d}, 0.0);
    L.w_o = add(p + "attn.w_o", {d, d}, s);
    L.b_o = add(p + "attn.b_o", {d}, 0.0);
    L.ln2_g = add(p + "ln2.g", {d}, 0.0, 1.0);
    L.ln2_b = add(p + "ln2.b", {d}, 0.0);
    L.w_ff1 = add(p + "ff.w1", {d, f}, s);
    L.b_ff1 = add(p + "ff.b1", {f}, 0.0);
    L.w_ff2 = add(p + "ff.w2", {f, d}, s);
    L.b_ff2 = add(p + "ff.b2", {d}, 0.0);
    if (config_.is_pushdown_layer(l)) L.depth = add(p + "depth", {D, d}, s);
    layers_.push_back(L);
  }
  lnf_g_ = add("ln_f.g", {d}, 0.0, 1.0);
  lnf_b_ = add("ln_f.b", {d}, 0.0);
  lm_w_ = add("lm.w", {d, V}, s);
  lm_b_ = add("lm.b", {V}, 0.0);

  if (config_.has_attachment_head()) {
    const auto e = static_cast<std::size_t>(config_.attach_hidden());
    head_.w_qk = add("attach.w_qk", {d, 2 * e}, s);
    head_.b_qk = add("attach.b_qk", {2 * e}, 0.0);
    head_.q_w1 = add("attach.q_mlp.w1", {e + d, e}, s);
    head_.q_b1 = add("attach.q_mlp.b1", {e}, 0.0);
    head_.q_w2 = add("attach.q_mlp.w2", {e, e}, s);
    head_.q_b2 = add("attach.q_mlp.b2", {e}, 0.0);
    head_.k_w1 = add("attach.k_mlp.w1", {e + d, e}, s);
    head_.k_b1 = add("attach.k_mlp.b1", {e}, 0.0);
    head_.k_w2 = add("attach.k_mlp.w2", {e, e}, s);
    head_.k_b2 = add("attach.k_mlp.b2", {e}, 0.0);
    if (config_.attach == AttachVariant::mlp) {
      head_.beta = add("attach.beta", {D, e}, s);
      head_.ks_w1k = add("attach.ks.w1k", {e, e}, s);
      head_.ks_w1d = add("attach.ks.w1d", {e, e}, s);
      head_.ks_b1 = add("attach.ks.b1", {e}, 0.0);
      head_.ks_w2 = add("attach.ks.w2", {e, e}, s);
      head_.ks_b2 = add("attach.ks.b2", {e}, 0.0);
    }
  }
}

ad::Parameter* PushdownModel::find(const std::string& name) const {
  for (auto* p : order_)
    if (p->name == name) return p;
  return nullptr;
}

std::size_t PushdownModel::parameter_count() const {
  std::size_t n = 0;
  for (auto* p : order_) n += p->value.size();
  return n;
}

void PushdownModel::zero_grad() {
  for (auto* p : order_) p->zero_grad();
}

void PushdownModel::copy_parameters_from(const PushdownModel& other) {
  for (auto* p : order_) {
    const ad::Parameter* q = other.find(p->name);
    if (q && q->value.same_shape(p->value)) p->value = q->value;
  }
}

std::vector<ad::Parameter*> PushdownModel::depth_tables() const {
  std::vector<ad::Parameter*> out;
  for (const auto& L : layers_)
    if (L.depth) out.push_back(L.depth);
  return out;
}

int PushdownModel::clamp_depth(int depth) const {
  if (depth < 0) throw DimensionError("negative tape depth " + std::to_string(depth));
  if (depth > config_.max_depth) {
    if (!config_.clamp_depth) {
      throw DimensionError("tape depth " + std::to_string(depth) + " exceeds max_depth " +
                           std::to_string(config_.max_depth) + " and clamping is disabled");
    }
    return config_.max_depth;
  }
  return depth;
}

ForwardOutputs PushdownModel::forward(ad::Graph& g, const ModelInput& in,
                                      std::vector<std::vector<double>>* attention) const {
  const std::size_t B = in.batch, T = in.seq_len, rows = B * T;
  const auto d = static_cast<std::size_t>(config_.dim);
  if (T == 0 || B == 0) throw DimensionError("forward: empty batch");
  if (T > static_cast<std::size_t>(config_.max_seq_len)) {
    throw DimensionError("forward: length " + std::to_string(T) + " exceeds max_seq_len " +
                         std::to_string(config_.max_seq_len));
  }
  if (in.tokens.size() != rows || in.next_tokens.size() != rows) {
    throw DimensionError("forward: token arrays do not match batch x length");
  }
  const bool needs_tape = config_.mode != ModelMode::base_plain;
  ad::DepthTape tape;
  if (needs_tape) {
    if (in.tape.size() != rows * T) throw DimensionError("forward: tape is not batch x T x T");
    auto t = std::make_shared<std::vector<int>>(in.tape.size());
    for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = clamp_depth(in.tape[i]);
    tape = std::move(t);
  }

  std::vector<int> pos(rows);
  for (std::size_t i = 0; i < rows; ++i) pos[i] = static_cast<int>(i % T);
  ad::Var x = ad::add(ad::embedding(g.param(*tok_emb_), in.tokens), ad::embedding(g.param(*pos_emb_), pos));
  x = ad::dropout(x, config_.dropout);

  const kernels::AttentionDims dims{B, T, static_cast<std::size_t>(config_.heads), d};
  if (attention) attention->assign(layers_.size(), {});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& L = layers_[l];
    ad::Var a = ad::layer_norm(x, g.param(*L.ln1_g), g.param(*L.ln1_b));
    ad::Var qkv = ad::add_bias(ad::matmul(a, g.param(*L.w_qkv)), g.param(*L.b_qkv));
    std::optional<ad::Var> depth;
    if (L.depth) depth = g.param(*L.depth);
    ad::Var att = ad::causal_attention(qkv, depth, L.depth ? tape : nullptr, dims,
                                       attention ? &(*attention)[l] : nullptr);
    ad::Var o = ad::add_bias(ad::matmul(att, g.param(*L.w_o)), g.param(*L.b_o));
    x = ad::add(x, ad::dropout(o, config_.dropout));
    ad::Var f = ad::layer_norm(x, g.param(*L.ln2_g), g.param(*L.ln2_b));
    f = ad::gelu(ad::add_bias(ad::matmul(f, g.param(*L.w_ff1)), g.param(*L.b_ff1)));
    f = ad::add_bias(ad::matmul(f, g.param(*L.w_ff2)), g.param(*L.b_ff2));
    x = ad::add(x, ad::dropout(f, config_.dropout));
  }
  ad::Var h = ad::layer_norm(x, g.param(*lnf_g_), g.param(*lnf_b_));

  ForwardOutputs out;
  out.hidden = h;
  out.lm_logits = ad::add_bias(ad::matmul(h, g.param(*lm_w_)), g.param(*lm_b_));
  if (!config_.has_attachment_head()) return out;

  const auto e = static_cast<std::size_t>(config_.attach_hidden());
  const double scale = 1.0 / std::sqrt(static_cast<double>(e));
  ad::Var qk = ad::add_bias(ad::matmul(h, g.param(*head_.w_qk)), g.param(*head_.b_qk));
  ad::Var q = ad::slice_cols(qk, 0, e);
  ad::Var k = ad::slice_cols(qk, e, e);
  ad::Var fused = ad::concat_cols(q, ad::embedding(g.param(*tok_emb_), in.next_tokens));
  auto mlp = [&](ad::Parameter* w1, ad::Parameter* b1, ad::Parameter* w2, ad::Parameter* b2) {
    ad::Var z = ad::gelu(ad::add_bias(ad::matmul(fused, g.param(*w1)), g.param(*b1)));
    return ad::add_bias(ad::matmul(z, g.param(*w2)), g.param(*b2));
  };
  ad::Var q_next = mlp(head_.q_w1, head_.q_b1, head_.q_w2, head_.q_b2);
  ad::Var k_next = mlp(head_.k_w1, head_.k_b1, head_.k_w2, head_.k_b2);

  ad::AttachmentInputs ai;
  ai.self_score = ad::row_dot(q_next, k_next);
  if (config_.attach == AttachVariant::mlp) {
    ai.kpre = ad::add_bias(ad::matmul(k, g.param(*head_.ks_w1k)), g.param(*head_.ks_b1));
    ai.dpre = ad::matmul(g.param(*head_.beta), g.param(*head_.ks_w1d));
    ad::Var w2 = g.param(*head_.ks_w2);
    ai.u = ad::matmul(q_next, ad::transpose(w2));
    ai.row_bias = ad::matmul(q_next, ad::reshape(g.param(*head_.ks_b2), {e, 1}));
    out.attach_logits = ad::attachment_logits(ai, tape, {B, T, e}, kernels::Activation::gelu, scale);
  } else {
    ai.u = q_next;
    ai.kpre = k;
    out.attach_logits = ad::attachment_logits(ai, nullptr, {B, T, e}, kernels::Activation::identity, scale);
  }
  return out;
}

BatchData PushdownModel::make_batch(const std::vector<const Sequence*>& seqs) const {
  if (seqs.empty()) throw DimensionError("make_batch: no sequences");
  std::size_t T = 0;
  for (const auto* s : seqs) T = std::max(T, s->ids.size());
  const std::size_t B = seqs.size();
  BatchData bd;
  bd.input.batch = B;
  bd.input.seq_len = T;
  bd.input.tokens.assign(B * T, Vocab::kEos);
  bd.input.next_tokens.assign(B * T, Vocab::kEos);
  bd.input.tape.assign(B * T * T, 0);
  bd.targets.lm.assign(B * T, 0);
  bd.targets.lm_ignore.assign(B * T, 1);
  bd.targets.attach.assign(B * T, 0);
  bd.targets.attach_ignore.assign(B * T, 1);
  bd.targets.attach_keep.assign(B * T * (T + 1), 0);
  for (std::size_t b = 0; b < B; ++b) {
    const Sequence& s = *seqs[b];
    const std::size_t n = s.ids.size();
    bd.lengths.push_back(static_cast<int>(n));
    for (int id : s.ids)
      if (id < 0 || id >= config_.vocab) throw VocabError("token id " + std::to_string(id) + " outside model vocabulary");
    const std::vector<int> S = precompute_tape_matrix(static_cast<int>(n), s.r);
    StackState state;
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t row = b * T + t;
      state = update_stack_tape(state, static_cast<int>(t), s.r[t]);
      if (t + 1 < n) {
        const std::vector<bool> mask = candidate_mask(state, static_cast<int>(t + 1));
        for (std::size_t j = 0; j <= t + 1; ++j) bd.targets.attach_keep[row * (T + 1) + j] = mask[j] ? 1 : 0;
      } else {
        bd.targets.attach_keep[row * (T + 1) + t + 1] = 1;
      }
      bd.input.tokens[row] = s.ids[t];
      if (t + 1 < n) {
        bd.input.next_tokens[row] = s.ids[t + 1];
        bd.targets.lm[row] = s.ids[t + 1];
        bd.targets.lm_ignore[row] = 0;
        bd.targets.attach[row] = s.r[t + 1];
        bd.targets.attach_ignore[row] = 0;
      }
      for (std::size_t j = 0; j <= t; ++j) bd.input.tape[row * T + j] = S[t * n + j];
    }
  }
  return bd;
}

LossParts model_loss(const ForwardOutputs& out, const LossTargets& targets, double lambda_attach,
                     bool mask_candidates) {
  LossParts parts;
  parts.lm = ad::cross_entropy(out.lm_logits, targets.lm, targets.lm_ignore);
  parts.total = parts.lm;
  if (out.attach_logits.valid()) {
    ad::Var logits = out.attach_logits;
    if (mask_candidates) logits = ad::mask_fill(logits, targets.attach_keep);
    parts.attach = ad::cross_entropy(logits, targets.attach, targets.attach_ignore);
    if (lambda_attach != 0.0) parts.total = ad::add(parts.lm, ad::scale(parts.attach, lambda_attach));
  }
  return parts;
}

void log_softmax(const double* logits, std::size_t n, const std::vector<bool>* mask, double* out) {
  double mx = kNegInf;
  for (std::size_t j = 0; j < n; ++j)
    if (!mask || (*mask)[j]) mx = std::max(mx, logits[j]);
  if (mx == kNegInf) throw Error("log_softmax: no finite entry");
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j)
    if (!mask || (*mask)[j]) z += std::exp(logits[j] - mx);
  const double lz = mx + std::log(z);
  for (std::size_t j = 0; j < n; ++j) out[j] = (!mask || (*mask)[j]) ? logits[j] - lz : kNegInf;
}

// ---------------------------------------------------------------------------
// IncrementalModel

IncrementalModel::IncrementalModel(const PushdownModel& model) : model_(model) {
  const auto& c = model.config();
  if (c.has_attachment_head() && c.attach == AttachVariant::mlp) {
    const auto e = static_cast<std::size_t>(c.attach_hidden());
    const auto D = static_cast<std::size_t>(c.max_depth) + 1;
    const auto& H = model.head();
    dpre_.assign(D * e, 0.0);
    kernels::matmul(H.beta->value.data().data(), H.ks_w1d->value.data().data(), dpre_.data(), D, e, e);
    w2t_.resize(e * e);
    const double* w2 = H.ks_w2->value.data().data();
    for (std::size_t i = 0; i < e; ++i)
      for (std::size_t j = 0; j < e; ++j) w2t_[j * e + i] = w2[i * e + j];
  }
}

IncrementalModel::Cache IncrementalModel::empty_cache() const {
  Cache c;
  c.keys.resize(model_.layers().size());
  c.values.resize(model_.layers().size());
  return c;
}

namespace {

// out = x W + b for a single row, in the same order as matmul then add_bias.
void affine_row(const double* x, const ad::Parameter& w, const ad::Parameter& b, double* out) {
  const std::size_t k = w.value.dim(0), n = w.value.dim(1);
  std::fill(out, out + n, 0.0);
  kernels::matmul(x, w.value.data().data(), out, 1, k, n);
  const double* bp = b.value.data().data();
  for (std::size_t j = 0; j < n; ++j) out[j] += bp[j];
}

}  // namespace

void IncrementalModel::extend(Cache& cache, int token, const std::vector<int>& tape_row,
                              std::vector<std::vector<double>>* attention) const {
  const auto& cfg = model_.config();
  const auto d = static_cast<std::size_t>(cfg.dim);
  const auto p = static_cast<std::size_t>(cache.length);
  if (cache.length >= cfg.max_seq_len) throw DimensionError("extend: sequence exceeds max_seq_len");
  if (token < 0 || token >= cfg.vocab) throw VocabError("token id " + std::to_string(token) + " outside vocabulary");
  if (tape_row.size() != p + 1) throw DimensionError("extend: tape row must have length + 1 entries");
  std::vector<int> tape(p + 1);
  const bool uses_tape = cfg.mode != ModelMode::base_plain;
  for (std::size_t j = 0; j <= p; ++j) tape[j] = uses_tape ? model_.clamp_depth(tape_row[j]) : 0;

  std::vector<double> x(d);
  const double* te = model_.tok_emb()->value.data().data() + static_cast<std::size_t>(token) * d;
  const double* pe = model_.pos_emb()->value.data().data() + p * d;
  for (std::size_t c = 0; c < d; ++c) x[c] = te[c] + pe[c];

  const std::size_t H = static_cast<std::size_t>(cfg.heads), hd = d / H;
  std::vector<double> a(d), qkv(3 * d), att(d), o(d), f1(static_cast<std::size_t>(cfg.ff())), f2(d);
  std::vector<double> probs(H * (p + 1));
  if (attention) attention->assign(model_.layers().size(), {});
  for (std::size_t l = 0; l < model_.layers().size(); ++l) {
    const auto& L = model_.layers()[l];
    kernels::layer_norm_row(x.data(), d, L.ln1_g->value.data().data(), L.ln1_b->value.data().data(), 1e-5,
                            a.data(), nullptr, nullptr);
    affine_row(a.data(), *L.w_qkv, *L.b_qkv, qkv.data());
    auto& K = cache.keys[l];
    auto& Vv = cache.values[l];
    K.insert(K.end(), qkv.begin() + static_cast<std::ptrdiff_t>(d), qkv.begin() + static_cast<std::ptrdiff_t>(2 * d));
    Vv.insert(Vv.end(), qkv.begin() + static_cast<std::ptrdiff_t>(2 * d), qkv.end());
    const double* table = L.depth ? L.depth->value.data().data() : nullptr;
    kernels::attention_row(qkv.data(), K.data(), d, Vv.data(), d, p + 1, H, hd, table, tape.data(), probs.data(),
                           p + 1, att.data());
    if (attention) (*attention)[l] = probs;
    affine_row(att.data(), *L.w_o, *L.b_o, o.data());
    for (std::size_t c = 0; c < d; ++c) x[c] = x[c] + o[c];
    kernels::layer_norm_row(x.data(), d, L.ln2_g->value.data().data(), L.ln2_b->value.data().data(), 1e-5,
                            a.data(), nullptr, nullptr);
    affine_row(a.data(), *L.w_ff1, *L.b_ff1, f1.data());
    for (auto& v : f1) v = kernels::activate(kernels::Activation::gelu, v);
    affine_row(f1.data(), *L.w_ff2, *L.b_ff2, f2.data());
    for (std::size_t c = 0; c < d; ++c) x[c] = x[c] + f2[c];
  }
  cache.hidden.resize(d);
  kernels::layer_norm_row(x.data(), d, model_.lnf_g()->value.data().data(), model_.lnf_b()->value.data().data(),
                          1e-5, cache.hidden.data(), nullptr, nullptr);

  if (cfg.has_attachment_head()) {
    const auto e = static_cast<std::size_t>(cfg.attach_hidden());
    const auto& Hd = model_.head();
    std::vector<double> qk(2 * e);
    affine_row(cache.hidden.data(), *Hd.w_qk, *Hd.b_qk, qk.data());
    cache.attach_query.assign(qk.begin(), qk.begin() + static_cast<std::ptrdiff_t>(e));
    if (cfg.attach == AttachVariant::mlp) {
      std::vector<double> kpre(e);
      affine_row(qk.data() + e, *Hd.ks_w1k, *Hd.ks_b1, kpre.data());
      cache.attach_keys.insert(cache.attach_keys.end(), kpre.begin(), kpre.end());
    } else {
      cache.attach_keys.insert(cache.attach_keys.end(), qk.begin() + static_cast<std::ptrdiff_t>(e), qk.end());
    }
  }
  ++cache.length;
}

void IncrementalModel::lm_log_probs(const Cache& cache, std::vector<double>& out) const {
  if (cache.length == 0) throw Error("lm_log_probs: empty cache");
  const auto V = static_cast<std::size_t>(model_.config().vocab);
  std::vector<double> logits(V);
  affine_row(cache.hidden.data(), *model_.lm_w(), *model_.lm_b(), logits.data());
  out.resize(V);
  log_softmax(logits.data(), V, nullptr, out.data());
}

void IncrementalModel::attach_log_probs(const Cache& cache, int next_token, const std::vector<int>& tape_row,
                                        const std::vector<bool>& mask, std::vector<double>& out) const {
  const auto& cfg = model_.config();
  if (!cfg.has_attachment_head()) throw Error("attach_log_probs: model has no attachment head");
  const auto n = static_cast<std::size_t>(cache.length);
  if (tape_row.size() != n || mask.size() != n + 1) throw DimensionError("attach_log_probs: tape/mask size");
  const auto d = static_cast<std::size_t>(cfg.dim);
  const auto e = static_cast<std::size_t>(cfg.attach_hidden());
  const auto& Hd = model_.head();

  std::vector<double> fused(e + d);
  std::copy(cache.attach_query.begin(), cache.attach_query.end(), fused.begin());
  const double* te = model_.tok_emb()->value.data().data() + static_cast<std::size_t>(next_token) * d;
  std::copy(te, te + d, fused.begin() + static_cast<std::ptrdiff_t>(e));
  std::vector<double> z(e), q_next(e), k_next(e);
  affine_row(fused.data(), *Hd.q_w1, *Hd.q_b1, z.data());
  for (auto& v : z) v = kernels::activate(kernels::Activation::gelu, v);
  affine_row(z.data(), *Hd.q_w2, *Hd.q_b2, q_next.data());
  affine_row(fused.data(), *Hd.k_w1, *Hd.k_b1, z.data());
  for (auto& v : z) v = kernels::activate(kernels::Activation::gelu, v);
  affine_row(z.data(), *Hd.k_w2, *Hd.k_b2, k_next.data());
  double self = 0.0;
  for (std::size_t c = 0; c < e; ++c) self += q_next[c] * k_next[c];

  const double scale = 1.0 / std::sqrt(static_cast<double>(e));
  std::vector<double> logits(n + 1);
  if (cfg.attach == AttachVariant::mlp) {
    std::vector<int> tape(n);
    for (std::size_t j = 0; j < n; ++j) tape[j] = model_.clamp_depth(tape_row[j]);
    std::vector<double> u(e, 0.0);
    kernels::matmul(q_next.data(), w2t_.data(), u.data(), 1, e, e);
    double rb = 0.0;
    kernels::matmul(q_next.data(), Hd.ks_b2->value.data().data(), &rb, 1, e, 1);
    kernels::attach_row(u.data(), cache.attach_keys.data(), n, dpre_.data(), tape.data(), e,
                        kernels::Activation::gelu, rb, self, scale, logits.data());
  } else {
    kernels::attach_row(q_next.data(), cache.attach_keys.data(), n, nullptr, nullptr, e,
                        kernels::Activation::identity, 0.0, self, scale, logits.data());
  }
  out.resize(n + 1);
  log_softmax(logits.data(), n + 1, &mask, out.data());
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, const PushdownModel& model, const Vocab& vocab) {
  if (vocab.size() != model.config().vocab) {
    throw VocabError("checkpoint vocabulary has " + std::to_string(vocab.size()) + " tokens, model expects " +
                     std::to_string(model.config().vocab));
  }
  io::Writer w;
  w.raw("PDLM");
  w.u32(kCheckpointVersion);
  const auto kv = model.config().to_kv();
  w.u32(static_cast<std::uint32_t>(kv.size()));
  for (const auto& [k, v] : kv) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(vocab.size()));
  for (const auto& t : vocab.tokens()) w.str(t);
  w.u32(static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto* p : model.parameters()) {
    w.str(p->name);
    w.u32(static_cast<std::uint32_t>(p->value.rank()));
    for (auto dim : p->value.shape()) w.u64(dim);
    for (double v : p->value.data()) w.f64(v);
  }
  io::write_file_atomic(path, w.bytes());
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  io::Reader rd(io::read_file(path), path.string());
  rd.expect("PDLM");
  const std::uint32_t version = rd.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  }
  std::map<std::string, std::string> kv;
  for (std::uint32_t i = rd.u32(); i > 0; --i) {
    std::string k = rd.str();
    kv[k] = rd.str();
  }
  std::vector<std::string> tokens(rd.u32());
  for (auto& t : tokens) t = rd.str();
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_kv(kv);
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  LoadedModel out{PushdownModel(cfg), Vocab(tokens)};
  if (out.vocab.size() != cfg.vocab) throw FormatError(path.string() + ": vocabulary size disagrees with config");
  const std::uint32_t count = rd.u32();
  if (count != out.model.parameters().size()) {
    throw FormatError(path.string() + ": " + std::to_string(count) + " tensors, model has " +
                      std::to_string(out.model.parameters().size()));
  }
  for (auto* p : out.model.parameters()) {
    const std::string name = rd.str();
    if (name != p->name) throw FormatError(path.string() + ": tensor \"" + name + "\" where \"" + p->name + "\" expected");
    Shape shape(rd.u32());
    for (auto& s : shape) s = rd.u64();
    if (shape != p->value.shape()) {
      throw FormatError(path.string() + ": tensor " + name + " has shape " + shape_string(shape) + ", expected " +
                        shape_string(p->value.shape()));
    }
    for (auto& v : p->value.storage()) v = rd.f64();
  }
  if (!rd.at_end()) throw FormatError(path.string() + ": trailing bytes");
  return out;
}

}  // namespace pdl
