#include "pdl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "pdl/binary_io.hpp"
#include "pdl/errors.hpp"
#include "pdl/stack_machine.hpp"

namespace pdl {
namespace {

int to_int(const std::string& k, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<int>(x);
  } catch (const std::exception&) {
    throw ConfigError("config key " + k + ": expected an integer, got \"" + v + "\"");
  }
}

double to_double(const std::string& k, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key " + k + ": expected a number, got \"" + v + "\"");
  }
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (steps < 1) throw ConfigError("train: steps must be >= 1");
  if (warmup < 0 || warmup > steps) throw ConfigError("train: warmup must lie in [0, steps]");
  if (lr < 0.0 || lambda_attach < 0.0 || clip < 0.0) throw ConfigError("train: rates must be >= 0");
  if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
  if (patience < 0) throw ConfigError("train: patience must be >= 0");
  if (eval_batch_size < 1) throw ConfigError("train: eval_batch_size must be >= 1");
}

std::map<std::string, std::string> TrainConfig::to_kv() const {
  return {
      {"batch_size", std::to_string(batch_size)},
      {"steps", std::to_string(steps)},
      {"warmup", std::to_string(warmup)},
      {"lr", fmt(lr)},
      {"schedule", schedule == Schedule::cosine ? "cosine" : "constant"},
      {"lambda_attach", fmt(lambda_attach)},
      {"attach_mask", attach_mask ? "candidates" : "causal"},
      {"eval_every", std::to_string(eval_every)},
      {"patience", std::to_string(patience)},
      {"seed", std::to_string(seed)},
      {"clip", fmt(clip)},
      {"beta1", fmt(beta1)},
      {"beta2", fmt(beta2)},
      {"adam_eps", fmt(adam_eps)},
      {"eval_batch_size", std::to_string(eval_batch_size)},
  };
}

std::map<std::string, std::string> TrainConfig::apply_kv(const std::map<std::string, std::string>& kv) {
  std::map<std::string, std::string> rest;
  for (const auto& [k, v] : kv) {
    if (k == "batch_size") batch_size = to_int(k, v);
    else if (k == "steps") steps = to_int(k, v);
    else if (k == "warmup") warmup = to_int(k, v);
    else if (k == "lr") lr = to_double(k, v);
    else if (k == "schedule") {
      if (v == "cosine") schedule = Schedule::cosine;
      else if (v == "constant") schedule = Schedule::constant;
      else throw ConfigError("config key schedule: expected cosine or constant, got \"" + v + "\"");
    } else if (k == "lambda_attach") lambda_attach = to_double(k, v);
    else if (k == "attach_mask") {
      if (v == "candidates") attach_mask = true;
      else if (v == "causal") attach_mask = false;
      else throw ConfigError("config key attach_mask: expected candidates or causal, got \"" + v + "\"");
    }
    else if (k == "eval_every") eval_every = to_int(k, v);
    else if (k == "patience") patience = to_int(k, v);
    else if (k == "seed") seed = static_cast<std::uint64_t>(to_int(k, v));
    else if (k == "clip") clip = to_double(k, v);
    else if (k == "beta1") beta1 = to_double(k, v);
    else if (k == "beta2") beta2 = to_double(k, v);
    else if (k == "adam_eps") adam_eps = to_double(k, v);
    else if (k == "eval_batch_size") eval_batch_size = to_int(k, v);
    else rest[k] = v;
  }
  return rest;
}

double learning_rate(const TrainConfig& cfg, int step) {
  if (step < cfg.warmup) return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup);
  if (cfg.schedule == Schedule::constant || cfg.steps == cfg.warmup) return cfg.lr;
  const double progress = static_cast<double>(step - cfg.warmup) / static_cast<double>(cfg.steps - cfg.warmup);
  return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * std::min(progress, 1.0)));
}

// ---------------------------------------------------------------------------
// Batches

BatchStream::BatchStream(const std::vector<Sequence>& data, int batch_size, std::uint64_t seed)
    : data_(data), batch_size_(static_cast<std::size_t>(batch_size)), rng_(seed) {
  if (data.empty()) throw Error("BatchStream: empty training data");
  if (batch_size < 1) throw ConfigError("BatchStream: batch size must be >= 1");
}

void BatchStream::refill() {
  std::vector<std::size_t> idx(data_.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng_() % i]);
  // Sort within large windows so batches hold similar lengths but windows
  // still mix the epoch.
  const std::size_t window = batch_size_ * 32;
  for (std::size_t s = 0; s < idx.size(); s += window) {
    const auto e = std::min(idx.size(), s + window);
    std::stable_sort(idx.begin() + static_cast<std::ptrdiff_t>(s), idx.begin() + static_cast<std::ptrdiff_t>(e),
                     [&](std::size_t a, std::size_t b) { return data_[a].ids.size() < data_[b].ids.size(); });
  }
  batches_.clear();
  for (std::size_t s = 0; s < idx.size(); s += batch_size_)
    batches_.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                          idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + batch_size_)));
  for (std::size_t i = batches_.size(); i > 1; --i) std::swap(batches_[i - 1], batches_[rng_() % i]);
  cursor_ = 0;
}

std::vector<const Sequence*> BatchStream::next() {
  if (cursor_ >= batches_.size()) refill();
  std::vector<const Sequence*> out;
  for (std::size_t i : batches_[cursor_]) out.push_back(&data_[i]);
  ++cursor_;
  batch_id_ = served_++;
  return out;
}

// ---------------------------------------------------------------------------
// Validation

ValidationResult validate(const PushdownModel& model, const std::vector<Sequence>& data, int batch_size) {
  if (data.empty()) throw Error("validate: empty data");
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return data[a].ids.size() < data[b].ids.size(); });
  double nll = 0.0;
  std::size_t tokens = 0, attach_total = 0, attach_correct = 0;
  const auto V = static_cast<std::size_t>(model.config().vocab);
  std::vector<double> lp;
  for (std::size_t s = 0; s < idx.size(); s += static_cast<std::size_t>(batch_size)) {
    std::vector<const Sequence*> seqs;
    for (std::size_t i = s; i < std::min(idx.size(), s + static_cast<std::size_t>(batch_size)); ++i)
      seqs.push_back(&data[idx[i]]);
    BatchData bd = model.make_batch(seqs);
    ad::Graph g(false);
    ForwardOutputs out = model.forward(g, bd.input);
    const std::size_t T = bd.input.seq_len;
    const Tensor& lm = out.lm_logits.value();
    lp.resize(std::max(V, T + 1));
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      const Sequence& seq = *seqs[b];
      const std::size_t n = seq.ids.size();
      StackState state;
      state = update_stack_tape(state, 0, seq.r[0]);
      for (std::size_t t = 0; t + 1 < n; ++t) {
        const std::size_t row = b * T + t;
        log_softmax(lm.data().data() + row * V, V, nullptr, lp.data());
        nll -= lp[static_cast<std::size_t>(seq.ids[t + 1])];
        ++tokens;
        if (out.attach_logits.valid()) {
          const std::vector<bool> mask = candidate_mask(state, static_cast<int>(t + 1));
          const double* al = out.attach_logits.value().data().data() + row * (T + 1);
          std::size_t best = 0;
          double best_v = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j <= t + 1; ++j)
            if (mask[j] && al[j] > best_v) {
              best_v = al[j];
              best = j;
            }
          attach_correct += static_cast<int>(best) == seq.r[t + 1] ? 1 : 0;
          ++attach_total;
        }
        state = update_stack_tape(state, static_cast<int>(t + 1), seq.r[t + 1]);
      }
    }
  }
  ValidationResult r;
  r.tokens = tokens;
  r.attachments = attach_total;
  r.nll = nll / static_cast<double>(tokens);
  r.perplexity = std::exp(r.nll);
  r.attach_accuracy = attach_total ? static_cast<double>(attach_correct) / static_cast<double>(attach_total) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Training

std::string metrics_header() { return "step,lm_loss,attach_loss,val_ppl,val_attach_acc,lr\n"; }

std::string format_metrics(const MetricsRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g,%.10g\n", row.step, row.lm_loss, row.attach_loss,
                row.val_ppl, row.val_attach_acc, row.lr);
  return buf;
}

TrainResult train(PushdownModel& model, const std::vector<Sequence>& train_data, const std::vector<Sequence>& val_data,
                  const TrainConfig& cfg, const TrainOutputs& outputs) {
  cfg.validate();
  if (outputs.dir && !outputs.vocab) throw Error("train: writing checkpoints needs the vocabulary");
  const auto& params = model.parameters();
  std::vector<std::vector<double>> m(params.size()), v(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i].assign(params[i]->value.size(), 0.0);
    v[i].assign(params[i]->value.size(), 0.0);
  }
  BatchStream stream(train_data, cfg.batch_size, cfg.seed);
  TrainResult result;
  result.best_ppl = std::numeric_limits<double>::infinity();
  std::string csv = metrics_header();
  double lm_sum = 0.0, attach_sum = 0.0;
  int since_log = 0, bad_evals = 0;
  const bool has_head = model.config().has_attachment_head();

  for (int step = 0; step < cfg.steps; ++step) {
    const auto seqs = stream.next();
    BatchData bd = model.make_batch(seqs);
    ad::Graph g(true, cfg.seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(step) + 1);
    ForwardOutputs out = model.forward(g, bd.input);
    LossParts loss = model_loss(out, bd.targets, cfg.lambda_attach, cfg.attach_mask);
    model.zero_grad();
    g.backward(loss.total);

    double sq = 0.0;
    for (const auto* p : params)
      for (double x : p->grad.data()) sq += x * x;
    const double norm = std::sqrt(sq);
    const double total = loss.total.value().item();
    if (!std::isfinite(total) || !std::isfinite(norm)) {
      std::ostringstream os;
      os << "non-finite loss " << total << " at step " << step << ", batch " << stream.batch_id()
         << "; gradient norms:";
      for (const auto* p : params) {
        double s = 0.0;
        for (double x : p->grad.data()) s += x * x;
        os << ' ' << p->name << '=' << std::sqrt(s);
      }
      throw TrainingError(os.str());
    }
    const double clip_scale = (cfg.clip > 0.0 && norm > cfg.clip) ? cfg.clip / norm : 1.0;
    const double lr = learning_rate(cfg, step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(cfg.beta2, step + 1);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& w = params[i]->value.storage();
      const auto& gr = params[i]->grad.storage();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = gr[j] * clip_scale;
        m[i][j] = cfg.beta1 * m[i][j] + (1.0 - cfg.beta1) * gj;
        v[i][j] = cfg.beta2 * v[i][j] + (1.0 - cfg.beta2) * gj * gj;
        w[j] -= lr * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + cfg.adam_eps);
      }
    }

    lm_sum += loss.lm.value().item();
    attach_sum += has_head ? loss.attach.value().item() : 0.0;
    ++since_log;
    const bool last = step + 1 == cfg.steps;
    if ((step + 1) % cfg.eval_every != 0 && !last) continue;

    const ValidationResult val = validate(model, val_data, cfg.eval_batch_size);
    MetricsRow row{step + 1, lm_sum / since_log, attach_sum / since_log, val.perplexity, val.attach_accuracy, lr};
    lm_sum = attach_sum = 0.0;
    since_log = 0;
    result.log.push_back(row);
    csv += format_metrics(row);
    const bool improved = val.perplexity < result.best_ppl;
    if (improved) {
      result.best_ppl = val.perplexity;
      result.best_step = step + 1;
      bad_evals = 0;
    } else {
      ++bad_evals;
    }
    if (outputs.dir) {
      io::write_file_atomic(*outputs.dir / "metrics.csv", csv);
      if (improved) save_checkpoint(*outputs.dir / "model.ckpt", model, *outputs.vocab);
    }
    if (outputs.on_eval) outputs.on_eval(row);
    if (cfg.patience > 0 && bad_evals >= cfg.patience && !last) {
      result.stopped_early = true;
      break;
    }
  }
  if (outputs.dir) save_checkpoint(*outputs.dir / "last.ckpt", model, *outputs.vocab);
  return result;
}

}  // namespace pdl
