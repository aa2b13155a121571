#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pdl/errors.hpp"
#include "pdl/model.hpp"
#include "pdl/treebank.hpp"

namespace pdl {

enum class Schedule { cosine, constant };

struct TrainConfig {
  int batch_size = 32;
  int steps = 1000;
  int warmup = 100;
  double lr = 1e-3;
  Schedule schedule = Schedule::cosine;
  double lambda_attach = 1.0;
  bool attach_mask = true;  // normalize the attachment loss over stack candidates
  int eval_every = 100;
  int patience = 0;  // evaluations without improvement before stopping; 0 = never
  std::uint64_t seed = 0;
  double clip = 1.0;  // global gradient-norm bound; 0 disables
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int eval_batch_size = 64;

  void validate() const;
  std::map<std::string, std::string> to_kv() const;
  /// Applies the known keys of `kv` and returns the rest.
  std::map<std::string, std::string> apply_kv(const std::map<std::string, std::string>& kv);
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Learning rate before update `step` (0-based): linear warmup from 0 to
/// `lr`, then cosine decay to 0 or constant.
double learning_rate(const TrainConfig& cfg, int step);

/// Endless stream of length-bucketed batches, reshuffled every epoch.
class BatchStream {
 public:
  BatchStream(const std::vector<Sequence>& data, int batch_size, std::uint64_t seed);
  std::vector<const Sequence*> next();
  /// Index of the batch most recently returned by `next`.
  std::size_t batch_id() const { return batch_id_; }

 private:
  void refill();

  const std::vector<Sequence>& data_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t cursor_ = 0;
  std::size_t batch_id_ = 0;
  std::size_t served_ = 0;
};

struct ValidationResult {
  double perplexity = 0.0;
  double nll = 0.0;           // mean token NLL (nats)
  double attach_accuracy = 0.0;
  std::size_t tokens = 0;
  std::size_t attachments = 0;
};

/// Teacher-forced, dropout-free evaluation with gold tapes. Perplexity covers
/// every predicted token (all but ROOT, EOS included). Attachment accuracy
/// is the argmax over candidate slots against gold.
ValidationResult validate(const PushdownModel& model, const std::vector<Sequence>& data, int batch_size = 64);

struct MetricsRow {
  int step = 0;
  double lm_loss = 0.0;
  double attach_loss = 0.0;
  double val_ppl = 0.0;
  double val_attach_acc = 0.0;
  double lr = 0.0;
};

std::string metrics_header();
std::string format_metrics(const MetricsRow& row);

struct TrainResult {
  std::vector<MetricsRow> log;
  int best_step = 0;
  double best_ppl = 0.0;
  bool stopped_early = false;
};

struct TrainOutputs {
  /// When set: metrics.csv, model.ckpt (best validation) and last.ckpt.
  std::optional<std::filesystem::path> dir;
  const Vocab* vocab = nullptr;
  /// Called after every evaluation.
  std::function<void(const MetricsRow&)> on_eval;
};

/// Adam with warmup + schedule and gradient clipping. Throws TrainingError on
/// a non-finite loss or gradient, naming the batch and the gradient norms.
TrainResult train(PushdownModel& model, const std::vector<Sequence>& train_data, const std::vector<Sequence>& val_data,
                  const TrainConfig& cfg, const TrainOutputs& outputs = {});

}  // namespace pdl
