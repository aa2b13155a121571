#pragma once

// Evaluation reports: closing-bracket accuracy on Dyck splits, unlabeled span
// F1, perplexity tables and attention maps.

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pdl/dyck.hpp"
#include "pdl/model.hpp"
#include "pdl/tree.hpp"

namespace pdl {

enum class TapeMode {
  model_greedy,  // the model parses its own prefix, argmax attachments
  gold_oracle,   // the prefix tape comes from the gold Dyck tree
};

const char* tape_mode_name(TapeMode m);
TapeMode parse_tape_mode(const std::string& s);

struct EvalRecord {
  std::string task;
  int prefix_len = 0;
  int distance = 0;
  int depth = 0;
  int bucket = 0;
  int gold_type = 0;
  bool correct = false;
  /// log p(closing bracket of type t | prefix) for every type t.
  std::vector<double> candidate_logprobs;
};

struct BucketStats {
  int total = 0;
  int correct = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

struct ClosingReport {
  std::vector<EvalRecord> records;
  std::map<int, BucketStats> buckets;
  BucketStats overall;
};

/// The prediction for an item is the argmax over the closing-bracket tokens
/// only (lowest type wins ties). Items are evaluated independently.
ClosingReport closing_accuracy(const PushdownModel& model, const std::vector<ClosingItem>& split, int num_types,
                               TapeMode mode, const std::string& task = "closing",
                               SiblingBranching branching = SiblingBranching::left);

/// CSV: `task,bucket,count,correct,accuracy` per bucket, then bucket `all`.
std::string closing_csv(const ClosingReport& report, const std::string& task);
/// CSV with one row per record.
std::string closing_records_csv(const ClosingReport& report);

struct F1Result {
  int matched = 0;
  int gold = 0;
  int predicted = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  /// Adds the counts of `other` and recomputes the scores (micro average).
  void add(const F1Result& other);
};

/// Unlabeled spans of a tree: internal nodes except the whole-sentence span.
std::vector<std::pair<int, int>> eval_spans(const BinaryTree& tree);

/// Scores are percentages. With no spans on either side P = R = F1 = 100.
F1Result unlabeled_f1(const BinaryTree& pred, const BinaryTree& gold);
F1Result unlabeled_f1(const std::vector<BinaryTree>& pred, const std::vector<BinaryTree>& gold);

struct PerplexityRow {
  std::string name;
  std::size_t tokens = 0;
  double nll = 0.0;
  double perplexity = 0.0;
};

/// Teacher-forced perplexity of each model on the same sequences (gold tapes).
std::vector<PerplexityRow> perplexity_report(const std::vector<std::pair<std::string, const PushdownModel*>>& models,
                                             const std::vector<Sequence>& corpus, int batch_size = 64);
/// CSV: `model,tokens,nll,perplexity`.
std::string perplexity_csv(const std::vector<PerplexityRow>& rows);

struct AttentionProbe {
  Sequence seq;      // tapes come from seq.r
  int query = 0;     // row of the attention matrices to inspect
  std::vector<int> targets;
};

/// For each item: the prefix (with ROOT) is the probe, the query is its last
/// token and the targets are the still-unmatched open brackets.
std::vector<AttentionProbe> dyck_attention_probes(const std::vector<ClosingItem>& items, int num_types,
                                                  SiblingBranching branching = SiblingBranching::left);

struct AttentionReport {
  std::size_t layers = 0;
  /// Per probe: per layer, head-averaged attention row at the query position.
  std::vector<std::vector<std::vector<double>>> rows;
  /// Per probe: layer-averaged row.
  std::vector<std::vector<double>> mean_rows;
  /// Mean over probes of the attention mass on the targets, per layer.
  std::vector<double> layer_target_mass;
  /// Same, averaged over layers.
  double target_mass = 0.0;
};

AttentionReport attention_analysis(const PushdownModel& model, const std::vector<AttentionProbe>& probes);

/// Head- and layer-averaged `T x T` attention matrix of one sequence.
std::vector<std::vector<double>> attention_matrix(const PushdownModel& model, const Sequence& seq);

/// CSV: header `layer,pos0,pos1,...`, one row per layer then `mean`.
std::string attention_rows_csv(const AttentionReport& report, std::size_t probe);
/// CSV of a square matrix with a token header row.
std::string matrix_csv(const std::vector<std::vector<double>>& m, const std::vector<std::string>& labels);
/// Grayscale heatmap, darker is more weight, tokens along both axes.
std::string heatmap_svg(const std::vector<std::vector<double>>& m, const std::vector<std::string>& labels);

}  // namespace pdl
