#pragma once

// Synchronous decoding: every token is followed by its attachment decision,
// which updates the stack tape that the next token's attention reads.
//
// Word lists passed here never contain ROOT or EOS; both are added
// internally. Attachment histories do include ROOT (r[0] == 0), so a history
// for n words has n + 1 entries. The attachment of EOS is fixed to shift and
// is not scored.
//
// Parses of a complete string range over ROOT-attached trees: every word but
// the last shifts or reduces below ROOT and the last word reduces with ROOT,
// so n words have Catalan(n - 1) histories. Beam search, enumeration and
// best_parse obey this; score_history and generate accept any valid history.

#include <cstdint>
#include <vector>

#include "pdl/model.hpp"
#include "pdl/stack_machine.hpp"
#include "pdl/tree.hpp"

namespace pdl {

enum class DecodeMode { score, parse, surprisal, generate };

struct BeamConfig {
  int width = 32;
  DecodeMode mode = DecodeMode::score;
  /// Maximum number of words (generation cap, and a guard elsewhere).
  int max_length = 254;
  /// 0 -> argmax next token.
  double temperature = 0.0;
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
};

struct Hypothesis {
  std::vector<int> r;
  StackState state;
  double logprob = 0.0;
  IncrementalModel::Cache cache;
};

struct Generation {
  std::vector<int> words;
  std::vector<int> r;
  BinaryTree tree;
  double logprob = 0.0;
  /// log p(x_k) + log p(r_k) per word, then log p(EOS) when it was emitted.
  std::vector<double> step_logprobs;
  bool ended = false;
};

struct ParseResult {
  BinaryTree tree;
  std::vector<int> r;
  double logprob = 0.0;
};

/// Removes leaf 0 (ROOT) from a tree over ROOT + words, renumbering the rest.
BinaryTree drop_root(const BinaryTree& tree);

/// Word tree of a history (forests are folded left-branching).
BinaryTree history_tree(const std::vector<int>& r);

Generation generate(const PushdownModel& model, const std::vector<int>& prompt, const BeamConfig& config);

/// log p(x, y) with the tree's gold attachments.
double score_joint(const PushdownModel& model, const std::vector<int>& words, const BinaryTree& tree);
/// log p(x, r) for an explicit history (n + 1 entries).
double score_history(const PushdownModel& model, const std::vector<int>& words, const std::vector<int>& r);

/// Beam approximation of log p(x). Base LMs without an attachment head
/// return the plain LM log-probability.
double marginal_logprob(const PushdownModel& model, const std::vector<int>& words, const BeamConfig& config);

/// -log p(x_t | x_<t) for every word and finally EOS (n + 1 values), from
/// the beam mass before and after each token. Without pruning they sum to
/// -marginal_logprob.
std::vector<double> surprisal(const PushdownModel& model, const std::vector<int>& words, const BeamConfig& config);

ParseResult best_parse(const PushdownModel& model, const std::vector<int>& words, const BeamConfig& config);

/// Every ROOT-attached tree history for `words` words, in lexicographic order.
std::vector<std::vector<int>> all_histories(int words);

/// log p(x) by summing over all histories (feasible for short inputs).
double exhaustive_marginal(const PushdownModel& model, const std::vector<int>& words);

/// Greedy self-parse of the prefix `words`: attachments are argmax under the
/// mask, with ROOT excluded since the string continues.
/// Returns the history and the next-token log-probabilities after the last word.
struct GreedyPrefix {
  std::vector<int> r;
  std::vector<double> next_log_probs;
};
GreedyPrefix greedy_prefix(const PushdownModel& model, const std::vector<int>& words);

/// Next-token log-probabilities after `words` with a fixed history.
std::vector<double> forced_prefix(const PushdownModel& model, const std::vector<int>& words,
                                  const std::vector<int>& r);

double log_sum_exp(const std::vector<double>& xs);

}  // namespace pdl
