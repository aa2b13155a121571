#pragma once

// Bounded-depth Dyck languages: sampling, gold trees and the closing-bracket
// test splits (deeper nesting, long-range dependencies).

#include <cstdint>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "pdl/tree.hpp"
#include "pdl/treebank.hpp"

namespace pdl {

enum class SiblingBranching {
  left,   // open, children and close folded left-branching
  right,  // (open (child (child ... close)))
};

struct DyckSpec {
  int num_types = 20;
  int max_depth = 10;
  double open_prob = 0.49;
  int min_length = 4;
  int max_length = 256;
  std::uint64_t seed = 0;
  SiblingBranching branching = SiblingBranching::left;

  /// Throws ConfigError when the fields cannot produce a string.
  void validate() const;
};

struct DyckString {
  std::vector<int> types;
  std::vector<bool> opens;
  std::vector<int> matching;  // partner position of every bracket
  std::vector<int> depth;     // nesting depth of the pair, outermost = 1

  int size() const { return static_cast<int>(types.size()); }
  int max_depth() const;
};

std::string open_token(int type);
std::string close_token(int type);

/// ROOT, EOS, then `<0 .. <k-1`, then `0> .. k-1>`.
Vocab dyck_vocab(int num_types);
int open_id(int type);
int close_id(int type, int num_types);

/// Validates nesting and fills matching/depth. Throws Error on ill-nested input.
DyckString make_dyck(std::vector<int> types, std::vector<bool> opens);
/// Parses tokens like "<3" / "3>".
DyckString dyck_from_tokens(const std::vector<std::string>& tokens);
std::vector<std::string> dyck_tokens(const DyckString& s);
std::vector<int> dyck_ids(const DyckString& s, int num_types);

/// One string from `rng`. Length is drawn uniformly among the even values of
/// [min_length, max_length]; opens happen with `open_prob` unless forced.
DyckString sample_one(const DyckSpec& spec, std::mt19937_64& rng);
/// `count` strings from the generator seeded by (spec.seed, shard).
std::vector<DyckString> sample_dyck(const DyckSpec& spec, std::size_t count, std::uint64_t shard = 0);

/// Gold tree without ROOT: every matched pair is a constituent.
BinaryTree dyck_gold_tree(const DyckString& s, SiblingBranching branching = SiblingBranching::left);
Sequence dyck_sequence(const DyckString& s, int num_types, SiblingBranching branching);

std::uint64_t dyck_hash(const DyckString& s);

/// A prefix ending right before a closing bracket.
struct ClosingItem {
  DyckString source;  // full string the prefix was cut from
  int prefix_len = 0; // tokens before the closing bracket
  int gold_type = 0;
  int distance = 0;   // prefix_len - position of the matching open
  int depth = 0;      // nesting depth of the pair being closed
  int bucket = 0;     // target distance or depth used for reporting
};

struct SplitOptions {
  std::uint64_t seed = 1;
  int max_prefix_len = 255;
  int min_length = 4;
  int max_length = 256;
  double open_prob = 0.49;
  double slack = 0.1;
  std::size_t attempts_per_item = 2000;
  const std::unordered_set<std::uint64_t>* exclude = nullptr;
};

/// Strings whose max depth lies in [min_depth, max_depth]; one item per
/// string, at a close whose pair depth exceeds the training max depth.
std::vector<ClosingItem> build_depth_gen_split(const DyckSpec& train_spec, int min_depth, int max_depth,
                                               std::size_t count, const SplitOptions& opt);

/// For every target t, `count` items with distance in [t, floor(t * (1 + slack))].
/// Throws Error with the achieved counts when the sampling budget runs out.
std::vector<ClosingItem> build_longrange_split(const DyckSpec& train_spec, const std::vector<int>& targets,
                                               std::size_t count, const SplitOptions& opt);

/// Split file: a `# closing-split num_types=K` header, then one item per line:
/// `prefix_len gold_type distance depth bucket<TAB>source tokens`.
std::string format_split(const std::vector<ClosingItem>& items, int num_types);
/// Returns the items and stores the header's type count in `num_types`.
/// Throws FormatError with a line number on malformed input.
std::vector<ClosingItem> parse_split(const std::string& text, int& num_types, const std::string& source = "split");

}  // namespace pdl
