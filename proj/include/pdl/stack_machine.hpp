#pragma once

// The pushdown state: a stack of constituents and the stack tape of token
// depths. `update_stack_tape` is the only way to advance it.

#include <string>
#include <utility>
#include <vector>

#include "pdl/tree.hpp"

namespace pdl {

struct Constituent {
  int first = 0;
  int last = 0;
  BinaryTree tree;
};

/// State after tokens 0..k-1 have been attached. Updates return a new value.
struct StackState {
  std::vector<int> tape;
  std::vector<Constituent> stack;

  /// Number of tokens attached so far (the next token index).
  int size() const { return static_cast<int>(tape.size()); }
};

/// Attaches token `k` with decision `r`: `r == k` shifts a singleton,
/// otherwise constituents are popped and merged with the growing one until
/// the constituent whose rightmost token is `r` has been merged. Every merge
/// deepens each token of the result by one.
/// Throws AttachmentError when `r` is not a valid candidate.
StackState update_stack_tape(const StackState& state, int k, int r);

/// Valid attachment slots for token `k`: rightmost tokens of the stack
/// constituents, plus `k` itself (shift). Size `k + 1`.
std::vector<bool> candidate_mask(const StackState& state, int k);

/// Runs a full attachment sequence from the empty state.
/// Returns the final state and the tree (a forest is folded left-branching).
std::pair<StackState, BinaryTree> replay(const std::vector<int>& r);

/// Debug line: `k r_k tape=[...] stack=[[..],[..]]`.
std::string dump_step(int k, int r, const StackState& state);

}  // namespace pdl
