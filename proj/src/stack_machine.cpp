#include "pdl/stack_machine.hpp"

#include "pdl/errors.hpp"

namespace pdl {

StackState update_stack_tape(const StackState& state, int k, int r) {
  if (k != state.size()) {
    throw AttachmentError("token " + std::to_string(k) + " out of order, expected " + std::to_string(state.size()),
                          static_cast<std::size_t>(k));
  }
  if (r < 0 || r > k) {
    throw AttachmentError("attachment " + std::to_string(r) + " outside [0, " + std::to_string(k) + "]",
                          static_cast<std::size_t>(k));
  }
  StackState next = state;
  next.tape.push_back(0);
  Constituent cur{k, k, BinaryTree::leaf(k)};
  if (r == k) {
    next.stack.push_back(std::move(cur));
    return next;
  }
  bool found = false;
  for (const auto& c : state.stack) found = found || c.last == r;
  if (!found) {
    throw AttachmentError("attachment " + std::to_string(r) + " is not the rightmost token of a stack constituent",
                          static_cast<std::size_t>(k));
  }
  while (true) {
    Constituent top = std::move(next.stack.back());
    next.stack.pop_back();
    for (int j = top.first; j <= k; ++j) ++next.tape[static_cast<std::size_t>(j)];
    cur = Constituent{top.first, k, BinaryTree::node(top.tree, cur.tree)};
    if (top.last == r) break;
  }
  next.stack.push_back(std::move(cur));
  return next;
}

std::vector<bool> candidate_mask(const StackState& state, int k) {
  std::vector<bool> mask(static_cast<std::size_t>(k) + 1, false);
  for (const auto& c : state.stack) mask.at(static_cast<std::size_t>(c.last)) = true;
  mask[static_cast<std::size_t>(k)] = true;
  return mask;
}

std::pair<StackState, BinaryTree> replay(const std::vector<int>& r) {
  if (r.empty()) throw Error("replay: empty attachment sequence");
  StackState state;
  for (std::size_t k = 0; k < r.size(); ++k) state = update_stack_tape(state, static_cast<int>(k), r[k]);
  std::vector<BinaryTree> forest;
  for (const auto& c : state.stack) forest.push_back(c.tree);
  BinaryTree tree = fold_left(forest);
  return {std::move(state), std::move(tree)};
}

std::string dump_step(int k, int r, const StackState& state) {
  std::string out = std::to_string(k) + " " + std::to_string(r) + " tape=[";
  for (std::size_t j = 0; j < state.tape.size(); ++j) {
    if (j) out += ',';
    out += std::to_string(state.tape[j]);
  }
  out += "] stack=[";
  for (std::size_t i = 0; i < state.stack.size(); ++i) {
    if (i) out += ',';
    out += '[';
    for (int j = state.stack[i].first; j <= state.stack[i].last; ++j) {
      if (j != state.stack[i].first) out += ',';
      out += std::to_string(j);
    }
    out += ']';
  }
  out += ']';
  return out;
}

}  // namespace pdl
