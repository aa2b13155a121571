#pragma once

#include <memory>
#include <string>
#include <vector>

namespace pdl {

/// Immutable unlabeled binary tree over leaf indices. Subtrees are shared, so
/// copies are cheap and beam hypotheses can hold trees by value.
class BinaryTree {
 public:
  static BinaryTree leaf(int index);
  static BinaryTree node(BinaryTree left, BinaryTree right);

  BinaryTree() = default;

  bool valid() const { return n_ != nullptr; }
  bool is_leaf() const;
  /// Leaf index; only meaningful for leaves.
  int index() const;
  const BinaryTree& left() const;
  const BinaryTree& right() const;
  int first() const;
  int last() const;
  int leaf_count() const { return last() - first() + 1; }

  /// All leaf indices shifted by `delta`.
  BinaryTree shifted(int delta) const;

  /// Spans (first, last) of internal nodes, in pre-order.
  std::vector<std::pair<int, int>> spans() const;

  friend bool operator==(const BinaryTree& a, const BinaryTree& b);

 private:
  struct Node;
  explicit BinaryTree(std::shared_ptr<const Node> n) : n_(std::move(n)) {}
  std::shared_ptr<const Node> n_;
};

struct BinaryTree::Node {
  int first = 0;
  int last = 0;
  BinaryTree left;
  BinaryTree right;
};

inline bool BinaryTree::is_leaf() const { return !n_->left.valid(); }
inline int BinaryTree::index() const { return n_->first; }
inline const BinaryTree& BinaryTree::left() const { return n_->left; }
inline const BinaryTree& BinaryTree::right() const { return n_->right; }
inline int BinaryTree::first() const { return n_->first; }
inline int BinaryTree::last() const { return n_->last; }

/// Bracketed rendering with "X" labels, e.g. "(X (X The dog) (X is happy))".
/// A lone leaf renders as "(X tok)".
std::string to_bracketed(const BinaryTree& tree, const std::vector<std::string>& tokens);
/// Bracketed rendering over leaf indices, e.g. "((0 1) 2)".
std::string to_index_string(const BinaryTree& tree);

/// Folds a sequence of adjacent trees left-branching: ((t0 t1) t2) ...
BinaryTree fold_left(const std::vector<BinaryTree>& forest);

}  // namespace pdl
