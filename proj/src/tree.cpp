#include "pdl/tree.hpp"

#include "pdl/errors.hpp"

namespace pdl {

BinaryTree BinaryTree::leaf(int index) {
  auto n = std::make_shared<Node>();
  n->first = n->last = index;
  return BinaryTree(std::move(n));
}

BinaryTree BinaryTree::node(BinaryTree left, BinaryTree right) {
  if (!left.valid() || !right.valid()) throw Error("BinaryTree::node: empty child");
  if (left.last() + 1 != right.first()) {
    throw Error("BinaryTree::node: children are not adjacent (" + std::to_string(left.last()) + ", " +
                std::to_string(right.first()) + ")");
  }
  auto n = std::make_shared<Node>();
  n->first = left.first();
  n->last = right.last();
  n->left = std::move(left);
  n->right = std::move(right);
  return BinaryTree(std::move(n));
}

BinaryTree BinaryTree::shifted(int delta) const {
  if (is_leaf()) return leaf(index() + delta);
  return node(left().shifted(delta), right().shifted(delta));
}

namespace {

void collect_spans(const BinaryTree& t, std::vector<std::pair<int, int>>& out) {
  if (t.is_leaf()) return;
  out.emplace_back(t.first(), t.last());
  collect_spans(t.left(), out);
  collect_spans(t.right(), out);
}

void render(const BinaryTree& t, const std::vector<std::string>& tokens, std::string& out) {
  if (t.is_leaf()) {
    out += tokens.at(static_cast<std::size_t>(t.index()));
    return;
  }
  out += "(X ";
  render(t.left(), tokens, out);
  out += ' ';
  render(t.right(), tokens, out);
  out += ')';
}

void render_index(const BinaryTree& t, std::string& out) {
  if (t.is_leaf()) {
    out += std::to_string(t.index());
    return;
  }
  out += '(';
  render_index(t.left(), out);
  out += ' ';
  render_index(t.right(), out);
  out += ')';
}

}  // namespace

std::vector<std::pair<int, int>> BinaryTree::spans() const {
  std::vector<std::pair<int, int>> out;
  collect_spans(*this, out);
  return out;
}

bool operator==(const BinaryTree& a, const BinaryTree& b) {
  if (a.valid() != b.valid()) return false;
  if (!a.valid()) return true;
  if (a.n_ == b.n_) return true;
  if (a.first() != b.first() || a.last() != b.last() || a.is_leaf() != b.is_leaf()) return false;
  if (a.is_leaf()) return true;
  return a.left() == b.left() && a.right() == b.right();
}

std::string to_bracketed(const BinaryTree& tree, const std::vector<std::string>& tokens) {
  std::string out;
  if (tree.is_leaf()) {
    out = "(X " + tokens.at(static_cast<std::size_t>(tree.index())) + ")";
    return out;
  }
  render(tree, tokens, out);
  return out;
}

std::string to_index_string(const BinaryTree& tree) {
  std::string out;
  render_index(tree, out);
  return out;
}

BinaryTree fold_left(const std::vector<BinaryTree>& forest) {
  if (forest.empty()) throw Error("fold_left: empty forest");
  BinaryTree acc = forest.front();
  for (std::size_t i = 1; i < forest.size(); ++i) acc = BinaryTree::node(acc, forest[i]);
  return acc;
}

}  // namespace pdl
