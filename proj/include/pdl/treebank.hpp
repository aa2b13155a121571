#pragma once

// Bracketed constituency trees -> binary trees -> ROOT-initial token
// sequences with gold attachment decisions and stack-tape matrices.

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pdl/tree.hpp"

namespace pdl {

struct ParseTree {
  std::optional<std::string> label;
  std::string token;  // leaves only
  std::vector<ParseTree> children;

  bool is_leaf() const { return children.empty(); }
  friend bool operator==(const ParseTree&, const ParseTree&) = default;
};

/// Parses one PTB-style tree. The first atom after "(" is a label when the
/// bracket holds at least two elements, so "(X a)" is a one-leaf tree.
/// Throws ParseError with the byte offset of the fault.
ParseTree parse_sexpr(std::string_view text);
std::string to_sexpr(const ParseTree& tree);
std::vector<std::string> leaves(const ParseTree& tree);

/// Drops labels, collapses unary chains and binarizes n-ary nodes
/// left-branching: (A B C) -> ((A B) C). Leaves are numbered 0..n-1.
BinaryTree binarize(const ParseTree& tree);

/// (ROOT tree) with ROOT as leaf 0 and every other leaf shifted by one.
BinaryTree attach_root(const BinaryTree& tree);

/// Gold attachment per leaf: for the maximal constituent C ending at k,
/// r[k] is the rightmost leaf of C's left child, or k when C is the leaf.
std::vector<int> oracle_extract(const BinaryTree& tree);

/// Row-major `[n x n]` lower-triangular matrix whose row k is the tape after
/// token k's attachment. Entries above the diagonal are 0.
/// Throws SupervisionError naming the first invalid position.
std::vector<int> precompute_tape_matrix(int n, const std::vector<int>& r);

class Vocab {
 public:
  static constexpr int kRoot = 0;
  static constexpr int kEos = 1;
  static constexpr const char* kRootToken = "<root>";
  static constexpr const char* kEosToken = "<eos>";

  Vocab();
  explicit Vocab(const std::vector<std::string>& tokens);

  int add(const std::string& token);
  std::optional<int> find(const std::string& token) const;
  /// Throws VocabError for unknown tokens.
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

/// ids = [ROOT, words..., EOS]; r has the same length. ROOT and EOS shift.
struct Sequence {
  std::vector<int> ids;
  std::vector<int> r;

  int length() const { return static_cast<int>(ids.size()); }
  int words() const { return length() - 2; }
};

struct Corpus {
  Vocab vocab;
  std::vector<Sequence> sequences;
};

/// Builds the ROOT/EOS sequence for a ROOT-less tree over `word_ids`.
Sequence make_sequence(const BinaryTree& tree, const std::vector<int>& word_ids);

/// Word tree of a sequence (ROOT and EOS removed), rebuilt from its gold r.
BinaryTree gold_word_tree(const Sequence& seq);

enum class VocabPolicy {
  build,   // extend the vocabulary with new tokens
  frozen,  // unknown tokens are errors
};

/// One bracketed tree per non-blank line. With `frozen`, `vocab` must be
/// given; with `build`, it seeds the vocabulary when present.
/// Throws ParseError (message names the line) or VocabError.
Corpus load_corpus(const std::filesystem::path& path, VocabPolicy policy, const Vocab* vocab = nullptr);

/// Binary cache: "PDLC", u32 version, u32 vocab size + strings, u32 sequence
/// count, then per sequence u32 length, i32 ids[length], i32 r[length].
void save_corpus_cache(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus_cache(const std::filesystem::path& path);

}  // namespace pdl
