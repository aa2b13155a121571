#include "pdl/treebank.hpp"

#include <cctype>

#include "pdl/binary_io.hpp"
#include "pdl/errors.hpp"
#include "pdl/stack_machine.hpp"

namespace pdl {
namespace {

constexpr std::uint32_t kCacheVersion = 1;

class SexprParser {
 public:
  explicit SexprParser(std::string_view text) : s_(text) {}

  ParseTree parse() {
    skip_ws();
    if (pos_ == s_.size()) throw ParseError("empty input", pos_);
    if (s_[pos_] != '(') throw ParseError("expected '('", pos_);
    ParseTree t = bracket();
    skip_ws();
    if (pos_ != s_.size()) throw ParseError("trailing text after tree", pos_);
    return t;
  }

 private:
  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  std::string atom() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() && s_[pos_] != '(' && s_[pos_] != ')' &&
           !std::isspace(static_cast<unsigned char>(s_[pos_])))
      ++pos_;
    return std::string(s_.substr(start, pos_ - start));
  }

  ParseTree bracket() {
    const std::size_t open = pos_;
    ++pos_;  // '('
    std::vector<ParseTree> elems;
    std::vector<bool> is_atom;
    while (true) {
      skip_ws();
      if (pos_ == s_.size()) throw ParseError("unbalanced '(' opened", open);
      if (s_[pos_] == ')') {
        ++pos_;
        break;
      }
      if (s_[pos_] == '(') {
        elems.push_back(bracket());
        is_atom.push_back(false);
      } else {
        ParseTree leaf;
        leaf.token = atom();
        elems.push_back(std::move(leaf));
        is_atom.push_back(true);
      }
    }
    if (elems.empty()) throw ParseError("empty brackets", open);
    ParseTree t;
    if (elems.size() >= 2 && is_atom[0]) {
      t.label = elems[0].token;
      elems.erase(elems.begin());
    }
    t.children = std::move(elems);
    return t;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

void collect_leaves(const ParseTree& t, std::vector<std::string>& out) {
  if (t.is_leaf()) {
    out.push_back(t.token);
    return;
  }
  for (const auto& c : t.children) collect_leaves(c, out);
}

void print_sexpr(const ParseTree& t, std::string& out) {
  if (t.is_leaf()) {
    out += t.token;
    return;
  }
  out += '(';
  bool first = true;
  if (t.label) {
    out += *t.label;
    first = false;
  }
  for (const auto& c : t.children) {
    if (!first) out += ' ';
    first = false;
    print_sexpr(c, out);
  }
  out += ')';
}

BinaryTree binarize_from(const ParseTree& t, int& next) {
  if (t.is_leaf()) return BinaryTree::leaf(next++);
  BinaryTree acc = binarize_from(t.children[0], next);
  for (std::size_t i = 1; i < t.children.size(); ++i) acc = BinaryTree::node(acc, binarize_from(t.children[i], next));
  return acc;
}

void extract(const BinaryTree& t, bool maximal, std::vector<int>& r) {
  if (t.is_leaf()) return;
  if (maximal) r[static_cast<std::size_t>(t.last())] = t.left().last();
  extract(t.left(), true, r);
  extract(t.right(), false, r);
}

}  // namespace

ParseTree parse_sexpr(std::string_view text) { return SexprParser(text).parse(); }

std::string to_sexpr(const ParseTree& tree) {
  std::string out;
  if (tree.is_leaf()) return "(" + tree.token + ")";
  print_sexpr(tree, out);
  return out;
}

std::vector<std::string> leaves(const ParseTree& tree) {
  std::vector<std::string> out;
  collect_leaves(tree, out);
  return out;
}

BinaryTree binarize(const ParseTree& tree) {
  int next = 0;
  return binarize_from(tree, next);
}

BinaryTree attach_root(const BinaryTree& tree) { return BinaryTree::node(BinaryTree::leaf(0), tree.shifted(1)); }

std::vector<int> oracle_extract(const BinaryTree& tree) {
  std::vector<int> r(static_cast<std::size_t>(tree.leaf_count()));
  for (std::size_t k = 0; k < r.size(); ++k) r[k] = static_cast<int>(k) + tree.first();
  extract(tree, true, r);
  for (auto& v : r) v -= tree.first();
  return r;
}

std::vector<int> precompute_tape_matrix(int n, const std::vector<int>& r) {
  if (static_cast<int>(r.size()) != n) {
    throw SupervisionError("attachment sequence has " + std::to_string(r.size()) + " entries for length " +
                               std::to_string(n),
                           r.size());
  }
  std::vector<int> s(static_cast<std::size_t>(n) * n, 0);
  StackState state;
  for (int k = 0; k < n; ++k) {
    try {
      state = update_stack_tape(state, k, r[static_cast<std::size_t>(k)]);
    } catch (const AttachmentError& e) {
      throw SupervisionError("invalid gold attachment " + std::to_string(r[static_cast<std::size_t>(k)]),
                             static_cast<std::size_t>(k));
    }
    std::copy(state.tape.begin(), state.tape.end(), s.begin() + static_cast<std::ptrdiff_t>(k) * n);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() {
  add(kRootToken);
  add(kEosToken);
}

Vocab::Vocab(const std::vector<std::string>& tokens) {
  if (tokens.size() < 2 || tokens[0] != kRootToken || tokens[1] != kEosToken) {
    throw VocabError("vocabulary must start with " + std::string(kRootToken) + " and " + kEosToken);
  }
  for (const auto& t : tokens) {
    if (ids_.count(t)) throw VocabError("duplicate vocabulary token \"" + t + "\"");
    add(t);
  }
}

int Vocab::add(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

std::optional<int> Vocab::find(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) throw VocabError("unknown token \"" + token + "\"");
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw VocabError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

// ---------------------------------------------------------------------------
// Corpus

Sequence make_sequence(const BinaryTree& tree, const std::vector<int>& word_ids) {
  if (tree.leaf_count() != static_cast<int>(word_ids.size())) {
    throw Error("make_sequence: tree has " + std::to_string(tree.leaf_count()) + " leaves for " +
                std::to_string(word_ids.size()) + " words");
  }
  Sequence seq;
  seq.ids.push_back(Vocab::kRoot);
  seq.ids.insert(seq.ids.end(), word_ids.begin(), word_ids.end());
  seq.ids.push_back(Vocab::kEos);
  seq.r = oracle_extract(attach_root(tree));
  seq.r.push_back(static_cast<int>(seq.r.size()));
  return seq;
}

BinaryTree gold_word_tree(const Sequence& seq) {
  std::vector<int> r(seq.r.begin(), seq.r.end() - 1);
  BinaryTree t = replay(r).second;
  // Gold trees are (ROOT words); drop the ROOT leaf.
  if (t.is_leaf() || t.left() != BinaryTree::leaf(0)) throw SupervisionError("sequence is not ROOT-attached", 0);
  return t.right().shifted(-1);
}

Corpus load_corpus(const std::filesystem::path& path, VocabPolicy policy, const Vocab* vocab) {
  if (policy == VocabPolicy::frozen && !vocab) throw VocabError("frozen vocabulary policy needs a vocabulary");
  Corpus corpus;
  if (vocab) corpus.vocab = *vocab;
  const auto lines = io::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    ParseTree t;
    try {
      t = parse_sexpr(line);
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(i + 1) + ": " + e.what(), e.offset());
    }
    std::vector<int> ids;
    for (const auto& tok : leaves(t)) {
      if (tok == Vocab::kRootToken || tok == Vocab::kEosToken) {
        throw VocabError(path.string() + ":" + std::to_string(i + 1) + ": reserved token \"" + tok + "\" in input");
      }
      if (policy == VocabPolicy::frozen) {
        auto id = corpus.vocab.find(tok);
        if (!id) {
          throw VocabError(path.string() + ":" + std::to_string(i + 1) + ": token \"" + tok +
                           "\" not in vocabulary");
        }
        ids.push_back(*id);
      } else {
        ids.push_back(corpus.vocab.add(tok));
      }
    }
    corpus.sequences.push_back(make_sequence(binarize(t), ids));
  }
  return corpus;
}

void save_corpus_cache(const Corpus& corpus, const std::filesystem::path& path) {
  io::Writer w;
  w.raw("PDLC");
  w.u32(kCacheVersion);
  w.u32(static_cast<std::uint32_t>(corpus.vocab.size()));
  for (const auto& t : corpus.vocab.tokens()) w.str(t);
  w.u32(static_cast<std::uint32_t>(corpus.sequences.size()));
  for (const auto& s : corpus.sequences) {
    w.u32(static_cast<std::uint32_t>(s.ids.size()));
    for (int v : s.ids) w.i32(v);
    for (int v : s.r) w.i32(v);
  }
  io::write_file_atomic(path, w.bytes());
}

Corpus load_corpus_cache(const std::filesystem::path& path) {
  io::Reader rd(io::read_file(path), path.string());
  rd.expect("PDLC");
  const std::uint32_t version = rd.u32();
  if (version != kCacheVersion) {
    throw FormatError(path.string() + ": corpus cache version " + std::to_string(version) + ", expected " +
                      std::to_string(kCacheVersion));
  }
  std::vector<std::string> tokens(rd.u32());
  for (auto& t : tokens) t = rd.str();
  Corpus c;
  c.vocab = Vocab(tokens);
  c.sequences.resize(rd.u32());
  for (auto& s : c.sequences) {
    const std::uint32_t n = rd.u32();
    s.ids.resize(n);
    s.r.resize(n);
    for (auto& v : s.ids) {
      v = rd.i32();
      if (v < 0 || v >= c.vocab.size()) throw FormatError(path.string() + ": token id outside vocabulary");
    }
    for (auto& v : s.r) v = rd.i32();
  }
  if (!rd.at_end()) throw FormatError(path.string() + ": trailing bytes");
  return c;
}

}  // namespace pdl
