#include "pdl/dyck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pdl/errors.hpp"

namespace pdl {
namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

BinaryTree build_pair(const DyckString& s, int open, SiblingBranching branching) {
  const int close = s.matching[static_cast<std::size_t>(open)];
  std::vector<BinaryTree> parts{BinaryTree::leaf(open)};
  for (int i = open + 1; i < close; i = s.matching[static_cast<std::size_t>(i)] + 1)
    parts.push_back(build_pair(s, i, branching));
  parts.push_back(BinaryTree::leaf(close));
  if (branching == SiblingBranching::left) return fold_left(parts);
  BinaryTree acc = parts.back();
  for (std::size_t i = parts.size() - 1; i-- > 0;) acc = BinaryTree::node(parts[i], acc);
  return acc;
}

ClosingItem make_item(const DyckString& s, int close, int bucket) {
  ClosingItem it;
  it.source = s;
  it.prefix_len = close;
  it.gold_type = s.types[static_cast<std::size_t>(close)];
  it.distance = close - s.matching[static_cast<std::size_t>(close)];
  it.depth = s.depth[static_cast<std::size_t>(close)];
  it.bucket = bucket;
  return it;
}

}  // namespace

void DyckSpec::validate() const {
  if (num_types < 1) throw ConfigError("dyck: num_types must be >= 1");
  if (max_depth < 1) throw ConfigError("dyck: max_depth must be >= 1");
  if (!(open_prob > 0.0 && open_prob < 1.0)) throw ConfigError("dyck: open_prob must lie in (0, 1)");
  if (min_length < 2 || max_length < min_length) {
    throw ConfigError("dyck: length range [" + std::to_string(min_length) + ", " + std::to_string(max_length) +
                      "] is infeasible");
  }
  const int lo = min_length + (min_length % 2);
  if (lo > max_length) throw ConfigError("dyck: no even length in [min_length, max_length]");
}

int DyckString::max_depth() const {
  int m = 0;
  for (int d : depth) m = std::max(m, d);
  return m;
}

std::string open_token(int type) { return "<" + std::to_string(type); }
std::string close_token(int type) { return std::to_string(type) + ">"; }

Vocab dyck_vocab(int num_types) {
  Vocab v;
  for (int t = 0; t < num_types; ++t) v.add(open_token(t));
  for (int t = 0; t < num_types; ++t) v.add(close_token(t));
  return v;
}

int open_id(int type) { return 2 + type; }
int close_id(int type, int num_types) { return 2 + num_types + type; }

DyckString make_dyck(std::vector<int> types, std::vector<bool> opens) {
  if (types.size() != opens.size()) throw Error("make_dyck: types and opens differ in length");
  DyckString s;
  s.types = std::move(types);
  s.opens = std::move(opens);
  s.matching.assign(s.types.size(), -1);
  s.depth.assign(s.types.size(), 0);
  std::vector<int> stack;
  for (std::size_t i = 0; i < s.types.size(); ++i) {
    if (s.opens[i]) {
      stack.push_back(static_cast<int>(i));
      s.depth[i] = static_cast<int>(stack.size());
    } else {
      if (stack.empty()) throw Error("ill-nested: unmatched close at position " + std::to_string(i));
      const int o = stack.back();
      if (s.types[static_cast<std::size_t>(o)] != s.types[i]) {
        throw Error("ill-nested: close of type " + std::to_string(s.types[i]) + " at position " +
                    std::to_string(i) + " matches open of type " +
                    std::to_string(s.types[static_cast<std::size_t>(o)]));
      }
      stack.pop_back();
      s.matching[i] = o;
      s.matching[static_cast<std::size_t>(o)] = static_cast<int>(i);
      s.depth[i] = s.depth[static_cast<std::size_t>(o)];
    }
  }
  if (!stack.empty()) throw Error("ill-nested: unmatched open at position " + std::to_string(stack.back()));
  return s;
}

DyckString dyck_from_tokens(const std::vector<std::string>& tokens) {
  std::vector<int> types;
  std::vector<bool> opens;
  for (const auto& t : tokens) {
    if (t.size() < 2) throw Error("not a bracket token: \"" + t + "\"");
    const bool open = t.front() == '<';
    const bool close = t.back() == '>';
    if (open == close) throw Error("not a bracket token: \"" + t + "\"");
    const std::string num = open ? t.substr(1) : t.substr(0, t.size() - 1);
    if (num.empty() || !std::all_of(num.begin(), num.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw Error("not a bracket token: \"" + t + "\"");
    }
    types.push_back(std::stoi(num));
    opens.push_back(open);
  }
  return make_dyck(std::move(types), std::move(opens));
}

std::vector<std::string> dyck_tokens(const DyckString& s) {
  std::vector<std::string> out;
  for (int i = 0; i < s.size(); ++i)
    out.push_back(s.opens[static_cast<std::size_t>(i)] ? open_token(s.types[static_cast<std::size_t>(i)])
                                                       : close_token(s.types[static_cast<std::size_t>(i)]));
  return out;
}

std::vector<int> dyck_ids(const DyckString& s, int num_types) {
  std::vector<int> out;
  for (int i = 0; i < s.size(); ++i) {
    const int t = s.types[static_cast<std::size_t>(i)];
    if (t < 0 || t >= num_types) throw VocabError("bracket type " + std::to_string(t) + " outside vocabulary");
    out.push_back(s.opens[static_cast<std::size_t>(i)] ? open_id(t) : close_id(t, num_types));
  }
  return out;
}

DyckString sample_one(const DyckSpec& spec, std::mt19937_64& rng) {
  const int lo = spec.min_length + (spec.min_length % 2);
  const int hi = spec.max_length - (spec.max_length % 2);
  const int length = 2 * uniform_int(rng, lo / 2, hi / 2);
  std::vector<int> types;
  std::vector<bool> opens;
  std::vector<int> stack;
  for (int i = 0; i < length; ++i) {
    const int depth = static_cast<int>(stack.size());
    const int remaining = length - i;
    bool open;
    if (depth == 0) {
      open = true;
    } else if (remaining == depth || depth == spec.max_depth) {
      open = false;
    } else {
      open = uniform01(rng) < spec.open_prob;
    }
    if (open) {
      const int t = uniform_int(rng, 0, spec.num_types - 1);
      stack.push_back(t);
      types.push_back(t);
    } else {
      types.push_back(stack.back());
      stack.pop_back();
    }
    opens.push_back(open);
  }
  return make_dyck(std::move(types), std::move(opens));
}

std::vector<DyckString> sample_dyck(const DyckSpec& spec, std::size_t count, std::uint64_t shard) {
  spec.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(shard), static_cast<std::uint32_t>(shard >> 32)};
  std::mt19937_64 rng(seq);
  std::vector<DyckString> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_one(spec, rng));
  return out;
}

BinaryTree dyck_gold_tree(const DyckString& s, SiblingBranching branching) {
  if (s.size() == 0) throw Error("dyck_gold_tree: empty string");
  if (static_cast<int>(s.matching.size()) != s.size()) throw Error("dyck_gold_tree: string has no matching");
  std::vector<BinaryTree> top;
  for (int i = 0; i < s.size(); i = s.matching[static_cast<std::size_t>(i)] + 1) {
    if (!s.opens[static_cast<std::size_t>(i)]) throw Error("dyck_gold_tree: ill-nested input");
    top.push_back(build_pair(s, i, branching));
  }
  return fold_left(top);
}

Sequence dyck_sequence(const DyckString& s, int num_types, SiblingBranching branching) {
  return make_sequence(dyck_gold_tree(s, branching), dyck_ids(s, num_types));
}

std::uint64_t dyck_hash(const DyckString& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (int i = 0; i < s.size(); ++i) {
    const std::uint64_t v = static_cast<std::uint64_t>(s.types[static_cast<std::size_t>(i)]) * 2 +
                            (s.opens[static_cast<std::size_t>(i)] ? 1 : 0);
    h = (h ^ (v + 0x9e3779b97f4a7c15ull)) * 1099511628211ull;
  }
  return h ^ static_cast<std::uint64_t>(s.size());
}

std::vector<ClosingItem> build_depth_gen_split(const DyckSpec& train_spec, int min_depth, int max_depth,
                                               std::size_t count, const SplitOptions& opt) {
  if (min_depth > max_depth || min_depth <= train_spec.max_depth) {
    throw ConfigError("depth split: range [" + std::to_string(min_depth) + ", " + std::to_string(max_depth) +
                      "] must lie above the training depth " + std::to_string(train_spec.max_depth));
  }
  DyckSpec spec = train_spec;
  spec.max_depth = max_depth;
  spec.min_length = std::max(opt.min_length, 2 * min_depth);
  spec.max_length = std::min(opt.max_length, opt.max_prefix_len + 1);
  spec.open_prob = opt.open_prob;
  spec.validate();
  std::mt19937_64 rng(opt.seed);
  std::vector<ClosingItem> items;
  const std::size_t budget = opt.attempts_per_item * std::max<std::size_t>(count, 1);
  for (std::size_t attempt = 0; items.size() < count; ++attempt) {
    if (attempt >= budget) {
      throw Error("depth split: sampling budget exhausted with " + std::to_string(items.size()) + " of " +
                  std::to_string(count) + " items");
    }
    DyckString s = sample_one(spec, rng);
    const int md = s.max_depth();
    if (md < min_depth || md > max_depth) continue;
    if (opt.exclude && opt.exclude->count(dyck_hash(s))) continue;
    std::vector<int> closes;
    for (int i = 0; i < s.size() && i <= opt.max_prefix_len; ++i)
      if (!s.opens[static_cast<std::size_t>(i)] && s.depth[static_cast<std::size_t>(i)] > train_spec.max_depth)
        closes.push_back(i);
    if (closes.empty()) continue;
    const int c = closes[rng() % closes.size()];
    items.push_back(make_item(s, c, md));
  }
  return items;
}

std::vector<ClosingItem> build_longrange_split(const DyckSpec& train_spec, const std::vector<int>& targets,
                                               std::size_t count, const SplitOptions& opt) {
  std::vector<ClosingItem> items;
  std::mt19937_64 rng(opt.seed);
  for (int target : targets) {
    const int hi_dist = static_cast<int>(std::floor(target * (1.0 + opt.slack)));
    if (target + 1 > opt.max_prefix_len) {
      throw ConfigError("long-range split: distance " + std::to_string(target) + " does not fit a prefix of " +
                        std::to_string(opt.max_prefix_len));
    }
    DyckSpec spec = train_spec;
    spec.min_length = std::max(opt.min_length, target + 2);
    spec.max_length = std::max(spec.min_length, opt.max_length);
    spec.open_prob = opt.open_prob;
    spec.validate();
    std::size_t got = 0;
    const std::size_t budget = opt.attempts_per_item * std::max<std::size_t>(count, 1);
    for (std::size_t attempt = 0; got < count; ++attempt) {
      if (attempt >= budget) {
        throw Error("long-range split: sampling budget exhausted for distance " + std::to_string(target) +
                    " with " + std::to_string(got) + " of " + std::to_string(count) + " items");
      }
      DyckString s = sample_one(spec, rng);
      if (opt.exclude && opt.exclude->count(dyck_hash(s))) continue;
      std::vector<int> closes;
      for (int i = 0; i < s.size() && i <= opt.max_prefix_len; ++i) {
        if (s.opens[static_cast<std::size_t>(i)]) continue;
        const int d = i - s.matching[static_cast<std::size_t>(i)];
        if (d >= target && d <= hi_dist) closes.push_back(i);
      }
      if (closes.empty()) continue;
      const int c = closes[rng() % closes.size()];
      items.push_back(make_item(s, c, target));
      ++got;
    }
  }
  return items;
}

std::string format_split(const std::vector<ClosingItem>& items, int num_types) {
  std::string out = "# closing-split num_types=" + std::to_string(num_types) + "\n";
  for (const auto& it : items) {
    out += std::to_string(it.prefix_len) + " " + std::to_string(it.gold_type) + " " + std::to_string(it.distance) +
           " " + std::to_string(it.depth) + " " + std::to_string(it.bucket) + "\t";
    const auto toks = dyck_tokens(it.source);
    for (std::size_t i = 0; i < toks.size(); ++i) out += (i ? " " : "") + toks[i];
    out += "\n";
  }
  return out;
}

std::vector<ClosingItem> parse_split(const std::string& text, int& num_types, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  const std::string head = "# closing-split num_types=";
  if (!std::getline(in, line) || line.rfind(head, 0) != 0) throw FormatError(source + ":1: missing split header");
  try {
    num_types = std::stoi(line.substr(head.size()));
  } catch (const std::exception&) {
    throw FormatError(source + ":1: bad num_types");
  }
  std::vector<ClosingItem> items;
  for (int n = 2; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    auto fail = [&](const std::string& why) { return FormatError(source + ":" + std::to_string(n) + ": " + why); };
    if (tab == std::string::npos) throw fail("expected a tab before the source tokens");
    ClosingItem it;
    std::istringstream nums(line.substr(0, tab));
    if (!(nums >> it.prefix_len >> it.gold_type >> it.distance >> it.depth >> it.bucket)) throw fail("expected five integers");
    std::istringstream toks(line.substr(tab + 1));
    std::vector<std::string> tokens;
    for (std::string t; toks >> t;) tokens.push_back(t);
    try {
      it.source = dyck_from_tokens(tokens);
    } catch (const Error& e) {
      throw fail(e.what());
    }
    const auto p = static_cast<std::size_t>(it.prefix_len);
    if (it.prefix_len < 0 || p >= it.source.types.size() || it.source.opens[p] || it.source.types[p] != it.gold_type ||
        it.gold_type >= num_types) {
      throw fail("prefix does not end before a closing bracket of the gold type");
    }
    for (int t : it.source.types)
      if (t >= num_types) throw fail("bracket type outside num_types");
    items.push_back(std::move(it));
  }
  return items;
}

}  // namespace pdl
