#include "pdl/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "pdl/errors.hpp"

namespace pdl {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Hypothesis start(const IncrementalModel& inc) {
  Hypothesis h;
  h.cache = inc.empty_cache();
  h.state = update_stack_tape(StackState{}, 0, 0);
  h.r = {0};
  inc.extend(h.cache, Vocab::kRoot, h.state.tape);
  return h;
}

void check_words(const PushdownModel& model, const std::vector<int>& words) {
  const auto& c = model.config();
  if (static_cast<int>(words.size()) + 2 > c.max_seq_len) {
    throw DimensionError("input of " + std::to_string(words.size()) + " words exceeds max_seq_len " +
                         std::to_string(c.max_seq_len));
  }
  for (int w : words) {
    if (w < 0 || w >= c.vocab) throw VocabError("token id " + std::to_string(w) + " outside model vocabulary");
    if (w == Vocab::kRoot || w == Vocab::kEos) throw VocabError("ROOT/EOS inside an input string");
  }
}

// Attachment log-probabilities of `word` as token k = h.state.size(). Models
// without an attachment head always shift at no cost.
std::vector<double> attach_scores(const IncrementalModel& inc, const Hypothesis& h, int word) {
  const int k = h.state.size();
  std::vector<double> out;
  if (!inc.model().config().has_attachment_head()) {
    out.assign(static_cast<std::size_t>(k) + 1, kNegInf);
    out[static_cast<std::size_t>(k)] = 0.0;
    return out;
  }
  inc.attach_log_probs(h.cache, word, h.state.tape, candidate_mask(h.state, k), out);
  return out;
}

// Parses of a complete string are ROOT-attached trees: only the last word
// reduces with ROOT. The model's distribution is left unnormalized here; the
// excluded histories simply do not count.
void restrict_to_trees(const IncrementalModel& inc, std::vector<double>& a, bool last_word) {
  if (!inc.model().config().has_attachment_head()) return;
  if (last_word) {
    for (std::size_t j = 1; j < a.size(); ++j) a[j] = kNegInf;
  } else {
    a[0] = kNegInf;
  }
}

void advance(const IncrementalModel& inc, Hypothesis& h, int word, int r, double step_lp) {
  const int k = h.state.size();
  h.state = update_stack_tape(h.state, k, r);
  h.r.push_back(r);
  h.logprob += step_lp;
  inc.extend(h.cache, word, h.state.tape);
}

int argmax(const std::vector<double>& v) {
  int best = 0;
  for (std::size_t j = 1; j < v.size(); ++j)
    if (v[j] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
  return best;
}

double word_logprob(const IncrementalModel& inc, const Hypothesis& h, int word) {
  std::vector<double> lp;
  inc.lm_log_probs(h.cache, lp);
  return lp[static_cast<std::size_t>(word)];
}

struct Candidate {
  std::size_t parent;
  int r;
  double logprob;
};

// One synchronous step of the beam: expand every attachment of `word`, keep the
// best `width` by joint score (ties: lexicographically smaller history).
std::vector<Hypothesis> beam_step(const IncrementalModel& inc, const std::vector<Hypothesis>& beam, int word,
                                  int width, bool last_word, double* expanded = nullptr) {
  std::vector<Candidate> cands;
  std::vector<double> word_lp(beam.size());
  for (std::size_t i = 0; i < beam.size(); ++i) {
    word_lp[i] = word_logprob(inc, beam[i], word);
    std::vector<double> a = attach_scores(inc, beam[i], word);
    restrict_to_trees(inc, a, last_word);
    for (std::size_t r = 0; r < a.size(); ++r)
      if (a[r] != kNegInf) cands.push_back({i, static_cast<int>(r), beam[i].logprob + (word_lp[i] + a[r])});
  }
  if (cands.empty()) throw AttachmentError("beam has no valid expansion", beam.front().r.size());
  if (expanded) {
    std::vector<double> all;
    for (const auto& c : cands) all.push_back(c.logprob);
    *expanded = log_sum_exp(all);
  }
  auto better = [&](const Candidate& x, const Candidate& y) {
    if (x.logprob != y.logprob) return x.logprob > y.logprob;
    if (x.parent != y.parent) return beam[x.parent].r < beam[y.parent].r;
    return x.r < y.r;
  };
  const std::size_t keep = std::min(cands.size(), static_cast<std::size_t>(width));
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), better);
  cands.resize(keep);

  std::vector<Hypothesis> next(keep);
#pragma omp parallel for schedule(dynamic, 1) if (keep > 1)
  for (std::size_t i = 0; i < keep; ++i) {
    const Candidate& c = cands[i];
    Hypothesis h = beam[c.parent];
    h.logprob = c.logprob;
    const int k = h.state.size();
    h.state = update_stack_tape(h.state, k, c.r);
    h.r.push_back(c.r);
    inc.extend(h.cache, word, h.state.tape);
    next[i] = std::move(h);
  }
  return next;
}

// With `surprisals`, token t gets -(log mass of every valid expansion of the
// beam by x_t) + (log mass of the beam before x_t); without pruning these
// telescope to -log p(x).
std::vector<Hypothesis> run_beam(const IncrementalModel& inc, const std::vector<int>& words, int width,
                                 std::vector<double>* surprisals) {
  std::vector<Hypothesis> beam{start(inc)};
  auto mass = [&] {
    std::vector<double> lps;
    for (const auto& h : beam) lps.push_back(h.logprob);
    return log_sum_exp(lps);
  };
  for (std::size_t i = 0; i < words.size(); ++i) {
    const double before = surprisals ? mass() : 0.0;
    double expanded = 0.0;
    beam = beam_step(inc, beam, words[i], width, i + 1 == words.size(), &expanded);
    if (surprisals) surprisals->push_back(before - expanded);
  }
  const double before = surprisals ? mass() : 0.0;
  for (auto& h : beam) h.logprob += word_logprob(inc, h, Vocab::kEos);
  if (surprisals) surprisals->push_back(before - mass());
  return beam;
}

BinaryTree drop_leaf0(const BinaryTree& t) {
  if (t.is_leaf()) throw Error("drop_root: tree has only ROOT");
  if (t.left().is_leaf() && t.left().index() == 0) return t.right();
  return BinaryTree::node(drop_leaf0(t.left()), t.right());
}

}  // namespace

void BeamConfig::validate() const {
  if (width < 1) throw ConfigError("beam width must be >= 1, got " + std::to_string(width));
  if (max_length < 0) throw ConfigError("max_length must be >= 0");
  if (temperature < 0.0 || !std::isfinite(temperature)) throw ConfigError("temperature must be finite and >= 0");
}

double log_sum_exp(const std::vector<double>& xs) {
  if (xs.empty()) return kNegInf;
  std::vector<double> v = xs;
  std::sort(v.begin(), v.end(), std::greater<>());
  if (v.front() == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - v.front());
  return v.front() + std::log(s);
}

BinaryTree drop_root(const BinaryTree& tree) { return drop_leaf0(tree).shifted(-1); }

BinaryTree history_tree(const std::vector<int>& r) { return drop_root(replay(r).second); }

Generation generate(const PushdownModel& model, const std::vector<int>& prompt, const BeamConfig& config) {
  config.validate();
  check_words(model, prompt);
  const IncrementalModel inc(model);
  const int cap = std::min(config.max_length, model.config().max_seq_len - 2);
  std::mt19937_64 rng(config.seed);
  Hypothesis h = start(inc);
  Generation g;
  std::vector<double> lp;
  while (true) {
    inc.lm_log_probs(h.cache, lp);
    int word;
    const std::size_t k = g.words.size();
    if (k < prompt.size()) {
      word = prompt[k];
    } else if (k >= static_cast<std::size_t>(cap)) {
      break;
    } else {
      std::vector<double> pick = lp;
      pick[Vocab::kRoot] = kNegInf;
      if (config.temperature == 0.0) {
        word = argmax(pick);
      } else {
        for (auto& v : pick) v /= config.temperature;
        const double z = log_sum_exp(pick);
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        double acc = 0.0;
        word = argmax(pick);
        for (std::size_t j = 0; j < pick.size(); ++j) {
          if (pick[j] == kNegInf) continue;
          acc += std::exp(pick[j] - z);
          if (u < acc) {
            word = static_cast<int>(j);
            break;
          }
        }
      }
      if (word == Vocab::kEos) {
        g.step_logprobs.push_back(lp[Vocab::kEos]);
        g.logprob += lp[Vocab::kEos];
        g.ended = true;
        break;
      }
    }
    const std::vector<double> a = attach_scores(inc, h, word);
    const int r = argmax(a);
    const double step = lp[static_cast<std::size_t>(word)] + a[static_cast<std::size_t>(r)];
    g.step_logprobs.push_back(step);
    g.logprob += step;
    g.words.push_back(word);
    advance(inc, h, word, r, step);
  }
  g.r = h.r;
  g.tree = g.words.empty() ? BinaryTree() : history_tree(h.r);
  return g;
}

double score_history(const PushdownModel& model, const std::vector<int>& words, const std::vector<int>& r) {
  check_words(model, words);
  if (r.size() != words.size() + 1 || r.empty() || r[0] != 0) {
    throw SupervisionError("history must have one entry per word plus ROOT, starting with 0", 0);
  }
  const IncrementalModel inc(model);
  Hypothesis h = start(inc);
  for (std::size_t i = 0; i < words.size(); ++i) {
    const int w = words[i];
    const double word_lp = word_logprob(inc, h, w);
    const std::vector<double> a = attach_scores(inc, h, w);
    const auto rk = static_cast<std::size_t>(r[i + 1]);
    if (rk >= a.size() || a[rk] == kNegInf) throw AttachmentError("invalid attachment in history", i + 1);
    advance(inc, h, w, r[i + 1], word_lp + a[rk]);
  }
  return h.logprob + word_logprob(inc, h, Vocab::kEos);
}

double score_joint(const PushdownModel& model, const std::vector<int>& words, const BinaryTree& tree) {
  if (!model.config().has_attachment_head()) throw Error("score_joint: model has no attachment head");
  Sequence seq = make_sequence(tree, words);
  seq.r.pop_back();  // EOS
  return score_history(model, words, seq.r);
}

double marginal_logprob(const PushdownModel& model, const std::vector<int>& words, const BeamConfig& config) {
  config.validate();
  check_words(model, words);
  const IncrementalModel inc(model);
  const auto beam = run_beam(inc, words, config.width, nullptr);
  std::vector<double> lps;
  for (const auto& h : beam) lps.push_back(h.logprob);
  return log_sum_exp(lps);
}

std::vector<double> surprisal(const PushdownModel& model, const std::vector<int>& words, const BeamConfig& config) {
  config.validate();
  check_words(model, words);
  const IncrementalModel inc(model);
  std::vector<double> out;
  run_beam(inc, words, config.width, &out);
  return out;
}

ParseResult best_parse(const PushdownModel& model, const std::vector<int>& words, const BeamConfig& config) {
  config.validate();
  if (!model.config().has_attachment_head()) throw Error("best_parse: model has no attachment head");
  if (words.empty()) throw Error("best_parse: empty input");
  check_words(model, words);
  const IncrementalModel inc(model);
  const auto beam = run_beam(inc, words, config.width, nullptr);
  const Hypothesis* best = &beam.front();
  for (const auto& h : beam)
    if (h.logprob > best->logprob || (h.logprob == best->logprob && h.r < best->r)) best = &h;
  return {history_tree(best->r), best->r, best->logprob};
}

std::vector<std::vector<int>> all_histories(int words) {
  std::vector<std::vector<int>> out;
  std::vector<int> r{0};
  std::function<void(const StackState&)> rec = [&](const StackState& s) {
    const int k = s.size();
    if (k == words + 1) {
      out.push_back(r);
      return;
    }
    const auto mask = candidate_mask(s, k);
    for (int j = 0; j <= k; ++j) {
      if (!mask[static_cast<std::size_t>(j)] || (j == 0) != (k == words)) continue;
      r.push_back(j);
      rec(update_stack_tape(s, k, j));
      r.pop_back();
    }
  };
  rec(update_stack_tape(StackState{}, 0, 0));
  return out;
}

double exhaustive_marginal(const PushdownModel& model, const std::vector<int>& words) {
  check_words(model, words);
  const IncrementalModel inc(model);
  std::vector<double> finals;
  std::function<void(const Hypothesis&)> rec = [&](const Hypothesis& h) {
    const std::size_t k = h.r.size() - 1;
    if (k == words.size()) {
      finals.push_back(h.logprob + word_logprob(inc, h, Vocab::kEos));
      return;
    }
    const int w = words[k];
    const double word_lp = word_logprob(inc, h, w);
    std::vector<double> a = attach_scores(inc, h, w);
    restrict_to_trees(inc, a, k + 1 == words.size());
    for (std::size_t r = 0; r < a.size(); ++r) {
      if (a[r] == kNegInf) continue;
      Hypothesis next = h;
      advance(inc, next, w, static_cast<int>(r), word_lp + a[r]);
      rec(next);
    }
  };
  rec(start(inc));
  return log_sum_exp(finals);
}

GreedyPrefix greedy_prefix(const PushdownModel& model, const std::vector<int>& words) {
  check_words(model, words);
  const IncrementalModel inc(model);
  Hypothesis h = start(inc);
  for (int w : words) {
    std::vector<double> a = attach_scores(inc, h, w);
    restrict_to_trees(inc, a, false);  // a prefix never ends the sentence
    const int r = argmax(a);
    advance(inc, h, w, r, 0.0);
  }
  GreedyPrefix out;
  out.r = h.r;
  inc.lm_log_probs(h.cache, out.next_log_probs);
  return out;
}

std::vector<double> forced_prefix(const PushdownModel& model, const std::vector<int>& words,
                                  const std::vector<int>& r) {
  check_words(model, words);
  if (r.size() != words.size() + 1 || r.empty() || r[0] != 0) {
    throw SupervisionError("history must have one entry per word plus ROOT, starting with 0", 0);
  }
  const IncrementalModel inc(model);
  Hypothesis h = start(inc);
  for (std::size_t i = 0; i < words.size(); ++i) advance(inc, h, words[i], r[i + 1], 0.0);
  std::vector<double> out;
  inc.lm_log_probs(h.cache, out);
  return out;
}

}  // namespace pdl
