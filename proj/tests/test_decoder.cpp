#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "pdl/decoder.hpp"
#include "pdl/errors.hpp"
#include "pdl/trainer.hpp"
#include "support.hpp"

using namespace pdl;
using test::all_trees;
using test::catalan;
using test::tiny_config;

namespace {

// log p(x, r) from one batched forward pass: word terms from the LM rows,
// attachment terms from the candidate-masked attachment rows.
double oracle_score(const PushdownModel& model, const std::vector<int>& words, const std::vector<int>& r) {
  Sequence seq;
  seq.ids.push_back(Vocab::kRoot);
  seq.ids.insert(seq.ids.end(), words.begin(), words.end());
  seq.ids.push_back(Vocab::kEos);
  seq.r = r;
  seq.r.push_back(static_cast<int>(words.size()) + 1);
  const BatchData bd = model.make_batch({&seq});
  ad::Graph g(false);
  const ForwardOutputs out = model.forward(g, bd.input);
  const std::size_t T = bd.input.seq_len, V = static_cast<std::size_t>(model.config().vocab);
  std::vector<double> lp(std::max(V, T + 1));
  double total = 0.0;
  StackState st = update_stack_tape(StackState{}, 0, 0);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    log_softmax(out.lm_logits.value().data().data() + t * V, V, nullptr, lp.data());
    total += lp[static_cast<std::size_t>(seq.ids[t + 1])];
    if (t + 1 == T - 1) break;  // EOS attachment is not scored
    std::vector<bool> mask(T + 1, false);
    const auto m = candidate_mask(st, static_cast<int>(t + 1));
    std::copy(m.begin(), m.end(), mask.begin());
    log_softmax(out.attach_logits.value().data().data() + t * (T + 1), T + 1, &mask, lp.data());
    total += lp[static_cast<std::size_t>(seq.r[t + 1])];
    st = update_stack_tape(st, static_cast<int>(t + 1), seq.r[t + 1]);
  }
  return total;
}

// Histories of every ROOT-attached tree, derived from tree enumeration.
std::vector<std::vector<int>> tree_histories(int n) {
  std::vector<std::vector<int>> out;
  for (const auto& t : all_trees(0, n - 1)) out.push_back(oracle_extract(attach_root(t)));
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> random_words(int n, int vocab, std::mt19937_64& rng) {
  std::vector<int> w;
  for (int i = 0; i < n; ++i) w.push_back(2 + static_cast<int>(rng() % static_cast<unsigned>(vocab - 2)));
  return w;
}

BeamConfig width(int w) {
  BeamConfig c;
  c.width = w;
  return c;
}

}  // namespace

TEST_CASE("all_histories enumerates ROOT-attached trees") {
  for (int n = 1; n <= 7; ++n) {
    const auto h = all_histories(n);
    CHECK(static_cast<long long>(h.size()) == catalan(n - 1));
    CHECK(h == tree_histories(n));
    CHECK(std::is_sorted(h.begin(), h.end()));
  }
}

TEST_CASE("history scores match the batched forward") {
  const PushdownModel model(tiny_config(ModelMode::pushdown, 9, 3));
  std::mt19937_64 rng(1);
  for (int n = 1; n <= 6; ++n) {
    const auto words = random_words(n, 9, rng);
    for (const auto& r : all_histories(n)) {
      const double s = score_history(model, words, r);
      CHECK(s <= 0.0);
      CHECK(s == doctest::Approx(oracle_score(model, words, r)).epsilon(1e-12));
    }
    const BinaryTree t = test::random_tree(0, n - 1, rng);
    CHECK(score_joint(model, words, t) == score_history(model, words, oracle_extract(attach_root(t))));
  }
  // forests are scoreable too
  const std::vector<int> words{3, 4, 5};
  CHECK(score_history(model, words, {0, 1, 2, 3}) ==
        doctest::Approx(oracle_score(model, words, {0, 1, 2, 3})).epsilon(1e-12));
  CHECK_THROWS_AS(score_history(model, words, {0, 1, 1, 1}), AttachmentError);
  CHECK_THROWS_AS(score_history(model, words, {0, 1}), SupervisionError);
}

TEST_CASE("exact marginalization") {
  for (ModelMode mode : {ModelMode::pushdown, ModelMode::base_multitask}) {
    const PushdownModel model(tiny_config(mode, 9, 4));
    std::mt19937_64 rng(2);
    for (int n = 1; n <= 6; ++n) {
      const auto words = random_words(n, 9, rng);
      std::vector<double> scores;
      for (const auto& r : tree_histories(n)) scores.push_back(oracle_score(model, words, r));
      const double exact = log_sum_exp(scores);
      CHECK(std::abs(exhaustive_marginal(model, words) - exact) < 1e-10);
      const int full = static_cast<int>(catalan(n - 1));
      CHECK(std::abs(marginal_logprob(model, words, width(full)) - exact) < 1e-10);
      CHECK(std::abs(marginal_logprob(model, words, width(full + 5)) - exact) < 1e-10);
      double prev = -std::numeric_limits<double>::infinity();
      for (int w = 1; w <= full; ++w) {
        const double m = marginal_logprob(model, words, width(w));
        CHECK(m >= prev - 1e-12);
        prev = m;
      }

      // best parse at full width is the argmax tree, ties to the smaller history
      const auto hist = tree_histories(n);
      const auto best = std::max_element(scores.begin(), scores.end()) - scores.begin();
      const ParseResult p = best_parse(model, words, width(full));
      CHECK(p.r == hist[static_cast<std::size_t>(best)]);
      CHECK(p.tree == history_tree(p.r));
      CHECK(p.logprob == doctest::Approx(scores[static_cast<std::size_t>(best)]).epsilon(1e-12));

      // width 1 follows a single derivation
      const ParseResult g1 = best_parse(model, words, width(1));
      CHECK(marginal_logprob(model, words, width(1)) == doctest::Approx(score_history(model, words, g1.r)).epsilon(1e-12));
    }
  }
}

TEST_CASE("surprisal") {
  const PushdownModel model(tiny_config(ModelMode::pushdown, 9, 5));
  std::mt19937_64 rng(3);
  for (int n = 1; n <= 6; ++n) {
    const auto words = random_words(n, 9, rng);
    const int full = static_cast<int>(catalan(n - 1));
    const auto s = surprisal(model, words, width(full));
    REQUIRE(s.size() == words.size() + 1);
    double sum = 0.0;
    for (double v : s) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum + marginal_logprob(model, words, width(full))) < 1e-10);
    const auto narrow = surprisal(model, words, width(1));
    CHECK(narrow[0] == s[0]);
  }
}

TEST_CASE("models without an attachment head score the plain LM") {
  const PushdownModel model(tiny_config(ModelMode::base_plain, 9, 6));
  const std::vector<int> words{2, 5, 7, 3};
  Sequence seq;
  seq.ids = {0, 2, 5, 7, 3, 1};
  seq.r = {0, 1, 2, 3, 4, 5};
  const BatchData bd = model.make_batch({&seq});
  ad::Graph g(false);
  const ForwardOutputs out = model.forward(g, bd.input);
  std::vector<double> lp(9);
  double want = 0.0;
  for (std::size_t t = 0; t + 1 < 6; ++t) {
    log_softmax(out.lm_logits.value().data().data() + t * 9, 9, nullptr, lp.data());
    want += lp[static_cast<std::size_t>(seq.ids[t + 1])];
  }
  CHECK(marginal_logprob(model, words, width(1)) == doctest::Approx(want).epsilon(1e-12));
  CHECK(marginal_logprob(model, words, width(8)) == doctest::Approx(want).epsilon(1e-12));
  CHECK_THROWS(best_parse(model, words, width(4)));
}

TEST_CASE("generation follows its own scores") {
  const PushdownModel model(tiny_config(ModelMode::pushdown, 9, 7));
  for (double temp : {0.0, 1.0}) {
    BeamConfig cfg;
    cfg.temperature = temp;
    cfg.seed = 11;
    cfg.max_length = 12;
    const Generation gen = generate(model, {4, 5}, cfg);
    CHECK(gen.words.size() >= 2);
    CHECK(gen.words[0] == 4);
    CHECK(gen.words[1] == 5);
    CHECK(gen.r.size() == gen.words.size() + 1);
    CHECK(replay(gen.r).first.size() == static_cast<int>(gen.words.size()) + 1);
    double sum = 0.0;
    for (double v : gen.step_logprobs) sum += v;
    CHECK(sum == doctest::Approx(gen.logprob));
    if (gen.ended) CHECK(gen.logprob == doctest::Approx(score_history(model, gen.words, gen.r)).epsilon(1e-12));
    for (int w : gen.words) CHECK(w != Vocab::kRoot);
  }
}

TEST_CASE("prefix parsing") {
  const PushdownModel model(tiny_config(ModelMode::pushdown, 9, 8));
  std::mt19937_64 rng(4);
  const auto words = random_words(7, 9, rng);
  const GreedyPrefix gp = greedy_prefix(model, words);
  REQUIRE(gp.r.size() == 8);
  for (std::size_t k = 1; k < gp.r.size(); ++k) CHECK(gp.r[k] != 0);
  CHECK(gp.next_log_probs == forced_prefix(model, words, gp.r));

  // a forced gold prefix reads the same row as the batched forward
  const BinaryTree t = test::random_tree(0, 6, rng);
  const Sequence seq = make_sequence(t, words);
  const BatchData bd = model.make_batch({&seq});
  ad::Graph g(false);
  const ForwardOutputs out = model.forward(g, bd.input);
  std::vector<double> want(9);
  log_softmax(out.lm_logits.value().data().data() + 7 * 9, 9, nullptr, want.data());
  const std::vector<int> r(seq.r.begin(), seq.r.begin() + 8);
  CHECK(forced_prefix(model, words, r) == want);
}

TEST_CASE("beam configuration and input checks") {
  BeamConfig c;
  c.width = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  const PushdownModel model(tiny_config(ModelMode::pushdown, 9, 9));
  CHECK_THROWS_AS(marginal_logprob(model, {2, 12}, width(2)), VocabError);
  CHECK_THROWS_AS(marginal_logprob(model, {2, Vocab::kEos}, width(2)), VocabError);
  CHECK_THROWS_AS(marginal_logprob(model, std::vector<int>(40, 3), width(2)), DimensionError);
}

TEST_CASE("after memorizing parsed sentences the gold tree dominates") {
  std::mt19937_64 rng(12);
  std::vector<Sequence> data;
  for (int i = 0; i < 3; ++i) data.push_back(test::random_sequence(5, 10, rng));
  ModelConfig mc = tiny_config(ModelMode::pushdown, 10, 13);
  mc.init_std = 0.1;
  PushdownModel model(mc);
  TrainConfig tc;
  tc.batch_size = 3;
  tc.steps = 400;
  tc.warmup = 10;
  tc.lr = 3e-3;
  tc.eval_every = 400;
  train(model, data, data, tc);
  for (const auto& s : data) {
    const std::vector<int> words(s.ids.begin() + 1, s.ids.end() - 1);
    const ParseResult p = best_parse(model, words, width(14));
    CHECK(p.tree == gold_word_tree(s));
    const double joint = score_joint(model, words, gold_word_tree(s));
    const double marg = marginal_logprob(model, words, width(14));
    CHECK(marg - joint < 0.01 * std::abs(marg));
  }
}
