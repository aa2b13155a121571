#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>
#include <set>

#include "pdl/decoder.hpp"
#include "pdl/dyck.hpp"
#include "pdl/errors.hpp"
#include "pdl/eval.hpp"
#include "pdl/trainer.hpp"
#include "support.hpp"

using namespace pdl;
using test::random_tree;
using test::tiny_config;

namespace {

BinaryTree L(int i) { return BinaryTree::leaf(i); }
BinaryTree N(BinaryTree a, BinaryTree b) { return BinaryTree::node(std::move(a), std::move(b)); }

BinaryTree left_branching(int n) {
  BinaryTree t = L(0);
  for (int i = 1; i < n; ++i) t = N(t, L(i));
  return t;
}
BinaryTree right_branching(int n) {
  BinaryTree t = L(n - 1);
  for (int i = n - 2; i >= 0; --i) t = N(L(i), t);
  return t;
}

// Spans collected by hand: (first, last) of every internal node below the top.
void collect(const BinaryTree& t, bool top, std::multiset<std::pair<int, int>>& out) {
  if (t.is_leaf()) return;
  if (!top) out.insert({t.first(), t.last()});
  collect(t.left(), false, out);
  collect(t.right(), false, out);
}

double oracle_f1(const BinaryTree& p, const BinaryTree& g) {
  std::multiset<std::pair<int, int>> ps, gs;
  collect(p, true, ps);
  collect(g, true, gs);
  if (ps.empty() && gs.empty()) return 100.0;
  int hit = 0;
  for (const auto& s : ps) hit += gs.count(s) > 0;
  if (hit == 0) return 0.0;
  const double prec = static_cast<double>(hit) / static_cast<double>(ps.size());
  const double rec = static_cast<double>(hit) / static_cast<double>(gs.size());
  return 100.0 * 2.0 * prec * rec / (prec + rec);
}

DyckSpec probe_spec() {
  DyckSpec spec;
  spec.num_types = 3;
  spec.max_depth = 3;
  spec.min_length = 4;
  spec.max_length = 20;
  spec.seed = 5;
  return spec;
}

std::vector<ClosingItem> small_split() {
  SplitOptions opt;
  opt.max_length = 20;
  opt.max_prefix_len = 19;
  opt.seed = 2;
  return build_longrange_split(probe_spec(), {3, 7}, 15, opt);
}

}  // namespace

TEST_CASE("unlabeled F1") {
  CHECK(unlabeled_f1(left_branching(5), left_branching(5)).f1 == 100.0);
  const F1Result lr = unlabeled_f1(left_branching(5), right_branching(5));
  CHECK(lr.f1 == 0.0);
  CHECK(lr.gold == 3);
  CHECK(lr.predicted == 3);

  // one rotation away: ((0 1) (2 3)) vs (((0 1) 2) 3) share (0 1) of two spans each
  const F1Result rot = unlabeled_f1(N(N(L(0), L(1)), N(L(2), L(3))), left_branching(4));
  CHECK(rot.matched == 1);
  CHECK(rot.f1 == doctest::Approx(50.0));

  // no spans on either side counts as perfect
  CHECK(unlabeled_f1(N(L(0), L(1)), N(L(0), L(1))).f1 == 100.0);
  CHECK_THROWS_AS(unlabeled_f1(left_branching(3), left_branching(4)), DimensionError);

  std::mt19937_64 rng(4);
  for (int i = 0; i < 300; ++i) {
    const int n = 2 + static_cast<int>(rng() % 12);
    const BinaryTree a = random_tree(0, n - 1, rng), b = random_tree(0, n - 1, rng);
    const F1Result ab = unlabeled_f1(a, b), ba = unlabeled_f1(b, a);
    CHECK(ab.f1 == doctest::Approx(oracle_f1(a, b)));
    CHECK(ab.f1 == doctest::Approx(ba.f1));
    CHECK(ab.precision == doctest::Approx(ba.recall));
  }

  SUBCASE("corpus scores are micro averages") {
    const std::vector<BinaryTree> pred{left_branching(4), left_branching(6)};
    const std::vector<BinaryTree> gold{left_branching(4), right_branching(6)};
    const F1Result c = unlabeled_f1(pred, gold);
    CHECK(c.matched == 2);
    CHECK(c.gold == 6);
    CHECK(c.f1 == doctest::Approx(100.0 * 2.0 / 6.0));
  }
}

TEST_CASE("closing accuracy scores the next-token distribution") {
  const auto split = small_split();
  const PushdownModel model(tiny_config(ModelMode::pushdown, static_cast<int>(dyck_vocab(3).size()), 3));
  const int K = 3;
  const ClosingReport gold = closing_accuracy(model, split, K, TapeMode::gold_oracle);
  const ClosingReport greedy = closing_accuracy(model, split, K, TapeMode::model_greedy);
  REQUIRE(gold.records.size() == split.size());
  int correct = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const ClosingItem& it = split[i];
    // gold tape: row prefix_len of the batched forward over the full string
    const Sequence seq = dyck_sequence(it.source, K, SiblingBranching::left);
    const BatchData bd = model.make_batch({&seq});
    ad::Graph g(false);
    const ForwardOutputs out = model.forward(g, bd.input);
    const std::size_t V = static_cast<std::size_t>(model.config().vocab);
    std::vector<double> lp(V);
    log_softmax(out.lm_logits.value().data().data() + static_cast<std::size_t>(it.prefix_len) * V, V, nullptr,
                lp.data());
    int best = 0;
    for (int t = 1; t < K; ++t)
      if (lp[static_cast<std::size_t>(close_id(t, K))] > lp[static_cast<std::size_t>(close_id(best, K))]) best = t;
    CHECK(gold.records[i].correct == (best == it.gold_type));
    for (int t = 0; t < K; ++t)
      CHECK(gold.records[i].candidate_logprobs[static_cast<std::size_t>(t)] ==
            doctest::Approx(lp[static_cast<std::size_t>(close_id(t, K))]).epsilon(1e-12));
    correct += best == it.gold_type;

    // greedy tape: the model's own prefix parse
    const std::vector<int> ids = dyck_ids(it.source, K);
    const std::vector<int> words(ids.begin(), ids.begin() + it.prefix_len);
    const auto glp = greedy_prefix(model, words).next_log_probs;
    CHECK(greedy.records[i].candidate_logprobs[0] == glp[static_cast<std::size_t>(close_id(0, K))]);
  }
  CHECK(gold.overall.correct == correct);
  CHECK(gold.overall.total == static_cast<int>(split.size()));
  CHECK(gold.buckets.size() == 2);
  CHECK(gold.buckets.at(3).total == 15);

  const std::string csv = closing_csv(gold, "longrange");
  CHECK(csv.rfind("task,bucket,count,correct,accuracy\nlongrange,3,15,", 0) == 0);
  CHECK(csv.find("\nlongrange,all,30,") != std::string::npos);
  CHECK(closing_records_csv(gold).rfind("task,prefix_len,distance,depth,bucket,gold_type,correct,lp0,lp1,lp2\n", 0) == 0);

  // a base model ignores the tape mode
  const PushdownModel base(tiny_config(ModelMode::base_multitask, static_cast<int>(dyck_vocab(3).size()), 3));
  const auto b1 = closing_accuracy(base, split, K, TapeMode::gold_oracle);
  const auto b2 = closing_accuracy(base, split, K, TapeMode::model_greedy);
  for (std::size_t i = 0; i < split.size(); ++i) CHECK(b1.records[i].candidate_logprobs == b2.records[i].candidate_logprobs);

  CHECK_THROWS_AS(parse_tape_mode("oracle"), ConfigError);
  CHECK(parse_tape_mode(tape_mode_name(TapeMode::model_greedy)) == TapeMode::model_greedy);
}

TEST_CASE("perplexity report agrees with validation") {
  std::mt19937_64 rng(6);
  std::vector<Sequence> data;
  for (int i = 0; i < 7; ++i) data.push_back(test::random_sequence(1 + static_cast<int>(rng() % 6), 9, rng));
  const PushdownModel a(tiny_config(ModelMode::pushdown, 9, 1)), b(tiny_config(ModelMode::base_plain, 9, 2));
  const auto rows = perplexity_report({{"pushdown", &a}, {"base", &b}}, data, 3);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].perplexity == validate(a, data).perplexity);
  CHECK(rows[1].perplexity == validate(b, data).perplexity);
  CHECK(rows[0].perplexity == doctest::Approx(std::exp(rows[0].nll)));
  std::size_t tokens = 0;
  for (const auto& s : data) tokens += s.ids.size() - 1;
  CHECK(rows[0].tokens == tokens);
  CHECK(perplexity_csv(rows).rfind("model,tokens,nll,perplexity\npushdown,", 0) == 0);
}

TEST_CASE("attention probes and maps") {
  const auto split = small_split();
  const auto probes = dyck_attention_probes(split, 3);
  REQUIRE(probes.size() == split.size());
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const ClosingItem& it = split[i];
    // unmatched opens, found with a bracket stack (shifted by ROOT)
    std::vector<int> stack;
    for (int j = 0; j < it.prefix_len; ++j) {
      if (it.source.opens[static_cast<std::size_t>(j)]) stack.push_back(j + 1);
      else stack.pop_back();
    }
    CHECK(probes[i].targets == stack);
    CHECK(probes[i].query == it.prefix_len);
    CHECK(static_cast<int>(probes[i].seq.ids.size()) == it.prefix_len + 1);
  }

  const int V = static_cast<int>(dyck_vocab(3).size());
  PushdownModel base(tiny_config(ModelMode::base_multitask, V, 4));
  PushdownModel push(tiny_config(ModelMode::pushdown, V, 5));
  const AttentionReport rb = attention_analysis(base, probes);
  CHECK(rb.layers == 2);
  for (std::size_t p = 0; p < probes.size(); ++p) {
    double sum = 0.0;
    for (double v : rb.mean_rows[p]) sum += v;
    CHECK(sum == doctest::Approx(1.0));
    for (const auto& row : rb.rows[p]) {
      double s = 0.0;
      for (double v : row) s += v;
      CHECK(s == doctest::Approx(1.0));
    }
  }
  CHECK(rb.target_mass > 0.0);
  CHECK(rb.target_mass < 1.0);

  push.copy_parameters_from(base);
  for (auto* t : push.depth_tables()) t->value.fill(0.0);
  const AttentionReport rp = attention_analysis(push, probes);
  CHECK(rp.mean_rows == rb.mean_rows);
  CHECK(rp.target_mass == rb.target_mass);

  const auto m = attention_matrix(base, probes[0].seq);
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = i + 1; j < m.size(); ++j) CHECK(m[i][j] == 0.0);
  const std::string csv = attention_rows_csv(rb, 0);
  CHECK(csv.rfind("layer,pos0,", 0) == 0);
  CHECK(csv.find("\nmean,") != std::string::npos);

  const std::string svg = heatmap_svg({{1.0, 0.0}, {0.25, 0.75}}, {"<0", "0>"});
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("&lt;0") != std::string::npos);
  CHECK(svg.find("rgb(0,0,0)") != std::string::npos);
  CHECK(svg.find("rgb(255,255,255)") != std::string::npos);
  CHECK(matrix_csv({{0.5}}, {"a"}) == "query,a\na,0.5\n");
}
