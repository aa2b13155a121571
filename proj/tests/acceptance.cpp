// Acceptance run: one PASS/FAIL line per criterion.
//
//   pdl_acceptance [--only 1,2,5] [--work-dir DIR] [--dyck-seeds 3]
//
// Exit status is 0 when every selected criterion ran to completion; failed
// criteria are reported on their line and in the summary, not hidden.

#include <CLI11.hpp>

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "pdl/decoder.hpp"
#include "pdl/dyck.hpp"
#include "pdl/eval.hpp"
#include "pdl/stack_machine.hpp"
#include "pdl/trainer.hpp"
#include "support.hpp"

using namespace pdl;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  va_list ap, ap2;
  va_start(ap, f);
  va_copy(ap2, ap);
  std::string out(static_cast<std::size_t>(std::vsnprintf(nullptr, 0, f, ap)), '\0');
  va_end(ap);
  std::vsnprintf(out.data(), out.size() + 1, f, ap2);
  va_end(ap2);
  return out;
}

// -- 1: stack tape oracle -----------------------------------------------------

// Tape value of a token after prefix [0, k]: its depth inside the maximal
// subtree of the tree that is complete by k.
void depths_within(const BinaryTree& t, int depth, std::vector<int>& out) {
  if (t.is_leaf()) {
    out[static_cast<std::size_t>(t.index())] = depth;
    return;
  }
  depths_within(t.left(), depth + 1, out);
  depths_within(t.right(), depth + 1, out);
}

void forest_depths(const BinaryTree& t, int k, std::vector<int>& out) {
  if (t.last() <= k) {
    depths_within(t, 0, out);
    return;
  }
  if (t.first() > k) return;
  forest_depths(t.left(), k, out);
  forest_depths(t.right(), k, out);
}

bool tape_matches(const BinaryTree& t) {
  const int n = t.leaf_count();
  const std::vector<int> r = oracle_extract(t);
  const auto m = precompute_tape_matrix(n, r);
  for (int k = 0; k < n; ++k) {
    std::vector<int> row(static_cast<std::size_t>(n), 0);
    forest_depths(t, k, row);
    for (int j = 0; j <= k; ++j)
      if (m[static_cast<std::size_t>(k * n + j)] != row[static_cast<std::size_t>(j)]) return false;
  }
  return replay(r).second == t;
}

Outcome criterion1() {
  const auto t0 = Clock::now();
  long checked = 0, bad = 0;
  for (int n = 1; n <= 8; ++n)
    for (const auto& t : test::all_trees(0, n - 1)) {
      ++checked;
      bad += !tape_matches(t);
    }
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 10000; ++i) {
    const int n = 1 + static_cast<int>(rng() % 14);
    ++checked;
    bad += !tape_matches(test::random_tree(0, n - 1, rng));
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < 60.0, fmt("%ld trees, %ld mismatches, %.1fs (limit 60s)", checked, bad, secs)};
}

// -- 2: worked example ----------------------------------------------------------

Outcome criterion2() {
  // ROOT(0) The(1) dog(2) is(3), then happy(4) reduces with dog
  StackState st;
  for (int k = 0; k < 4; ++k) st = update_stack_tape(st, k, std::vector<int>{0, 1, 1, 3}[static_cast<std::size_t>(k)]);
  const std::vector<int> before(st.tape.begin() + 1, st.tape.end());
  const auto mask = candidate_mask(st, 4);
  const bool dog_allowed = mask.size() > 2 && mask[2];
  const StackState after = update_stack_tape(st, 4, 2);
  const std::vector<int> next(after.tape.begin() + 1, after.tape.end());

  const auto m = precompute_tape_matrix(5, {0, 1, 1, 3, 2});
  const std::vector<int> row3(m.begin() + 3 * 5 + 1, m.begin() + 3 * 5 + 4);
  const std::vector<int> row4(m.begin() + 4 * 5 + 1, m.begin() + 5 * 5);

  const bool ok = before == std::vector<int>{1, 1, 0} && next == std::vector<int>{2, 2, 2, 2} && row3 == before &&
                  row4 == next && dog_allowed;
  auto show = [](const std::vector<int>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s + "]";
  };
  return {ok, show(before) + " -> " + show(next) + ", r(happy)=dog"};
}

// -- 3: gradients ----------------------------------------------------------------

Outcome criterion3() {
  const auto t0 = Clock::now();
  ModelConfig mc = test::tiny_config(ModelMode::pushdown, 12, 31);
  mc.layers = 2;
  mc.dim = 16;
  PushdownModel model(mc);
  std::mt19937_64 rng(5);
  const Sequence a = test::random_sequence(8, 12, rng), b = test::random_sequence(6, 12, rng);
  const BatchData bd = model.make_batch({&a, &b});
  const double err = test::model_gradient_error(model, bd, 1.0);
  const double secs = seconds_since(t0);
  return {err < 1e-4 && secs < 120.0, fmt("max relative error %.2e (limit 1e-4), %.1fs (limit 120s)", err, secs)};
}

// -- 4: degeneracy -------------------------------------------------------------

Outcome criterion4() {
  const int V = 20;
  ModelConfig pc;
  pc.layers = 3;
  pc.dim = 24;
  pc.heads = 4;
  pc.vocab = V;
  pc.max_seq_len = 40;
  pc.init_std = 0.2;
  pc.seed = 8;
  PushdownModel push(pc);
  for (auto* t : push.depth_tables()) t->value.fill(0.0);
  ModelConfig bc = pc;
  bc.mode = ModelMode::base_multitask;
  PushdownModel base(bc);
  base.copy_parameters_from(push);

  std::mt19937_64 rng(9);
  int equal = 0;
  for (int i = 0; i < 100; ++i) {
    const Sequence s = test::random_sequence(1 + static_cast<int>(rng() % 30), V, rng);
    const BatchData bd = push.make_batch({&s});
    ad::Graph g1(false), g2(false);
    const ForwardOutputs o1 = push.forward(g1, bd.input), o2 = base.forward(g2, bd.input);
    equal += o1.lm_logits.value().storage() == o2.lm_logits.value().storage() &&
             o1.hidden.value().storage() == o2.hidden.value().storage();
  }
  return {equal == 100, fmt("%d/100 inputs bitwise equal", equal)};
}

// -- 5: exact marginalization -----------------------------------------------------

Outcome criterion5() {
  const int V = 4;  // ROOT, EOS and two words
  std::mt19937_64 rng(77);
  std::vector<Sequence> data;
  for (int i = 0; i < 40; ++i) data.push_back(test::random_sequence(1 + static_cast<int>(rng() % 7), V, rng));
  double worst = 0.0;
  long strings = 0, non_monotone = 0;
  for (ModelMode mode : {ModelMode::pushdown, ModelMode::base_multitask}) {
    ModelConfig mc = test::tiny_config(mode, V, 3);
    mc.init_std = 0.1;
    PushdownModel model(mc);
    TrainConfig tc;
    tc.batch_size = 8;
    tc.steps = 200;
    tc.warmup = 10;
    tc.lr = 3e-3;
    tc.eval_every = 200;
    train(model, data, data, tc);
    for (int n = 1; n <= 7; ++n) {
      const int full = static_cast<int>(test::catalan(n - 1));
      for (int code = 0; code < (1 << n); ++code) {
        std::vector<int> words;
        for (int i = 0; i < n; ++i) words.push_back(2 + ((code >> i) & 1));
        const double exact = exhaustive_marginal(model, words);
        BeamConfig bc;
        double prev = -std::numeric_limits<double>::infinity();
        for (int w = 1; w <= full; w = w < full ? std::min(full, w * 2) : full + 1) {
          bc.width = w;
          const double m = marginal_logprob(model, words, bc);
          non_monotone += m < prev - 1e-12;
          prev = m;
          if (w == full) worst = std::max(worst, std::abs(m - exact));
        }
        bc.width = full + 3;
        worst = std::max(worst, std::abs(marginal_logprob(model, words, bc) - exact));
        ++strings;
      }
    }
  }
  return {worst < 1e-10 && non_monotone == 0,
          fmt("%ld strings x 2 models, max |beam - exhaustive| %.1e nats, %ld monotonicity violations", strings, worst,
              non_monotone)};
}

// -- 6-8: Dyck experiments ---------------------------------------------------------

struct DyckSetup {
  int num_types = 8;
  int max_depth = 6;
  int train_max_length = 40;
  int longrange_max_length = 96;
  std::size_t train_count = 20000;
  std::size_t val_count = 500;
  std::size_t test_count = 300;
  std::size_t depth_count = 500;
  std::size_t longrange_count = 500;
  int steps = 3000;
  int warmup = 100;
  double lr = 1e-3;
  TapeMode tape = TapeMode::model_greedy;
};

struct DyckSeedResult {
  double depth[2] = {0, 0};      // pushdown, base
  double longrange[2] = {0, 0};
  double depth_oracle = 0.0;     // pushdown with gold tapes
  double longrange_oracle = 0.0;
  double val_ppl[2] = {0, 0};
  double f1 = 0.0;
  double train_secs = 0.0;
  double eval_secs = 0.0;
};

DyckSeedResult run_dyck_seed(const DyckSetup& cfg, std::uint64_t seed, const fs::path& dir) {
  DyckSeedResult res;
  DyckSpec spec;
  spec.num_types = cfg.num_types;
  spec.max_depth = cfg.max_depth;
  spec.max_length = cfg.train_max_length;
  spec.seed = seed;
  std::unordered_set<std::uint64_t> seen;
  auto corpus = [&](std::size_t count, std::uint64_t shard) {
    std::vector<Sequence> out;
    for (const auto& s : sample_dyck(spec, count, shard)) {
      seen.insert(dyck_hash(s));
      out.push_back(dyck_sequence(s, cfg.num_types, spec.branching));
    }
    return out;
  };
  const auto train_data = corpus(cfg.train_count, 0);
  const auto val_data = corpus(cfg.val_count, 1);
  const auto test_data = corpus(cfg.test_count, 2);

  SplitOptions opt;
  opt.seed = seed * 1000003ull + 17;
  opt.max_length = cfg.train_max_length;
  opt.max_prefix_len = cfg.train_max_length - 1;
  opt.exclude = &seen;
  const auto depth_split = build_depth_gen_split(spec, 8, 12, cfg.depth_count, opt);
  // longer strings than any training string, so every distance >= 40 is unseen
  opt.seed += 1;
  opt.max_length = cfg.longrange_max_length;
  opt.max_prefix_len = cfg.longrange_max_length - 1;
  const auto longrange_split = build_longrange_split(spec, {40}, cfg.longrange_count, opt);

  const Vocab vocab = dyck_vocab(cfg.num_types);
  for (int m = 0; m < 2; ++m) {
    ModelConfig mc;
    mc.mode = m == 0 ? ModelMode::pushdown : ModelMode::base_multitask;
    mc.vocab = vocab.size();
    mc.max_seq_len = cfg.longrange_max_length + 2;
    mc.seed = seed;
    PushdownModel model(mc);
    TrainConfig tc;
    tc.steps = cfg.steps;
    tc.warmup = cfg.warmup;
    tc.lr = cfg.lr;
    tc.eval_every = cfg.steps;
    tc.seed = seed;
    TrainOutputs outs;
    outs.dir = dir / (std::string(m == 0 ? "pushdown" : "base") + "_seed" + std::to_string(seed));
    fs::create_directories(*outs.dir);
    outs.vocab = &vocab;
    auto t0 = Clock::now();
    train(model, train_data, val_data, tc, outs);
    res.train_secs += seconds_since(t0);

    t0 = Clock::now();
    res.val_ppl[m] = validate(model, val_data).perplexity;
    res.depth[m] = closing_accuracy(model, depth_split, cfg.num_types, cfg.tape).overall.accuracy();
    res.longrange[m] = closing_accuracy(model, longrange_split, cfg.num_types, cfg.tape).overall.accuracy();
    if (m == 0) {
      res.depth_oracle = closing_accuracy(model, depth_split, cfg.num_types, TapeMode::gold_oracle).overall.accuracy();
      res.longrange_oracle =
          closing_accuracy(model, longrange_split, cfg.num_types, TapeMode::gold_oracle).overall.accuracy();
      BeamConfig bc;
      bc.width = 32;
      bc.mode = DecodeMode::parse;
      std::vector<BinaryTree> pred(test_data.size()), gold(test_data.size());
#pragma omp parallel for schedule(dynamic, 1)
      for (std::size_t i = 0; i < test_data.size(); ++i) {
        const auto& s = test_data[i];
        const std::vector<int> words(s.ids.begin() + 1, s.ids.end() - 1);
        pred[i] = best_parse(model, words, bc).tree;
        gold[i] = gold_word_tree(s);
      }
      res.f1 = unlabeled_f1(pred, gold).f1;
    }
    res.eval_secs += seconds_since(t0);
  }
  return res;
}

// -- 9: chance level ----------------------------------------------------------------

Outcome criterion9() {
  const int K = 8;
  DyckSpec spec;
  spec.num_types = K;
  spec.max_depth = 6;
  spec.max_length = 40;
  spec.seed = 99;
  // one item per string at a uniformly chosen closing bracket
  std::vector<ClosingItem> items;
  std::mt19937_64 rng(5);
  for (const auto& s : sample_dyck(spec, 6000, 7)) {
    std::vector<int> closes;
    for (int i = 0; i < s.size(); ++i)
      if (!s.opens[static_cast<std::size_t>(i)]) closes.push_back(i);
    const int c = closes[rng() % closes.size()];
    ClosingItem it;
    it.source = s;
    it.prefix_len = c;
    it.gold_type = s.types[static_cast<std::size_t>(c)];
    it.distance = c - s.matching[static_cast<std::size_t>(c)];
    it.depth = s.depth[static_cast<std::size_t>(c)];
    items.push_back(std::move(it));
  }
  std::string detail;
  bool pass = true;
  for (ModelMode mode : {ModelMode::pushdown, ModelMode::base_multitask}) {
    ModelConfig mc;
    mc.mode = mode;
    mc.vocab = dyck_vocab(K).size();
    mc.seed = 4;
    const PushdownModel model(mc);
    const double acc = closing_accuracy(model, items, K, TapeMode::model_greedy).overall.accuracy();
    pass = pass && std::abs(acc - 1.0 / K) <= 0.02;
    detail += fmt("%s %.2f%% ", mode == ModelMode::pushdown ? "pushdown" : "base", 100.0 * acc);
  }
  return {pass, detail + fmt("on %zu prefixes (target %.1f%% +- 2)", items.size(), 100.0 / K)};
}

// -- 10: determinism ------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome criterion10(const fs::path& dir) {
  DyckSpec spec;
  spec.num_types = 4;
  spec.max_depth = 4;
  spec.max_length = 24;
  spec.seed = 3;
  std::vector<Sequence> data, val;
  for (const auto& s : sample_dyck(spec, 300, 0)) data.push_back(dyck_sequence(s, 4, spec.branching));
  for (const auto& s : sample_dyck(spec, 50, 1)) val.push_back(dyck_sequence(s, 4, spec.branching));
  const Vocab vocab = dyck_vocab(4);
  std::string csv[2];
  for (int run = 0; run < 2; ++run) {
    ModelConfig mc;
    mc.layers = 2;
    mc.dim = 16;
    mc.vocab = vocab.size();
    mc.dropout = 0.1;
    mc.seed = 12;
    PushdownModel model(mc);
    TrainConfig tc;
    tc.steps = 60;
    tc.warmup = 5;
    tc.eval_every = 20;
    tc.seed = 12;
    TrainOutputs outs;
    outs.dir = dir / ("determinism" + std::to_string(run));
    fs::create_directories(*outs.dir);
    outs.vocab = &vocab;
    train(model, data, val, tc, outs);
    csv[run] = slurp(*outs.dir / "metrics.csv");
  }
  const bool same = !csv[0].empty() && csv[0] == csv[1];
  return {same, fmt("metrics.csv %zu bytes, %s", csv[0].size(), same ? "identical" : "different")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "pdl_acceptance").string();
  int seeds = 3;
  app.add_option("--only", only, "Criteria to run (default all)")->delimiter(',');
  app.add_option("--work-dir", work, "Scratch directory for training runs");
  app.add_option("--dyck-seeds", seeds, "Seeds for the Dyck comparison");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());
  auto want = [&](int c) { return selected.empty() || selected.count(c); };
  fs::create_directories(work);
  std::ofstream log(fs::path(work) / "report.txt");
  auto say = [&](const std::string& line) {
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    log << line << '\n' << std::flush;
  };

  int ran = 0, passed = 0;
  auto report = [&](int id, const char* name, const Outcome& o) {
    ++ran;
    passed += o.pass;
    say(fmt("criterion %2d %s  %-28s %s", id, o.pass ? "PASS" : "FAIL", name, o.detail.c_str()));
  };
  auto guarded = [&](int id, const char* name, const std::function<Outcome()>& f) {
    if (!want(id)) return;
    try {
      report(id, name, f());
    } catch (const std::exception& e) {
      report(id, name, {false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, "stack tape oracle", criterion1);
  guarded(2, "worked example", criterion2);
  guarded(3, "gradient check", criterion3);
  guarded(4, "zero depth degeneracy", criterion4);
  guarded(5, "exact marginalization", criterion5);

  if (want(6) || want(7) || want(8)) {
    const DyckSetup cfg;
    std::vector<DyckSeedResult> results;
    std::string error;
    const auto t0 = Clock::now();
    try {
      for (int s = 1; s <= seeds; ++s) {
        results.push_back(run_dyck_seed(cfg, static_cast<std::uint64_t>(s), fs::path(work) / "dyck"));
        const auto& r = results.back();
        say(fmt("  dyck seed %d: depth %.1f vs %.1f (gold tape %.1f), long-range %.1f vs %.1f (gold tape %.1f), "
                "val ppl %.3f vs %.3f, F1 %.1f, train %.0fs, eval %.0fs",
                s, 100 * r.depth[0], 100 * r.depth[1], 100 * r.depth_oracle, 100 * r.longrange[0],
                    100 * r.longrange[1], 100 * r.longrange_oracle, r.val_ppl[0], r.val_ppl[1], r.f1, r.train_secs,
                r.eval_secs));
      }
    } catch (const std::exception& e) {
      error = e.what();
    }
    const double total = seconds_since(t0);
    double train_secs = 0.0;
    for (const auto& r : results) train_secs += r.train_secs;
    const bool complete = error.empty() && static_cast<int>(results.size()) == seeds;

    if (want(6)) {
      int holds = 0, holds_oracle = 0;
      for (const auto& r : results) {
        holds += r.depth[0] - r.depth[1] >= 0.10 && r.longrange[0] - r.longrange[1] >= 0.05;
        holds_oracle += r.depth_oracle - r.depth[1] >= 0.10 && r.longrange_oracle - r.longrange[1] >= 0.05;
      }
      const int need = (2 * seeds + 2) / 3;
      report(6, "Dyck generalization trend",
             {complete && holds >= need && train_secs <= 3600.0,
              error.empty() ? fmt("margins hold for %d/%d seeds (need %d; %d/%d with gold tapes), training %.0fs of "
                                  "3600s, total %.0fs",
                                  holds, seeds, need, holds_oracle, seeds, train_secs, total)
                            : "error: " + error});
    }
    if (want(7)) {
      double worst = 100.0;
      for (const auto& r : results) worst = std::min(worst, r.f1);
      report(7, "Dyck parsing F1", {complete && worst >= 95.0, fmt("lowest F1 over seeds %.2f (need 95)", worst)});
    }
    if (want(8)) {
      double ratio = 0.0;
      for (const auto& r : results) ratio = std::max(ratio, r.val_ppl[0] / r.val_ppl[1]);
      report(8, "perplexity parity", {complete && ratio <= 1.05,
                                       fmt("largest pushdown/base perplexity ratio %.4f (limit 1.05)", ratio)});
    }
  }

  guarded(9, "chance-level calibration", criterion9);
  guarded(10, "determinism", [&] { return criterion10(fs::path(work)); });

  say(fmt("%d/%d criteria passed", passed, ran));
  return 0;
}
