#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <unistd.h>

#include "pdl/trainer.hpp"
#include "support.hpp"

using namespace pdl;
using test::random_sequence;
using test::tiny_config;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<Sequence> random_corpus(int count, int vocab, std::uint64_t seed, int max_words = 8) {
  std::mt19937_64 rng(seed);
  std::vector<Sequence> out;
  for (int i = 0; i < count; ++i) out.push_back(random_sequence(1 + static_cast<int>(rng() % max_words), vocab, rng));
  return out;
}

TrainConfig small_train(int steps) {
  TrainConfig tc;
  tc.batch_size = 4;
  tc.steps = steps;
  tc.warmup = 5;
  tc.lr = 3e-3;
  tc.eval_every = 10;
  tc.seed = 2;
  return tc;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig tc;
  tc.steps = 110;
  tc.warmup = 10;
  tc.lr = 2.0;
  CHECK(learning_rate(tc, 0) == 0.0);
  CHECK(learning_rate(tc, 5) == doctest::Approx(1.0));
  CHECK(learning_rate(tc, 10) == doctest::Approx(2.0));
  CHECK(learning_rate(tc, 60) == doctest::Approx(1.0));  // half way through the cosine
  CHECK(learning_rate(tc, 110) == doctest::Approx(0.0));
  for (int s = 1; s < 10; ++s) CHECK(learning_rate(tc, s) > learning_rate(tc, s - 1));
  for (int s = 11; s <= 110; ++s) CHECK(learning_rate(tc, s) <= learning_rate(tc, s - 1));
  tc.schedule = Schedule::constant;
  CHECK(learning_rate(tc, 100) == 2.0);

  tc.warmup = 200;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("config key-value round trip") {
  TrainConfig tc = small_train(30);
  tc.attach_mask = false;
  tc.schedule = Schedule::constant;
  TrainConfig back;
  CHECK(back.apply_kv(tc.to_kv()).empty());
  CHECK(back.to_kv() == tc.to_kv());
  CHECK_THROWS_AS(back.apply_kv({{"attach_mask", "sometimes"}}), ConfigError);
  CHECK(back.apply_kv({{"layers", "3"}}) == std::map<std::string, std::string>{{"layers", "3"}});
}

TEST_CASE("batch stream covers each epoch once and is reproducible") {
  const auto data = random_corpus(50, 10, 1);
  BatchStream a(data, 8, 3), b(data, 8, 3), c(data, 8, 4);
  std::multiset<const Sequence*> seen;
  bool differs = false;
  for (int i = 0; i < 7; ++i) {  // ceil(50 / 8) batches per epoch
    const auto ba = a.next(), bb = b.next(), bc = c.next();
    CHECK(ba == bb);
    differs |= ba != bc;
    CHECK(ba.size() <= 8);
    seen.insert(ba.begin(), ba.end());
    CHECK(a.batch_id() == static_cast<std::size_t>(i));
  }
  CHECK(differs);
  CHECK(seen.size() == 50);
  CHECK(std::set<const Sequence*>(seen.begin(), seen.end()).size() == 50);
}

TEST_CASE("overfitting one sentence") {
  const auto data = random_corpus(1, 10, 5);
  PushdownModel model(tiny_config(ModelMode::pushdown, 10, 3));
  TrainConfig tc = small_train(500);
  tc.batch_size = 1;
  tc.eval_every = 50;
  const TrainResult res = train(model, data, data, tc);
  REQUIRE(res.log.size() == 10);
  CHECK(res.log.back().lm_loss < 0.01);
  CHECK(validate(model, data).attach_accuracy == 1.0);
}

TEST_CASE("loss falls steadily early on") {
  const auto data = random_corpus(4, 10, 6);
  PushdownModel model(tiny_config(ModelMode::pushdown, 10, 4));
  TrainConfig tc = small_train(50);
  tc.warmup = 0;
  tc.lr = 1e-3;
  tc.eval_every = 5;
  const TrainResult res = train(model, data, data, tc);
  REQUIRE(res.log.size() == 10);
  for (std::size_t i = 1; i < res.log.size(); ++i) {
    CHECK(res.log[i].lm_loss < res.log[i - 1].lm_loss);
    CHECK(res.log[i].val_ppl < res.log[i - 1].val_ppl);
  }
}

TEST_CASE("identical runs write identical metrics") {
  const auto data = random_corpus(30, 10, 7);
  const auto root = std::filesystem::temp_directory_path() / ("pdl_train_" + std::to_string(::getpid()));
  Vocab vocab;
  for (int i = 2; i < 10; ++i) vocab.add("w" + std::to_string(i));
  std::string csv[2];
  for (int run = 0; run < 2; ++run) {
    const auto dir = root / std::to_string(run);
    std::filesystem::create_directories(dir);
    ModelConfig mc = tiny_config(ModelMode::pushdown, 10, 8);
    mc.dropout = 0.1;
    PushdownModel model(mc);
    TrainOutputs outs;
    outs.dir = dir;
    outs.vocab = &vocab;
    train(model, data, data, small_train(30), outs);
    csv[run] = slurp(dir / "metrics.csv");
    CHECK(std::filesystem::exists(dir / "model.ckpt"));
    CHECK(std::filesystem::exists(dir / "last.ckpt"));
  }
  CHECK(csv[0] == csv[1]);
  CHECK(csv[0].rfind(metrics_header(), 0) == 0);
  std::filesystem::remove_all(root);
}

TEST_CASE("early stopping") {
  const auto data = random_corpus(10, 10, 9);
  PushdownModel model(tiny_config(ModelMode::base_plain, 10, 1));
  TrainConfig tc = small_train(200);
  tc.lr = 0.0;  // nothing improves after the first evaluation
  tc.patience = 2;
  const TrainResult res = train(model, data, data, tc);
  CHECK(res.stopped_early);
  CHECK(res.log.size() == 3);
  CHECK(res.best_step == 10);
}

TEST_CASE("non-finite losses stop training with a report") {
  const auto data = random_corpus(10, 10, 10);
  PushdownModel model(tiny_config(ModelMode::pushdown, 10, 1));
  model.parameters()[0]->value[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(model, data, data, small_train(5));
    FAIL("no error");
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step 0") != std::string::npos);
    CHECK(msg.find("batch 0") != std::string::npos);
    CHECK(msg.find("tok_emb") != std::string::npos);
  }
}
