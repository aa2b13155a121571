#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pdl/treebank.hpp"

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

int run(const std::string& args) {
  const std::string cmd = std::string(PDL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

struct Workspace {
  fs::path dir = fs::temp_directory_path() / ("pdl_cli_" + std::to_string(::getpid()));
  Workspace() { fs::create_directories(dir); }
  ~Workspace() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

const char* kGen =
    "gen-data --num-types 2 --max-depth 3 --max-length 12 --train 60 --val 12 --test 8 --depth-min 4 --depth-max 5 "
    "--depth-count 4 --longrange 5 --longrange-count 4 --seed 3 --out ";
const char* kTrain = "train --layers 1 --dim 8 --heads 2 --steps 20 --warmup 2 --eval_every 10 --batch_size 8 --seed 4";

}  // namespace

TEST_CASE("command line workflow") {
  Workspace ws;
  REQUIRE(run(kGen + ws / "a") == 0);
  REQUIRE(run(kGen + ws / "b") == 0);
  for (const char* f : {"train.txt", "val.txt", "test.txt", "depth_gen.split", "longrange.split", "manifest.jsonl"})
    CHECK(slurp(ws / "a" + "/" + f) == slurp(ws / "b" + "/" + f));
  const auto manifest = lines_of(slurp(ws / "a/manifest.jsonl"));
  REQUIRE(manifest.size() == 6);
  CHECK(manifest[0].find("\"num_types\":2") != std::string::npos);
  CHECK(manifest[1].find("\"split\":\"train\"") != std::string::npos);

  const std::string data = " --train_data " + ws / "a/train.pdlc" + " --val_data " + ws / "a/val.pdlc";
  REQUIRE(run(std::string(kTrain) + data + " --out " + ws / "run") == 0);
  CHECK_FALSE(fs::exists(ws / "run/LOCK"));

  SUBCASE("evaluation reproduces the logged validation perplexity") {
    const auto metrics = lines_of(slurp(ws / "run/metrics.csv"));
    REQUIRE(metrics.size() == 3);
    const std::string last = metrics.back();
    std::vector<std::string> cols;
    std::istringstream in(last);
    for (std::string c; std::getline(in, c, ',');) cols.push_back(c);
    const double logged = std::stod(cols.at(3));
    REQUIRE(run("eval --task ppl --checkpoint " + ws / "run/last.ckpt" + " --split " + ws / "a/val.pdlc" + " --out " +
                ws / "ppl.csv") == 0);
    const auto rows = lines_of(slurp(ws / "ppl.csv"));
    REQUIRE(rows.size() == 2);
    const double got = std::stod(rows[1].substr(rows[1].rfind(',') + 1));
    CHECK(got == doctest::Approx(logged).epsilon(1e-8));

    CHECK(run("eval --task closing --checkpoint " + ws / "run/last.ckpt" + " --split " + ws / "a/longrange.split" +
              " --out " + ws / "closing.csv") == 0);
    CHECK(slurp(ws / "closing.csv").rfind("task,bucket,count,correct,accuracy\nlongrange,5,4,", 0) == 0);
  }

  SUBCASE("parses cover the input words") {
    std::string input;
    std::vector<std::vector<std::string>> want;
    for (const auto& l : lines_of(slurp(ws / "a/test.txt"))) {
      want.push_back(pdl::leaves(pdl::parse_sexpr(l)));
      for (const auto& w : want.back()) input += w + " ";
      input += "\n";
    }
    spit(ws / "words.txt", input);
    REQUIRE(run("parse --beam 4 --checkpoint " + ws / "run/model.ckpt" + " --input " + ws / "words.txt" + " --out " +
                ws / "parsed.txt") == 0);
    const auto out = lines_of(slurp(ws / "parsed.txt"));
    REQUIRE(out.size() == want.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const pdl::ParseTree t = pdl::parse_sexpr(out[i]);
      CHECK(pdl::leaves(t) == want[i]);
    }

    REQUIRE(run("score --mode surprisal --beam 4 --checkpoint " + ws / "run/model.ckpt" + " --input " +
                ws / "words.txt" + " --out " + ws / "surprisal.jsonl") == 0);
    CHECK(lines_of(slurp(ws / "surprisal.jsonl")).size() == want.size());
  }

  SUBCASE("exit codes") {
    CHECK(run("train --no-such-flag 1") == 2);
    CHECK(run(std::string(kTrain) + data + " --layers 0 --out " + ws / "bad") == 2);
    CHECK(run("eval --task ppl --checkpoint " + ws / "missing.ckpt" + " --split " + ws / "a/val.pdlc") == 3);
    spit(ws / "broken.ckpt", slurp(ws / "run/model.ckpt").substr(0, 40));
    CHECK(run("eval --task ppl --checkpoint " + ws / "broken.ckpt" + " --split " + ws / "a/val.pdlc") == 4);
    spit(ws / "oov.txt", "<0 zebra 0>\n");
    CHECK(run("parse --checkpoint " + ws / "run/model.ckpt" + " --input " + ws / "oov.txt") == 5);
    spit(ws / "unbalanced.txt", "(X (X <0 0>)\n");
    CHECK(run("score --mode joint --checkpoint " + ws / "run/model.ckpt" + " --input " + ws / "unbalanced.txt") == 6);
    fs::create_directories(ws / "held");
    spit(ws / "held/LOCK", "1\n");
    CHECK(run(std::string(kTrain) + data + " --out " + ws / "held") == 8);
  }
}
