#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <unistd.h>

#include "pdl/errors.hpp"
#include "pdl/run_config.hpp"

using namespace pdl;
namespace fs = std::filesystem;

TEST_CASE("key-value parsing") {
  const KeyValues kv = parse_kv("# comment\nlayers = 3\n\n dim=16  # trailing\n");
  CHECK(kv == KeyValues{{"layers", "3"}, {"dim", "16"}});
  CHECK(parse_kv(format_kv(kv)) == kv);
  CHECK_THROWS_WITH_AS(parse_kv("a = 1\nnonsense\n", "cfg"), doctest::Contains("cfg:2"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_kv("a = 1\na = 2\n"), doctest::Contains("duplicate"), ConfigError);
  CHECK_THROWS_AS(parse_kv(" = 4\n"), ConfigError);
  CHECK(parse_assignment("lr=0.5") == std::pair<std::string, std::string>{"lr", "0.5"});
  CHECK_THROWS_AS(parse_assignment("lr"), ConfigError);
  CHECK_THROWS_AS(read_kv_file("/nonexistent/run.cfg"), IoError);
}

TEST_CASE("run configuration") {
  const RunConfig rc = load_run_config(std::nullopt, {{"layers", "2"}, {"seed", "7"}, {"lr", "0.01"}});
  CHECK(rc.model.layers == 2);
  CHECK(rc.model.seed == 7);
  CHECK(rc.train.lr == 0.01);
  CHECK(load_run_config(std::nullopt, {{"seed", "7"}, {"model_seed", "9"}}).model.seed == 9);

  const RunConfig back = RunConfig::from_kv(rc.to_kv());
  CHECK(back.to_kv() == rc.to_kv());
  CHECK(back.hash() == rc.hash());
  CHECK(rc.hash().size() == 16);
  CHECK(load_run_config(std::nullopt, {{"layers", "3"}, {"seed", "7"}, {"lr", "0.01"}}).hash() != rc.hash());

  CHECK_THROWS_WITH_AS(load_run_config(std::nullopt, {{"layres", "2"}}), doctest::Contains("layres"), ConfigError);
  CHECK_THROWS_AS(load_run_config(std::nullopt, {{"layers", "two"}}), ConfigError);
  CHECK_THROWS_AS(load_run_config(std::nullopt, {{"dim", "30"}, {"heads", "4"}}), ConfigError);
}

TEST_CASE("run root and directory locks") {
  const fs::path root = fs::temp_directory_path() / ("pdl_runs_" + std::to_string(::getpid()));
  ::setenv(kRunRootEnv, root.c_str(), 1);
  CHECK(default_run_root() == root);
  ::setenv(kRunRootEnv, "", 1);
  CHECK(default_run_root() == fs::path("runs"));
  ::unsetenv(kRunRootEnv);

  fs::path held;
  {
    RunDirectory d = RunDirectory::create(root, "0123456789abcdef");
    held = d.path();
    CHECK(held.parent_path() == root);
    CHECK(held.filename().string().size() == 15 + 1 + 8);
    CHECK(fs::exists(held / "LOCK"));
    CHECK_THROWS_AS(RunDirectory::open(held), LockError);
    RunDirectory moved(std::move(d));
    CHECK(fs::exists(held / "LOCK"));
  }
  CHECK_FALSE(fs::exists(held / "LOCK"));
  { RunDirectory again = RunDirectory::open(held); }
  CHECK_THROWS_AS(RunDirectory::open(root / "missing"), IoError);
  fs::remove_all(root);
}
