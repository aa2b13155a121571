#include "pdl/run_config.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <sstream>

#include "pdl/binary_io.hpp"
#include "pdl/errors.hpp"

namespace pdl {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

const char* kPathKeys[] = {"train_data", "val_data", "run_root"};

}  // namespace

KeyValues parse_kv(const std::string& text, const std::string& source) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(n) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(n) + ": empty key");
    if (!kv.emplace(key, value).second) {
      throw ConfigError(source + ":" + std::to_string(n) + ": duplicate key \"" + key + "\"");
    }
  }
  return kv;
}

KeyValues read_kv_file(const std::filesystem::path& path) { return parse_kv(io::read_file(path), path.string()); }

std::string format_kv(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

std::pair<std::string, std::string> parse_assignment(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("expected key=value, got \"" + s + "\"");
  return {trim(s.substr(0, eq)), trim(s.substr(eq + 1))};
}

KeyValues RunConfig::to_kv() const {
  KeyValues kv = model.to_kv();
  for (const auto& [k, v] : train.to_kv()) kv[k] = v;
  kv["train_data"] = train_data;
  kv["val_data"] = val_data;
  kv["run_root"] = run_root;
  return kv;
}

RunConfig RunConfig::from_kv(const KeyValues& kv) {
  RunConfig rc;
  KeyValues rest = rc.train.apply_kv(kv);
  for (const char* key : kPathKeys) {
    auto it = rest.find(key);
    if (it == rest.end()) continue;
    if (std::string(key) == "train_data") rc.train_data = it->second;
    else if (std::string(key) == "val_data") rc.val_data = it->second;
    else rc.run_root = it->second;
    rest.erase(it);
  }
  if (!rest.count("model_seed")) rest["model_seed"] = std::to_string(rc.train.seed);
  rc.model = ModelConfig::from_kv(rest);  // rejects whatever is left unknown
  if (rc.run_root.empty()) rc.run_root = default_run_root().string();
  return rc;
}

std::string RunConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : format_kv(to_kv())) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& file, const KeyValues& overrides) {
  KeyValues kv;
  if (file) kv = read_kv_file(*file);
  for (const auto& [k, v] : overrides) kv[k] = v;
  RunConfig rc = RunConfig::from_kv(kv);
  ModelConfig probe = rc.model;
  if (probe.vocab == 0) probe.vocab = 2;  // filled in from the corpus later
  probe.validate();
  rc.train.validate();
  return rc;
}

std::filesystem::path default_run_root() {
  const char* env = std::getenv(kRunRootEnv);
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

RunDirectory::RunDirectory(std::filesystem::path p) : path_(std::move(p)) {
  const auto lock = path_ / "LOCK";
  const int fd = ::open(lock.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) throw LockError("run directory " + path_.string() + " is locked by another process (" + lock.string() + ")");
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
  locked_ = true;
}

RunDirectory::RunDirectory(RunDirectory&& other) noexcept : path_(std::move(other.path_)), locked_(other.locked_) {
  other.locked_ = false;
}

RunDirectory::~RunDirectory() {
  if (!locked_) return;
  std::error_code ec;
  std::filesystem::remove(path_ / "LOCK", ec);
}

RunDirectory RunDirectory::create(const std::filesystem::path& root, const std::string& hash) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const auto dir = root / (std::string(stamp) + "-" + hash.substr(0, 8));
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  return RunDirectory(dir);
}

RunDirectory RunDirectory::open(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("no such run directory " + dir.string());
  return RunDirectory(dir);
}

}  // namespace pdl
