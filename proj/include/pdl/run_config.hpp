#pragma once

// Flat key-value run configuration and run directories.
//
// File format: one `key = value` per line, `#` starts a comment. Every key
// can also be given on the command line as `--set key=value`; those win.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pdl/model.hpp"
#include "pdl/trainer.hpp"

namespace pdl {

/// Environment variable naming the default run root.
inline constexpr const char* kRunRootEnv = "PDL_RUN_ROOT";

using KeyValues = std::map<std::string, std::string>;

/// Throws ConfigError with the line number on malformed or duplicate keys.
KeyValues parse_kv(const std::string& text, const std::string& source = "config");
KeyValues read_kv_file(const std::filesystem::path& path);
std::string format_kv(const KeyValues& kv);
/// "key=value" -> (key, value).
std::pair<std::string, std::string> parse_assignment(const std::string& s);

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string train_data;
  std::string val_data;
  /// Defaults to $PDL_RUN_ROOT, else "runs".
  std::string run_root;

  KeyValues to_kv() const;
  /// Unknown keys are ConfigErrors. `seed` also seeds the model unless
  /// `model_seed` is given.
  static RunConfig from_kv(const KeyValues& kv);

  /// Hex FNV-1a of the formatted key-value text.
  std::string hash() const;
};

RunConfig load_run_config(const std::optional<std::filesystem::path>& file, const KeyValues& overrides);

/// Default run root: $PDL_RUN_ROOT if set and non-empty, else "runs".
std::filesystem::path default_run_root();

/// A run directory `<root>/<YYYYmmdd-HHMMSS>-<hash8>` held through a lock file.
class RunDirectory {
 public:
  /// Creates the directory (or reuses an unlocked one with the same name)
  /// and takes its lock. Throws Error when another process holds it.
  static RunDirectory create(const std::filesystem::path& root, const std::string& hash);
  /// Takes the lock of an existing directory.
  static RunDirectory open(const std::filesystem::path& dir);

  RunDirectory(RunDirectory&& other) noexcept;
  RunDirectory& operator=(RunDirectory&&) = delete;
  ~RunDirectory();

  const std::filesystem::path& path() const { return path_; }

 private:
  explicit RunDirectory(std::filesystem::path p);
  std::filesystem::path path_;
  bool locked_ = false;
};

class LockError : public Error {
 public:
  using Error::Error;
};

}  // namespace pdl
