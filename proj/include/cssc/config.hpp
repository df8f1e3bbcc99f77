#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cssc/data.hpp"
#include "cssc/evaluation.hpp"
#include "cssc/gradcheck.hpp"
#include "cssc/model.hpp"
#include "cssc/training.hpp"

namespace cssc {

enum class ValueType { integer, uint64, real, boolean, string, int_list, string_list, real_pair };

struct ConfigKey {
  std::string key;
  ValueType type;
  std::string default_value;
  double min = -1e300;  // numeric bounds, inclusive (per element for lists)
  double max = 1e300;
  std::vector<std::string> choices;  // allowed strings (per element for lists)
  std::string help;
};

// Flat, typed `key = value` configuration with dotted namespaces. Every key
// is declared in schema(); values are validated when set.
class Config {
 public:
  static const std::vector<ConfigKey>& schema();
  static Config defaults();
  static Config parse(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
  static Config parse_text(const std::string& text, const std::string& origin = "<text>");

  void set(const std::string& key, const std::string& value);
  void apply_override(const std::string& assignment);  // "key=value"

  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  const std::string& get_string(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;
  std::vector<std::string> get_string_list(const std::string& key) const;
  std::pair<double, double> get_pair(const std::string& key) const;

  // Effective configuration in the file format, schema order.
  std::string to_text() const;
  bool operator==(const Config&) const = default;

 private:
  const std::string& raw(const std::string& key) const;
  std::map<std::string, std::string> values_;
};

// Closest schema key by edit distance.
std::string nearest_key(const std::string& key);
std::size_t edit_distance(const std::string& a, const std::string& b);

SynthSpec synth_spec(const Config& c);
ModelConfig model_config(const Config& c, std::size_t num_train_identities);
TrainConfig train_config(const Config& c);
std::vector<ProtocolSetting> eval_settings(const Config& c);
GradCheckOptions gradcheck_options(const Config& c);

// Git blob object id: SHA-1 of "blob <size>\0<content>".
std::string git_blob_sha1(const std::string& content);
std::string git_blob_sha1_file(const std::filesystem::path& path);

}  // namespace cssc
