#include "cssc/config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "cssc/error.hpp"

namespace cssc {

namespace {

using VT = ValueType;
constexpr double kInf = 1e300;

std::vector<ConfigKey> build_schema() {
  return {
      {"synth.num_identities", VT::integer, "20", 2, 100000, {}, "identities in the synthetic dataset"},
      {"synth.clothes_per_identity", VT::integer, "3", 2, 1000, {}, "outfits per identity (one is held out for query)"},
      {"synth.images_per_clothing", VT::integer, "4", 1, 1000, {}, "images per identity and outfit"},
      {"synth.image_height", VT::integer, "64", 16, 4096, {}, ""},
      {"synth.image_width", VT::integer, "32", 8, 4096, {}, ""},
      {"synth.num_cameras", VT::integer, "2", 1, 64, {}, ""},
      {"synth.seed", VT::uint64, "7", 0, kInf, {}, ""},

      {"data.manifest", VT::string, "", 0, 0, {}, "manifest path; empty uses <output>/data/manifest.csv"},

      {"model.scale", VT::string, "toy", 0, 0, {"toy", "full"}, ""},
      {"model.input_height", VT::integer, "64", 8, 4096, {}, "ignored for full scale (384)"},
      {"model.input_width", VT::integer, "32", 8, 4096, {}, "ignored for full scale (192)"},
      {"model.toy_stage_widths", VT::int_list, "16,32,64", 1, 4096, {}, ""},
      {"model.external_weights", VT::string, "", 0, 0, {}, "weight archive with backbone and layer4 tensors"},
      {"model.num_parts", VT::integer, "4", 1, 64, {}, "horizontal bands per SMR"},
      {"model.out_channels", VT::integer, "64", 1, 65536, {}, "SMR block width d"},
      {"model.part_channels", VT::integer, "16", 1, 65536, {}, "per-band reduced width"},
      {"model.reduction_ratio", VT::integer, "4", 1, 4096, {}, "channel-gate bottleneck ratio"},
      {"model.shared_reduction", VT::boolean, "false", 0, 0, {}, "one band reduction layer shared by all bands"},
      {"model.neck", VT::boolean, "true", 0, 0, {}, ""},
      {"model.seed", VT::uint64, "1", 0, kInf, {}, "parameter initialization seed"},

      {"ablation.disable_branch2", VT::boolean, "false", 0, 0, {}, ""},
      {"ablation.disable_second_smr", VT::boolean, "false", 0, 0, {}, ""},
      {"ablation.disable_local_mining", VT::boolean, "false", 0, 0, {}, ""},
      {"ablation.disable_refinement", VT::boolean, "false", 0, 0, {}, ""},
      {"ablation.swap_branch_order", VT::boolean, "false", 0, 0, {}, ""},

      {"train.epochs", VT::integer, "120", 1, 100000, {}, ""},
      {"train.batch_ids", VT::integer, "8", 2, 4096, {}, "P identities per batch"},
      {"train.instances_per_id", VT::integer, "4", 2, 4096, {}, "K images per identity"},
      {"train.base_lr", VT::real, "3e-4", 1e-12, 10, {}, ""},
      {"train.warmup_start_lr", VT::real, "3e-5", 1e-12, 10, {}, ""},
      {"train.warmup_epochs", VT::integer, "10", 1, 100000, {}, ""},
      {"train.decay_epochs", VT::int_list, "30,60", 1, 100000, {}, ""},
      {"train.decay_factor", VT::real, "0.1", 1e-12, 1, {}, ""},
      {"train.weight_decay", VT::real, "5e-4", 0, 1, {}, ""},
      {"train.triplet_start_epoch", VT::integer, "31", 1, 100000, {}, ""},
      {"train.triplet_margin", VT::real, "0.3", 0, 100, {}, ""},
      {"train.label_smoothing", VT::real, "0.1", 0, 0.999999, {}, ""},
      {"train.seed", VT::uint64, "1", 0, kInf, {}, "sampling and augmentation seed"},
      {"train.keep_checkpoints", VT::boolean, "false", 0, 0, {}, "keep one checkpoint per epoch"},

      {"augment.flip_probability", VT::real, "0.5", 0, 1, {}, ""},
      {"augment.pad_pixels", VT::integer, "10", 0, 4096, {}, ""},
      {"augment.erase_probability", VT::real, "0.5", 0, 1, {}, ""},
      {"augment.erase_area", VT::real_pair, "0.02,0.4", 1e-9, 1, {}, "relative area range"},
      {"augment.erase_aspect", VT::real_pair, "0.3,3.33", 1e-9, 1000, {}, "height/width range"},

      {"eval.settings", VT::string_list, "standard,cloth_changing", 0, 0, {"standard", "cloth_changing", "camera_split"}, ""},
      {"eval.query_cameras", VT::int_list, "", 0, 1e9, {}, "camera_split only"},
      {"eval.gallery_cameras", VT::int_list, "", 0, 1e9, {}, "camera_split only"},
      {"eval.batch_size", VT::integer, "32", 1, 100000, {}, ""},
      {"eval.max_rank", VT::integer, "50", 1, 100000, {}, ""},
      {"eval.rank_k", VT::integer, "10", 1, 100000, {}, "rank list length"},
      {"eval.checkpoint", VT::string, "", 0, 0, {}, "empty uses <output>/train/last.ckpt"},

      {"gradcheck.step", VT::real, "1e-6", 1e-12, 1, {}, ""},
      {"gradcheck.tolerance", VT::real, "1e-5", 1e-15, 1, {}, ""},
      {"gradcheck.coords_per_group", VT::integer, "12", 0, 1e9, {}, "0 checks every coordinate"},
      {"gradcheck.seed", VT::uint64, "0", 0, kInf, {}, ""},

      {"ablate.presets", VT::string_list, "ours,ours_wo_smr,ours_wo_local,ours_wo_refine,smr_c_s", 0, 0, {}, ""},
      {"ablate.seeds", VT::int_list, "1,2,3", 0, 1e9, {}, "each seed sets model.seed and train.seed"},
  };
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

const ConfigKey& lookup(const std::string& key) {
  const auto& s = Config::schema();
  const auto it = std::find_if(s.begin(), s.end(), [&](const ConfigKey& k) { return k.key == key; });
  if (it == s.end()) throw ValidationError("unknown config key '" + key + "' (did you mean '" + nearest_key(key) + "'?)");
  return *it;
}

template <typename T>
bool parse_number(const std::string& text, T& out) {
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size() && !text.empty();
}

[[noreturn]] void type_error(const ConfigKey& k, const std::string& value, const char* expected) {
  throw ValidationError("config key '" + k.key + "': expected " + expected + ", got '" + value + "'");
}

void check_range(const ConfigKey& k, double v, const std::string& text) {
  if (!(v >= k.min && v <= k.max)) {
    std::ostringstream os;
    os << "config key '" << k.key << "': value " << text << " is out of range [" << k.min << ", "
       << (k.max >= kInf ? std::string("inf") : std::to_string(k.max)) << "]";
    throw ValidationError(os.str());
  }
}

void check_choice(const ConfigKey& k, const std::string& v) {
  if (!k.choices.empty() && std::find(k.choices.begin(), k.choices.end(), v) == k.choices.end()) {
    std::string all;
    for (const auto& c : k.choices) all += (all.empty() ? "" : ", ") + c;
    throw ValidationError("config key '" + k.key + "': '" + v + "' is not one of {" + all + "}");
  }
}

// Validates `value` against the key and returns its canonical text.
std::string canonical(const ConfigKey& k, const std::string& value) {
  const std::string v = trim(value);
  switch (k.type) {
    case VT::integer: {
      long long x;
      if (!parse_number(v, x)) type_error(k, v, "an integer");
      check_range(k, static_cast<double>(x), v);
      return std::to_string(x);
    }
    case VT::uint64: {
      unsigned long long x;
      if (!parse_number(v, x)) type_error(k, v, "a non-negative integer");
      return std::to_string(x);
    }
    case VT::real: {
      double x;
      if (!parse_number(v, x) || !std::isfinite(x)) type_error(k, v, "a real number");
      check_range(k, x, v);
      return v;
    }
    case VT::boolean:
      if (v == "true" || v == "1" || v == "yes" || v == "on") return "true";
      if (v == "false" || v == "0" || v == "no" || v == "off") return "false";
      type_error(k, v, "a boolean (true/false)");
    case VT::string:
      check_choice(k, v);
      return v;
    case VT::int_list: {
      std::string out;
      for (const auto& item : split_list(v)) {
        long long x;
        if (!parse_number(item, x)) type_error(k, v, "a comma-separated list of integers");
        check_range(k, static_cast<double>(x), item);
        out += (out.empty() ? "" : ",") + std::to_string(x);
      }
      return out;
    }
    case VT::string_list: {
      std::string out;
      for (const auto& item : split_list(v)) {
        if (item.empty()) type_error(k, v, "a comma-separated list without empty items");
        check_choice(k, item);
        out += (out.empty() ? "" : ",") + item;
      }
      return out;
    }
    case VT::real_pair: {
      const auto items = split_list(v);
      double a, b;
      if (items.size() != 2 || !parse_number(items[0], a) || !parse_number(items[1], b))
        type_error(k, v, "two comma-separated real numbers");
      check_range(k, a, items[0]);
      check_range(k, b, items[1]);
      if (a > b) throw ValidationError("config key '" + k.key + "': range (" + v + ") must be ordered low,high");
      return items[0] + "," + items[1];
    }
  }
  return v;
}

}  // namespace

const std::vector<ConfigKey>& Config::schema() {
  static const std::vector<ConfigKey> s = build_schema();
  return s;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string nearest_key(const std::string& key) {
  std::string best;
  std::size_t best_d = SIZE_MAX;
  for (const auto& k : Config::schema()) {
    const std::size_t d = edit_distance(key, k.key);
    if (d < best_d) best_d = d, best = k.key;
  }
  return best;
}

Config Config::defaults() {
  Config c;
  for (const auto& k : schema()) c.values_[k.key] = canonical(k, k.default_value);
  return c;
}

void Config::set(const std::string& key, const std::string& value) {
  const ConfigKey& k = lookup(key);
  values_[k.key] = canonical(k, value);
}

void Config::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ValidationError("override '" + assignment + "' must have the form key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

Config Config::parse_text(const std::string& text, const std::string& origin) {
  Config c = defaults();
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  std::set<std::string> seen;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second)
      throw ValidationError(origin + ":" + std::to_string(line_no) + ": key '" + key + "' is set twice");
    try {
      c.set(key, line.substr(eq + 1));
    } catch (const ValidationError& e) {
      throw ValidationError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

Config Config::parse(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  Config c = parse_text(ss.str(), path.string());
  for (const auto& o : overrides) c.apply_override(o);
  return c;
}

const std::string& Config::raw(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error("config key '" + key + "' is not in the schema");
  return it->second;
}

std::int64_t Config::get_int(const std::string& key) const { return std::stoll(raw(key)); }
std::uint64_t Config::get_u64(const std::string& key) const { return std::stoull(raw(key)); }
double Config::get_real(const std::string& key) const { return std::stod(raw(key)); }
bool Config::get_bool(const std::string& key) const { return raw(key) == "true"; }
const std::string& Config::get_string(const std::string& key) const { return raw(key); }
std::vector<std::string> Config::get_string_list(const std::string& key) const { return split_list(raw(key)); }

std::vector<int> Config::get_int_list(const std::string& key) const {
  std::vector<int> out;
  for (const auto& s : split_list(raw(key))) out.push_back(std::stoi(s));
  return out;
}

std::pair<double, double> Config::get_pair(const std::string& key) const {
  const auto items = split_list(raw(key));
  return {std::stod(items.at(0)), std::stod(items.at(1))};
}

std::string Config::to_text() const {
  std::ostringstream os;
  std::string section;
  for (const auto& k : schema()) {
    const std::string s = k.key.substr(0, k.key.find('.'));
    if (s != section) {
      if (!section.empty()) os << '\n';
      section = s;
    }
    os << k.key << " = " << raw(k.key) << '\n';
  }
  return os.str();
}

SynthSpec synth_spec(const Config& c) {
  SynthSpec s;
  s.num_identities = static_cast<int>(c.get_int("synth.num_identities"));
  s.clothes_per_identity = static_cast<int>(c.get_int("synth.clothes_per_identity"));
  s.images_per_clothing = static_cast<int>(c.get_int("synth.images_per_clothing"));
  s.image_height = static_cast<int>(c.get_int("synth.image_height"));
  s.image_width = static_cast<int>(c.get_int("synth.image_width"));
  s.num_cameras = static_cast<int>(c.get_int("synth.num_cameras"));
  s.seed = c.get_u64("synth.seed");
  s.validate();
  return s;
}

ModelConfig model_config(const Config& c, std::size_t num_train_identities) {
  ModelConfig m = c.get_string("model.scale") == "full" ? ModelConfig::full(num_train_identities)
                                                        : ModelConfig::toy(num_train_identities);
  if (m.backbone.scale == BackboneScale::toy) {
    m.backbone.input_height = static_cast<std::size_t>(c.get_int("model.input_height"));
    m.backbone.input_width = static_cast<std::size_t>(c.get_int("model.input_width"));
    m.backbone.toy_stage_widths.clear();
    for (int w : c.get_int_list("model.toy_stage_widths")) m.backbone.toy_stage_widths.push_back(static_cast<std::size_t>(w));
    m.smr.in_channels = m.backbone.output_channels();
    m.smr.num_parts = static_cast<std::size_t>(c.get_int("model.num_parts"));
    m.smr.out_channels = static_cast<std::size_t>(c.get_int("model.out_channels"));
    m.smr.part_channels = static_cast<std::size_t>(c.get_int("model.part_channels"));
    m.smr.reduction_ratio = static_cast<std::size_t>(c.get_int("model.reduction_ratio"));
  }
  m.backbone.external_weights_path = c.get_string("model.external_weights");
  m.smr.shared_reduction = c.get_bool("model.shared_reduction");
  m.neck_enabled = c.get_bool("model.neck");
  m.ablation.disable_branch2 = c.get_bool("ablation.disable_branch2");
  m.ablation.disable_second_smr = c.get_bool("ablation.disable_second_smr");
  m.ablation.disable_local_mining = c.get_bool("ablation.disable_local_mining");
  m.ablation.disable_refinement = c.get_bool("ablation.disable_refinement");
  m.ablation.swap_branch_order = c.get_bool("ablation.swap_branch_order");
  m.validate();
  return m;
}

TrainConfig train_config(const Config& c) {
  TrainConfig t;
  t.epochs = static_cast<int>(c.get_int("train.epochs"));
  t.batch_ids = static_cast<int>(c.get_int("train.batch_ids"));
  t.instances_per_id = static_cast<int>(c.get_int("train.instances_per_id"));
  t.base_lr = c.get_real("train.base_lr");
  t.warmup_start_lr = c.get_real("train.warmup_start_lr");
  t.warmup_epochs = static_cast<int>(c.get_int("train.warmup_epochs"));
  t.decay_epochs = c.get_int_list("train.decay_epochs");
  t.decay_factor = c.get_real("train.decay_factor");
  t.weight_decay = c.get_real("train.weight_decay");
  t.triplet_start_epoch = static_cast<int>(c.get_int("train.triplet_start_epoch"));
  t.triplet_margin = c.get_real("train.triplet_margin");
  t.label_smoothing = c.get_real("train.label_smoothing");
  t.seed = c.get_u64("train.seed");
  t.keep_checkpoints = c.get_bool("train.keep_checkpoints");
  t.augment.flip_probability = c.get_real("augment.flip_probability");
  t.augment.pad_pixels = static_cast<int>(c.get_int("augment.pad_pixels"));
  t.augment.erase_probability = c.get_real("augment.erase_probability");
  t.augment.erase_area_range = c.get_pair("augment.erase_area");
  t.augment.erase_aspect_range = c.get_pair("augment.erase_aspect");
  t.validate();
  return t;
}

std::vector<ProtocolSetting> eval_settings(const Config& c) {
  std::vector<ProtocolSetting> out;
  for (const auto& name : c.get_string_list("eval.settings")) {
    ProtocolSetting s;
    s.name = parse_setting(name);
    if (s.name == Setting::camera_split) {
      for (int cam : c.get_int_list("eval.query_cameras")) s.query_cameras.insert(cam);
      for (int cam : c.get_int_list("eval.gallery_cameras")) s.gallery_cameras.insert(cam);
    }
    s.validate();
    out.push_back(s);
  }
  if (out.empty()) throw ValidationError("config key 'eval.settings' must list at least one setting");
  return out;
}

GradCheckOptions gradcheck_options(const Config& c) {
  GradCheckOptions o;
  o.step = c.get_real("gradcheck.step");
  o.tolerance = c.get_real("gradcheck.tolerance");
  o.coords_per_group = static_cast<std::size_t>(c.get_int("gradcheck.coords_per_group"));
  o.seed = c.get_u64("gradcheck.seed");
  return o;
}

std::string git_blob_sha1(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("SHA-1 computation failed");
  }
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string git_blob_sha1_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return git_blob_sha1(ss.str());
}

}  // namespace cssc
