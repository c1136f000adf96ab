#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dydit/error.hpp"
#include "dydit/model.hpp"
#include "dydit/sampler.hpp"
#include "dydit/train.hpp"

namespace dydit {

/// Flat key=value configuration with dotted section names. Every key has a
/// default and a type; files and overrides may only set known keys.
class RunConfig {
 public:
  enum class Kind { kInt, kReal, kBool, kString, kIntList };

  RunConfig() {
    auto def = [&](const char* key, Kind kind, const char* value) { entries_[key] = Entry{kind, value}; };
    def("seed", Kind::kInt, "0");

    def("model.layers", Kind::kInt, "2");
    def("model.channels", Kind::kInt, "64");
    def("model.heads", Kind::kInt, "4");
    def("model.patch", Kind::kInt, "4");
    def("model.extent", Kind::kInt, "16");
    def("model.channels_in", Kind::kInt, "3");
    def("model.classes", Kind::kInt, "4");
    def("model.freq_dim", Kind::kInt, "64");

    def("diffusion.T", Kind::kInt, "100");
    def("diffusion.beta_start", Kind::kReal, "0.001");
    def("diffusion.beta_end", Kind::kReal, "0.2");

    def("train.dynamic", Kind::kBool, "true");
    def("train.lambda", Kind::kReal, "0.5");
    def("train.lr", Kind::kReal, "0.001");
    def("train.router_lr", Kind::kReal, "0.01");
    def("train.batch", Kind::kInt, "32");
    def("train.steps", Kind::kInt, "2000");
    def("train.warmup_steps", Kind::kInt, "-1");
    def("train.label_dropout", Kind::kReal, "0.1");
    def("train.temperature", Kind::kReal, "1.0");
    def("train.temperature_final", Kind::kReal, "-1");
    def("train.ema_decay", Kind::kReal, "0.98");
    def("train.init", Kind::kString, "");
    def("train.resume", Kind::kString, "");

    def("dataset.count", Kind::kInt, "2048");
    def("dataset.seed", Kind::kInt, "7");

    def("sampler.kind", Kind::kString, "ddpm");
    def("sampler.steps", Kind::kInt, "100");
    def("sampler.eta", Kind::kReal, "0");
    def("sampler.count", Kind::kInt, "8");
    def("sampler.labels", Kind::kIntList, "");
    def("sampler.guidance", Kind::kReal, "1.0");
    def("sampler.batch", Kind::kInt, "8");
    def("sampler.routing", Kind::kString, "compiled");

    def("profile.batch_sizes", Kind::kIntList, "1,8,32");
    def("profile.runs", Kind::kInt, "5");

    def("analyze.mode", Kind::kString, "loss-map");
    def("analyze.t", Kind::kInt, "20");
    def("analyze.images", Kind::kInt, "64");
    def("analyze.first_image", Kind::kInt, "0");
    def("analyze.grid_points", Kind::kInt, "20");

    def("paths.dataset", Kind::kString, "");
    def("paths.checkpoint", Kind::kString, "");
    def("paths.checkpoint_small", Kind::kString, "");
    def("paths.schedule", Kind::kString, "");
    def("paths.log", Kind::kString, "");
  }

  bool known(const std::string& key) const { return entries_.count(key) != 0; }

  /// Sets a known key, validating the value against the key's type.
  void set(const std::string& key, const std::string& value, const std::string& origin = "override") {
    auto it = entries_.find(key);
    require(it != entries_.end(), "unknown config key '", key, "' (", origin, ")");
    check_value(key, it->second.kind, value, origin);
    it->second.value = value;
  }

  /// Parses "key=value" as given on the command line.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    require(eq != std::string::npos, "malformed override '", assignment, "' (expected key=value)");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)), "--set " + assignment);
  }

  void load_stream(std::istream& is, const std::string& origin) {
    std::string line;
    int n = 0;
    while (std::getline(is, line)) {
      ++n;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      require(eq != std::string::npos, origin, ":", n, ": expected key=value, got '", line, "'");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), origin + ":" + std::to_string(n));
    }
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), "cannot open config file '", path, "'");
    load_stream(in, path);
  }

  const std::string& str(const std::string& key) const { return entry(key).value; }

  std::int64_t integer(const std::string& key) const {
    expect_kind(key, Kind::kInt);
    return std::stoll(str(key));
  }
  double real(const std::string& key) const {
    expect_kind(key, Kind::kReal);
    return std::stod(str(key));
  }
  bool boolean(const std::string& key) const {
    expect_kind(key, Kind::kBool);
    return str(key) == "true" || str(key) == "1";
  }
  std::vector<std::int64_t> int_list(const std::string& key) const {
    expect_kind(key, Kind::kIntList);
    return parse_int_list(str(key));
  }

  /// A path-valued key that must be non-empty.
  const std::string& required_path(const std::string& key) const {
    require(!str(key).empty(), "missing required setting '", key, "'");
    return str(key);
  }

  /// Effective configuration in file format, sorted by key.
  void write(std::ostream& os) const {
    for (const auto& [k, e] : entries_) os << k << " = " << e.value << '\n';
  }

  ModelConfig model() const {
    ModelConfig c;
    c.layers = static_cast<int>(integer("model.layers"));
    c.channels = static_cast<int>(integer("model.channels"));
    c.heads = static_cast<int>(integer("model.heads"));
    c.patch = static_cast<int>(integer("model.patch"));
    c.extent = static_cast<int>(integer("model.extent"));
    c.channels_in = static_cast<int>(integer("model.channels_in"));
    c.classes = static_cast<int>(integer("model.classes"));
    c.freq_dim = static_cast<int>(integer("model.freq_dim"));
    c.validate();
    return c;
  }

  DiffusionConfig diffusion() const {
    DiffusionConfig d;
    d.T = static_cast<int>(integer("diffusion.T"));
    d.beta_start = real("diffusion.beta_start");
    d.beta_end = real("diffusion.beta_end");
    (void)build_schedule(d);
    return d;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.lambda = real("train.lambda");
    t.lr = real("train.lr");
    t.router_lr = real("train.router_lr");
    t.batch = static_cast<int>(integer("train.batch"));
    t.steps = static_cast<int>(integer("train.steps"));
    t.warmup_steps = static_cast<int>(integer("train.warmup_steps"));
    t.label_dropout = real("train.label_dropout");
    t.temperature = real("train.temperature");
    t.temperature_final = real("train.temperature_final");
    t.ema_decay = real("train.ema_decay");
    t.seed = static_cast<std::uint64_t>(integer("seed"));
    t.validate();
    return t;
  }

  SamplerSpec sampler() const {
    SamplerSpec s;
    s.kind = parse_sampler_kind(str("sampler.kind"));
    s.steps = static_cast<int>(integer("sampler.steps"));
    s.eta = real("sampler.eta");
    require(s.steps >= 1, "sampler.steps must be >= 1");
    require(s.eta >= 0, "sampler.eta must be >= 0");
    return s;
  }

 private:
  struct Entry {
    Kind kind;
    std::string value;
  };
  std::map<std::string, Entry> entries_;

  const Entry& entry(const std::string& key) const {
    auto it = entries_.find(key);
    require(it != entries_.end(), "unknown config key '", key, "'");
    return it->second;
  }

  void expect_kind(const std::string& key, Kind kind) const {
    require(entry(key).kind == kind, "config key '", key, "' read with the wrong type");
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static bool parses_int(const std::string& s) {
    if (s.empty()) return false;
    std::size_t pos = 0;
    try {
      (void)std::stoll(s, &pos);
    } catch (const std::exception&) {
      return false;
    }
    return pos == s.size();
  }

  static std::vector<std::int64_t> parse_int_list(const std::string& s) {
    std::vector<std::int64_t> out;
    if (trim(s).empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      require(parses_int(item), "expected an integer list, got '", s, "'");
      out.push_back(std::stoll(item));
    }
    return out;
  }

  static void check_value(const std::string& key, Kind kind, const std::string& v, const std::string& origin) {
    switch (kind) {
      case Kind::kInt:
        require(parses_int(v), key, ": expected an integer, got '", v, "' (", origin, ")");
        break;
      case Kind::kReal: {
        std::size_t pos = 0;
        bool ok = !v.empty();
        try {
          if (ok) (void)std::stod(v, &pos);
        } catch (const std::exception&) {
          ok = false;
        }
        require(ok && pos == v.size(), key, ": expected a number, got '", v, "' (", origin, ")");
        break;
      }
      case Kind::kBool:
        require(v == "true" || v == "false" || v == "1" || v == "0", key, ": expected true or false, got '", v,
                "' (", origin, ")");
        break;
      case Kind::kIntList:
        (void)parse_int_list(v);
        break;
      case Kind::kString:
        break;
    }
  }
};

}  // namespace dydit
