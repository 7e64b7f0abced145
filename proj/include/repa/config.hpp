#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "repa/adapter.hpp"
#include "repa/model.hpp"
#include "repa/train.hpp"

namespace repa {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flat key/value text with [section] headers, '#' comments, one `key = value`
// per line. No environment variables affect results.
class Config {
 public:
  static Config parse(std::istream& in, const std::string& origin = "<stream>") {
    Config cfg;
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      cfg.values_[section + "." + key] = value;
    }
    return cfg;
  }

  static Config parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw ConfigError("config not found: '" + path + "'");
    return parse(in, path);
  }

  std::optional<std::string> find(const std::string& section, const std::string& key) const {
    auto it = values_.find(section + "." + key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  std::string get_str(const std::string& s, const std::string& k,
                      const std::string& fallback) const {
    auto v = find(s, k);
    return v ? *v : fallback;
  }

  std::size_t get_size(const std::string& s, const std::string& k, std::size_t fallback) const {
    auto v = find(s, k);
    if (!v) return fallback;
    try {
      const long long parsed = std::stoll(*v);
      if (parsed < 0) throw std::out_of_range("negative");
      return static_cast<std::size_t>(parsed);
    } catch (const std::exception&) {
      throw ConfigError("config field " + s + "." + k + ": expected non-negative integer, got '" +
                        *v + "'");
    }
  }

  double get_double(const std::string& s, const std::string& k, double fallback) const {
    auto v = find(s, k);
    if (!v) return fallback;
    try {
      return std::stod(*v);
    } catch (const std::exception&) {
      throw ConfigError("config field " + s + "." + k + ": expected number, got '" + *v + "'");
    }
  }

  bool get_bool(const std::string& s, const std::string& k, bool fallback) const {
    auto v = find(s, k);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw ConfigError("config field " + s + "." + k + ": expected bool, got '" + *v + "'");
  }

 private:
  std::map<std::string, std::string> values_;
};

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ' && c != '\t') {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline ModelConfig model_config_from(const Config& cfg) {
  ModelConfig mc;
  mc.kind = cfg.get_str("model", "kind", "vit");
  if (mc.kind != "vit" && mc.kind != "conv")
    throw ConfigError("config field model.kind: expected vit or conv, got '" + mc.kind + "'");
  mc.width = cfg.get_size("model", "width", 64);
  mc.depth = cfg.get_size("model", "depth", 2);
  mc.heads = cfg.get_size("model", "heads", 4);
  mc.tokens = cfg.get_size("model", "tokens", 8);
  mc.classes = cfg.get_size("model", "classes", 2);
  mc.ffn_mult = cfg.get_size("model", "ffn_mult", 4);
  mc.image = cfg.get_size("model", "image", 8);
  mc.kernel = cfg.get_size("model", "kernel", 3);
  mc.conv_padding = cfg.get_size("model", "padding", 1);
  mc.filters = cfg.get_size("model", "filters", 8);
  if (mc.kind == "vit" && mc.width % mc.heads != 0)
    throw ConfigError("config field model.width: must be divisible by model.heads");
  return mc;
}

inline AdapterConfig adapter_config_from(const Config& cfg, const ModelConfig& mc) {
  AdapterConfig ac;
  const std::string variant = cfg.get_str("adapter", "variant", "repadapter");
  if (variant == "repadapter")
    ac.variant = AdapterVariant::repadapter;
  else if (variant == "baseline")
    ac.variant = AdapterVariant::baseline;
  else if (variant == "parallel")
    ac.variant = AdapterVariant::parallel;
  else if (variant == "none")
    ac.variant = AdapterVariant::none;
  else
    throw ConfigError("config field adapter.variant: unknown variant '" + variant + "'");
  ac.c = cfg.get_size("adapter", "c", 8);
  ac.k = cfg.get_size("adapter", "k", 2);
  ac.s = cfg.get_double("adapter", "s", 1.0);
  ac.bias = cfg.get_bool("adapter", "bias", false);
  ac.full_sparse = cfg.get_bool("adapter", "full_sparse", false);
  const std::string act = cfg.get_str("adapter", "activation", "none");
  if (act == "none")
    ac.act = Activation::none;
  else if (act == "gelu")
    ac.act = Activation::gelu;
  else if (act == "relu")
    ac.act = Activation::relu;
  else
    throw ConfigError("config field adapter.activation: unknown activation '" + act + "'");
  ac.sites.clear();
  const std::string default_sites =
      mc.kind == "conv" ? "pre_conv"
                        : (ac.variant == AdapterVariant::parallel ? "parallel_ffn" : "pre_attn");
  for (const auto& name : split_csv(cfg.get_str("adapter", "sites", default_sites))) {
    auto site = site_from_name(name);
    if (!site) throw ConfigError("config field adapter.sites: unknown site '" + name + "'");
    ac.sites.push_back(*site);
  }
  if (ac.variant != AdapterVariant::none) {
    if (ac.c == 0 || ac.k == 0 || ac.c % ac.k != 0)
      throw ConfigError("config field adapter.c: c must be positive and divisible by adapter.k");
    if (mc.kind == "vit" && mc.width % ac.k != 0)
      throw ConfigError("config field adapter.k: must divide model.width");
  }
  return ac;
}

inline TaskConfig task_config_from(const Config& cfg, const ModelConfig& mc) {
  TaskConfig tc;
  tc.kind = cfg.get_str("task", "kind", "xor");
  tc.input = mc.kind == "conv" ? "image" : "tokens";
  tc.classes = mc.classes;
  tc.width = mc.kind == "conv" ? mc.width : mc.width;
  tc.tokens = mc.tokens;
  tc.image = mc.image;
  tc.train_size = cfg.get_size("task", "train_size", 256);
  tc.val_size = cfg.get_size("task", "val_size", 128);
  tc.separation = cfg.get_double("task", "separation", 1.2);
  tc.cluster_std = cfg.get_double("task", "cluster_std", 0.45);
  tc.token_noise = cfg.get_double("task", "token_noise", 0.1);
  tc.seed = cfg.get_size("task", "seed", 1);
  if (tc.kind == "xor" && mc.classes != 2)
    throw ConfigError("config field task.kind: xor task requires model.classes = 2");
  return tc;
}

inline TrainConfig train_config_from(const Config& cfg) {
  TrainConfig tr;
  const std::string mode = cfg.get_str("train", "mode", "petl");
  if (mode == "petl")
    tr.mode = TrainMode::petl;
  else if (mode == "head_only")
    tr.mode = TrainMode::head_only;
  else if (mode == "full")
    tr.mode = TrainMode::full;
  else
    throw ConfigError("config field train.mode: unknown mode '" + mode + "'");
  tr.epochs = cfg.get_size("train", "epochs", 8);
  tr.batch = cfg.get_size("train", "batch", 32);
  tr.lr = cfg.get_double("train", "lr", 1e-3);
  tr.seed = cfg.get_size("train", "seed", 7);
  return tr;
}

inline Dtype dtype_from(const Config& cfg) {
  const std::string d = cfg.get_str("train", "dtype", "f32");
  if (d == "f32") return Dtype::f32;
  if (d == "f64") return Dtype::f64;
  throw ConfigError("config field train.dtype: expected f32 or f64, got '" + d + "'");
}

}  // namespace repa
