#ifndef OPT_CONFIG_HPP
#define OPT_CONFIG_HPP

// Run configuration: INI text with sections [model], [loss], [train], [env].
// Every key has a default, unknown sections or keys are rejected, and the
// text written by write_config() parses back to an identical RunConfig.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "opt/autograd.hpp"
#include "opt/env.hpp"
#include "opt/error.hpp"
#include "opt/mixer.hpp"

namespace opt {

struct ModelSettings {
  int n_layers = 2;
  int n_prototypes = 4;
  int d_x = 32;
  int d_h = 32;
  int d_ff = 32;
  int d_mix = 32;
  Activation activation = Activation::sparsemax;
  bool cosine_cd = false;
  MixerKind mixer = MixerKind::qmix;
  friend bool operator==(const ModelSettings&, const ModelSettings&) = default;
};

struct LossSettings {
  double alpha = 0.5;  // contrastive disagreement weight
  double beta = 0.1;   // conditional mutual information weight
  double kl_clamp = kKlClamp;
  friend bool operator==(const LossSettings&, const LossSettings&) = default;
};

struct TrainSettings {
  double lr = 5e-4;
  double rms_alpha = 0.99;
  double rms_eps = 1e-5;
  int batch = 32;
  int buffer = 5000;
  int target_interval = 200;  // gradient steps between target syncs
  double gamma = 0.99;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  long epsilon_anneal = 50000;  // env steps
  long total_steps = 200000;    // env steps
  std::uint64_t seed = 0;
  double grad_clip = 10.0;
  int train_interval = 1;  // episodes collected per gradient step
  long eval_interval = 2000;
  int eval_episodes = 32;
  std::vector<env::Split> eval_splits{env::Split::train};
  long checkpoint_interval = 50000;
  bool no_sparse = false;
  bool no_cd = false;
  bool no_cmi = false;
  std::string precision = "float";
  /// Stop once a greedy evaluation on the first eval split reaches this win
  /// rate; values above 1 disable early stopping.
  double stop_win_rate = 2.0;
  std::string variant = "opt";
  friend bool operator==(const TrainSettings&, const TrainSettings&) = default;
};

struct RunConfig {
  ModelSettings model;
  LossSettings loss;
  TrainSettings train;
  env::ScenarioFamily env;

  Activation activation() const { return train.no_sparse ? Activation::softmax : model.activation; }
  double alpha() const { return train.no_cd ? 0.0 : loss.alpha; }
  double beta() const { return train.no_cmi ? 0.0 : loss.beta; }

  void validate() const {
    auto positive = [](long v, const char* name) {
      if (v < 1) throw config_error(std::string(name) + " must be positive");
    };
    positive(model.n_layers, "model.n_layers");
    positive(model.n_prototypes, "model.n_prototypes");
    positive(model.d_x, "model.d_x");
    positive(model.d_h, "model.d_h");
    positive(model.d_ff, "model.d_ff");
    positive(model.d_mix, "model.d_mix");
    if (loss.alpha < 0 || loss.beta < 0) throw config_error("loss.alpha and loss.beta must be nonnegative");
    if (!(loss.kl_clamp > 0)) throw config_error("loss.kl_clamp must be positive");
    if (!(train.lr > 0)) throw config_error("train.lr must be positive");
    if (!(train.rms_alpha >= 0 && train.rms_alpha < 1)) throw config_error("train.rms_alpha must lie in [0, 1)");
    if (!(train.rms_eps > 0)) throw config_error("train.rms_eps must be positive");
    positive(train.batch, "train.batch");
    positive(train.buffer, "train.buffer");
    if (train.batch > train.buffer) throw config_error("train.batch exceeds train.buffer");
    positive(train.target_interval, "train.target_interval");
    if (!(train.gamma >= 0 && train.gamma <= 1)) throw config_error("train.gamma must lie in [0, 1]");
    for (double e : {train.epsilon_start, train.epsilon_end}) {
      if (!(e >= 0 && e <= 1)) throw config_error("train.epsilon_start/end must lie in [0, 1]");
    }
    if (train.epsilon_anneal < 0) throw config_error("train.epsilon_anneal must be nonnegative");
    positive(train.total_steps, "train.total_steps");
    if (!(train.grad_clip > 0)) throw config_error("train.grad_clip must be positive");
    positive(train.train_interval, "train.train_interval");
    positive(train.eval_interval, "train.eval_interval");
    positive(train.eval_episodes, "train.eval_episodes");
    if (train.eval_splits.empty()) throw config_error("train.eval_splits must name at least one split");
    positive(train.checkpoint_interval, "train.checkpoint_interval");
    if (train.precision != "float" && train.precision != "double") {
      throw config_error("train.precision must be float or double");
    }
    env.validate();
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& s) {
  N v{};
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw config_error("not a number: '" + s + "'");
  return v;
}

/// Shortest text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw config_error("not a boolean: '" + s + "'");
}

/// "lo..hi" or a single integer.
inline env::IntRange parse_range(const std::string& s) {
  const auto dots = s.find("..");
  if (dots == std::string::npos) {
    const int v = parse_number<int>(s);
    return {v, v};
  }
  return {parse_number<int>(trim(s.substr(0, dots))), parse_number<int>(trim(s.substr(dots + 2)))};
}

inline std::string format_range(const env::IntRange& r) {
  return r.lo == r.hi ? std::to_string(r.lo) : std::to_string(r.lo) + ".." + std::to_string(r.hi);
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Access>
Field int_field(std::string sec, std::string key, Access acc) {
  return {std::move(sec), std::move(key),
          [acc](const RunConfig& c) { return std::to_string(acc(const_cast<RunConfig&>(c))); },
          [acc](RunConfig& c, const std::string& v) {
            using V = std::remove_reference_t<decltype(acc(c))>;
            acc(c) = parse_number<V>(v);
          }};
}

template <typename Access>
Field double_field(std::string sec, std::string key, Access acc) {
  return {std::move(sec), std::move(key),
          [acc](const RunConfig& c) { return format_double(acc(const_cast<RunConfig&>(c))); },
          [acc](RunConfig& c, const std::string& v) { acc(c) = parse_number<double>(v); }};
}

template <typename Access>
Field bool_field(std::string sec, std::string key, Access acc) {
  return {std::move(sec), std::move(key),
          [acc](const RunConfig& c) { return std::string(acc(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [acc](RunConfig& c, const std::string& v) { acc(c) = parse_bool(v); }};
}

template <typename Access>
Field range_field(std::string sec, std::string key, Access acc) {
  return {std::move(sec), std::move(key),
          [acc](const RunConfig& c) { return format_range(acc(const_cast<RunConfig&>(c))); },
          [acc](RunConfig& c, const std::string& v) { acc(c) = parse_range(v); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(int_field("model", "n_layers", [](RunConfig& c) -> int& { return c.model.n_layers; }));
    f.push_back(int_field("model", "n_prototypes", [](RunConfig& c) -> int& { return c.model.n_prototypes; }));
    f.push_back(int_field("model", "d_x", [](RunConfig& c) -> int& { return c.model.d_x; }));
    f.push_back(int_field("model", "d_h", [](RunConfig& c) -> int& { return c.model.d_h; }));
    f.push_back(int_field("model", "d_ff", [](RunConfig& c) -> int& { return c.model.d_ff; }));
    f.push_back(int_field("model", "d_mix", [](RunConfig& c) -> int& { return c.model.d_mix; }));
    f.push_back({"model", "activation",
                 [](const RunConfig& c) {
                   return std::string(c.model.activation == Activation::sparsemax ? "sparsemax" : "softmax");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "sparsemax") c.model.activation = Activation::sparsemax;
                   else if (v == "softmax") c.model.activation = Activation::softmax;
                   else throw config_error("expected sparsemax or softmax, got '" + v + "'");
                 }});
    f.push_back(bool_field("model", "cosine_cd", [](RunConfig& c) -> bool& { return c.model.cosine_cd; }));
    f.push_back({"model", "mixer",
                 [](const RunConfig& c) { return std::string(c.model.mixer == MixerKind::qmix ? "qmix" : "vdn"); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "qmix") c.model.mixer = MixerKind::qmix;
                   else if (v == "vdn") c.model.mixer = MixerKind::vdn;
                   else throw config_error("expected qmix or vdn, got '" + v + "'");
                 }});

    f.push_back(double_field("loss", "alpha", [](RunConfig& c) -> double& { return c.loss.alpha; }));
    f.push_back(double_field("loss", "beta", [](RunConfig& c) -> double& { return c.loss.beta; }));
    f.push_back(double_field("loss", "kl_clamp", [](RunConfig& c) -> double& { return c.loss.kl_clamp; }));

    f.push_back(double_field("train", "lr", [](RunConfig& c) -> double& { return c.train.lr; }));
    f.push_back(double_field("train", "rms_alpha", [](RunConfig& c) -> double& { return c.train.rms_alpha; }));
    f.push_back(double_field("train", "rms_eps", [](RunConfig& c) -> double& { return c.train.rms_eps; }));
    f.push_back(int_field("train", "batch", [](RunConfig& c) -> int& { return c.train.batch; }));
    f.push_back(int_field("train", "buffer", [](RunConfig& c) -> int& { return c.train.buffer; }));
    f.push_back(int_field("train", "target_interval", [](RunConfig& c) -> int& { return c.train.target_interval; }));
    f.push_back(double_field("train", "gamma", [](RunConfig& c) -> double& { return c.train.gamma; }));
    f.push_back(double_field("train", "epsilon_start", [](RunConfig& c) -> double& { return c.train.epsilon_start; }));
    f.push_back(double_field("train", "epsilon_end", [](RunConfig& c) -> double& { return c.train.epsilon_end; }));
    f.push_back(int_field("train", "epsilon_anneal", [](RunConfig& c) -> long& { return c.train.epsilon_anneal; }));
    f.push_back(int_field("train", "total_steps", [](RunConfig& c) -> long& { return c.train.total_steps; }));
    f.push_back(int_field("train", "seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }));
    f.push_back(double_field("train", "grad_clip", [](RunConfig& c) -> double& { return c.train.grad_clip; }));
    f.push_back(int_field("train", "train_interval", [](RunConfig& c) -> int& { return c.train.train_interval; }));
    f.push_back(int_field("train", "eval_interval", [](RunConfig& c) -> long& { return c.train.eval_interval; }));
    f.push_back(int_field("train", "eval_episodes", [](RunConfig& c) -> int& { return c.train.eval_episodes; }));
    f.push_back({"train", "eval_splits",
                 [](const RunConfig& c) {
                   std::string out;
                   for (auto s : c.train.eval_splits) out += (out.empty() ? "" : ",") + env::to_string(s);
                   return out;
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.train.eval_splits.clear();
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) {
                     const auto s = env::parse_split(trim(item));
                     if (!s) throw config_error("unknown split '" + trim(item) + "'");
                     c.train.eval_splits.push_back(*s);
                   }
                 }});
    f.push_back(int_field("train", "checkpoint_interval", [](RunConfig& c) -> long& { return c.train.checkpoint_interval; }));
    f.push_back(bool_field("train", "no_sparse", [](RunConfig& c) -> bool& { return c.train.no_sparse; }));
    f.push_back(bool_field("train", "no_cd", [](RunConfig& c) -> bool& { return c.train.no_cd; }));
    f.push_back(bool_field("train", "no_cmi", [](RunConfig& c) -> bool& { return c.train.no_cmi; }));
    f.push_back({"train", "precision", [](const RunConfig& c) { return c.train.precision; },
                 [](RunConfig& c, const std::string& v) { c.train.precision = v; }});
    f.push_back(double_field("train", "stop_win_rate", [](RunConfig& c) -> double& { return c.train.stop_win_rate; }));
    f.push_back({"train", "variant", [](const RunConfig& c) { return c.train.variant; },
                 [](RunConfig& c, const std::string& v) { c.train.variant = v; }});

    f.push_back(int_field("env", "grid_w", [](RunConfig& c) -> int& { return c.env.grid_w; }));
    f.push_back(int_field("env", "grid_h", [](RunConfig& c) -> int& { return c.env.grid_h; }));
    f.push_back(int_field("env", "sight_range", [](RunConfig& c) -> int& { return c.env.sight_range; }));
    f.push_back(int_field("env", "horizon", [](RunConfig& c) -> int& { return c.env.horizon; }));
    f.push_back(bool_field("env", "require_feasible", [](RunConfig& c) -> bool& { return c.env.require_feasible; }));
    f.push_back(double_field("env", "reward_capture", [](RunConfig& c) -> double& { return c.env.reward.capture; }));
    f.push_back(double_field("env", "reward_win", [](RunConfig& c) -> double& { return c.env.reward.win; }));
    f.push_back(double_field("env", "reward_step", [](RunConfig& c) -> double& { return c.env.reward.step; }));
    f.push_back(range_field("env", "n_agents", [](RunConfig& c) -> env::IntRange& { return c.env.n_agents; }));
    f.push_back(range_field("env", "n_prey", [](RunConfig& c) -> env::IntRange& { return c.env.n_prey; }));
    f.push_back(range_field("env", "n_obstacles", [](RunConfig& c) -> env::IntRange& { return c.env.n_obstacles; }));
    f.push_back(range_field("env", "attack", [](RunConfig& c) -> env::IntRange& { return c.env.attack; }));
    f.push_back(range_field("env", "defense", [](RunConfig& c) -> env::IntRange& { return c.env.defense; }));
    f.push_back(range_field("env", "unseen_n_agents", [](RunConfig& c) -> env::IntRange& { return c.env.unseen_n_agents; }));
    f.push_back(range_field("env", "unseen_n_prey", [](RunConfig& c) -> env::IntRange& { return c.env.unseen_n_prey; }));
    f.push_back(range_field("env", "unseen_capability",
                            [](RunConfig& c) -> env::IntRange& { return c.env.unseen_capability; }));
    return f;
  }();
  return table;
}

/// 1-based line of `key` inside `[section]`, or 0 when not found.
inline int line_of(const std::string& text, const std::string& section, const std::string& key) {
  std::istringstream in(text);
  std::string line, current;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string t = trim(line);
    if (t.empty() || t[0] == ';' || t[0] == '#') continue;
    if (t.front() == '[' && t.back() == ']') {
      current = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq != std::string::npos && current == section && trim(t.substr(0, eq)) == key) return n;
  }
  return 0;
}

}  // namespace detail

/// Parses INI text; `source` names the input in diagnostics.
inline RunConfig parse_config(const std::string& text, const std::string& source = "<config>") {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw config_error(source + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig cfg;
  auto where = [&](const std::string& sec, const std::string& key) {
    const int line = detail::line_of(text, sec, key);
    return source + (line > 0 ? ":" + std::to_string(line) : std::string()) + ": ";
  };
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw config_error(where("", section) + "key '" + section + "' outside any section");
    if (section != "model" && section != "loss" && section != "train" && section != "env") {
      throw config_error(source + ": unknown section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      const detail::Field* field = nullptr;
      for (const auto& f : detail::fields()) {
        if (f.section == section && f.key == key) field = &f;
      }
      if (field == nullptr) throw config_error(where(section, key) + "unknown key " + section + "." + key);
      try {
        field->set(cfg, detail::trim(value.data()));
      } catch (const config_error& e) {
        throw config_error(where(section, key) + section + "." + key + ": " + e.what());
      }
    }
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

/// Every field, grouped by section, in a fixed order.
inline std::string write_config(const RunConfig& cfg) {
  std::string out, section;
  for (const auto& f : detail::fields()) {
    if (f.section != section) {
      out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
      section = f.section;
    }
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

/// FNV-1a over the canonical config text.
inline std::uint64_t config_hash(const RunConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : write_config(cfg)) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"no-sparse", "no-cd", "no-cmi", "n-prototypes=K"};
  return names;
}

/// Applies an ablation variant and records its name in the config.
inline void apply_variant(RunConfig& cfg, const std::string& variant) {
  if (variant == "no-sparse") {
    cfg.train.no_sparse = true;
  } else if (variant == "no-cd") {
    cfg.train.no_cd = true;
  } else if (variant == "no-cmi") {
    cfg.train.no_cmi = true;
  } else if (variant.rfind("n-prototypes=", 0) == 0) {
    int n = 0;
    try {
      n = detail::parse_number<int>(variant.substr(13));
    } catch (const config_error&) {
      n = 0;
    }
    if (n < 1) throw config_error("n-prototypes needs a positive integer, got '" + variant + "'");
    cfg.model.n_prototypes = n;
  } else {
    std::string valid;
    for (const auto& v : variant_names()) valid += (valid.empty() ? "" : ", ") + v;
    throw config_error("unknown variant '" + variant + "'; valid variants: " + valid);
  }
  cfg.train.variant = variant;
}

}  // namespace opt

#endif  // OPT_CONFIG_HPP
