#pragma once

// Flat `key = value` configuration. `#` starts a comment; later sources
// (files, then --set overrides) replace earlier values. Every run writes
// the fully resolved key set back out in the same grammar.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gpm/common/error.hpp"
#include "gpm/dvae.hpp"
#include "gpm/gpm_model.hpp"
#include "gpm/schedules.hpp"

namespace gpm {

struct ConfigEntry {
  std::string value;
  std::string origin;  // "file:line" or "--set"
};

class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& source) {
    KeyValues kv;
    kv.merge_text(text, source);
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  void merge_text(const std::string& text, const std::string& source) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    std::map<std::string, std::size_t> seen;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const std::string where = source + ":" + std::to_string(lineno);
      if (eq == std::string::npos) throw ParseError(where + ": expected 'key = value'");
      const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
      if (key.empty()) throw ParseError(where + ": empty key");
      if (auto it = seen.find(key); it != seen.end())
        throw ParseError(where + ": key '" + key + "' already set on line " + std::to_string(it->second));
      seen[key] = lineno;
      entries_[key] = {value, where};
    }
  }

  /// One `key=value` override as given on the command line.
  void set_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || trim(assignment.substr(0, eq)).empty())
      throw ParseError("--set expects key=value, got '" + assignment + "'");
    entries_[trim(assignment.substr(0, eq))] = {trim(assignment.substr(eq + 1)), "--set"};
  }

  void set(const std::string& key, const std::string& value, const std::string& origin = "default") {
    entries_[key] = {value, origin};
  }

  const ConfigEntry* find(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
  }

  const std::map<std::string, ConfigEntry>& entries() const { return entries_; }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  std::map<std::string, ConfigEntry> entries_;
};

/// Writes pairs in the config grammar, one per line, in the given order.
inline void write_key_values(const std::string& path, const std::vector<std::pair<std::string, std::string>>& kv,
                             const std::string& header = "") {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  if (!header.empty()) os << "# " << header << '\n';
  for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
  if (!os) throw IoError("failed writing " + path);
}

inline std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

// ------------------------------------------------------------ experiment config

enum class SamplingMode { greedy, top_k, temperature };

struct Seeds {
  std::uint64_t data = 1;
  std::uint64_t model = 2;
  std::uint64_t sampling = 3;
};

struct DataConfig {
  std::string source = "synthetic";  // or a directory of .xyz/.ply files
  std::size_t classes = 3;
  std::size_t per_class = 16;
  std::size_t test_per_class = 0;
  std::size_t points = 1024;
  double noise = 0.0;
};

struct OptimConfig {
  LRSchedule lr;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double clip = 10.0;
};

struct TrainConfig {
  std::uint64_t total_steps = 3000;
  std::size_t batch_size = 8;
  OptimConfig optim;
  KLSchedule kl;
  TemperatureSchedule tau;
  std::uint64_t checkpoint_every = 0;  // 0: only at the end
};

struct ClassifyConfig {
  std::uint64_t steps = 1000;
  std::size_t batch_size = 32;
  OptimConfig optim;
  bool freeze_backbone = false;
  double dropout = 0.5;
  std::size_t hidden = 256;
};

struct FewShotConfig {
  std::size_t way = 5;
  std::size_t shot = 10;
  std::size_t query = 20;
  std::size_t runs = 10;
};

struct GenerationConfig {
  SamplingMode mode = SamplingMode::top_k;
  std::size_t top_k = 8;
  double temperature = 1.0;
  double mask_ratio = 0.35;
  std::size_t count = 1;
  bool unconditional = false;
};

struct ExperimentConfig {
  std::string preset = "desk";
  Seeds seeds;
  DataConfig data;
  DVAEConfig dvae;
  GPMConfig gpm;
  TrainConfig dvae_train;
  TrainConfig gpm_train;
  ClassifyConfig classify;
  FewShotConfig few_shot;
  GenerationConfig generation;
  std::string dvae_checkpoint;
  std::string gpm_checkpoint;
  std::size_t log_every = 1;

  ExperimentConfig() { apply_preset("desk"); }

  /// Model dimensions shared between the two stages.
  void sync() {
    gpm.input_dim = dvae.embed_dim;
    gpm.vocab = dvae.codebook_size;
    gpm.num_groups = dvae.num_groups;
  }

  void apply_preset(const std::string& name) {
    if (name == "desk") {
      dvae = DVAEConfig{};
      gpm = GPMConfig{};
      dvae_train = TrainConfig{};
      dvae_train.total_steps = 3000;
      dvae_train.optim.lr.base = 1e-3;
      dvae_train.kl = {0, 2000, 0.1};
      dvae_train.tau = {1.0, 0.0625, 2000, DecayShape::linear};
      gpm_train = TrainConfig{};
      gpm_train.total_steps = 2000;
    } else if (name == "paper") {
      dvae = DVAEConfig{};
      dvae.num_groups = 64;
      dvae.group_size = 32;
      dvae.codebook_size = 8192;
      gpm = GPMConfig{};
      gpm.depth = 12;
      gpm.dim = 384;
      gpm.heads = 6;
      dvae_train = TrainConfig{};
      dvae_train.total_steps = 150000;
      dvae_train.batch_size = 64;
      dvae_train.kl = {10000, 100000, 0.1};
      dvae_train.tau = {1.0, 0.0625, 100000, DecayShape::linear};
      dvae_train.optim.lr.span = 60000;
      gpm_train = TrainConfig{};
      gpm_train.total_steps = 2000;
    } else {
      throw InvalidArgument("unknown preset '" + name + "' (desk or paper)");
    }
    preset = name;
    classify = ClassifyConfig{};
    sync();
  }

  void validate() const {
    dvae.validate();
    gpm.validate();
    if (dvae.code_dim != dvae.embed_dim)
      throw InvalidArgument("dvae.code_dim must equal dvae.embed_dim: codes and patch embeddings share one input projection");
    for (const auto* t : {&dvae_train, &gpm_train}) {
      if (t->total_steps < 1 || t->batch_size < 1) throw InvalidArgument("train: steps and batch must be positive");
      if (t->optim.lr.base <= 0.0 || t->optim.lr.min < 0.0 || t->optim.lr.min > t->optim.lr.base)
        throw InvalidArgument("train: need 0 <= lr.min <= lr.base, lr.base > 0");
      if (t->tau.end <= 0.0 || t->tau.start < t->tau.end) throw InvalidArgument("train: need tau.start >= tau.end > 0");
      if (t->kl.final_weight < 0.0) throw InvalidArgument("train: kl.final must be non-negative");
    }
    if (data.points < dvae.group_size) throw InvalidArgument("data.points must be at least dvae.group_size");
    if (data.classes < 1 || data.per_class < 1) throw InvalidArgument("data: classes and per_class must be positive");
    if (generation.temperature <= 0.0) throw InvalidArgument("generation.temperature must be positive");
    if (generation.top_k < 1 || generation.top_k > dvae.codebook_size)
      throw InvalidArgument("generation.top_k must be in [1, codebook]");
    if (few_shot.way < 1 || few_shot.shot < 1) throw InvalidArgument("few_shot: way and shot must be positive");
    if (classify.dropout < 0.0 || classify.dropout >= 1.0) throw InvalidArgument("classify.dropout must be in [0, 1)");
  }
};

namespace detail {

struct Binding {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <class N>
N parse_number(const std::string& s) {
  N v{};
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw InvalidArgument("'" + s + "' is not a valid number");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw InvalidArgument("'" + s + "' is not a boolean");
}

template <class N>
Binding num(const std::string& key, N& field) {
  return {key, [&field] {
            if constexpr (std::is_floating_point_v<N>) return format_double(field);
            else return std::to_string(field);
          },
          [&field](const std::string& s) { field = parse_number<N>(s); }};
}

inline Binding flag(const std::string& key, bool& field) {
  return {key, [&field] { return std::string(field ? "true" : "false"); },
          [&field](const std::string& s) { field = parse_bool(s); }};
}

inline Binding text(const std::string& key, std::string& field) {
  return {key, [&field] { return field; }, [&field](const std::string& s) { field = s; }};
}

template <class E>
Binding choice(const std::string& key, E& field, std::vector<std::pair<std::string, E>> names) {
  return {key,
          [&field, names] {
            for (const auto& [n, v] : names)
              if (v == field) return n;
            return std::string("?");
          },
          [&field, names](const std::string& s) {
            for (const auto& [n, v] : names)
              if (n == s) {
                field = v;
                return;
              }
            std::string opts;
            for (const auto& [n, v] : names) opts += (opts.empty() ? "" : "|") + n;
            throw InvalidArgument("'" + s + "' is not one of " + opts);
          }};
}

inline void bind_train(std::vector<Binding>& b, const std::string& p, TrainConfig& t) {
  b.push_back(num(p + ".steps", t.total_steps));
  b.push_back(num(p + ".batch", t.batch_size));
  b.push_back(num(p + ".lr", t.optim.lr.base));
  b.push_back(num(p + ".min_lr", t.optim.lr.min));
  b.push_back(num(p + ".lr_span", t.optim.lr.span));
  b.push_back(num(p + ".weight_decay", t.optim.weight_decay));
  b.push_back(num(p + ".beta1", t.optim.beta1));
  b.push_back(num(p + ".beta2", t.optim.beta2));
  b.push_back(num(p + ".clip", t.optim.clip));
  b.push_back(num(p + ".checkpoint_every", t.checkpoint_every));
}

inline std::vector<Binding> bindings(ExperimentConfig& c) {
  std::vector<Binding> b;
  b.push_back(num("seed.data", c.seeds.data));
  b.push_back(num("seed.model", c.seeds.model));
  b.push_back(num("seed.sampling", c.seeds.sampling));
  b.push_back(text("data.source", c.data.source));
  b.push_back(num("data.classes", c.data.classes));
  b.push_back(num("data.per_class", c.data.per_class));
  b.push_back(num("data.test_per_class", c.data.test_per_class));
  b.push_back(num("data.points", c.data.points));
  b.push_back(num("data.noise", c.data.noise));
  b.push_back(num("dvae.groups", c.dvae.num_groups));
  b.push_back(num("dvae.group_size", c.dvae.group_size));
  b.push_back(num("dvae.embed_dim", c.dvae.embed_dim));
  b.push_back(num("dvae.codebook", c.dvae.codebook_size));
  b.push_back(num("dvae.code_dim", c.dvae.code_dim));
  b.push_back(num("dvae.graph_k", c.dvae.graph_k));
  b.push_back(num("dvae.conv_width", c.dvae.conv_width));
  b.push_back(num("dvae.fold_hidden", c.dvae.fold_hidden));
  b.push_back(choice("dvae.chamfer_norm", c.dvae.chamfer_norm,
                     {{"euclidean", ChamferNorm::euclidean}, {"manhattan", ChamferNorm::manhattan}}));
  b.push_back(flag("dvae.per_patch_chamfer", c.dvae.per_patch_chamfer));
  b.push_back(flag("dvae.decoder_geometry", c.dvae.decoder_geometry));
  b.push_back(text("dvae.checkpoint", c.dvae_checkpoint));
  bind_train(b, "dvae.train", c.dvae_train);
  b.push_back(num("dvae.train.kl.flat", c.dvae_train.kl.flat_steps));
  b.push_back(num("dvae.train.kl.ramp", c.dvae_train.kl.ramp_steps));
  b.push_back(num("dvae.train.kl.final", c.dvae_train.kl.final_weight));
  b.push_back(num("dvae.train.tau.start", c.dvae_train.tau.start));
  b.push_back(num("dvae.train.tau.end", c.dvae_train.tau.end));
  b.push_back(num("dvae.train.tau.decay", c.dvae_train.tau.decay_steps));
  b.push_back(choice("dvae.train.tau.shape", c.dvae_train.tau.shape,
                     {{"linear", DecayShape::linear}, {"cosine", DecayShape::cosine}}));
  b.push_back(num("gpm.depth", c.gpm.depth));
  b.push_back(num("gpm.dim", c.gpm.dim));
  b.push_back(num("gpm.heads", c.gpm.heads));
  b.push_back(num("gpm.drop_path", c.gpm.drop_path));
  b.push_back(choice("gpm.positional", c.gpm.positional, {{"mlp", PositionalMode::mlp}, {"table", PositionalMode::table}}));
  b.push_back(choice("gpm.partb_source", c.gpm.partb_source,
                     {{"codebook", PartBSource::codebook}, {"patch", PartBSource::patch}}));
  b.push_back(num("gpm.mask_min", c.gpm.mask_ratio_min));
  b.push_back(num("gpm.mask_max", c.gpm.mask_ratio_max));
  b.push_back(num("gpm.w_ae", c.gpm.w_ae));
  b.push_back(num("gpm.w_ar", c.gpm.w_ar));
  b.push_back(flag("gpm.ar_all_positions", c.gpm.ar_all_positions));
  b.push_back(text("gpm.checkpoint", c.gpm_checkpoint));
  bind_train(b, "gpm.train", c.gpm_train);
  b.push_back(num("classify.steps", c.classify.steps));
  b.push_back(num("classify.batch", c.classify.batch_size));
  b.push_back(num("classify.lr", c.classify.optim.lr.base));
  b.push_back(num("classify.min_lr", c.classify.optim.lr.min));
  b.push_back(num("classify.weight_decay", c.classify.optim.weight_decay));
  b.push_back(flag("classify.freeze_backbone", c.classify.freeze_backbone));
  b.push_back(num("classify.dropout", c.classify.dropout));
  b.push_back(num("classify.hidden", c.classify.hidden));
  b.push_back(num("few_shot.way", c.few_shot.way));
  b.push_back(num("few_shot.shot", c.few_shot.shot));
  b.push_back(num("few_shot.query", c.few_shot.query));
  b.push_back(num("few_shot.runs", c.few_shot.runs));
  b.push_back(choice("generation.mode", c.generation.mode,
                     {{"greedy", SamplingMode::greedy}, {"top_k", SamplingMode::top_k}, {"temperature", SamplingMode::temperature}}));
  b.push_back(num("generation.top_k", c.generation.top_k));
  b.push_back(num("generation.temperature", c.generation.temperature));
  b.push_back(num("generation.mask_ratio", c.generation.mask_ratio));
  b.push_back(num("generation.count", c.generation.count));
  b.push_back(flag("generation.unconditional", c.generation.unconditional));
  b.push_back(num("log_every", c.log_every));
  return b;
}

}  // namespace detail

/// Applies `preset` first (if present), then every other key. Unknown keys
/// and bad values raise ParseError naming the key and its origin.
inline ExperimentConfig resolve_config(const KeyValues& kv) {
  ExperimentConfig cfg;
  if (const auto* p = kv.find("preset")) {
    try {
      cfg.apply_preset(p->value);
    } catch (const Error& e) {
      throw ParseError(p->origin + ": key 'preset': " + e.what());
    }
  }
  auto binds = detail::bindings(cfg);
  std::map<std::string, const detail::Binding*> by_key;
  for (const auto& b : binds) by_key[b.key] = &b;
  for (const auto& [key, entry] : kv.entries()) {
    if (key == "preset") continue;
    auto it = by_key.find(key);
    if (it == by_key.end()) throw ParseError(entry.origin + ": unknown key '" + key + "'");
    try {
      it->second->set(entry.value);
    } catch (const Error& e) {
      throw ParseError(entry.origin + ": key '" + key + "': " + e.what());
    }
  }
  cfg.sync();
  cfg.validate();
  return cfg;
}

/// Every key with its resolved value, in a stable order.
inline std::vector<std::pair<std::string, std::string>> config_snapshot(const ExperimentConfig& c) {
  ExperimentConfig copy = c;
  std::vector<std::pair<std::string, std::string>> out{{"preset", copy.preset}};
  for (const auto& b : detail::bindings(copy)) out.emplace_back(b.key, b.get());
  return out;
}

}  // namespace gpm
