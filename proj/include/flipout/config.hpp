#pragma once

// Experiment configuration: typed records per subcommand and a strict
// section/key text format.
//
//   # comment
//   [data]
//   kind = blobs
//   n = 10000
//   [variance-sweep]
//   strategies = shared, flipout
//   grid = 1..1024        # powers of two from 1 to 1024; or a list 1,2,4
//
// Keys before the first section header are the run-level settings (seed,
// threads, out, wall_clock). Unknown sections, unknown keys, duplicate keys
// and malformed values are errors.

#include "flipout/bbb.hpp"
#include "flipout/data.hpp"
#include "flipout/es.hpp"
#include "flipout/net.hpp"
#include "flipout/optim.hpp"
#include "flipout/variance_lab.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdint>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace flipout {

enum class Command { variance_sweep, decompose, train_bbb, train_es, gradcheck, bench };

inline const std::vector<Command>& all_commands() {
  static const std::vector<Command> v{Command::variance_sweep, Command::decompose, Command::train_bbb,
                                      Command::train_es,       Command::gradcheck, Command::bench};
  return v;
}

inline std::string to_string(Command c) {
  switch (c) {
    case Command::variance_sweep: return "variance-sweep";
    case Command::decompose: return "decompose";
    case Command::train_bbb: return "train-bbb";
    case Command::train_es: return "train-es";
    case Command::gradcheck: return "gradcheck";
    case Command::bench: return "bench";
  }
  return "?";
}

inline Command parse_command(std::string_view s) {
  for (Command c : all_commands())
    if (to_string(c) == s) return c;
  throw ConfigError("unknown command '" + std::string(s) + "'");
}

struct DataSpec {
  std::string kind = "blobs";  // blobs | xor | regression | idx
  Index n = 10000;
  Index dim = 32;
  SyntheticOptions synthetic{.classes = 10, .separation = 4.0, .noise_std = 1.0, .outputs = 1, .offset = 1.0};
  std::string images;  // idx only
  std::string labels;
};

struct NetSpec {
  std::vector<Index> hidden{128, 128};
  Activation activation = Activation::relu;
  Mode mode = Mode::multiplicative_gaussian;
  double scale = 1.0;
  // Adam on means and biases with `pretrain_strategy` noise; the scales stay
  // at `scale`.
  long pretrain_steps = 300;
  Index pretrain_batch = 128;
  double pretrain_lr = 0.003;
  Strategy pretrain_strategy = Strategy::flipout;
};

struct SweepSpec {
  std::vector<Strategy> strategies{Strategy::shared, Strategy::flipout, Strategy::lrt};
  std::vector<Index> grid{1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024};
  VarianceOptions options{.repeats = 200, .runs = 50, .freeze_batch = false, .with_replacement = true};
  std::vector<std::string> layers;  // empty = every weight view
};

struct DecomposeSpec {
  std::vector<std::string> layers;
  DecompositionOptions options;
};

struct BbbSpec {
  std::vector<Index> hidden{64, 64};
  Activation activation = Activation::relu;
  std::vector<Strategy> strategies{Strategy::shared, Strategy::flipout, Strategy::lrt};
  BbbConfig config;
};

struct EsSpec {
  std::vector<Index> hidden{16};
  Activation activation = Activation::relu;
  std::vector<EsSampling> samplings{EsSampling::flipout, EsSampling::independent};
  EsConfig config{.sigma = 0.05, .learning_rate = 0.01, .iterations = 400};
};

struct GradcheckSpec {
  std::vector<Strategy> strategies{Strategy::none, Strategy::shared, Strategy::flipout, Strategy::independent,
                                   Strategy::lrt};
  std::vector<Mode> modes{Mode::additive_gaussian, Mode::multiplicative_gaussian, Mode::dropconnect_half};
  Index batch = 8;
  double step = 1e-4;
  Index max_entries = 64;
  bool skip_kinks = true;
  // Absolute weight std for the additive-mode cases; [net] scale is a
  // relative std in multiplicative mode and would swamp the weights here.
  double additive_scale = 0.05;
  double dense_tolerance = 1e-5;
  bool lstm = true;
  Index lstm_steps = 5;
  Index lstm_hidden = 3;
  double lstm_tolerance = 1e-4;
};

struct BenchSpec {
  Index batch = 1024;
  int repeats = 50;
  int warmup = 5;
};

struct ExperimentConfig {
  Command command = Command::variance_sweep;
  std::uint64_t seed = 42;
  int threads = 1;
  std::string out = "out";
  bool wall_clock = false;
  DataSpec data;
  NetSpec net;
  SweepSpec sweep;
  DecomposeSpec decompose;
  BbbSpec bbb;
  EsSpec es;
  GradcheckSpec gradcheck;
  BenchSpec bench;
};

/// Command-specific defaults: the variance commands use the 128-128-10 net on
/// shifted 32-d blobs; the trainers use their own smaller tasks.
inline ExperimentConfig default_config(Command c) {
  ExperimentConfig cfg;
  cfg.command = c;
  if (c == Command::train_bbb) {
    cfg.data.n = 20000;
    cfg.data.dim = 20;
    cfg.data.synthetic = {.classes = 10, .separation = 6.0, .noise_std = 1.0, .outputs = 1, .offset = 0.0};
  } else if (c == Command::train_es) {
    cfg.data.n = 2000;
    cfg.data.dim = 10;
    cfg.data.synthetic = {.classes = 2, .separation = 2.5, .noise_std = 1.0, .outputs = 1, .offset = 0.0};
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Value codecs.

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError("empty list element in '" + s + "'");
    out.push_back(item);
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& v, std::string (*fmt)(T)) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

template <class Int>
Int parse_integer(const std::string& s) {
  Int v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError("expected an integer, got '" + s + "'");
  return v;
}

inline double parse_real(const std::string& s) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v))
    throw ConfigError("expected a finite number, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError("expected true or false, got '" + s + "'");
}

/// "a..b" expands to a, 2a, 4a, ... up to b; otherwise a comma list.
inline std::vector<Index> parse_grid(const std::string& s) {
  const auto dots = s.find("..");
  std::vector<Index> out;
  if (dots == std::string::npos) {
    for (const auto& item : split_list(s)) out.push_back(parse_integer<Index>(item));
    return out;
  }
  const Index lo = parse_integer<Index>(trim(s.substr(0, dots)));
  const Index hi = parse_integer<Index>(trim(s.substr(dots + 2)));
  if (lo < 1 || hi < lo) throw ConfigError("grid range '" + s + "' must satisfy 1 <= a <= b");
  for (Index n = lo; n <= hi; n *= 2) out.push_back(n);
  return out;
}

inline std::string index_string(Index v) { return std::to_string(v); }
inline std::string strategy_string(Strategy s) { return to_string(s); }
inline std::string mode_string(Mode m) { return to_string(m); }
inline std::string sampling_string(EsSampling s) { return to_string(s); }
inline std::string plain_string(std::string s) { return s; }

inline void decode(const std::string& s, std::string& v) { v = s; }
inline void decode(const std::string& s, bool& v) { v = parse_bool(s); }
inline void decode(const std::string& s, double& v) { v = parse_real(s); }
inline void decode(const std::string& s, int& v) { v = parse_integer<int>(s); }
inline void decode(const std::string& s, long& v) { v = parse_integer<long>(s); }
inline void decode(const std::string& s, long long& v) { v = parse_integer<long long>(s); }
inline void decode(const std::string& s, unsigned long& v) { v = parse_integer<unsigned long>(s); }
inline void decode(const std::string& s, unsigned long long& v) { v = parse_integer<unsigned long long>(s); }
inline void decode(const std::string& s, Activation& v) { v = parse_activation(s); }
inline void decode(const std::string& s, Mode& v) { v = parse_mode(s); }
inline void decode(const std::string& s, Strategy& v) { v = parse_strategy(s); }
inline void decode(const std::string& s, OptimizerKind& v) { v = parse_optimizer(s); }
inline void decode(const std::string& s, EsSampling& v) { v = parse_es_sampling(s); }
inline void decode(const std::string& s, EsFitness& v) { v = parse_es_fitness(s); }
inline void decode(const std::string& s, std::vector<Index>& v) { v = parse_grid(s); }
inline void decode(const std::string& s, std::vector<std::string>& v) { v = split_list(s); }
template <class E>
void decode(const std::string& s, std::vector<E>& v) {
  v.clear();
  for (const auto& item : split_list(s)) {
    E e{};
    decode(item, e);
    v.push_back(e);
  }
}

inline std::string encode(const std::string& v) { return v; }
inline std::string encode(bool v) { return v ? "true" : "false"; }
inline std::string encode(double v) { return format_double(v); }
template <class Int>
  requires std::is_integral_v<Int>
std::string encode(Int v) {
  return std::to_string(v);
}
inline std::string encode(Activation v) { return to_string(v); }
inline std::string encode(Mode v) { return to_string(v); }
inline std::string encode(Strategy v) { return to_string(v); }
inline std::string encode(OptimizerKind v) { return to_string(v); }
inline std::string encode(EsSampling v) { return to_string(v); }
inline std::string encode(EsFitness v) { return to_string(v); }
inline std::string encode(const std::vector<Index>& v) { return join(v, index_string); }
inline std::string encode(const std::vector<std::string>& v) { return join(v, plain_string); }
inline std::string encode(const std::vector<Strategy>& v) { return join(v, strategy_string); }
inline std::string encode(const std::vector<Mode>& v) { return join(v, mode_string); }
inline std::string encode(const std::vector<EsSampling>& v) { return join(v, sampling_string); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Field table.

struct ConfigField {
  std::string section;  // "" for run-level keys
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

namespace detail {

// `at` is a generic lambda returning a reference into the config, so it
// works for both the setter and the getter.
template <class At>
ConfigField make_field(std::string section, std::string key, At at) {
  return {std::move(section), std::move(key),
          [at](ExperimentConfig& c, const std::string& s) { decode(s, at(c)); },
          [at](const ExperimentConfig& c) { return encode(at(c)); }};
}

}  // namespace detail

#define FLIPOUT_FIELD(section, key, expr) \
  detail::make_field(section, key, [](auto& c) -> auto& { return c.expr; })

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      FLIPOUT_FIELD("", "seed", seed),
      FLIPOUT_FIELD("", "threads", threads),
      FLIPOUT_FIELD("", "out", out),
      FLIPOUT_FIELD("", "wall_clock", wall_clock),

      FLIPOUT_FIELD("data", "kind", data.kind),
      FLIPOUT_FIELD("data", "n", data.n),
      FLIPOUT_FIELD("data", "dim", data.dim),
      FLIPOUT_FIELD("data", "classes", data.synthetic.classes),
      FLIPOUT_FIELD("data", "separation", data.synthetic.separation),
      FLIPOUT_FIELD("data", "noise_std", data.synthetic.noise_std),
      FLIPOUT_FIELD("data", "outputs", data.synthetic.outputs),
      FLIPOUT_FIELD("data", "offset", data.synthetic.offset),
      FLIPOUT_FIELD("data", "images", data.images),
      FLIPOUT_FIELD("data", "labels", data.labels),

      FLIPOUT_FIELD("net", "hidden", net.hidden),
      FLIPOUT_FIELD("net", "activation", net.activation),
      FLIPOUT_FIELD("net", "mode", net.mode),
      FLIPOUT_FIELD("net", "scale", net.scale),
      FLIPOUT_FIELD("net", "pretrain_steps", net.pretrain_steps),
      FLIPOUT_FIELD("net", "pretrain_batch", net.pretrain_batch),
      FLIPOUT_FIELD("net", "pretrain_lr", net.pretrain_lr),
      FLIPOUT_FIELD("net", "pretrain_strategy", net.pretrain_strategy),

      FLIPOUT_FIELD("variance-sweep", "strategies", sweep.strategies),
      FLIPOUT_FIELD("variance-sweep", "grid", sweep.grid),
      FLIPOUT_FIELD("variance-sweep", "repeats", sweep.options.repeats),
      FLIPOUT_FIELD("variance-sweep", "runs", sweep.options.runs),
      FLIPOUT_FIELD("variance-sweep", "freeze_batch", sweep.options.freeze_batch),
      FLIPOUT_FIELD("variance-sweep", "with_replacement", sweep.options.with_replacement),
      FLIPOUT_FIELD("variance-sweep", "level", sweep.options.level),
      FLIPOUT_FIELD("variance-sweep", "layers", sweep.layers),

      FLIPOUT_FIELD("decompose", "layers", decompose.layers),
      FLIPOUT_FIELD("decompose", "n_outer", decompose.options.n_outer),
      FLIPOUT_FIELD("decompose", "n_inner", decompose.options.n_inner),
      FLIPOUT_FIELD("decompose", "n_pairs", decompose.options.n_pairs),
      FLIPOUT_FIELD("decompose", "exact_inner", decompose.options.exact_inner),

      FLIPOUT_FIELD("train-bbb", "hidden", bbb.hidden),
      FLIPOUT_FIELD("train-bbb", "activation", bbb.activation),
      FLIPOUT_FIELD("train-bbb", "strategies", bbb.strategies),
      FLIPOUT_FIELD("train-bbb", "prior_std", bbb.config.prior_std),
      FLIPOUT_FIELD("train-bbb", "kl_scale", bbb.config.kl_scale),
      FLIPOUT_FIELD("train-bbb", "batch_size", bbb.config.batch_size),
      FLIPOUT_FIELD("train-bbb", "learning_rate", bbb.config.learning_rate),
      FLIPOUT_FIELD("train-bbb", "steps", bbb.config.steps),
      FLIPOUT_FIELD("train-bbb", "optimizer", bbb.config.optimizer),
      FLIPOUT_FIELD("train-bbb", "init_sigma_factor", bbb.config.init_sigma_factor),
      FLIPOUT_FIELD("train-bbb", "with_replacement", bbb.config.with_replacement),

      FLIPOUT_FIELD("train-es", "hidden", es.hidden),
      FLIPOUT_FIELD("train-es", "activation", es.activation),
      FLIPOUT_FIELD("train-es", "samplings", es.samplings),
      FLIPOUT_FIELD("train-es", "sigma", es.config.sigma),
      FLIPOUT_FIELD("train-es", "learning_rate", es.config.learning_rate),
      FLIPOUT_FIELD("train-es", "workers", es.config.workers),
      FLIPOUT_FIELD("train-es", "flip_batch", es.config.flip_batch),
      FLIPOUT_FIELD("train-es", "samples_per_update", es.config.samples_per_update),
      FLIPOUT_FIELD("train-es", "iterations", es.config.iterations),
      FLIPOUT_FIELD("train-es", "optimizer", es.config.optimizer),
      FLIPOUT_FIELD("train-es", "fitness", es.config.fitness),

      FLIPOUT_FIELD("gradcheck", "strategies", gradcheck.strategies),
      FLIPOUT_FIELD("gradcheck", "modes", gradcheck.modes),
      FLIPOUT_FIELD("gradcheck", "batch", gradcheck.batch),
      FLIPOUT_FIELD("gradcheck", "step", gradcheck.step),
      FLIPOUT_FIELD("gradcheck", "max_entries", gradcheck.max_entries),
      FLIPOUT_FIELD("gradcheck", "skip_kinks", gradcheck.skip_kinks),
      FLIPOUT_FIELD("gradcheck", "additive_scale", gradcheck.additive_scale),
      FLIPOUT_FIELD("gradcheck", "dense_tolerance", gradcheck.dense_tolerance),
      FLIPOUT_FIELD("gradcheck", "lstm", gradcheck.lstm),
      FLIPOUT_FIELD("gradcheck", "lstm_steps", gradcheck.lstm_steps),
      FLIPOUT_FIELD("gradcheck", "lstm_hidden", gradcheck.lstm_hidden),
      FLIPOUT_FIELD("gradcheck", "lstm_tolerance", gradcheck.lstm_tolerance),

      FLIPOUT_FIELD("bench", "batch", bench.batch),
      FLIPOUT_FIELD("bench", "repeats", bench.repeats),
      FLIPOUT_FIELD("bench", "warmup", bench.warmup),
  };
  return fields;
}

#undef FLIPOUT_FIELD

inline bool is_known_section(const std::string& s) {
  if (s == "data" || s == "net") return true;
  for (Command c : all_commands())
    if (to_string(c) == s) return true;
  return false;
}

/// Applies `text` on top of `cfg`. `source` prefixes error messages.
inline void apply_config_text(ExperimentConfig& cfg, std::string_view text, const std::string& source = "config") {
  std::string section;
  std::set<std::pair<std::string, std::string>> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    std::string line = raw;
    // Comments: whole-line, or trailing after whitespace.
    for (std::size_t i = 0; i < line.size(); ++i)
      if ((line[i] == '#' || line[i] == ';') && (i == 0 || line[i - 1] == ' ' || line[i - 1] == '\t')) {
        line.resize(i);
        break;
      }
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header '" + line + "'");
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      if (!is_known_section(section)) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    const std::string qualified = section.empty() ? key : "[" + section + "] " + key;
    const auto& fields = config_fields();
    const auto it = std::find_if(fields.begin(), fields.end(),
                                 [&](const ConfigField& f) { return f.section == section && f.key == key; });
    if (it == fields.end()) throw ConfigError(where + "unknown key " + qualified);
    if (!seen.insert({section, key}).second) throw ConfigError(where + "duplicate key " + qualified);
    try {
      it->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + qualified + ": " + e.what());
    }
  }
}

inline ExperimentConfig parse_config(Command command, std::string_view text, const std::string& source = "config") {
  ExperimentConfig cfg = default_config(command);
  apply_config_text(cfg, text, source);
  return cfg;
}

/// Canonical text of the sections that affect `cfg.command` (data, net and
/// the command's own section), every key spelled out. Run-level keys are
/// excluded; the manifest records them separately.
inline std::string resolved_config_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const std::string& section : {std::string("data"), std::string("net"), to_string(cfg.command)}) {
    out += "[" + section + "]\n";
    for (const auto& f : config_fields())
      if (f.section == section) out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

/// FNV-1a 64, as 16 hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string config_hash(const ExperimentConfig& cfg) { return fnv1a_hex(resolved_config_text(cfg)); }

// ---------------------------------------------------------------------------
// Validation. Runs before any data is built.

/// Weight-view names of an MLP with `hidden_layers` hidden layers.
inline std::vector<std::string> mlp_view_names(std::size_t hidden_layers) {
  std::vector<std::string> out;
  for (std::size_t l = 0; l <= hidden_layers; ++l) out.push_back("fc" + std::to_string(l + 1));
  return out;
}

namespace detail {

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

inline void check_widths(const std::vector<Index>& hidden, const std::string& where) {
  for (Index w : hidden) require(w >= 1, where + ": hidden widths must be >= 1");
}

inline void check_layers(const std::vector<std::string>& layers, std::size_t hidden_layers, const std::string& where) {
  const auto names = mlp_view_names(hidden_layers);
  for (const auto& l : layers)
    require(std::find(names.begin(), names.end(), l) != names.end(),
            where + ": unknown layer '" + l + "' (network has fc1..fc" + std::to_string(names.size()) + ")");
}

template <class T>
void check_distinct(const std::vector<T>& v, const std::string& where) {
  require(!v.empty(), where + " must not be empty");
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = i + 1; j < v.size(); ++j) require(!(v[i] == v[j]), where + " has a repeated entry");
}

}  // namespace detail

inline bool is_classification_kind(const DataSpec& d) { return d.kind != "regression"; }

inline void validate_config(const ExperimentConfig& cfg) {
  using detail::require;
  require(cfg.threads >= 1, "threads must be >= 1");
  require(!cfg.out.empty(), "out must not be empty");

  const DataSpec& d = cfg.data;
  if (d.kind == "idx") {
    require(!d.images.empty() && !d.labels.empty(), "[data] idx needs images and labels paths");
  } else {
    parse_synthetic_kind(d.kind);
    require(d.n >= 1 && d.dim >= 1, "[data] n and dim must be >= 1");
    require(d.synthetic.noise_std >= 0, "[data] noise_std must be >= 0");
    require(d.synthetic.separation >= 0, "[data] separation must be >= 0");
    if (d.kind == "blobs") {
      require(d.synthetic.classes >= 2, "[data] classes must be >= 2");
      require(d.dim >= d.synthetic.classes, "[data] blobs need dim >= classes");
    }
    if (d.kind == "xor") require(d.dim >= 2, "[data] xor needs dim >= 2");
    if (d.kind == "regression") require(d.synthetic.outputs >= 1, "[data] outputs must be >= 1");
  }
  // Sizes checked here only when known without loading files.
  const Index known_n = d.kind == "idx" ? std::numeric_limits<Index>::max() : d.n;

  switch (cfg.command) {
    case Command::variance_sweep:
    case Command::decompose:
    case Command::gradcheck:
    case Command::bench: {
      const NetSpec& n = cfg.net;
      detail::check_widths(n.hidden, "[net]");
      require(n.scale >= 0, "[net] scale must be >= 0");
      require(n.pretrain_steps >= 0, "[net] pretrain_steps must be >= 0");
      require(n.pretrain_batch >= 1 && n.pretrain_batch <= known_n, "[net] pretrain_batch must be in [1, n]");
      require(n.pretrain_lr > 0, "[net] pretrain_lr must be > 0");
      if (n.mode == Mode::dropconnect_half)
        require(n.pretrain_strategy != Strategy::lrt, "[net] lrt does not support dropconnect_half");
      break;
    }
    default:
      break;
  }

  switch (cfg.command) {
    case Command::variance_sweep: {
      const SweepSpec& s = cfg.sweep;
      detail::check_distinct(s.strategies, "[variance-sweep] strategies");
      detail::check_distinct(s.grid, "[variance-sweep] grid");
      for (Index n : s.grid) {
        require(n >= 1, "[variance-sweep] grid entries must be >= 1");
        require(s.options.with_replacement || n <= known_n,
                "[variance-sweep] grid entry " + std::to_string(n) + " exceeds the dataset size; set with_replacement");
      }
      require(s.options.repeats >= 2 && s.options.runs >= 2, "[variance-sweep] repeats and runs must be >= 2");
      require(s.options.level > 0 && s.options.level < 1, "[variance-sweep] level must be in (0, 1)");
      if (cfg.net.mode == Mode::dropconnect_half)
        for (Strategy st : s.strategies)
          require(st != Strategy::lrt, "[variance-sweep] lrt does not support dropconnect_half");
      detail::check_layers(s.layers, cfg.net.hidden.size(), "[variance-sweep] layers");
      break;
    }
    case Command::decompose: {
      const auto& o = cfg.decompose.options;
      require(o.n_outer >= 2 && o.n_pairs >= 2 && (o.exact_inner || o.n_inner >= 2),
              "[decompose] n_outer, n_inner and n_pairs must be >= 2");
      detail::check_layers(cfg.decompose.layers, cfg.net.hidden.size(), "[decompose] layers");
      break;
    }
    case Command::train_bbb: {
      const BbbSpec& b = cfg.bbb;
      b.config.validate();
      detail::check_widths(b.hidden, "[train-bbb]");
      detail::check_distinct(b.strategies, "[train-bbb] strategies");
      require(is_classification_kind(d), "[train-bbb] needs a classification dataset");
      require(b.config.with_replacement || b.config.batch_size <= known_n,
              "[train-bbb] batch_size exceeds the dataset size");
      break;
    }
    case Command::train_es: {
      const EsSpec& e = cfg.es;
      e.config.validate();
      detail::check_widths(e.hidden, "[train-es]");
      detail::check_distinct(e.samplings, "[train-es] samplings");
      require(is_classification_kind(d), "[train-es] needs a classification dataset");
      break;
    }
    case Command::gradcheck: {
      const GradcheckSpec& g = cfg.gradcheck;
      detail::check_distinct(g.strategies, "[gradcheck] strategies");
      detail::check_distinct(g.modes, "[gradcheck] modes");
      require(g.batch >= 1 && g.batch <= known_n, "[gradcheck] batch must be in [1, n]");
      require(g.step > 0, "[gradcheck] step must be > 0");
      require(g.max_entries >= 0, "[gradcheck] max_entries must be >= 0");
      require(g.additive_scale >= 0, "[gradcheck] additive_scale must be >= 0");
      require(g.dense_tolerance > 0 && g.lstm_tolerance > 0, "[gradcheck] tolerances must be > 0");
      require(g.lstm_steps >= 1 && g.lstm_hidden >= 1, "[gradcheck] lstm_steps and lstm_hidden must be >= 1");
      break;
    }
    case Command::bench: {
      require(cfg.bench.batch >= 1 && cfg.bench.batch <= known_n, "[bench] batch must be in [1, n]");
      require(cfg.bench.repeats >= 1 && cfg.bench.warmup >= 0, "[bench] repeats must be >= 1 and warmup >= 0");
      break;
    }
  }
}

}  // namespace flipout
