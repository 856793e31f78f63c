#pragma once

// Subcommand runners behind flipout_cli. Each command validates its config,
// builds the dataset and model, writes its outputs into `cfg.out` and ends
// with manifest.json.
//
// Key layout for a run with seed s: synthetic data from make_synthetic(seed
// = s); network init RngKey(s).split(10); pretraining RngKey(s).split(11);
// the command's own draws RngKey(s).split(12).

#include "flipout/bbb.hpp"
#include "flipout/checkpoint.hpp"
#include "flipout/config.hpp"
#include "flipout/data.hpp"
#include "flipout/es.hpp"
#include "flipout/gradcheck.hpp"
#include "flipout/net.hpp"
#include "flipout/optim.hpp"
#include "flipout/params.hpp"
#include "flipout/runlog.hpp"
#include "flipout/variance_lab.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#ifndef FLIPOUT_GIT_REVISION
#define FLIPOUT_GIT_REVISION "unknown"
#endif

namespace flipout {

namespace keys {
inline constexpr std::uint64_t init = 10, pretrain = 11, command = 12;
}

inline Dataset build_dataset(const DataSpec& d, std::uint64_t seed) {
  if (d.kind == "idx") return load_idx(d.images, d.labels);
  return make_synthetic(parse_synthetic_kind(d.kind), d.n, d.dim, seed, d.synthetic);
}

inline Loss loss_for(const Dataset& data) {
  return data.is_classification() ? Loss::softmax_cross_entropy : Loss::mean_squared_error;
}

inline std::vector<Index> mlp_widths(const std::vector<Index>& hidden, const Dataset& data) {
  std::vector<Index> w{data.dim()};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(data.is_classification() ? data.num_classes : data.targets.cols());
  return w;
}

inline Network build_network(const NetSpec& spec, const Dataset& data, std::uint64_t seed) {
  return make_mlp(mlp_widths(spec.hidden, data), spec.activation, loss_for(data), spec.mode,
                  static_cast<Real>(spec.scale), RngKey(seed).split(keys::init));
}

/// Adam on means and biases under `spec.pretrain_strategy` noise; scale
/// gradients are dropped so the perturbation strength stays as configured.
/// Step i draws its batch from key.split(i).split(0), noise from split 1.
inline void pretrain(Network& net, const Dataset& data, const NetSpec& spec, const RngKey& key) {
  OptimizerState opt = make_optimizer(OptimizerKind::adam, spec.pretrain_lr);
  std::vector<bool> is_scale;
  for (const auto& r : param_refs(net))
    for (Index i = 0; i < r.size(); ++i) is_scale.push_back(r.name.ends_with(".scale"));
  for (long i = 0; i < spec.pretrain_steps; ++i) {
    const RngKey k = key.split(static_cast<std::uint64_t>(i));
    const auto idx = sample_indices(k.split(0), data.size(), spec.pretrain_batch, false);
    const ForwardResult fr = net_forward(net, data.rows(idx), spec.pretrain_strategy, k.split(1));
    Vector g = pack_gradients(net, net_backward(net, fr.cache, data.targets_for(idx)).grads);
    for (Index j = 0; j < g.size(); ++j)
      if (is_scale[static_cast<std::size_t>(j)]) g(j) = 0;
    Vector p = pack_params(net);
    optimizer_step(opt, p, g);
    unpack_params(net, p);
  }
}

/// Mean-network error (classification) or squared error (regression) on the
/// whole dataset.
inline double training_error(const Network& net, const Dataset& data) {
  const Matrix out = net_forward(net, data.inputs, Strategy::none, RngKey(0)).output;
  if (data.is_classification()) return error_rate(out, data.labels);
  return static_cast<double>(example_losses(net.loss, out, data.all_targets()).mean());
}

/// Built and pretrained network for the variance commands.
inline Network prepare_network(const ExperimentConfig& cfg, const Dataset& data) {
  Network net = build_network(cfg.net, data, cfg.seed);
  pretrain(net, data, cfg.net, RngKey(cfg.seed).split(keys::pretrain));
  return net;
}

// ---------------------------------------------------------------------------
// Output formats.

inline std::string variance_csv(std::vector<GradStats> rows, std::uint64_t seed) {
  sort_stats(rows);
  std::string out = "layer,strategy,N,variance,ci_low,ci_high,repeats,runs,seed\n";
  for (const auto& r : rows)
    out += r.layer + "," + to_string(r.strategy) + "," + std::to_string(r.batch) + "," +
           format_double(r.mean_variance) + "," + format_double(r.ci_low) + "," + format_double(r.ci_high) + "," +
           std::to_string(r.repeats) + "," + std::to_string(r.runs) + "," + std::to_string(seed) + "\n";
  return out;
}

inline nlohmann::ordered_json decomposition_json(const std::vector<Decomposition>& ds, std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["layers"] = nlohmann::ordered_json::array();
  for (const auto& d : ds)
    j["layers"].push_back({{"layer", d.source_layer},
                           {"alpha", d.alpha},
                           {"beta", d.beta},
                           {"gamma", d.gamma},
                           {"alpha_se", d.alpha_se},
                           {"beta_se", d.beta_se},
                           {"gamma_se", d.gamma_se},
                           {"n_outer", d.n_outer},
                           {"n_inner", d.n_inner},
                           {"n_pairs", d.n_pairs},
                           {"exact_inner", d.exact_inner}});
  return j;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckCase {
  std::string net;  // "dense" or "lstm"
  Mode mode = Mode::additive_gaussian;
  Strategy strategy = Strategy::none;
  GradcheckReport report;
  double tolerance = 0;
  bool pass() const { return report.max_rel_error < tolerance; }
};

struct GradcheckSummary {
  std::vector<GradcheckCase> cases;
  std::vector<std::string> skipped;
  double max_dense = 0;
  double max_lstm = 0;
  bool pass = true;
};

/// The configured dense net in every listed mode x strategy (additive mode
/// at `additive_scale`), then a
/// `lstm_steps`-step LSTM classifier in every mode x non-LRT strategy. Case k
/// draws its noise from key.split(k).
inline GradcheckSummary run_gradcheck(const ExperimentConfig& cfg, const Dataset& data, const RngKey& key) {
  const GradcheckSpec& g = cfg.gradcheck;
  GradcheckOptions opt;
  opt.step = g.step;
  opt.max_entries = g.max_entries;
  opt.skip_kinks = g.skip_kinks;
  auto scale_for = [&](Mode m) { return m == Mode::additive_gaussian ? g.additive_scale : cfg.net.scale; };
  GradcheckSummary out;
  std::uint64_t k = 0;
  const auto idx = sample_indices(key.split(1000), data.size(), g.batch, false);
  const Matrix x = data.rows(idx);
  const Targets t = data.targets_for(idx);
  for (Mode mode : g.modes) {
    NetSpec spec = cfg.net;
    spec.mode = mode;
    spec.scale = scale_for(mode);
    const Network net = build_network(spec, data, cfg.seed);
    for (Strategy s : g.strategies) {
      const RngKey ck = key.split(k++);
      if (s == Strategy::lrt && mode == Mode::dropconnect_half) {
        out.skipped.push_back("dense/" + to_string(mode) + "/lrt: no Gaussian pre-activation form");
        continue;
      }
      GradcheckCase c{"dense", mode, s, gradcheck(net, x, t, sample_noise(net, g.batch, s, ck), opt),
                      g.dense_tolerance};
      out.max_dense = std::max(out.max_dense, c.report.max_rel_error);
      out.pass = out.pass && c.pass();
      out.cases.push_back(std::move(c));
    }
  }
  if (g.lstm) {
    const RngKey lk = key.split(2000);
    const Index d_in = 2;
    const Matrix lx = sample_gaussian(lk.split(0), g.batch, g.lstm_steps * d_in);
    Targets lt;
    RngStream labels(lk.split(1));
    for (Index i = 0; i < g.batch; ++i) lt.labels.push_back(static_cast<int>(labels.below(2)));
    for (Mode mode : g.modes) {
      Network net;
      net.loss = Loss::softmax_cross_entropy;
      net.layers.emplace_back(make_lstm(d_in, g.lstm_hidden, g.lstm_steps, mode, static_cast<Real>(scale_for(mode)),
                                        lk.split(2)));
      net.layers.emplace_back(
          make_dense(g.lstm_hidden, 2, Activation::softmax_logits, mode, static_cast<Real>(scale_for(mode)), lk.split(3)));
      for (Strategy s : g.strategies) {
        const RngKey ck = key.split(k++);
        if (s == Strategy::lrt) {
          out.skipped.push_back("lstm/" + to_string(mode) + "/lrt: not defined for recurrent layers");
          continue;
        }
        GradcheckCase c{"lstm", mode, s, gradcheck(net, lx, lt, sample_noise(net, g.batch, s, ck), opt),
                        g.lstm_tolerance};
        out.max_lstm = std::max(out.max_lstm, c.report.max_rel_error);
        out.pass = out.pass && c.pass();
        out.cases.push_back(std::move(c));
      }
    }
  }
  return out;
}

inline nlohmann::ordered_json gradcheck_json(const GradcheckSummary& s) {
  nlohmann::ordered_json j;
  j["cases"] = nlohmann::ordered_json::array();
  for (const auto& c : s.cases)
    j["cases"].push_back({{"net", c.net},
                          {"mode", to_string(c.mode)},
                          {"strategy", to_string(c.strategy)},
                          {"checked", c.report.checked},
                          {"skipped_kinks", c.report.skipped_kinks},
                          {"max_rel_error", c.report.max_rel_error},
                          {"worst_param", c.report.worst_param},
                          {"worst_index", c.report.worst_index},
                          {"worst_analytic", c.report.worst_analytic},
                          {"worst_numeric", c.report.worst_numeric},
                          {"tolerance", c.tolerance},
                          {"pass", c.pass()}});
  j["skipped"] = s.skipped;
  j["max_rel_error_dense"] = s.max_dense;
  j["max_rel_error_lstm"] = s.max_lstm;
  j["pass"] = s.pass;
  return j;
}

// ---------------------------------------------------------------------------
// bench

struct BenchResult {
  Index batch = 0;
  int repeats = 0;
  std::size_t layers = 0;
  std::uint64_t shared_matmuls = 0;  // per forward pass
  std::uint64_t flipout_matmuls = 0;
  double shared_ms = 0;  // medians, noise drawn beforehand
  double flipout_ms = 0;
  double ratio = 0;
  double shared_sampled_ms = 0;  // medians including the noise draw
  double flipout_sampled_ms = 0;
  double sampled_ratio = 0;
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class F>
double time_ms(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Forward wall time of shared vs flipout on `x`, repeats interleaved so
/// both see the same machine state.
inline BenchResult run_bench(const Network& net, const Matrix& x, const BenchSpec& spec, const RngKey& key) {
  BenchResult r;
  r.batch = x.rows();
  r.repeats = spec.repeats;
  r.layers = net.layers.size();
  const NetNoise shared = sample_noise(net, x.rows(), Strategy::shared, key.split(0));
  const NetNoise flip = sample_noise(net, x.rows(), Strategy::flipout, key.split(1));
  MatmulCounter::reset();
  net_forward_sampled(net, x, shared);
  r.shared_matmuls = MatmulCounter::count();
  MatmulCounter::reset();
  net_forward_sampled(net, x, flip);
  r.flipout_matmuls = MatmulCounter::count();

  std::vector<double> ts, tf, tss, tfs;
  for (int i = -spec.warmup; i < spec.repeats; ++i) {
    NetNoise a = shared, b = flip;
    const double s = detail::time_ms([&] { net_forward_sampled(net, x, std::move(a)); });
    const double f = detail::time_ms([&] { net_forward_sampled(net, x, std::move(b)); });
    const RngKey ik = key.split(2).split(static_cast<std::uint64_t>(i + spec.warmup));
    const double ss = detail::time_ms([&] { net_forward(net, x, Strategy::shared, ik.split(0)); });
    const double fs = detail::time_ms([&] { net_forward(net, x, Strategy::flipout, ik.split(1)); });
    if (i < 0) continue;
    ts.push_back(s);
    tf.push_back(f);
    tss.push_back(ss);
    tfs.push_back(fs);
  }
  r.shared_ms = detail::median(ts);
  r.flipout_ms = detail::median(tf);
  r.ratio = r.flipout_ms / r.shared_ms;
  r.shared_sampled_ms = detail::median(tss);
  r.flipout_sampled_ms = detail::median(tfs);
  r.sampled_ratio = r.flipout_sampled_ms / r.shared_sampled_ms;
  return r;
}

inline nlohmann::ordered_json bench_json(const BenchResult& r) {
  return {{"batch", r.batch},
          {"repeats", r.repeats},
          {"layers", r.layers},
          {"shared_matmuls", r.shared_matmuls},
          {"flipout_matmuls", r.flipout_matmuls},
          {"shared_ms", r.shared_ms},
          {"flipout_ms", r.flipout_ms},
          {"ratio", r.ratio},
          {"shared_sampled_ms", r.shared_sampled_ms},
          {"flipout_sampled_ms", r.flipout_sampled_ms},
          {"sampled_ratio", r.sampled_ratio}};
}

// ---------------------------------------------------------------------------
// Manifest, replay and error records.

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::ordered_json make_manifest(const ExperimentConfig& cfg, const std::vector<std::string>& outputs,
                                            double wall_seconds) {
  return {{"command", to_string(cfg.command)},
          {"seed", cfg.seed},
          {"config_hash", config_hash(cfg)},
          {"git_revision", FLIPOUT_GIT_REVISION},
          {"timestamp", utc_timestamp()},
          {"wall_seconds", wall_seconds},
          {"threads", cfg.threads},
          {"wall_clock", cfg.wall_clock},
          {"outputs", outputs},
          {"config", resolved_config_text(cfg)}};
}

/// Rebuilds the run configuration from a manifest. The output directory and
/// thread count are the caller's to choose.
inline ExperimentConfig config_from_manifest(const nlohmann::json& m) {
  try {
    ExperimentConfig cfg = parse_config(parse_command(m.at("command").get<std::string>()),
                                        m.at("config").get<std::string>(), "manifest");
    cfg.seed = m.at("seed").get<std::uint64_t>();
    cfg.wall_clock = m.value("wall_clock", false);
    if (m.contains("config_hash") && m["config_hash"].get<std::string>() != config_hash(cfg))
      throw ConfigError("manifest: config_hash does not match the embedded config");
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
}

inline ExperimentConfig load_manifest(const std::string& path) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path + ": " + e.what());
  }
  return config_from_manifest(m);
}

inline std::string error_record(const std::string& kind, const std::string& message, const std::string& command) {
  nlohmann::ordered_json j;
  j["error"] = {{"kind", kind}, {"command", command}, {"message", message}};
  return j.dump();
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("io", "cannot write " + path.string());
  f << text;
  if (!f) throw Error("io", "write failed for " + path.string());
}

inline std::string run_log_text(const RunLog& log) {
  std::ostringstream ss;
  write_jsonl(ss, log);
  return ss.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// run_command

struct CommandOutcome {
  int exit_code = 0;
  std::vector<std::string> outputs;  // file names inside cfg.out
};

/// Runs the configured command and writes its outputs; throws on any error.
inline CommandOutcome execute_command(const ExperimentConfig& cfg, std::ostream& log) {
  validate_config(cfg);
  const std::filesystem::path dir(cfg.out);
  std::filesystem::create_directories(dir);
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset data = build_dataset(cfg.data, cfg.seed);
  data.validate();
  const RngKey key = RngKey(cfg.seed).split(keys::command);
  CommandOutcome out;
  auto emit = [&](const std::string& name, const std::string& text) {
    detail::write_text(dir / name, text);
    out.outputs.push_back(name);
  };

  switch (cfg.command) {
    case Command::variance_sweep: {
      const Network net = prepare_network(cfg, data);
      log << "pretrained network: training error " << format_double(training_error(net, data)) << "\n";
      VarianceOptions opt = cfg.sweep.options;
      opt.threads = cfg.threads;
      emit("variance.csv",
           variance_csv(variance_sweep(net, data, cfg.sweep.strategies, cfg.sweep.grid, opt, key, cfg.sweep.layers),
                        cfg.seed));
      break;
    }
    case Command::decompose: {
      const Network net = prepare_network(cfg, data);
      log << "pretrained network: training error " << format_double(training_error(net, data)) << "\n";
      std::vector<std::string> layers = cfg.decompose.layers;
      if (layers.empty()) layers = mlp_view_names(cfg.net.hidden.size());
      DecompositionOptions opt = cfg.decompose.options;
      opt.threads = cfg.threads;
      std::vector<Decomposition> ds;
      for (std::size_t i = 0; i < layers.size(); ++i)
        ds.push_back(estimate_decomposition(net, data, layers[i], opt, key.split(i)));
      emit("decomposition.json", decomposition_json(ds, cfg.seed).dump(2) + "\n");
      break;
    }
    case Command::train_bbb: {
      const auto widths = mlp_widths(cfg.bbb.hidden, data);
      for (Strategy s : cfg.bbb.strategies) {
        BbbConfig bc = cfg.bbb.config;
        bc.strategy = s;
        bc.wall_clock = cfg.wall_clock;
        BbbModel model = make_bbb_model(widths, cfg.bbb.activation, bc, RngKey(cfg.seed).split(keys::init));
        const RunLog run = bbb_train(model, data, bc, key);
        log << "train-bbb " << to_string(s) << ": final loss " << format_double(run.records.empty() ? 0.0 : run.records.back().loss)
            << "\n";
        emit("bbb_" + to_string(s) + ".jsonl", detail::run_log_text(run));
        emit("bbb_" + to_string(s) + ".ckpt", serialize_checkpoint(model.net));
      }
      break;
    }
    case Command::train_es: {
      const auto widths = mlp_widths(cfg.es.hidden, data);
      for (EsSampling s : cfg.es.samplings) {
        EsConfig ec = cfg.es.config;
        ec.sampling = s;
        ec.threads = cfg.threads;
        ec.wall_clock = cfg.wall_clock;
        Network net = make_mlp(widths, cfg.es.activation, Loss::softmax_cross_entropy, Mode::additive_gaussian, 0,
                               RngKey(cfg.seed).split(keys::init));
        const RunLog run = es_train(net, data, ec, key);
        log << "train-es " << to_string(s) << ": final error "
            << format_double(run.records.empty() ? dataset_error_rate(net, data) : run.records.back().error_rate) << "\n";
        emit("es_" + to_string(s) + ".jsonl", detail::run_log_text(run));
        emit("es_" + to_string(s) + ".ckpt", serialize_checkpoint(net));
      }
      break;
    }
    case Command::gradcheck: {
      const GradcheckSummary s = run_gradcheck(cfg, data, key);
      log << "gradcheck: max relative error dense " << format_double(s.max_dense) << ", lstm "
          << format_double(s.max_lstm) << (s.pass ? " (pass)" : " (FAIL)") << "\n";
      emit("gradcheck.json", gradcheck_json(s).dump(2) + "\n");
      out.exit_code = s.pass ? 0 : 1;
      break;
    }
    case Command::bench: {
      const Network net = build_network(cfg.net, data, cfg.seed);
      const auto idx = sample_indices(key.split(0), data.size(), cfg.bench.batch, false);
      const BenchResult r = run_bench(net, data.rows(idx), cfg.bench, key.split(1));
      log << "bench: flipout/shared forward time ratio " << format_double(r.ratio) << "\n";
      emit("bench.json", bench_json(r).dump(2) + "\n");
      break;
    }
  }

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  detail::write_text(dir / "manifest.json", make_manifest(cfg, out.outputs, secs).dump(2) + "\n");
  return out;
}

/// execute_command with errors turned into an error record on `err` (and in
/// <out>/error.json when the directory is writable). Exit codes: 0 success,
/// 1 a failed audit, 2 invalid input or runtime error.
inline int run_command(const ExperimentConfig& cfg, std::ostream& log, std::ostream& err) {
  std::string kind, message;
  try {
    return execute_command(cfg, log).exit_code;
  } catch (const Error& e) {
    kind = e.kind();
    message = e.what();
  } catch (const std::exception& e) {
    kind = "runtime";
    message = e.what();
  }
  const std::string record = error_record(kind, message, to_string(cfg.command));
  err << record << "\n";
  std::error_code ec;
  std::filesystem::create_directories(cfg.out, ec);
  if (!ec) {
    std::ofstream f(std::filesystem::path(cfg.out) / "error.json", std::ios::binary | std::ios::trunc);
    f << record << "\n";
  }
  return 2;
}

}  // namespace flipout
