#include "flipout/experiment.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace flipout;

namespace {

std::string config_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

ExperimentConfig parsed(Command c, const std::string& text) { return parse_config(c, text, "test.ini"); }

// A config small enough for the runners to finish in well under a second.
ExperimentConfig tiny(Command c) {
  ExperimentConfig cfg = parsed(c, R"(
[data]
n = 300
dim = 6
classes = 3
[net]
hidden = 8
pretrain_steps = 20
pretrain_batch = 32
)");
  return cfg;
}

}  // namespace

TEST(ConfigParse, EmptyTextGivesCommandDefaults) {
  for (Command c : all_commands())
    EXPECT_EQ(resolved_config_text(parsed(c, "")), resolved_config_text(default_config(c))) << to_string(c);
  const ExperimentConfig v = parsed(Command::variance_sweep, "");
  EXPECT_EQ(v.net.hidden, (std::vector<Index>{128, 128}));
  EXPECT_EQ(v.net.mode, Mode::multiplicative_gaussian);
  EXPECT_EQ(v.net.scale, 1.0);
  EXPECT_EQ(v.seed, 42u);
  EXPECT_EQ(parsed(Command::train_bbb, "").data.n, 20000);
}

TEST(ConfigParse, TypedValuesSectionsAndComments) {
  const ExperimentConfig cfg = parsed(Command::variance_sweep, R"(
# run-level keys come first
seed = 7
threads = 3   ; trailing comment
out = runs/a#1

[data]
kind = xor
n = 500
offset = -0.25
[net]
hidden = 16, 4
activation = tanh
mode = additive_gaussian
[variance-sweep]
strategies = flipout,independent
grid = 3..20
freeze_batch = true
layers = fc2
)");
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_EQ(cfg.threads, 3);
  EXPECT_EQ(cfg.out, "runs/a#1");
  EXPECT_EQ(cfg.data.kind, "xor");
  EXPECT_EQ(cfg.data.n, 500);
  EXPECT_EQ(cfg.data.synthetic.offset, -0.25);
  EXPECT_EQ(cfg.net.hidden, (std::vector<Index>{16, 4}));
  EXPECT_EQ(cfg.net.activation, Activation::tanh);
  EXPECT_EQ(cfg.net.mode, Mode::additive_gaussian);
  EXPECT_EQ(cfg.sweep.strategies, (std::vector<Strategy>{Strategy::flipout, Strategy::independent}));
  EXPECT_EQ(cfg.sweep.grid, (std::vector<Index>{3, 6, 12}));
  EXPECT_TRUE(cfg.sweep.options.freeze_batch);
  EXPECT_EQ(cfg.sweep.layers, (std::vector<std::string>{"fc2"}));
}

TEST(ConfigParse, GridForms) {
  EXPECT_EQ(detail::parse_grid("1..1024").size(), 11u);
  EXPECT_EQ(detail::parse_grid("1..1024").back(), 1024);
  EXPECT_EQ(detail::parse_grid("5, 7,9"), (std::vector<Index>{5, 7, 9}));
  EXPECT_EQ(detail::parse_grid("4..4"), (std::vector<Index>{4}));
  EXPECT_THROW(detail::parse_grid("0..8"), ConfigError);
  EXPECT_THROW(detail::parse_grid("8..2"), ConfigError);
  EXPECT_THROW(detail::parse_grid("1,,2"), ConfigError);
}

TEST(ConfigParse, UnknownKeyIsRejectedWithLocation) {
  const std::string e = config_error([] { parsed(Command::variance_sweep, "[data]\nn = 10\nrepeatz = 3\n"); });
  EXPECT_NE(e.find("test.ini:3"), std::string::npos) << e;
  EXPECT_NE(e.find("unknown key [data] repeatz"), std::string::npos) << e;
  // Known key, wrong section.
  EXPECT_FALSE(config_error([] { parsed(Command::variance_sweep, "[net]\nrepeats = 3\n"); }).empty());
  EXPECT_FALSE(config_error([] { parsed(Command::variance_sweep, "repeats = 3\n"); }).empty());
}

TEST(ConfigParse, StructuralErrors) {
  EXPECT_NE(config_error([] { parsed(Command::bench, "[benchmark]\n"); }).find("unknown section"), std::string::npos);
  EXPECT_NE(config_error([] { parsed(Command::bench, "[bench\n"); }).find("malformed section"), std::string::npos);
  EXPECT_NE(config_error([] { parsed(Command::bench, "[bench]\nbatch\n"); }).find("key = value"), std::string::npos);
  EXPECT_NE(config_error([] { parsed(Command::bench, "[bench]\nbatch = 4\nbatch = 5\n"); }).find("duplicate"),
            std::string::npos);
}

TEST(ConfigParse, MalformedValuesName) {
  const std::string e = config_error([] { parsed(Command::bench, "[bench]\nbatch = 12x\n"); });
  EXPECT_NE(e.find("[bench] batch"), std::string::npos) << e;
  EXPECT_NE(e.find("integer"), std::string::npos) << e;
  EXPECT_FALSE(config_error([] { parsed(Command::bench, "wall_clock = yes\n"); }).empty());
  EXPECT_FALSE(config_error([] { parsed(Command::bench, "[net]\nscale = nan\n"); }).empty());
  EXPECT_FALSE(config_error([] { parsed(Command::bench, "[net]\nscale = 1.0.0\n"); }).empty());
  EXPECT_FALSE(config_error([] { parsed(Command::bench, "[net]\nmode = gaussian\n"); }).empty());
  EXPECT_FALSE(config_error([] { parsed(Command::bench, "seed = -1\n"); }).empty());
  EXPECT_FALSE(config_error([] { parsed(Command::bench, "[variance-sweep]\nstrategies = shared,bogus\n"); }).empty());
}

TEST(ConfigParse, ResolvedTextRoundTrips) {
  for (Command c : all_commands()) {
    ExperimentConfig cfg = default_config(c);
    cfg.data.synthetic.separation = 0.1 + 0.2;  // needs all 17 digits
    cfg.net.hidden = {5, 6, 7};
    cfg.sweep.layers = {"fc1", "fc4"};
    cfg.bbb.strategies = {Strategy::lrt};
    cfg.es.samplings = {EsSampling::independent};
    cfg.gradcheck.modes = {Mode::dropconnect_half};
    const std::string text = resolved_config_text(cfg);
    const ExperimentConfig back = parsed(c, text);
    EXPECT_EQ(resolved_config_text(back), text) << to_string(c);
    EXPECT_EQ(back.data.synthetic.separation, 0.1 + 0.2);
  }
}

TEST(ConfigParse, ResolvedTextCoversOnlyRelevantSections) {
  const std::string t = resolved_config_text(default_config(Command::train_es));
  EXPECT_NE(t.find("[data]"), std::string::npos);
  EXPECT_NE(t.find("[net]"), std::string::npos);
  EXPECT_NE(t.find("[train-es]"), std::string::npos);
  EXPECT_EQ(t.find("[train-bbb]"), std::string::npos);
  EXPECT_EQ(t.find("seed"), std::string::npos);
}

TEST(ConfigHash, TracksSettingsNotRunLevelKeys) {
  ExperimentConfig a = default_config(Command::variance_sweep);
  ExperimentConfig b = a;
  b.seed = 9;
  b.threads = 8;
  b.out = "elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.sweep.options.repeats = 199;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  // FNV-1a 64 reference values.
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

TEST(ConfigValidate, DefaultsAreValid) {
  for (Command c : all_commands()) EXPECT_NO_THROW(validate_config(default_config(c))) << to_string(c);
}

TEST(ConfigValidate, RejectsBadCombinations) {
  auto fails = [](Command c, const std::string& text) {
    return !config_error([&] { validate_config(parsed(c, text)); }).empty();
  };
  EXPECT_TRUE(fails(Command::variance_sweep, "threads = 0\n"));
  EXPECT_TRUE(fails(Command::variance_sweep, "[data]\nn = 200\n[variance-sweep]\nwith_replacement = false\n"));
  EXPECT_FALSE(fails(Command::variance_sweep, "[data]\nn = 200\n"));  // default samples with replacement
  EXPECT_TRUE(fails(Command::variance_sweep, "[data]\nn = 100\n"));   // smaller than pretrain_batch
  EXPECT_TRUE(fails(Command::variance_sweep, "[net]\nmode = dropconnect_half\n"));  // lrt in the default list
  EXPECT_FALSE(fails(Command::variance_sweep, "[net]\nmode = dropconnect_half\n[variance-sweep]\nstrategies = flipout\n"));
  EXPECT_TRUE(fails(Command::variance_sweep, "[variance-sweep]\nlayers = fc4\n"));
  EXPECT_TRUE(fails(Command::variance_sweep, "[variance-sweep]\nstrategies = shared,shared\n"));
  EXPECT_TRUE(fails(Command::variance_sweep, "[variance-sweep]\nrepeats = 1\n"));
  EXPECT_TRUE(fails(Command::variance_sweep, "[variance-sweep]\nlevel = 1\n"));
  EXPECT_TRUE(fails(Command::variance_sweep, "[data]\nclasses = 40\n"));
  EXPECT_TRUE(fails(Command::decompose, "[decompose]\nn_pairs = 1\n"));
  EXPECT_TRUE(fails(Command::train_bbb, "[data]\nkind = regression\n"));
  EXPECT_TRUE(fails(Command::train_bbb, "[train-bbb]\nkl_scale = 2\n"));
  EXPECT_TRUE(fails(Command::train_es, "[train-es]\nworkers = 10\n"));
  EXPECT_TRUE(fails(Command::train_es, "[train-es]\nsigma = 0\n"));
  EXPECT_TRUE(fails(Command::gradcheck, "[gradcheck]\nstep = 0\n"));
  EXPECT_TRUE(fails(Command::bench, "[bench]\nbatch = 20000\n"));
  EXPECT_TRUE(fails(Command::bench, "[data]\nkind = idx\n"));
}

TEST(Manifest, RoundTripsTheRun) {
  ExperimentConfig cfg = tiny(Command::decompose);
  cfg.seed = 1234567890123ULL;
  cfg.wall_clock = true;
  const nlohmann::ordered_json m = make_manifest(cfg, {"decomposition.json"}, 1.5);
  EXPECT_EQ(m["command"], "decompose");
  EXPECT_EQ(m["config_hash"], config_hash(cfg));
  EXPECT_TRUE(m.contains("git_revision"));
  EXPECT_EQ(m["timestamp"].get<std::string>().size(), 20u);
  const ExperimentConfig back = config_from_manifest(nlohmann::json::parse(m.dump()));
  EXPECT_EQ(back.command, cfg.command);
  EXPECT_EQ(back.seed, cfg.seed);
  EXPECT_TRUE(back.wall_clock);
  EXPECT_EQ(resolved_config_text(back), resolved_config_text(cfg));
}

TEST(Manifest, TamperedConfigIsRejected) {
  nlohmann::json m = make_manifest(tiny(Command::bench), {}, 0);
  m["config"] = m["config"].get<std::string>() + "warmup = 1\n";
  EXPECT_THROW(config_from_manifest(m), ConfigError);
  m.erase("config");
  EXPECT_THROW(config_from_manifest(m), FormatError);
}

TEST(ErrorRecord, IsMachineReadable) {
  const auto j = nlohmann::json::parse(error_record("config", "bad \"key\"\n", "bench"));
  EXPECT_EQ(j["error"]["kind"], "config");
  EXPECT_EQ(j["error"]["message"], "bad \"key\"\n");
  EXPECT_EQ(j["error"]["command"], "bench");
}

TEST(Outputs, VarianceCsvSchemaAndOrder) {
  std::vector<GradStats> rows(3);
  rows[0] = {"fc2", Strategy::shared, 4, 0.5, 0.25, 0.75, 0.1, 200, 50, 0};
  rows[1] = {"fc1", Strategy::shared, 16, 1e-7, 5e-8, 2e-7, 0.1, 200, 50, 0};
  rows[2] = {"fc1", Strategy::flipout, 2, 0.1 + 0.2, 0, 1, 0.1, 200, 50, 0};
  EXPECT_EQ(variance_csv(rows, 42),
            "layer,strategy,N,variance,ci_low,ci_high,repeats,runs,seed\n"
            "fc1,flipout,2,0.30000000000000004,0,1,200,50,42\n"
            "fc1,shared,16,1e-07,5e-08,2e-07,200,50,42\n"
            "fc2,shared,4,0.5,0.25,0.75,200,50,42\n");
}

TEST(Outputs, DecompositionRecordFields) {
  Decomposition d;
  d.source_layer = "fc1";
  d.alpha = 2;
  d.n_outer = 3;
  const auto j = decomposition_json({d}, 5);
  EXPECT_EQ(j["seed"], 5);
  for (const char* k : {"layer", "alpha", "beta", "gamma", "alpha_se", "beta_se", "gamma_se", "n_outer", "n_inner",
                        "n_pairs", "exact_inner"})
    EXPECT_TRUE(j["layers"][0].contains(k)) << k;
}

TEST(Pretrain, KeepsScalesAndLowersError) {
  const ExperimentConfig cfg = tiny(Command::variance_sweep);
  const Dataset data = build_dataset(cfg.data, cfg.seed);
  const Network init = build_network(cfg.net, data, cfg.seed);
  const Network trained = prepare_network(cfg, data);
  for (std::size_t l = 0; l < init.layers.size(); ++l) {
    EXPECT_EQ(layer_dist(trained.layers[l]).scale, layer_dist(init.layers[l]).scale);
    EXPECT_NE(layer_dist(trained.layers[l]).mean, layer_dist(init.layers[l]).mean);
  }
  EXPECT_LT(training_error(trained, data), training_error(init, data));
}

TEST(Runners, GradcheckCoversEveryCase) {
  ExperimentConfig cfg = tiny(Command::gradcheck);
  cfg.gradcheck.batch = 4;
  const Dataset data = build_dataset(cfg.data, cfg.seed);
  const GradcheckSummary s = run_gradcheck(cfg, data, RngKey(3));
  // 3 modes x 5 strategies minus dropconnect/lrt, and 3 modes x 4 LSTM strategies.
  EXPECT_EQ(s.cases.size(), 14u + 12u);
  EXPECT_EQ(s.skipped.size(), 1u + 3u);
  EXPECT_TRUE(s.pass) << s.max_dense << " " << s.max_lstm;
  for (const auto& c : s.cases) EXPECT_GT(c.report.checked, 0);
}

TEST(Runners, BenchCountsMatmuls) {
  ExperimentConfig cfg = tiny(Command::bench);
  cfg.bench = {.batch = 64, .repeats = 3, .warmup = 1};
  const Dataset data = build_dataset(cfg.data, cfg.seed);
  const Network net = build_network(cfg.net, data, cfg.seed);
  const BenchResult r = run_bench(net, data.inputs.topRows(64), cfg.bench, RngKey(1));
  EXPECT_EQ(r.layers, 2u);
  EXPECT_EQ(r.shared_matmuls, 2u);
  EXPECT_EQ(r.flipout_matmuls, 4u);
  EXPECT_GT(r.shared_ms, 0);
  EXPECT_GT(r.ratio, 0);
}

TEST(Runners, InvalidConfigLeavesErrorRecord) {
  const auto dir = std::filesystem::temp_directory_path() / "flipout_test_config_error";
  std::filesystem::remove_all(dir);
  ExperimentConfig cfg = default_config(Command::bench);
  cfg.out = dir.string();
  cfg.bench.repeats = 0;
  std::ostringstream log, err;
  EXPECT_EQ(run_command(cfg, log, err), 2);
  const auto j = nlohmann::json::parse(err.str());
  EXPECT_EQ(j["error"]["kind"], "config");
  EXPECT_TRUE(std::filesystem::exists(dir / "error.json"));
  EXPECT_FALSE(std::filesystem::exists(dir / "manifest.json"));
  std::filesystem::remove_all(dir);
}
