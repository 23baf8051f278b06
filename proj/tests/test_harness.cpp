#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "embolite/errors.hpp"
#include "embolite/harness.hpp"

using namespace embolite;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("embolite_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t line_count(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

RunConfig tiny(const fs::path& out) {
  RunConfig c;
  c.seed = 11;
  c.output_dir = out;
  c.phantom.splits = {{"train", 6}, {"val", 4}, {"test", 4}};
  c.phantom.depth = c.phantom.height = c.phantom.width = 32;
  c.phantom.solid_margin_slices = 2;
  c.preprocess.crop = 24;
  c.preprocess.resize = 16;
  c.preprocess.T = 8;
  c.preprocess.overlap = 2;
  c.unet.depth = 2;
  c.unet.base_channels = 4;
  c.detector.hidden = 8;
  c.detector.pool_kernel = 4;
  c.detector.attention_dim = 16;
  c.stage1.epochs = 2;
  c.stage1.batch_size = 4;
  c.stage2.epochs = 2;
  c.stage2.batch_size = 2;
  c.ablation.variants = {"CL+Max+F", "C+SA+B", "CL+Max+F"};
  c.ablation.t_sweep = {4, 8};
  c.ablation.msa_heads = 2;
  return c;
}

}  // namespace

TEST_CASE("config json round trip") {
  RunConfig c = tiny("/tmp/x");
  c.preprocess.mask_threshold = 0.4;
  c.data_dir = "/tmp/data";
  const json j = to_json(c);
  const RunConfig back = run_config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.preprocess.mask_threshold.value() == doctest::Approx(0.4));
  CHECK(back.data_path() == fs::path("/tmp/data"));
  CHECK(to_json(run_config_from_json(json::object())) == to_json(RunConfig{}));
}

TEST_CASE("config rejects unknown keys and bad values") {
  CHECK_THROWS_AS(run_config_from_json(json{{"sed", 1}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"stage1", {{"epoch", 3}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"detector", {{"aggregation", "median"}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"stage2", {{"epochs", "many"}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"preprocess", {{"T", 4}, {"overlap", 4}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"ablation", {{"variants", {"CL+Top+F"}}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"phantom", {{"ratio", {1}}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json::array()), ConfigError);
}

TEST_CASE("relative paths resolve against the config directory") {
  const RunConfig c = run_config_from_json(json{{"output_dir", "runs/a"}}, "/etc/cfg");
  CHECK(c.output_dir == fs::path("/etc/cfg/runs/a"));
  CHECK(c.data_path() == fs::path("/etc/cfg/runs/a/data"));
}

TEST_CASE("EMBOLITE_SEED overrides the config seed") {
  const fs::path dir = scratch("seed");
  fs::create_directories(dir);
  std::ofstream(dir / "c.json") << R"({"seed": 5})";
  ::unsetenv("EMBOLITE_SEED");
  CHECK(load_run_config(dir / "c.json").seed == 5);
  ::setenv("EMBOLITE_SEED", "123", 1);
  CHECK(load_run_config(dir / "c.json").seed == 123);
  ::setenv("EMBOLITE_SEED", "12x", 1);
  CHECK_THROWS_AS(load_run_config(dir / "c.json"), ConfigError);
  ::unsetenv("EMBOLITE_SEED");
  CHECK_THROWS_AS(load_run_config(dir / "missing.json"), ConfigError);
}

TEST_CASE("variant names") {
  const DetectorConfig base;
  for (const char* name : {"C+SA+B", "CL+SA+B", "CL+Mean+B", "CL+Max+B", "CL+Max+F"}) {
    CHECK(parse_variant(name, base).variant_name() == name);
  }
  const DetectorConfig msa = parse_variant("CL+MSA+B", base, 4);
  CHECK(msa.attention_heads == 4);
  CHECK(msa.aggregation == Aggregation::self_attention);
  CHECK(parse_variant("C+Mean+F", base).instance_encoder == InstanceEncoder::conv_only);
  CHECK_THROWS_AS(parse_variant("CL+Max", base), ConfigError);
  CHECK_THROWS_AS(parse_variant("X+Max+F", base), ConfigError);
  CHECK_THROWS_AS(parse_variant("CL+Max+Q", base), ConfigError);
  CHECK_THROWS_AS(parse_variant("CL+MSA+B", base, 1), ConfigError);
}

TEST_CASE("derived seeds are stable and purpose specific") {
  CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
  CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
  CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
}

TEST_CASE("parallel_for keeps index order and rethrows") {
  std::vector<int> out(50, -1);
  parallel_for(out.size(), 4, [&](std::size_t i) { out[i] = static_cast<int>(i * i); });
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == static_cast<int>(i * i));
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [](std::size_t i) {
                                 if (i == 7) throw DataError("boom");
                               }),
                  DataError);
  parallel_for(0, 4, [](std::size_t) { FAIL("called"); });
}

TEST_CASE("gen-data manifest counts and splits") {
  RunConfig c = tiny(scratch("gen"));
  c.phantom.splits = {{"train", 4}, {"val", 4}, {"test", 4}};
  const GenDataSummary s = cmd_gen_data(c, {});
  const auto m = dataset_manifest(c.data_path());
  CHECK(m.size() == 12);
  for (const char* split : {"train", "val", "test"}) CHECK(filter_split(m, split).size() == 4);
  CHECK(m.front().study_id == "test_000");
  for (const auto& e : m) {
    CHECK(e.label.positive == (e.label.severity != Severity::none));
    CHECK(!e.label.noise_profile.empty());
  }
  CHECK_THROWS_AS(cmd_gen_data(c, {}), ConfigError);
  CommandOptions force;
  force.force = true;
  CHECK(cmd_gen_data(c, force).entries.size() == 12);
}

TEST_CASE("gen-data honours the class ratio exactly") {
  RunConfig c = tiny(scratch("ratio"));
  c.phantom.splits = {{"train", 9}, {"test", 6}};
  c.phantom.ratio_positive = 2;
  c.phantom.ratio_negative = 1;
  cmd_gen_data(c, {});
  const auto m = dataset_manifest(c.data_path());
  auto positives = [](const std::vector<ManifestEntry>& v) {
    return std::count_if(v.begin(), v.end(), [](const auto& e) { return e.label.positive; });
  };
  CHECK(positives(filter_split(m, "train")) == 6);
  CHECK(positives(filter_split(m, "test")) == 4);
}

TEST_CASE("gen-data is reproducible under a fixed seed") {
  RunConfig a = tiny(scratch("repro_a"));
  RunConfig b = tiny(scratch("repro_b"));
  CommandOptions parallel;
  parallel.jobs = 3;
  cmd_gen_data(a, {});
  cmd_gen_data(b, parallel);
  CHECK(slurp(a.data_path() / "manifest.json") == slurp(b.data_path() / "manifest.json"));
  for (const auto& e : dataset_manifest(a.data_path())) {
    CHECK(slurp(e.volume_path) == slurp(b.data_path() / e.volume_path.filename()));
    CHECK(slurp(e.annotation_path) == slurp(b.data_path() / e.annotation_path.filename()));
  }
  RunConfig other = tiny(scratch("repro_c"));
  other.seed = 12;
  cmd_gen_data(other, {});
  CHECK(slurp(a.data_path() / "train_000.embv") != slurp(other.data_path() / "train_000.embv"));
}

TEST_CASE("stage 2 without a stage 1 checkpoint names the missing path") {
  RunConfig c = tiny(scratch("nostage1"));
  cmd_gen_data(c, {});
  try {
    cmd_train_stage2(c, {});
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find((c.stage1_dir() / "best.ckpt").string()) != std::string::npos);
  }
  CHECK_THROWS_AS(cmd_eval(c, {}), DataError);
}

TEST_CASE("tiny pipeline end to end") {
  RunConfig c = tiny(scratch("pipeline"));
  CommandOptions opt;
  opt.jobs = 2;
  cmd_gen_data(c, opt);

  const Stage1Result s1 = cmd_train_stage1(c, opt);
  CHECK(s1.history.size() == 2);
  const Stage2Result s2 = cmd_train_stage2(c, opt);
  CHECK(s2.history.size() == 2);
  for (const fs::path& dir : {c.stage1_dir(), c.stage2_dir()}) {
    for (const char* f : {"config.json", "metrics.csv", "best.ckpt", "final.ckpt"}) CHECK(fs::exists(dir / f));
    CHECK(line_count(dir / "metrics.csv") == 3);
    // config.json alone rebuilds the run
    std::ifstream in(dir / "config.json");
    CHECK(to_json(run_config_from_json(json::parse(in))) == to_json(c));
  }

  const EvalSummary ev = cmd_eval(c, opt);
  CHECK(ev.predictions.size() == 4);
  CHECK(line_count(c.eval_dir() / "predictions.csv") == 5);
  REQUIRE(ev.roc.has_value());
  CHECK(ev.roc->points.front().fpr == 0.0);
  CHECK(ev.roc->points.front().tpr == 0.0);
  CHECK(ev.roc->points.back().fpr == 1.0);
  CHECK(ev.roc->points.back().tpr == 1.0);
  CHECK(ev.report.front().stratum == "overall");
  CHECK(fs::exists(c.eval_dir() / "report.csv"));
  CHECK(fs::exists(c.eval_dir() / "roc.csv"));

  RunConfig missing = c;
  missing.eval.split = "holdout";
  CHECK_THROWS_AS(cmd_eval(missing, opt), DataError);

  const std::string s1_metrics = slurp(c.stage1_dir() / "metrics.csv");
  cmd_train_stage1(c, {});
  CHECK(slurp(c.stage1_dir() / "metrics.csv") == s1_metrics);

  const AblationSummary ab = cmd_ablate(c, opt);
  REQUIRE(ab.variants.size() == 3);
  CHECK(ab.variants[0].accuracy == ab.variants[2].accuracy);
  CHECK(ab.variants[0].auc == ab.variants[2].auc);
  CHECK(ab.variants[0].f1 == ab.variants[2].f1);
  CHECK(ab.t_sweep.size() == 2);
  CHECK(ab.t_sweep[1].auc == ab.variants[0].auc);
  CHECK(line_count(c.ablate_dir() / "table.csv") == 4);
  CHECK(line_count(c.ablate_dir() / "t_sweep.csv") == 3);
  CHECK(fs::exists(c.ablate_dir() / "runs" / "CL+Max+F_T4" / "best.ckpt"));
  CHECK(ab.variants[0].parameters != ab.variants[1].parameters);
}

TEST_CASE("parameter audit matches model builders") {
  UNetConfig u;
  DetectorConfig d;
  const ParameterAudit a = audit_parameters(u, d);
  Rng rng(1);
  CHECK(a.unet == UNet(u, rng).parameter_count());
  CHECK(a.detector == Detector(d, rng).parameter_count());
}
