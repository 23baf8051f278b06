#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "embolite/manifest.hpp"
#include "embolite/metrics.hpp"
#include "embolite/phantom.hpp"
#include "embolite/preprocess.hpp"
#include "embolite/stage1_unet.hpp"
#include "embolite/stage2_detector.hpp"
#include "json.hpp"

namespace embolite {

struct PhantomSetConfig {
  std::map<std::string, int> splits{{"train", 24}, {"val", 12}, {"test", 12}};
  // positives : negatives within every split
  int ratio_positive = 1;
  int ratio_negative = 1;
  int depth = 64;
  int height = 64;
  int width = 64;
  double slice_spacing_mm = 2.0;
  int vessel_count = 4;
  int emboli_min = 1;
  int emboli_max = 2;
  double contrast_delta = 160.0;
  int solid_margin_slices = 4;
  double embolus_z_band = 0.3;
  // Positives cycle through these tiers in order.
  std::vector<Severity> severities{Severity::subsegmental, Severity::segmental, Severity::lobar, Severity::saddle};
  // Noise sigma per profile; studies cycle through them by name.
  std::map<std::string, double> noise_profiles{{"sharp", 35.0}, {"smooth", 12.0}, {"standard", 20.0}};
};

struct EvalConfig {
  std::string split = "test";
  double threshold = 0.5;
};

struct AblationConfig {
  // Names of the form ENC+AGG+LOSS, e.g. "CL+Max+F".
  std::vector<std::string> variants{"C+SA+B", "CL+SA+B", "CL+MSA+B", "CL+Mean+B", "CL+Max+B", "CL+Max+F"};
  std::vector<int> t_sweep{4, 8, 12, 16};
  std::string t_sweep_variant = "CL+Max+F";
  std::string split = "test";
  int epochs = 0;  // 0 keeps stage2.epochs
  int msa_heads = 4;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";
  std::optional<std::filesystem::path> data_dir;
  PhantomSetConfig phantom;
  PreprocessConfig preprocess;
  UNetConfig unet;
  DetectorConfig detector;
  Stage1TrainConfig stage1;
  Stage2TrainConfig stage2;
  EvalConfig eval;
  AblationConfig ablation;

  std::filesystem::path data_path() const { return data_dir ? *data_dir : output_dir / "data"; }
  std::filesystem::path stage1_dir() const { return output_dir / "stage1"; }
  std::filesystem::path stage2_dir() const { return output_dir / "stage2"; }
  std::filesystem::path eval_dir() const { return output_dir / "eval"; }
  std::filesystem::path ablate_dir() const { return output_dir / "ablate"; }

  // Detector config with T taken from the preprocessing block.
  DetectorConfig detector_config() const;
};

nlohmann::json to_json(const RunConfig& cfg);
// Unknown keys anywhere are ConfigErrors; relative paths resolve against `base_dir`.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
// Reads a config file; EMBOLITE_SEED, when set, replaces the seed.
RunConfig load_run_config(const std::filesystem::path& path);

// Stable per-purpose seed derived from the run seed.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose);

// DetectorConfig for an ENC+AGG+LOSS name on top of `base`.
DetectorConfig parse_variant(const std::string& name, const DetectorConfig& base, int msa_heads = 4);

using Logger = std::function<void(const std::string&)>;

struct CommandOptions {
  bool force = false;
  int jobs = 1;
  Logger log;
};

struct GenDataSummary {
  std::vector<ManifestEntry> entries;
};

GenDataSummary cmd_gen_data(const RunConfig& cfg, const CommandOptions& opt);
Stage1Result cmd_train_stage1(const RunConfig& cfg, const CommandOptions& opt);
Stage2Result cmd_train_stage2(const RunConfig& cfg, const CommandOptions& opt);

struct EvalSummary {
  std::vector<PredictionRow> predictions;
  std::vector<StratumRow> report;
  std::optional<RocCurve> roc;
};
EvalSummary cmd_eval(const RunConfig& cfg, const CommandOptions& opt);

struct AblationRow {
  std::string variant;
  int T = 0;
  double accuracy = 0.0;
  double auc = 0.0;
  double f1 = 0.0;
  std::size_t parameters = 0;
};

struct AblationSummary {
  std::vector<AblationRow> variants;
  std::vector<AblationRow> t_sweep;
};
AblationSummary cmd_ablate(const RunConfig& cfg, const CommandOptions& opt);

// Loads a split and turns each study into a masked span stack with the
// Stage 1 model. Results keep manifest order.
std::vector<StudySample> build_samples(UNet& unet, const std::vector<ManifestEntry>& entries,
                                       const PreprocessConfig& pre, int jobs);

// Runs fn(i) for i in [0, n) on up to `jobs` threads.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

// Parameter counts of the models a config builds.
struct ParameterAudit {
  std::size_t unet = 0;
  std::size_t detector = 0;
};
ParameterAudit audit_parameters(const UNetConfig& unet, const DetectorConfig& detector);

}  // namespace embolite
