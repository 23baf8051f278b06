#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "embolite/volume.hpp"

namespace embolite {

struct ConfusionCounts {
  long tp = 0, fp = 0, fn = 0, tn = 0;

  long total() const { return tp + fp + fn + tn; }
  double accuracy() const;
  double recall() const;     // 0 when there are no positives
  double precision() const;  // 0 when nothing is predicted positive
  double f1() const;
};

// score >= threshold is a positive prediction.
ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // (0,0) ... (1,1)
  double auc = 0.0;
};

// Threshold sweep over distinct scores, equal scores forming one step,
// trapezoidal area. Throws DataError unless both classes are present.
RocCurve auroc(std::span<const double> scores, std::span<const int> labels);

// One row of predictions.csv.
struct PredictionRow {
  std::string study_id;
  double score = 0.0;
  int label = 0;
  Severity severity = Severity::none;
  std::string noise_profile;
  int n_windows = 1;
};

void write_predictions_csv(const std::filesystem::path& path, const std::vector<PredictionRow>& rows);
std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path);

struct StratumRow {
  std::string stratum;
  long n_pos = 0;
  long n_neg = 0;
  std::optional<double> auc;  // absent for single-class strata
  double f1 = 0.0, acc = 0.0, rec = 0.0, prec = 0.0;
};

// Strata: "overall"; "severity:<tier>" for each tier present, plus
// "severity:high" (lobar, saddle) and "severity:low" (subsegmental,
// segmental), each holding that tier's positives and all negatives;
// "noise:<profile>" grouping every study by noise profile.
std::vector<StratumRow> stratified_report(const std::vector<PredictionRow>& rows, double threshold = 0.5);
StratumRow stratum_metrics(const std::string& name, const std::vector<const PredictionRow*>& rows, double threshold);

// stratum,n_pos,n_neg,auc,f1,acc,rec,prec
void write_report_csv(const std::filesystem::path& path, const std::vector<StratumRow>& rows);
std::string format_report_table(const std::vector<StratumRow>& rows);

void write_roc_csv(const std::filesystem::path& path, const RocCurve& roc);

}  // namespace embolite
