#include "embolite/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "embolite/errors.hpp"

namespace embolite {

double ConfusionCounts::accuracy() const {
  return total() == 0 ? 0.0 : static_cast<double>(tp + tn) / static_cast<double>(total());
}

double ConfusionCounts::recall() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn); }

double ConfusionCounts::precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp); }

double ConfusionCounts::f1() const {
  const double p = precision(), r = recall();
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError(fmt::format("{} scores but {} labels", scores.size(), labels.size()));
  }
  if (scores.empty()) throw DataError("metrics need at least one sample");
  for (int l : labels) {
    if (l != 0 && l != 1) throw DataError("labels must be 0 or 1");
  }
}

}  // namespace

ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check_inputs(scores, labels);
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1) {
      (pred ? c.tp : c.fn)++;
    } else {
      (pred ? c.fp : c.tn)++;
    }
  }
  return c;
}

RocCurve auroc(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels);
  const long pos = std::count(labels.begin(), labels.end(), 1);
  const long neg = static_cast<long>(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw DataError("AUC is undefined with a single class");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve roc;
  roc.points.push_back({0.0, 0.0});
  long tp = 0, fp = 0;
  // Twice the area in units of one positive-negative pair.
  long double area2 = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    long dtp = 0, dfp = 0;
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] == 1 ? dtp : dfp)++;
    area2 += static_cast<long double>(dfp) * static_cast<long double>(2 * tp + dtp);
    tp += dtp;
    fp += dfp;
    roc.points.push_back({static_cast<double>(fp) / neg, static_cast<double>(tp) / pos});
  }
  roc.auc = static_cast<double>(area2 / (2.0L * pos * neg));
  return roc;
}

void write_predictions_csv(const std::filesystem::path& path, const std::vector<PredictionRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "study_id,y_hat,label,severity,noise_profile,n_windows\n";
  for (const PredictionRow& r : rows) {
    out << fmt::format("{},{:.10f},{},{},{},{}\n", r.study_id, r.score, r.label, to_string(r.severity),
                       r.noise_profile, r.n_windows);
  }
}

std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("study_id,y_hat,label,severity,noise_profile", 0) != 0) {
    throw DataError(path.string() + ": unexpected predictions header");
  }
  std::vector<PredictionRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() < 5) throw DataError(fmt::format("{}:{}: expected at least 5 fields", path.string(), lineno));
    PredictionRow r;
    try {
      r.study_id = f[0];
      r.score = std::stod(f[1]);
      r.label = std::stoi(f[2]);
      r.severity = severity_from_string(f[3]);
      r.noise_profile = f[4];
      r.n_windows = f.size() > 5 ? std::stoi(f[5]) : 1;
    } catch (const std::logic_error& e) {
      throw DataError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    }
    rows.push_back(r);
  }
  return rows;
}

StratumRow stratum_metrics(const std::string& name, const std::vector<const PredictionRow*>& rows, double threshold) {
  StratumRow s;
  s.stratum = name;
  std::vector<double> scores;
  std::vector<int> labels;
  for (const PredictionRow* r : rows) {
    scores.push_back(r->score);
    labels.push_back(r->label);
    (r->label == 1 ? s.n_pos : s.n_neg)++;
  }
  if (rows.empty()) return s;
  if (s.n_pos > 0 && s.n_neg > 0) s.auc = auroc(scores, labels).auc;
  const ConfusionCounts c = confusion(scores, labels, threshold);
  s.f1 = c.f1();
  s.acc = c.accuracy();
  s.rec = c.recall();
  s.prec = c.precision();
  return s;
}

std::vector<StratumRow> stratified_report(const std::vector<PredictionRow>& rows, double threshold) {
  std::vector<StratumRow> out;
  std::vector<const PredictionRow*> all, negatives;
  for (const PredictionRow& r : rows) {
    all.push_back(&r);
    if (r.label == 0) negatives.push_back(&r);
  }
  out.push_back(stratum_metrics("overall", all, threshold));

  auto with_negatives = [&](auto pred) {
    std::vector<const PredictionRow*> s;
    for (const PredictionRow& r : rows) {
      if (r.label == 0 || pred(r)) s.push_back(&r);
    }
    return s;
  };
  for (Severity sev : {Severity::subsegmental, Severity::segmental, Severity::lobar, Severity::saddle}) {
    const bool present = std::any_of(rows.begin(), rows.end(), [&](const auto& r) { return r.label == 1 && r.severity == sev; });
    if (!present) continue;
    out.push_back(stratum_metrics("severity:" + to_string(sev),
                                  with_negatives([&](const PredictionRow& r) { return r.severity == sev; }), threshold));
  }
  const bool any_pos = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.label == 1; });
  if (any_pos) {
    out.push_back(stratum_metrics(
        "severity:high", with_negatives([](const PredictionRow& r) { return is_high_severity(r.severity); }), threshold));
    out.push_back(stratum_metrics("severity:low", with_negatives([](const PredictionRow& r) {
                                    return r.severity == Severity::subsegmental || r.severity == Severity::segmental;
                                  }),
                                  threshold));
  }

  std::map<std::string, std::vector<const PredictionRow*>> by_noise;
  for (const PredictionRow& r : rows) by_noise[r.noise_profile].push_back(&r);
  for (const auto& [profile, members] : by_noise) out.push_back(stratum_metrics("noise:" + profile, members, threshold));
  return out;
}

namespace {

std::string auc_cell(const std::optional<double>& auc) { return auc ? fmt::format("{:.6f}", *auc) : "N/A"; }

}  // namespace

void write_report_csv(const std::filesystem::path& path, const std::vector<StratumRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "stratum,n_pos,n_neg,auc,f1,acc,rec,prec\n";
  for (const StratumRow& r : rows) {
    out << fmt::format("{},{},{},{},{:.6f},{:.6f},{:.6f},{:.6f}\n", r.stratum, r.n_pos, r.n_neg, auc_cell(r.auc), r.f1,
                       r.acc, r.rec, r.prec);
  }
}

std::string format_report_table(const std::vector<StratumRow>& rows) {
  std::string s = fmt::format("{:<24} {:>5} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "stratum", "n_pos", "n_neg", "auc",
                              "f1", "acc", "rec", "prec");
  for (const StratumRow& r : rows) {
    s += fmt::format("{:<24} {:>5} {:>5} {:>8} {:>8.4f} {:>8.4f} {:>8.4f} {:>8.4f}\n", r.stratum, r.n_pos, r.n_neg,
                     r.auc ? fmt::format("{:.4f}", *r.auc) : "N/A", r.f1, r.acc, r.rec, r.prec);
  }
  return s;
}

void write_roc_csv(const std::filesystem::path& path, const RocCurve& roc) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "fpr,tpr\n";
  for (const RocPoint& p : roc.points) out << fmt::format("{:.8f},{:.8f}\n", p.fpr, p.tpr);
}

}  // namespace embolite
