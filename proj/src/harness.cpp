#include "embolite/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <set>
#include <thread>

#include <fmt/format.h>

#include "embolite/checkpoint.hpp"
#include "embolite/errors.hpp"
#include "embolite/gemm.hpp"

namespace embolite {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// JSON object reader that remembers which keys were consumed, so leftovers
// can be reported as typos.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(fmt::format("{}{}: {}", where(), key, e.what()));
    }
  }

  template <class T, class Conv>
  void get_as(const char* key, T& out, Conv conv) {
    std::string s;
    get(key, s);
    if (j_.contains(key)) out = conv(s);
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string child_path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(fmt::format("unknown config key '{}'", path_.empty() ? k : path_ + "." + k));
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : path_ + ": "; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Fn>
void with_section(Section& parent, const char* key, Fn fn) {
  if (const json* j = parent.child(key)) {
    Section s(*j, parent.child_path(key));
    fn(s);
    s.finish();
  }
}

fs::path resolve(const fs::path& base, const fs::path& p) { return p.is_absolute() || base.empty() ? p : base / p; }

void log_line(const CommandOptions& opt, const std::string& msg) {
  if (opt.log) opt.log(msg);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace

DetectorConfig RunConfig::detector_config() const {
  DetectorConfig d = detector;
  d.T = preprocess.T;
  d.input_size = preprocess.resize;
  return d;
}

json to_json(const RunConfig& c) {
  json severities = json::array();
  for (Severity s : c.phantom.severities) severities.push_back(to_string(s));
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.generic_string();
  if (c.data_dir) j["data_dir"] = c.data_dir->generic_string();
  j["phantom"] = {{"splits", c.phantom.splits},
                  {"ratio", {c.phantom.ratio_positive, c.phantom.ratio_negative}},
                  {"depth", c.phantom.depth},
                  {"height", c.phantom.height},
                  {"width", c.phantom.width},
                  {"slice_spacing_mm", c.phantom.slice_spacing_mm},
                  {"vessel_count", c.phantom.vessel_count},
                  {"emboli_per_positive", {c.phantom.emboli_min, c.phantom.emboli_max}},
                  {"contrast_delta", c.phantom.contrast_delta},
                  {"solid_margin_slices", c.phantom.solid_margin_slices},
                  {"embolus_z_band", c.phantom.embolus_z_band},
                  {"severities", severities},
                  {"noise_profiles", c.phantom.noise_profiles}};
  j["preprocess"] = {{"target_spacing_mm", c.preprocess.target_spacing_mm},
                     {"window_low", c.preprocess.window_low},
                     {"window_high", c.preprocess.window_high},
                     {"crop", c.preprocess.crop},
                     {"resize", c.preprocess.resize},
                     {"T", c.preprocess.T},
                     {"overlap", c.preprocess.overlap},
                     {"mask_threshold", c.preprocess.mask_threshold ? json(*c.preprocess.mask_threshold) : json(nullptr)}};
  j["unet"] = {{"depth", c.unet.depth}, {"base_channels", c.unet.base_channels}};
  j["detector"] = {{"aggregation", to_string(c.detector.aggregation)},
                   {"attention_heads", c.detector.attention_heads},
                   {"attention_dim", c.detector.attention_dim},
                   {"loss", to_string(c.detector.loss)},
                   {"focal_gamma", c.detector.focal_gamma},
                   {"instance_encoder", to_string(c.detector.instance_encoder)},
                   {"hidden", c.detector.hidden},
                   {"pool_kernel", c.detector.pool_kernel}};
  j["stage1"] = {{"epochs", c.stage1.epochs},
                 {"batch_size", c.stage1.batch_size},
                 {"learning_rate", c.stage1.learning_rate},
                 {"weight_decay", c.stage1.weight_decay},
                 {"negatives_per_positive", c.stage1.negatives_per_positive},
                 {"negatives_per_negative_study", c.stage1.negatives_per_negative_study},
                 {"scheduler_patience", c.stage1.scheduler_patience},
                 {"scheduler_decay", c.stage1.scheduler_decay},
                 {"min_learning_rate", c.stage1.min_learning_rate},
                 {"fast_matmul", c.stage1.fast_matmul},
                 {"augment", c.stage1.augment}};
  j["stage2"] = {{"epochs", c.stage2.epochs},
                 {"batch_size", c.stage2.batch_size},
                 {"learning_rate", c.stage2.learning_rate},
                 {"weight_decay", c.stage2.weight_decay},
                 {"scheduler_patience", c.stage2.scheduler_patience},
                 {"scheduler_decay", c.stage2.scheduler_decay},
                 {"min_learning_rate", c.stage2.min_learning_rate},
                 {"threshold", c.stage2.threshold},
                 {"max_grad_norm", c.stage2.max_grad_norm},
                 {"random_negative_windows", c.stage2.random_negative_windows},
                 {"fast_matmul", c.stage2.fast_matmul}};
  j["eval"] = {{"split", c.eval.split}, {"threshold", c.eval.threshold}};
  j["ablation"] = {{"variants", c.ablation.variants},       {"t_sweep", c.ablation.t_sweep},
                   {"t_sweep_variant", c.ablation.t_sweep_variant}, {"split", c.ablation.split},
                   {"epochs", c.ablation.epochs},           {"msa_heads", c.ablation.msa_heads}};
  return j;
}

RunConfig run_config_from_json(const json& j, const fs::path& base_dir) {
  RunConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  std::string out = c.output_dir.string();
  root.get("output_dir", out);
  c.output_dir = resolve(base_dir, out);
  if (j.contains("data_dir")) {
    std::string d;
    root.get("data_dir", d);
    c.data_dir = resolve(base_dir, d);
  } else {
    root.child("data_dir");
  }

  with_section(root, "phantom", [&](Section& s) {
    PhantomSetConfig& p = c.phantom;
    s.get("splits", p.splits);
    std::vector<int> ratio{p.ratio_positive, p.ratio_negative};
    s.get("ratio", ratio);
    if (ratio.size() != 2 || ratio[0] < 0 || ratio[1] < 0 || ratio[0] + ratio[1] == 0) {
      throw ConfigError("phantom.ratio must be [positives, negatives] with a positive sum");
    }
    p.ratio_positive = ratio[0];
    p.ratio_negative = ratio[1];
    s.get("depth", p.depth);
    s.get("height", p.height);
    s.get("width", p.width);
    s.get("slice_spacing_mm", p.slice_spacing_mm);
    s.get("vessel_count", p.vessel_count);
    std::vector<int> emboli{p.emboli_min, p.emboli_max};
    s.get("emboli_per_positive", emboli);
    if (emboli.size() != 2 || emboli[0] < 1 || emboli[1] < emboli[0]) {
      throw ConfigError("phantom.emboli_per_positive must be [min, max] with 1 <= min <= max");
    }
    p.emboli_min = emboli[0];
    p.emboli_max = emboli[1];
    s.get("contrast_delta", p.contrast_delta);
    s.get("solid_margin_slices", p.solid_margin_slices);
    s.get("embolus_z_band", p.embolus_z_band);
    if (s.child("severities")) {
      std::vector<std::string> names;
      s.get("severities", names);
      p.severities.clear();
      for (const auto& n : names) {
        const Severity sev = severity_from_string(n);
        if (sev == Severity::none) throw ConfigError("phantom.severities cannot contain 'none'");
        p.severities.push_back(sev);
      }
      if (p.severities.empty()) throw ConfigError("phantom.severities must not be empty");
    }
    s.get("noise_profiles", p.noise_profiles);
    if (p.noise_profiles.empty()) throw ConfigError("phantom.noise_profiles must not be empty");
    for (const auto& [name, sigma] : p.noise_profiles) {
      if (sigma < 0) throw ConfigError("noise profile '" + name + "' has a negative sigma");
    }
  });

  with_section(root, "preprocess", [&](Section& s) {
    PreprocessConfig& p = c.preprocess;
    s.get("target_spacing_mm", p.target_spacing_mm);
    s.get("window_low", p.window_low);
    s.get("window_high", p.window_high);
    s.get("crop", p.crop);
    s.get("resize", p.resize);
    s.get("T", p.T);
    s.get("overlap", p.overlap);
    if (const json* t = s.child("mask_threshold"); t && !t->is_null()) {
      double v = 0;
      s.get("mask_threshold", v);
      p.mask_threshold = v;
    }
  });

  with_section(root, "unet", [&](Section& s) {
    s.get("depth", c.unet.depth);
    s.get("base_channels", c.unet.base_channels);
  });

  with_section(root, "detector", [&](Section& s) {
    DetectorConfig& d = c.detector;
    s.get_as("aggregation", d.aggregation, aggregation_from_string);
    s.get("attention_heads", d.attention_heads);
    s.get("attention_dim", d.attention_dim);
    s.get_as("loss", d.loss, loss_from_string);
    s.get("focal_gamma", d.focal_gamma);
    s.get_as("instance_encoder", d.instance_encoder, encoder_from_string);
    s.get("hidden", d.hidden);
    s.get("pool_kernel", d.pool_kernel);
  });

  with_section(root, "stage1", [&](Section& s) {
    Stage1TrainConfig& t = c.stage1;
    s.get("epochs", t.epochs);
    s.get("batch_size", t.batch_size);
    s.get("learning_rate", t.learning_rate);
    s.get("weight_decay", t.weight_decay);
    s.get("negatives_per_positive", t.negatives_per_positive);
    s.get("negatives_per_negative_study", t.negatives_per_negative_study);
    s.get("scheduler_patience", t.scheduler_patience);
    s.get("scheduler_decay", t.scheduler_decay);
    s.get("min_learning_rate", t.min_learning_rate);
    s.get("fast_matmul", t.fast_matmul);
    s.get("augment", t.augment);
  });

  with_section(root, "stage2", [&](Section& s) {
    Stage2TrainConfig& t = c.stage2;
    s.get("epochs", t.epochs);
    s.get("batch_size", t.batch_size);
    s.get("learning_rate", t.learning_rate);
    s.get("weight_decay", t.weight_decay);
    s.get("scheduler_patience", t.scheduler_patience);
    s.get("scheduler_decay", t.scheduler_decay);
    s.get("min_learning_rate", t.min_learning_rate);
    s.get("threshold", t.threshold);
    s.get("max_grad_norm", t.max_grad_norm);
    s.get("random_negative_windows", t.random_negative_windows);
    s.get("fast_matmul", t.fast_matmul);
  });

  with_section(root, "eval", [&](Section& s) {
    s.get("split", c.eval.split);
    s.get("threshold", c.eval.threshold);
  });

  with_section(root, "ablation", [&](Section& s) {
    s.get("variants", c.ablation.variants);
    s.get("t_sweep", c.ablation.t_sweep);
    s.get("t_sweep_variant", c.ablation.t_sweep_variant);
    s.get("split", c.ablation.split);
    s.get("epochs", c.ablation.epochs);
    s.get("msa_heads", c.ablation.msa_heads);
  });
  root.finish();

  c.unet.validate();
  c.detector_config().validate();
  if (c.preprocess.overlap < 0 || c.preprocess.overlap >= c.preprocess.T) {
    throw ConfigError("preprocess.overlap must satisfy 0 <= overlap < T");
  }
  if (c.preprocess.crop < c.preprocess.resize) throw ConfigError("preprocess.crop must be >= preprocess.resize");
  for (const auto& v : c.ablation.variants) parse_variant(v, c.detector_config(), c.ablation.msa_heads);
  parse_variant(c.ablation.t_sweep_variant, c.detector_config(), c.ablation.msa_heads);
  for (int t : c.ablation.t_sweep) {
    if (t < 1) throw ConfigError(fmt::format("t_sweep value {} must be positive", t));
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  RunConfig cfg = run_config_from_json(j, path.parent_path());
  if (const char* env = std::getenv("EMBOLITE_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      cfg.seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
    } catch (const std::logic_error&) {
      throw ConfigError(fmt::format("EMBOLITE_SEED='{}' is not an unsigned integer", env));
    }
  }
  return cfg;
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : purpose) h = (h ^ ch) * 1099511628211ULL;
  std::uint64_t z = seed + h + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

DetectorConfig parse_variant(const std::string& name, const DetectorConfig& base, int msa_heads) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : name) {
    if (ch == '+') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  parts.push_back(cur);
  if (parts.size() != 3) throw ConfigError("variant '" + name + "' is not ENCODER+AGGREGATION+LOSS");
  DetectorConfig d = base;
  if (parts[0] == "CL") {
    d.instance_encoder = InstanceEncoder::convlstm;
  } else if (parts[0] == "C") {
    d.instance_encoder = InstanceEncoder::conv_only;
  } else {
    throw ConfigError("variant '" + name + "': encoder must be CL or C");
  }
  if (parts[1] == "Max") {
    d.aggregation = Aggregation::max;
  } else if (parts[1] == "Mean") {
    d.aggregation = Aggregation::mean;
  } else if (parts[1] == "SA") {
    d.aggregation = Aggregation::self_attention;
    d.attention_heads = 1;
  } else if (parts[1] == "MSA") {
    d.aggregation = Aggregation::self_attention;
    d.attention_heads = msa_heads;
    if (msa_heads < 2) throw ConfigError("MSA variants need ablation.msa_heads >= 2");
  } else {
    throw ConfigError("variant '" + name + "': aggregation must be Max, Mean, SA or MSA");
  }
  if (parts[2] == "B") {
    d.loss = LossKind::bce;
  } else if (parts[2] == "F") {
    d.loss = LossKind::focal;
  } else {
    throw ConfigError("variant '" + name + "': loss must be B or F");
  }
  d.validate();
  return d;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const Precision precision = matmul_precision();
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      PrecisionScope scope(precision);
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

ParameterAudit audit_parameters(const UNetConfig& unet, const DetectorConfig& detector) {
  Rng rng(0);
  ParameterAudit a;
  a.unet = UNet(unet, rng).parameter_count();
  a.detector = Detector(detector, rng).parameter_count();
  return a;
}

GenDataSummary cmd_gen_data(const RunConfig& cfg, const CommandOptions& opt) {
  const fs::path dir = cfg.data_path();
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!opt.force) throw ConfigError("output directory " + dir.string() + " is not empty; pass --force to overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  const PhantomSetConfig& p = cfg.phantom;

  struct Job {
    PhantomSpec spec;
    std::string split;
  };
  std::vector<Job> jobs;
  Rng rng(derive_seed(cfg.seed, "gen-data"));
  std::vector<std::string> profiles;
  for (const auto& [name, sigma] : p.noise_profiles) profiles.push_back(name);
  for (const auto& [split, count] : p.splits) {
    if (count < 0) throw ConfigError("split '" + split + "' has a negative study count");
    const int total_ratio = p.ratio_positive + p.ratio_negative;
    const int n_pos = static_cast<int>(std::lround(static_cast<double>(count) * p.ratio_positive / total_ratio));
    std::vector<int> labels(static_cast<std::size_t>(count), 0);
    std::fill(labels.begin(), labels.begin() + n_pos, 1);
    for (std::size_t i = labels.size(); i > 1; --i) {
      std::swap(labels[i - 1], labels[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }
    int positives = 0, negatives = 0;
    for (int i = 0; i < count; ++i) {
      const bool positive = labels[static_cast<std::size_t>(i)] == 1;
      // Profiles cycle within each class so every profile sees both labels.
      const int profile_index = positive ? positives : negatives++;
      PhantomSpec s;
      s.depth = p.depth;
      s.height = p.height;
      s.width = p.width;
      s.slice_spacing_mm = p.slice_spacing_mm;
      s.vessel_count = p.vessel_count;
      s.contrast_delta = p.contrast_delta;
      s.solid_margin_slices = p.solid_margin_slices;
      s.embolus_z_band = p.embolus_z_band;
      s.noise_profile = profiles[static_cast<std::size_t>(profile_index) % profiles.size()];
      s.noise_sigma = p.noise_profiles.at(s.noise_profile);
      s.seed = rng.next();
      s.study_id = fmt::format("{}_{:03d}", split, i);
      if (positive) {
        s.severity = p.severities[static_cast<std::size_t>(positives++) % p.severities.size()];
        s.embolus_count = rng.uniform_int(p.emboli_min, p.emboli_max);
        severity_radius_range(s.severity, s.embolus_radius_min, s.embolus_radius_max);
      }
      jobs.push_back({s, split});
    }
  }

  GenDataSummary summary;
  summary.entries.resize(jobs.size());
  parallel_for(jobs.size(), opt.jobs, [&](std::size_t i) {
    const Job& job = jobs[i];
    Phantom ph = generate_phantom(job.spec);
    const std::string vol = job.spec.study_id + ".embv";
    const std::string ann = job.spec.study_id + ".emba";
    save_volume(ph.volume, dir / vol);
    save_annotation(ph.annotation, ph.volume.depth(), dir / ann);
    summary.entries[i] = ManifestEntry{job.spec.study_id, vol, ann, ph.label, job.split};
  });
  write_manifest(dir, summary.entries);
  long pos = 0;
  for (const auto& e : summary.entries) pos += e.label.positive ? 1 : 0;
  log_line(opt, fmt::format("gen-data: {} studies ({} positive) in {}", summary.entries.size(), pos, dir.string()));
  return summary;
}

namespace {

std::vector<ManifestEntry> require_split(const std::vector<ManifestEntry>& all, const std::string& split) {
  auto part = filter_split(all, split);
  if (part.empty()) throw DataError("split '" + split + "' is not present in the manifest");
  return part;
}

std::vector<PreparedStudy> prepare_entries(const std::vector<ManifestEntry>& entries, const PreprocessConfig& pre,
                                           int jobs) {
  std::vector<PreparedStudy> out(entries.size());
  parallel_for(entries.size(), jobs, [&](std::size_t i) {
    const ManifestEntry& e = entries[i];
    out[i] = prepare_study(load_volume(e.volume_path), load_annotation(e.annotation_path), e.label, pre);
  });
  return out;
}

fs::path require_file(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p)) throw DataError("missing " + p.string() + "; " + hint);
  return p;
}

void prepare_run_dir(const fs::path& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  for (const char* f : {"metrics.csv", "best.ckpt", "final.ckpt"}) fs::remove(dir / f);
  write_json(dir / "config.json", to_json(cfg));
}

UNet load_unet(const RunConfig& cfg) {
  const fs::path path = require_file(cfg.stage1_dir() / "best.ckpt", "run train-stage1 first");
  Rng rng(0);
  UNet net(cfg.unet, rng);
  nn::StateDict sd = net.state();
  restore_state(load_checkpoint(path), sd);
  return net;
}

void check_unet_input(const RunConfig& cfg) {
  cfg.unet.check_input(cfg.phantom.height, cfg.phantom.width);
}

}  // namespace

std::vector<StudySample> build_samples(UNet& unet, const std::vector<ManifestEntry>& entries,
                                       const PreprocessConfig& pre, int jobs) {
  PrecisionScope precision(Precision::f32);
  std::vector<StudySample> out(entries.size());
  parallel_for(entries.size(), jobs, [&](std::size_t i) {
    const ManifestEntry& e = entries[i];
    PreparedStudy s = prepare_study(load_volume(e.volume_path), load_annotation(e.annotation_path), e.label, pre);
    Tensor mask = predict_volume_mask(unet, s.volume);
    StudySample& smp = out[i];
    smp.study_id = e.study_id;
    smp.label = e.label.positive ? 1 : 0;
    smp.severity = e.label.severity;
    smp.noise_profile = e.label.noise_profile;
    smp.stack = masked_stack(s.volume, mask, s.span, pre.crop, pre.resize, pre.mask_threshold);
  });
  return out;
}

Stage1Result cmd_train_stage1(const RunConfig& cfg, const CommandOptions& opt) {
  check_unet_input(cfg);
  const auto all = dataset_manifest(cfg.data_path());
  const auto train = prepare_entries(require_split(all, "train"), cfg.preprocess, opt.jobs);
  const auto val = prepare_entries(filter_split(all, "val"), cfg.preprocess, opt.jobs);
  Rng rng(derive_seed(cfg.seed, "stage1.init"));
  UNet net(cfg.unet, rng);
  log_line(opt, fmt::format("stage1: unet depth {} base {} has {} parameters", cfg.unet.depth, cfg.unet.base_channels,
                            net.parameter_count()));
  prepare_run_dir(cfg.stage1_dir(), cfg);
  Stage1TrainConfig t = cfg.stage1;
  t.seed = derive_seed(cfg.seed, "stage1.train");
  Stage1Result r = train_stage1(net, train, val, t, cfg.stage1_dir(), opt.log);
  log_line(opt, fmt::format("stage1: best val dice {:.4f} at epoch {}", r.best_val_dice, r.best_epoch));
  return r;
}

namespace {

// Overlap at another T keeps the configured overlap fraction.
int sweep_overlap(const PreprocessConfig& pre, int T) {
  if (T == pre.T) return pre.overlap;
  const int o = static_cast<int>(std::lround(static_cast<double>(pre.overlap) * T / pre.T));
  return std::clamp(o, 0, T - 1);
}

Stage2Result train_variant(const DetectorConfig& dcfg, const RunConfig& cfg, int epochs,
                           const std::vector<StudySample>& train, const std::vector<StudySample>& val,
                           const fs::path& dir, const CommandOptions& opt, std::size_t* params = nullptr) {
  Rng rng(derive_seed(cfg.seed, "stage2.init"));
  Detector det(dcfg, rng);
  log_line(opt, fmt::format("stage2: detector {} (T={}) has {} parameters", dcfg.variant_name(), dcfg.T,
                            det.parameter_count()));
  if (params) *params = det.parameter_count();
  RunConfig written = cfg;
  written.detector = dcfg;
  written.preprocess.T = dcfg.T;
  written.preprocess.overlap = sweep_overlap(cfg.preprocess, dcfg.T);
  written.stage2.epochs = epochs;
  prepare_run_dir(dir, written);
  Stage2TrainConfig t = cfg.stage2;
  t.epochs = epochs;
  t.seed = derive_seed(cfg.seed, "stage2.train");
  return train_stage2(det, train, val, t, dir, opt.log);
}

Detector load_detector(const DetectorConfig& dcfg, const fs::path& path) {
  Rng rng(0);
  Detector det(dcfg, rng);
  nn::StateDict sd = det.state();
  restore_state(load_checkpoint(require_file(path, "run train-stage2 first")), sd);
  return det;
}

std::vector<PredictionRow> predict_split(Detector& det, const std::vector<StudySample>& samples, int overlap,
                                         int jobs) {
  PrecisionScope precision(Precision::f32);
  std::vector<PredictionRow> rows(samples.size());
  parallel_for(samples.size(), jobs, [&](std::size_t i) {
    const StudySample& s = samples[i];
    const InferenceResult r = infer_study(det, s, overlap);
    rows[i] = PredictionRow{s.study_id, r.probability, s.label, s.severity, s.noise_profile, r.n_windows};
  });
  return rows;
}

}  // namespace

Stage2Result cmd_train_stage2(const RunConfig& cfg, const CommandOptions& opt) {
  UNet unet = load_unet(cfg);
  const auto all = dataset_manifest(cfg.data_path());
  const auto train = build_samples(unet, require_split(all, "train"), cfg.preprocess, opt.jobs);
  const auto val = build_samples(unet, filter_split(all, "val"), cfg.preprocess, opt.jobs);
  Stage2Result r = train_variant(cfg.detector_config(), cfg, cfg.stage2.epochs, train, val, cfg.stage2_dir(), opt);
  log_line(opt, fmt::format("stage2: best val loss {:.4f} (AUROC {:.4f}) at epoch {}", r.best_val_loss, r.best_val_auroc, r.best_epoch));
  return r;
}

EvalSummary cmd_eval(const RunConfig& cfg, const CommandOptions& opt) {
  UNet unet = load_unet(cfg);
  Detector det = load_detector(cfg.detector_config(), cfg.stage2_dir() / "best.ckpt");
  const auto all = dataset_manifest(cfg.data_path());
  const auto samples = build_samples(unet, require_split(all, cfg.eval.split), cfg.preprocess, opt.jobs);

  EvalSummary out;
  out.predictions = predict_split(det, samples, cfg.preprocess.overlap, opt.jobs);
  out.report = stratified_report(out.predictions, cfg.eval.threshold);
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& r : out.predictions) {
    scores.push_back(r.score);
    labels.push_back(r.label);
  }
  const long pos = std::count(labels.begin(), labels.end(), 1);
  if (pos > 0 && pos < static_cast<long>(labels.size())) out.roc = auroc(scores, labels);

  const fs::path dir = cfg.eval_dir();
  fs::create_directories(dir);
  for (const char* f : {"predictions.csv", "report.csv", "roc.csv"}) fs::remove(dir / f);
  write_json(dir / "config.json", to_json(cfg));
  write_predictions_csv(dir / "predictions.csv", out.predictions);
  write_report_csv(dir / "report.csv", out.report);
  if (out.roc) {
    write_roc_csv(dir / "roc.csv", *out.roc);
  } else {
    log_line(opt, "eval: split has a single class; roc.csv not written");
  }
  log_line(opt, fmt::format("eval on split '{}' ({} studies):\n{}", cfg.eval.split, samples.size(),
                            format_report_table(out.report)));
  return out;
}

AblationSummary cmd_ablate(const RunConfig& cfg, const CommandOptions& opt) {
  UNet unet = load_unet(cfg);
  const auto all = dataset_manifest(cfg.data_path());
  const auto train = build_samples(unet, require_split(all, "train"), cfg.preprocess, opt.jobs);
  const auto val = build_samples(unet, filter_split(all, "val"), cfg.preprocess, opt.jobs);
  const auto test = build_samples(unet, require_split(all, cfg.ablation.split), cfg.preprocess, opt.jobs);
  const int epochs = cfg.ablation.epochs > 0 ? cfg.ablation.epochs : cfg.stage2.epochs;
  const fs::path root = cfg.ablate_dir();
  fs::create_directories(root);
  write_json(root / "config.json", to_json(cfg));

  // Identical (variant, T) pairs reuse the first result.
  std::map<std::pair<std::string, int>, AblationRow> done;
  std::map<std::string, int> dir_uses;
  auto run = [&](const std::string& name, int T) {
    const auto key = std::make_pair(name, T);
    if (auto it = done.find(key); it != done.end()) return it->second;
    DetectorConfig d = parse_variant(name, cfg.detector_config(), cfg.ablation.msa_heads);
    d.T = T;
    std::string dirname = fmt::format("{}_T{}", name, T);
    if (int n = ++dir_uses[dirname]; n > 1) dirname += fmt::format("_{}", n);
    const fs::path dir = root / "runs" / dirname;
    AblationRow row;
    row.variant = name;
    row.T = T;
    train_variant(d, cfg, epochs, train, val, dir, opt, &row.parameters);
    Detector det = load_detector(d, dir / "best.ckpt");
    const auto preds = predict_split(det, test, sweep_overlap(cfg.preprocess, T), opt.jobs);
    std::vector<const PredictionRow*> refs;
    for (const auto& p : preds) refs.push_back(&p);
    const StratumRow m = stratum_metrics("all", refs, cfg.eval.threshold);
    if (!m.auc) throw DataError("ablation split '" + cfg.ablation.split + "' needs both classes");
    row.accuracy = m.acc;
    row.auc = *m.auc;
    row.f1 = m.f1;
    write_predictions_csv(dir / "predictions.csv", preds);
    done.emplace(key, row);
    log_line(opt, fmt::format("ablate: {} T={} acc={:.4f} auc={:.4f} f1={:.4f}", name, T, row.accuracy, row.auc,
                              row.f1));
    return row;
  };

  AblationSummary out;
  for (const auto& v : cfg.ablation.variants) out.variants.push_back(run(v, cfg.preprocess.T));
  for (int T : cfg.ablation.t_sweep) out.t_sweep.push_back(run(cfg.ablation.t_sweep_variant, T));

  std::ofstream table(root / "table.csv");
  table << "variant,accuracy,auc,f1,parameters\n";
  for (const auto& r : out.variants) {
    table << fmt::format("{},{:.6f},{:.6f},{:.6f},{}\n", r.variant, r.accuracy, r.auc, r.f1, r.parameters);
  }
  std::ofstream sweep(root / "t_sweep.csv");
  sweep << "T,accuracy,auc,f1\n";
  for (const auto& r : out.t_sweep) sweep << fmt::format("{},{:.6f},{:.6f},{:.6f}\n", r.T, r.accuracy, r.auc, r.f1);

  std::string pretty = fmt::format("{:<12} {:>9} {:>9} {:>9}\n", "variant", "accuracy", "auc", "f1");
  for (const auto& r : out.variants) {
    pretty += fmt::format("{:<12} {:>9.4f} {:>9.4f} {:>9.4f}\n", r.variant, r.accuracy, r.auc, r.f1);
  }
  pretty += fmt::format("\n{:<12} {:>9} {:>9} {:>9}\n", "T", "accuracy", "auc", "f1");
  for (const auto& r : out.t_sweep) pretty += fmt::format("{:<12} {:>9.4f} {:>9.4f} {:>9.4f}\n", r.T, r.accuracy, r.auc, r.f1);
  log_line(opt, "ablation results:\n" + pretty);
  return out;
}

}  // namespace embolite
