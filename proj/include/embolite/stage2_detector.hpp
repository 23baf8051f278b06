#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "embolite/autodiff.hpp"
#include "embolite/metrics.hpp"
#include "embolite/nn.hpp"
#include "embolite/random.hpp"

namespace embolite {

enum class Aggregation { mean, max, self_attention };
enum class LossKind { bce, focal };
enum class InstanceEncoder { convlstm, conv_only };

std::string to_string(Aggregation a);
std::string to_string(LossKind l);
std::string to_string(InstanceEncoder e);
Aggregation aggregation_from_string(const std::string& s);
LossKind loss_from_string(const std::string& s);
InstanceEncoder encoder_from_string(const std::string& s);

struct DetectorConfig {
  int T = 16;
  Aggregation aggregation = Aggregation::max;
  int attention_heads = 1;
  int attention_dim = 128;
  LossKind loss = LossKind::focal;
  double focal_gamma = 2.0;
  InstanceEncoder instance_encoder = InstanceEncoder::convlstm;
  int hidden = 64;
  int in_channels = 1;
  int input_size = 32;
  int pool_kernel = 8;

  void validate() const;
  // hidden * (input_size / pool_kernel)^2
  int feature_dim() const;
  // Ablation label such as "CL+Max+F" or "C+SA+B".
  std::string variant_name() const;
};

// Peephole ConvLSTM cell. Gate kernels are kept per gate; forward passes
// stack them once per sequence so each step runs a single convolution.
class ConvLSTMCell {
 public:
  ConvLSTMCell() = default;
  // With `recurrent` false there are no state-to-state kernels and no
  // input/forget peepholes (the conv-only ablation).
  ConvLSTMCell(const std::string& name, int in_channels, int hidden, bool recurrent, Rng& rng);

  int hidden() const { return hidden_; }
  bool recurrent() const { return recurrent_; }
  void collect(nn::StateDict& sd);

  // Per-gate parameter families, gate order i, f, c, o.
  std::vector<Parameter>& input_kernels() { return wx_; }
  std::vector<Parameter>& state_kernels() { return wh_; }
  std::vector<Parameter>& biases() { return b_; }
  Parameter& peephole_i() { return wci_; }
  Parameter& peephole_f() { return wcf_; }
  Parameter& peephole_o() { return wco_; }

  // Gate weights stacked for one sequence.
  struct Fused {
    Var w;  // [4*hidden, in (+hidden), 3, 3]
    Var b;  // [4*hidden]
    Var wci, wcf, wco;
  };
  Fused fuse(Tape& tape);

  // One step. h_prev/c_prev may be invalid Vars (zero state).
  std::pair<Var, Var> step(Tape& tape, const Fused& f, Var x, Var h_prev, Var c_prev);

 private:
  int in_channels_ = 0;
  int hidden_ = 0;
  bool recurrent_ = true;
  std::vector<Parameter> wx_, wh_, b_;
  Parameter wci_, wcf_, wco_;
};

// Single step on freshly fused weights (h_t, c_t).
std::pair<Var, Var> convlstm_step(Tape& tape, ConvLSTMCell& cell, Var x, Var h_prev, Var c_prev);

struct AttentionHead {
  Parameter V;  // [d_attn, d_feat]
  Parameter U;  // [1, d_attn]
};

// [T, d_feat] -> [1, d_feat]. Attention needs `heads`; with more than one
// head `projection` maps the concatenation back to d_feat. Coefficients
// per head are written to `weights_out` when given.
Var aggregate(Tape& tape, Var features, Aggregation method, std::vector<AttentionHead>* heads,
              nn::Linear* projection, std::vector<Tensor>* weights_out = nullptr);

inline constexpr double kProbClip = 1e-7;

double bce_value(double y_hat, double y);
double focal_value(double y_hat, double y, double gamma);
// Scalar losses on a [1] or [1,1] probability; y_hat is clipped.
Var bce_loss(Var y_hat, double y);
Var focal_loss(Var y_hat, double y, double gamma);

class Detector {
 public:
  Detector(const DetectorConfig& cfg, Rng& rng);

  const DetectorConfig& config() const { return cfg_; }
  // [T,1,h,w] -> [T, d_feat], zero initial states.
  Var encode(Tape& tape, Var instances);
  Var aggregate_features(Tape& tape, Var features, std::vector<Tensor>* weights_out = nullptr);
  // [T,1,h,w] -> [1,1] probability.
  Var forward(Tape& tape, Var instances);
  Var loss(Tape& tape, Var y_hat, int label) const;
  double detect(const Tensor& instances);

  ConvLSTMCell& cell() { return cell_; }
  std::vector<AttentionHead>& heads() { return heads_; }
  nn::Linear& classifier() { return classifier_; }
  nn::StateDict state();
  std::size_t parameter_count();

 private:
  DetectorConfig cfg_;
  ConvLSTMCell cell_;
  std::vector<AttentionHead> heads_;
  nn::Linear projection_;
  nn::Linear classifier_;
};

// Masked span stack of one study, ready for bag and window slicing.
struct StudySample {
  std::string study_id;
  Tensor stack;  // [S,1,r,r]
  int label = 0;
  Severity severity = Severity::none;
  std::string noise_profile;
};

// Middle-T bag of a sample.
Tensor middle_bag(const StudySample& s, int T);

struct InferenceResult {
  double probability = 0.0;
  int n_windows = 0;
};

// Max over moving windows of the sample's span.
InferenceResult infer_study(Detector& model, const StudySample& s, int overlap);

struct Stage2TrainConfig {
  int epochs = 12;
  int batch_size = 8;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  int scheduler_patience = 3;
  double scheduler_decay = 0.1;
  double min_learning_rate = 1e-6;
  double threshold = 0.5;
  // Gradient L2 norm cap per update; 0 disables.
  double max_grad_norm = 0.0;
  // Negative studies train on a uniformly placed T window instead of the middle one.
  bool random_negative_windows = false;
  std::uint64_t seed = 0;
  bool fast_matmul = true;
};

struct Stage2EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double val_auroc = 0.0;
  double val_f1 = 0.0;
  double learning_rate = 0.0;
};

struct Stage2Result {
  std::vector<Stage2EpochMetrics> history;
  // best.ckpt is the epoch with the lowest validation loss
  int best_epoch = 0;
  double best_val_loss = 0.0;
  double best_val_auroc = 0.0;
};

struct BagScores {
  std::vector<double> scores;
  std::vector<int> labels;
  double mean_loss = 0.0;
};

// Middle-T bags through the model (no gradients).
BagScores score_bags(Detector& model, const std::vector<StudySample>& samples);

// Trains the detector, writing metrics.csv, best.ckpt and final.ckpt into
// `out_dir`. AUROC is 0.5 when a validation split holds one class.
Stage2Result train_stage2(Detector& model, const std::vector<StudySample>& train,
                          const std::vector<StudySample>& val, const Stage2TrainConfig& cfg,
                          const std::filesystem::path& out_dir,
                          const std::function<void(const std::string&)>& log = {});

}  // namespace embolite
