#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "embolite/autodiff.hpp"
#include "embolite/nn.hpp"
#include "embolite/preprocess.hpp"
#include "embolite/random.hpp"

namespace embolite {

struct UNetConfig {
  int depth = 4;
  int base_channels = 8;
  int in_channels = kSlabChannels;
  int out_channels = 1;
  // Spatial input size checked at build time; 0 skips the check.
  int input_size = 0;

  void validate() const;
  void check_input(int h, int w) const;
};

// Two conv3x3 + batch-norm + ReLU layers.
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(const std::string& name, int in_channels, int out_channels, Rng& rng);
  Var forward(Tape& tape, Var x, ops::NormMode mode);
  void collect(nn::StateDict& sd);

 private:
  nn::Conv2d conv1_, conv2_;
  nn::BatchNorm2d bn1_, bn2_;
};

class UNet {
 public:
  UNet(const UNetConfig& cfg, Rng& rng);

  const UNetConfig& config() const { return cfg_; }
  // [N,9,H,W] -> [N,1,H,W] probabilities.
  Var forward(Tape& tape, Var x, ops::NormMode mode);
  // Eval-mode forward without recording.
  Tensor predict(const Tensor& slabs);
  nn::StateDict state();
  std::size_t parameter_count();
  // Shapes of the encoder outputs (before pooling) from the last recorded forward.
  const std::vector<Shape>& encoder_shapes() const { return encoder_shapes_; }

 private:
  UNetConfig cfg_;
  std::vector<ConvBlock> down_;
  ConvBlock bottleneck_;
  std::vector<ConvBlock> up_;  // up_[i] restores level i
  nn::Conv2d head_;
  std::vector<Shape> encoder_shapes_;
};

inline constexpr double kDiceEpsilon = 1e-6;

// (2 sum(p t) + eps) / (sum(p^2) + sum(t^2) + eps) over all elements.
double dice_coefficient(const Tensor& pred, const Tensor& target);
// 1 - dice_coefficient, differentiable in both arguments.
Var dice_loss(Var pred, Var target);

// Probability map for every slice, slabs clamped at the ends: [D,H,W].
Tensor predict_volume_mask(UNet& model, const Volume& normalized, int batch_size = 8);

struct Stage1TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double negatives_per_positive = 1.0;
  // Slabs drawn from each negative study per epoch.
  int negatives_per_negative_study = 2;
  int scheduler_patience = 3;
  double scheduler_decay = 0.1;
  double min_learning_rate = 1e-6;
  std::uint64_t seed = 0;
  bool fast_matmul = true;
  // Random flip/rotation of every training slab.
  bool augment = true;
};

// Applies element k in [0, 8) of the square's symmetry group to the last two
// axes of channels and target: k & 3 quarter turns, then a horizontal flip if k >= 4.
void dihedral_transform(Slab& slab, int k);

struct Stage1EpochMetrics {
  int epoch = 0;
  double train_dice_loss = 0.0;
  double val_dice = 0.0;
  double learning_rate = 0.0;
};

struct Stage1Result {
  std::vector<Stage1EpochMetrics> history;
  double best_val_dice = 0.0;
  int best_epoch = 0;
};

// Slabs for validation: one per annotated slice of each study.
std::vector<Slab> validation_slabs(const std::vector<PreparedStudy>& studies);
// Batch-global soft dice of the model over `slabs`.
double evaluate_dice(UNet& model, const std::vector<Slab>& slabs, int batch_size = 8);

using EpochLogger = std::function<void(const std::string&)>;

// Trains `model` and writes metrics.csv, best.ckpt and final.ckpt into `out_dir`.
Stage1Result train_stage1(UNet& model, const std::vector<PreparedStudy>& train, const std::vector<PreparedStudy>& val,
                          const Stage1TrainConfig& cfg, const std::filesystem::path& out_dir,
                          const EpochLogger& log = {});

}  // namespace embolite
