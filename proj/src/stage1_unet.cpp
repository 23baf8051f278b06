#include "embolite/stage1_unet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "embolite/checkpoint.hpp"
#include "embolite/errors.hpp"
#include "embolite/gemm.hpp"
#include "embolite/optim.hpp"

namespace embolite {

void UNetConfig::validate() const {
  if (depth < 1) throw ConfigError("unet depth must be >= 1");
  if (base_channels < 1 || in_channels < 1 || out_channels < 1) throw ConfigError("unet channel counts must be >= 1");
  if (input_size != 0) check_input(input_size, input_size);
}

void UNetConfig::check_input(int h, int w) const {
  const int f = 1 << depth;
  if (h % f != 0 || w % f != 0) {
    throw ConfigError(fmt::format("unet of depth {} needs input sides divisible by {}, got {}x{}", depth, f, h, w));
  }
}

ConvBlock::ConvBlock(const std::string& name, int in_channels, int out_channels, Rng& rng)
    : conv1_(name + ".conv1", in_channels, out_channels, 3, rng),
      conv2_(name + ".conv2", out_channels, out_channels, 3, rng),
      bn1_(name + ".bn1", out_channels),
      bn2_(name + ".bn2", out_channels) {}

Var ConvBlock::forward(Tape& tape, Var x, ops::NormMode mode) {
  Var y = ops::relu(bn1_.forward(tape, conv1_.forward(tape, x), mode));
  return ops::relu(bn2_.forward(tape, conv2_.forward(tape, y), mode));
}

void ConvBlock::collect(nn::StateDict& sd) {
  conv1_.collect(sd);
  bn1_.collect(sd);
  conv2_.collect(sd);
  bn2_.collect(sd);
}

UNet::UNet(const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int b = cfg.base_channels;
  int in = cfg.in_channels;
  for (int i = 0; i < cfg.depth; ++i) {
    down_.emplace_back(fmt::format("unet.down{}", i), in, b << i, rng);
    in = b << i;
  }
  bottleneck_ = ConvBlock("unet.bottleneck", in, b << cfg.depth, rng);
  for (int i = 0; i < cfg.depth; ++i) {
    up_.emplace_back(fmt::format("unet.up{}", i), (b << (i + 1)) + (b << i), b << i, rng);
  }
  head_ = nn::Conv2d("unet.head", b, cfg.out_channels, 1, rng);
}

Var UNet::forward(Tape& tape, Var x, ops::NormMode mode) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != cfg_.in_channels) {
    throw DimensionError("unet expects [N," + std::to_string(cfg_.in_channels) + ",H,W], got " + shape_str(s));
  }
  cfg_.check_input(s[2], s[3]);
  if (tape.recording()) encoder_shapes_.clear();
  std::vector<Var> skips;
  Var h = x;
  for (int i = 0; i < cfg_.depth; ++i) {
    h = down_[static_cast<std::size_t>(i)].forward(tape, h, mode);
    if (tape.recording()) encoder_shapes_.push_back(h.shape());
    skips.push_back(h);
    h = ops::pool2d(h, ops::PoolKind::max, 2, 2);
  }
  h = bottleneck_.forward(tape, h, mode);
  for (int i = cfg_.depth - 1; i >= 0; --i) {
    h = ops::concat({ops::upsample2x(h), skips[static_cast<std::size_t>(i)]}, 1);
    h = up_[static_cast<std::size_t>(i)].forward(tape, h, mode);
  }
  return ops::sigmoid(head_.forward(tape, h));
}

Tensor UNet::predict(const Tensor& slabs) {
  Tape tape(false);
  return forward(tape, tape.constant(slabs), ops::NormMode::eval).value();
}

nn::StateDict UNet::state() {
  nn::StateDict sd;
  for (ConvBlock& blk : down_) blk.collect(sd);
  bottleneck_.collect(sd);
  for (ConvBlock& blk : up_) blk.collect(sd);
  head_.collect(sd);
  return sd;
}

std::size_t UNet::parameter_count() { return state().parameter_count(); }

namespace {

struct DiceSums {
  double pt = 0.0, pp = 0.0, tt = 0.0;
};

DiceSums dice_sums(const Tensor& p, const Tensor& t) {
  if (p.shape() != t.shape()) {
    throw DimensionError("dice: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(t.shape()));
  }
  DiceSums s;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    s.pt += p[i] * t[i];
    s.pp += p[i] * p[i];
    s.tt += t[i] * t[i];
  }
  return s;
}

}  // namespace

double dice_coefficient(const Tensor& pred, const Tensor& target) {
  const DiceSums s = dice_sums(pred, target);
  return (2.0 * s.pt + kDiceEpsilon) / (s.pp + s.tt + kDiceEpsilon);
}

Var dice_loss(Var pred, Var target) {
  Tape& tape = *pred.tape;
  const DiceSums s = dice_sums(pred.value(), target.value());
  const double num = 2.0 * s.pt + kDiceEpsilon;
  const double den = s.pp + s.tt + kDiceEpsilon;
  return tape.record(Tensor::scalar(1.0 - num / den), {pred.id, target.id}, [=](Tape& t, int self) {
    const double g = t.grad(self)[0];
    // d(1 - num/den)/da_i = -(2 b_i den - num 2 a_i) / den^2
    auto propagate = [&](int a, int b) {
      if (!t.requires_grad(a)) return;
      const Tensor& av = t.value(a);
      const Tensor& bv = t.value(b);
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < av.numel(); ++i) {
        ga[i] -= g * (2.0 * bv[i] * den - 2.0 * num * av[i]) / (den * den);
      }
    };
    propagate(pred.id, target.id);
    propagate(target.id, pred.id);
  });
}

namespace {

Tensor stack_channels(const std::vector<const Slab*>& slabs) {
  const Shape& s = slabs.front()->channels.shape();
  Tensor out({static_cast<int>(slabs.size()), s[0], s[1], s[2]});
  const std::size_t n = slabs.front()->channels.numel();
  for (std::size_t i = 0; i < slabs.size(); ++i) std::copy_n(slabs[i]->channels.ptr(), n, out.ptr() + i * n);
  return out;
}

Tensor stack_targets(const std::vector<const Slab*>& slabs) {
  const Shape& s = slabs.front()->target_mask.shape();
  Tensor out({static_cast<int>(slabs.size()), s[0], s[1], s[2]});
  const std::size_t n = slabs.front()->target_mask.numel();
  for (std::size_t i = 0; i < slabs.size(); ++i) std::copy_n(slabs[i]->target_mask.ptr(), n, out.ptr() + i * n);
  return out;
}

}  // namespace

Tensor predict_volume_mask(UNet& model, const Volume& normalized, int batch_size) {
  const int d = normalized.depth(), h = normalized.height(), w = normalized.width();
  Tensor out({d, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int start = 0; start < d; start += batch_size) {
    const int n = std::min(batch_size, d - start);
    std::vector<Slab> slabs;
    for (int z = start; z < start + n; ++z) slabs.push_back(make_slab(normalized, z));
    std::vector<const Slab*> refs;
    for (const Slab& s : slabs) refs.push_back(&s);
    Tensor p = model.predict(stack_channels(refs));
    std::copy_n(p.ptr(), static_cast<std::size_t>(n) * plane, out.ptr() + static_cast<std::size_t>(start) * plane);
  }
  return out;
}

std::vector<Slab> validation_slabs(const std::vector<PreparedStudy>& studies) {
  std::vector<Slab> out;
  for (const PreparedStudy& s : studies) {
    for (const auto& [z, mask] : s.annotation.slices) {
      Slab slab = make_slab(s.volume, z);
      slab.target_mask = mask.reshaped({1, mask.dim(0), mask.dim(1)});
      out.push_back(std::move(slab));
    }
  }
  return out;
}

double evaluate_dice(UNet& model, const std::vector<Slab>& slabs, int batch_size) {
  if (slabs.empty()) return 0.0;
  DiceSums total;
  for (std::size_t start = 0; start < slabs.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<const Slab*> refs;
    for (std::size_t i = start; i < std::min(slabs.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      refs.push_back(&slabs[i]);
    }
    const DiceSums s = dice_sums(model.predict(stack_channels(refs)), stack_targets(refs));
    total.pt += s.pt;
    total.pp += s.pp;
    total.tt += s.tt;
  }
  return (2.0 * total.pt + kDiceEpsilon) / (total.pp + total.tt + kDiceEpsilon);
}

namespace {

Tensor dihedral(const Tensor& x, int k) {
  const long c = x.dim(0), n = x.dim(1);
  if (x.dim(2) != n) throw DimensionError("dihedral transform needs square slices");
  Tensor out(x.shape());
  const int turns = k & 3;
  const bool flip = k >= 4;
  for (long ch = 0; ch < c; ++ch) {
    const double* src = x.ptr() + ch * n * n;
    double* dst = out.ptr() + ch * n * n;
    for (long i = 0; i < n; ++i) {
      for (long j = 0; j < n; ++j) {
        long si = i, sj = flip ? n - 1 - j : j;
        for (int t = 0; t < turns; ++t) {
          const long ti = sj, tj = n - 1 - si;
          si = ti;
          sj = tj;
        }
        dst[i * n + j] = src[si * n + sj];
      }
    }
  }
  return out;
}

}  // namespace

void dihedral_transform(Slab& slab, int k) {
  if (k < 0 || k >= 8) throw ConfigError("dihedral index must be in [0, 8)");
  if (k == 0) return;
  slab.channels = dihedral(slab.channels, k);
  slab.target_mask = dihedral(slab.target_mask, k);
}

Stage1Result train_stage1(UNet& model, const std::vector<PreparedStudy>& train, const std::vector<PreparedStudy>& val,
                          const Stage1TrainConfig& cfg, const std::filesystem::path& out_dir, const EpochLogger& log) {
  if (train.empty()) throw DataError("stage 1 training split is empty");
  if (std::none_of(train.begin(), train.end(), [](const PreparedStudy& s) { return !s.annotation.empty(); })) {
    throw DataError("stage 1 training split has no annotated studies");
  }
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw ConfigError("stage 1 needs epochs >= 1 and batch_size >= 1");
  std::filesystem::create_directories(out_dir);
  PrecisionScope precision(cfg.fast_matmul ? Precision::f32 : Precision::f64);

  Rng rng(cfg.seed);
  nn::StateDict sd = model.state();
  AdamState adam;
  adam.learning_rate = cfg.learning_rate;
  adam.weight_decay = cfg.weight_decay;
  PlateauScheduler sched;
  sched.patience = cfg.scheduler_patience;
  sched.decay_factor = cfg.scheduler_decay;
  sched.min_lr = cfg.min_learning_rate;
  sched.learning_rate = cfg.learning_rate;

  const std::vector<Slab> val_slabs = validation_slabs(val);
  std::ofstream csv(out_dir / "metrics.csv");
  csv << "epoch,train_dice_loss,val_dice,lr\n";

  Stage1Result result;
  result.best_val_dice = -1.0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<Slab> slabs;
    for (const PreparedStudy& s : train) {
      auto part = s.annotation.empty()
                      ? extract_slabs(s.volume, s.annotation, 0.0, rng, cfg.negatives_per_negative_study)
                      : extract_slabs(s.volume, s.annotation, cfg.negatives_per_positive, rng);
      for (Slab& slab : part) {
        if (cfg.augment) dihedral_transform(slab, rng.uniform_int(0, 7));
        slabs.push_back(std::move(slab));
      }
    }
    for (std::size_t i = slabs.size(); i > 1; --i) {
      std::swap(slabs[i - 1], slabs[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }

    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < slabs.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<const Slab*> refs;
      for (std::size_t i = start; i < std::min(slabs.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++i) {
        refs.push_back(&slabs[i]);
      }
      // Batch norm needs more than one value per channel.
      if (refs.size() < 2 && batches > 0) break;
      Tape tape;
      Var x = tape.constant(stack_channels(refs));
      Var target = tape.constant(stack_targets(refs));
      Var loss = dice_loss(model.forward(tape, x, ops::NormMode::train), target);
      zero_grads(sd.params);
      tape.backward(loss);
      adam_step(sd.params, adam);
      loss_sum += loss.value()[0];
      ++batches;
    }

    Stage1EpochMetrics m;
    m.epoch = epoch;
    m.train_dice_loss = loss_sum / batches;
    m.val_dice = evaluate_dice(model, val_slabs, cfg.batch_size);
    m.learning_rate = adam.learning_rate;
    result.history.push_back(m);
    csv << fmt::format("{},{:.8f},{:.8f},{:.8g}\n", m.epoch, m.train_dice_loss, m.val_dice, m.learning_rate);
    csv.flush();
    if (log) log(fmt::format("stage1 epoch {}/{} train_dice_loss={:.4f} val_dice={:.4f} lr={:.3g}", epoch, cfg.epochs,
                             m.train_dice_loss, m.val_dice, m.learning_rate));

    const nlohmann::json meta = {{"stage", 1}, {"epoch", epoch}, {"val_dice", m.val_dice}};
    if (m.val_dice > result.best_val_dice) {
      result.best_val_dice = m.val_dice;
      result.best_epoch = epoch;
      save_checkpoint(out_dir / "best.ckpt", sd, adam.step, meta);
    }
    adam.learning_rate = sched.epoch_end(1.0 - m.val_dice);
  }
  save_checkpoint(out_dir / "final.ckpt", sd, adam.step,
                  {{"stage", 1}, {"epoch", cfg.epochs}, {"val_dice", result.history.back().val_dice}});
  return result;
}

}  // namespace embolite
