#include "embolite/stage2_detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/format.h>

#include "embolite/checkpoint.hpp"
#include "embolite/errors.hpp"
#include "embolite/gemm.hpp"
#include "embolite/optim.hpp"
#include "embolite/preprocess.hpp"

namespace embolite {

std::string to_string(Aggregation a) {
  switch (a) {
    case Aggregation::mean: return "mean";
    case Aggregation::max: return "max";
    case Aggregation::self_attention: return "self_attention";
  }
  return "?";
}

std::string to_string(LossKind l) { return l == LossKind::bce ? "bce" : "focal"; }

std::string to_string(InstanceEncoder e) { return e == InstanceEncoder::convlstm ? "convlstm" : "conv_only"; }

Aggregation aggregation_from_string(const std::string& s) {
  if (s == "mean") return Aggregation::mean;
  if (s == "max") return Aggregation::max;
  if (s == "self_attention") return Aggregation::self_attention;
  throw ConfigError("unknown aggregation '" + s + "' (mean|max|self_attention)");
}

LossKind loss_from_string(const std::string& s) {
  if (s == "bce") return LossKind::bce;
  if (s == "focal") return LossKind::focal;
  throw ConfigError("unknown loss '" + s + "' (bce|focal)");
}

InstanceEncoder encoder_from_string(const std::string& s) {
  if (s == "convlstm") return InstanceEncoder::convlstm;
  if (s == "conv_only") return InstanceEncoder::conv_only;
  throw ConfigError("unknown instance encoder '" + s + "' (convlstm|conv_only)");
}

void DetectorConfig::validate() const {
  if (T < 1) throw ConfigError("T must be >= 1");
  if (focal_gamma < 0) throw ConfigError("focal_gamma must be >= 0");
  if (hidden < 1 || in_channels < 1) throw ConfigError("hidden and in_channels must be >= 1");
  if (pool_kernel < 1 || input_size < 1 || input_size % pool_kernel != 0) {
    throw ConfigError(fmt::format("input size {} is not divisible by pool kernel {}", input_size, pool_kernel));
  }
  if (aggregation == Aggregation::self_attention && (attention_heads < 1 || attention_dim < 1)) {
    throw ConfigError("self_attention needs attention_heads >= 1 and attention_dim >= 1");
  }
}

int DetectorConfig::feature_dim() const {
  const int side = input_size / pool_kernel;
  return hidden * side * side;
}

std::string DetectorConfig::variant_name() const {
  std::string agg;
  switch (aggregation) {
    case Aggregation::mean: agg = "Mean"; break;
    case Aggregation::max: agg = "Max"; break;
    case Aggregation::self_attention: agg = attention_heads > 1 ? "MSA" : "SA"; break;
  }
  return fmt::format("{}+{}+{}", instance_encoder == InstanceEncoder::convlstm ? "CL" : "C", agg,
                     loss == LossKind::bce ? "B" : "F");
}

namespace {

constexpr const char* kGateNames[4] = {"i", "f", "c", "o"};

}  // namespace

ConvLSTMCell::ConvLSTMCell(const std::string& name, int in_channels, int hidden, bool recurrent, Rng& rng)
    : in_channels_(in_channels), hidden_(hidden), recurrent_(recurrent) {
  const int fan_in = (in_channels + (recurrent ? hidden : 0)) * 9;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (const char* g : kGateNames) {
    wx_.emplace_back(fmt::format("{}.W_x{}", name, g), random_uniform({hidden, in_channels, 3, 3}, rng, -bound, bound));
  }
  if (recurrent) {
    for (const char* g : kGateNames) {
      wh_.emplace_back(fmt::format("{}.W_h{}", name, g), random_uniform({hidden, hidden, 3, 3}, rng, -bound, bound));
    }
    wci_ = Parameter(name + ".W_ci", Tensor({hidden}, 0.0));
    wcf_ = Parameter(name + ".W_cf", Tensor({hidden}, 0.0));
  }
  wco_ = Parameter(name + ".W_co", Tensor({hidden}, 0.0));
  for (const char* g : kGateNames) b_.emplace_back(fmt::format("{}.b_{}", name, g), Tensor({hidden}, 0.0));
}

void ConvLSTMCell::collect(nn::StateDict& sd) {
  for (Parameter& p : wx_) sd.params.push_back(&p);
  for (Parameter& p : wh_) sd.params.push_back(&p);
  if (recurrent_) sd.params.insert(sd.params.end(), {&wci_, &wcf_});
  sd.params.push_back(&wco_);
  for (Parameter& p : b_) sd.params.push_back(&p);
}

ConvLSTMCell::Fused ConvLSTMCell::fuse(Tape& tape) {
  auto stack = [&](std::vector<Parameter>& ps) {
    std::vector<Var> vs;
    for (Parameter& p : ps) vs.push_back(tape.parameter(p));
    return ops::concat(vs, 0);
  };
  Fused f;
  f.b = stack(b_);
  f.w = stack(wx_);
  if (recurrent_) {
    f.w = ops::concat({f.w, stack(wh_)}, 1);
    f.wci = tape.parameter(wci_);
    f.wcf = tape.parameter(wcf_);
  }
  f.wco = tape.parameter(wco_);
  return f;
}

std::pair<Var, Var> ConvLSTMCell::step(Tape& tape, const Fused& f, Var x, Var h_prev, Var c_prev) {
  (void)tape;
  const Shape& xs = x.shape();
  if (xs.size() != 4 || xs[1] != in_channels_) {
    throw DimensionError(fmt::format("convlstm input {} does not have {} channels", shape_str(xs), in_channels_));
  }
  for (Var s : {h_prev, c_prev}) {
    if (s.valid() && (s.shape() != Shape{xs[0], hidden_, xs[2], xs[3]})) {
      throw DimensionError("convlstm state " + shape_str(s.shape()) + " does not match input " + shape_str(xs));
    }
  }
  const int H = hidden_;
  Var pre;
  if (recurrent_ && h_prev.valid()) {
    pre = ops::conv2d(ops::concat({x, h_prev}, 1), f.w, f.b, 1, 1);
  } else {
    Var w = recurrent_ ? ops::slice(f.w, 1, 0, in_channels_) : f.w;
    pre = ops::conv2d(x, w, f.b, 1, 1);
  }
  Var pi = ops::slice(pre, 1, 0, H);
  Var pf = ops::slice(pre, 1, H, H);
  Var pc = ops::slice(pre, 1, 2 * H, H);
  Var po = ops::slice(pre, 1, 3 * H, H);
  const bool carry = recurrent_ && c_prev.valid();
  Var i = ops::sigmoid(carry ? ops::add(pi, ops::channel_mul(f.wci, c_prev)) : pi);
  Var g = ops::tanh(pc);
  Var c = ops::mul(i, g);
  if (carry) {
    Var fg = ops::sigmoid(ops::add(pf, ops::channel_mul(f.wcf, c_prev)));
    c = ops::add(ops::mul(fg, c_prev), c);
  }
  Var o = ops::sigmoid(ops::add(po, ops::channel_mul(f.wco, c)));
  Var h = ops::mul(o, ops::tanh(c));
  return {h, c};
}

std::pair<Var, Var> convlstm_step(Tape& tape, ConvLSTMCell& cell, Var x, Var h_prev, Var c_prev) {
  return cell.step(tape, cell.fuse(tape), x, h_prev, c_prev);
}

Var aggregate(Tape& tape, Var features, Aggregation method, std::vector<AttentionHead>* heads,
              nn::Linear* projection, std::vector<Tensor>* weights_out) {
  if (features.shape().size() != 2 || features.shape()[0] < 1) {
    throw DimensionError("aggregate expects [T,d] features, got " + shape_str(features.shape()));
  }
  switch (method) {
    case Aggregation::mean: return ops::reduce_rows(features, ops::RowReduce::mean);
    case Aggregation::max: return ops::reduce_rows(features, ops::RowReduce::max);
    case Aggregation::self_attention: break;
  }
  if (heads == nullptr || heads->empty()) throw ConfigError("self_attention aggregation needs attention parameters");
  const int T = features.shape()[0];
  std::vector<Var> pooled;
  for (AttentionHead& head : *heads) {
    Var scores = ops::linear(ops::tanh(ops::linear(features, tape.parameter(head.V), Var{})), tape.parameter(head.U),
                             Var{});
    Var a = ops::softmax(ops::reshape(scores, {T}));
    if (weights_out) weights_out->push_back(a.value());
    pooled.push_back(ops::matmul(ops::reshape(a, {1, T}), features));
  }
  if (pooled.size() == 1) return pooled.front();
  if (projection == nullptr) throw ConfigError("multi-head attention needs a projection layer");
  return projection->forward(tape, ops::concat(pooled, 1));
}

double bce_value(double y_hat, double y) {
  const double p = std::clamp(y_hat, kProbClip, 1.0 - kProbClip);
  return -y * std::log(p) - (1.0 - y) * std::log(1.0 - p);
}

double focal_value(double y_hat, double y, double gamma) {
  if (gamma < 0) throw ConfigError("focal_gamma must be >= 0");
  const double p = std::clamp(y_hat, kProbClip, 1.0 - kProbClip);
  return -y * std::pow(1.0 - p, gamma) * std::log(p) - (1.0 - y) * std::pow(p, gamma) * std::log(1.0 - p);
}

namespace {

Var scalar_loss(Var y_hat, double value, double dvalue_dp, bool clipped) {
  Tape& tape = *y_hat.tape;
  const int in = y_hat.id;
  return tape.record(Tensor::scalar(value), {in}, [=](Tape& t, int self) {
    if (clipped) return;
    t.grad(in)[0] += t.grad(self)[0] * dvalue_dp;
  });
}

double checked_probability(Var y_hat) {
  if (y_hat.value().numel() != 1) throw DimensionError("loss expects a single probability, got " + shape_str(y_hat.shape()));
  return y_hat.value()[0];
}

}  // namespace

Var bce_loss(Var y_hat, double y) {
  const double raw = checked_probability(y_hat);
  const double p = std::clamp(raw, kProbClip, 1.0 - kProbClip);
  return scalar_loss(y_hat, bce_value(raw, y), -y / p + (1.0 - y) / (1.0 - p), p != raw);
}

Var focal_loss(Var y_hat, double y, double gamma) {
  const double raw = checked_probability(y_hat);
  const double p = std::clamp(raw, kProbClip, 1.0 - kProbClip);
  const double value = focal_value(raw, y, gamma);
  const double q = 1.0 - p;
  double d = 0.0;
  if (y != 0.0) {
    const double dmod = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma - 1.0) * std::log(p);
    d += y * (dmod - std::pow(q, gamma) / p);
  }
  if (y != 1.0) {
    const double dmod = gamma == 0.0 ? 0.0 : -gamma * std::pow(p, gamma - 1.0) * std::log(q);
    d += (1.0 - y) * (dmod + std::pow(p, gamma) / q);
  }
  return scalar_loss(y_hat, value, d, p != raw);
}

Detector::Detector(const DetectorConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  cell_ = ConvLSTMCell("detector.cell", cfg.in_channels, cfg.hidden, cfg.instance_encoder == InstanceEncoder::convlstm,
                       rng);
  const int d = cfg.feature_dim();
  if (cfg.aggregation == Aggregation::self_attention) {
    const double bv = 1.0 / std::sqrt(static_cast<double>(d));
    const double bu = 1.0 / std::sqrt(static_cast<double>(cfg.attention_dim));
    for (int h = 0; h < cfg.attention_heads; ++h) {
      AttentionHead head;
      head.V = Parameter(fmt::format("detector.attn{}.V", h), random_uniform({cfg.attention_dim, d}, rng, -bv, bv));
      head.U = Parameter(fmt::format("detector.attn{}.U", h), random_uniform({1, cfg.attention_dim}, rng, -bu, bu));
      heads_.push_back(std::move(head));
    }
    if (cfg.attention_heads > 1) projection_ = nn::Linear("detector.projection", cfg.attention_heads * d, d, rng);
  }
  classifier_ = nn::Linear("detector.classifier", d, 1, rng, /*zero_init=*/true);
}

Var Detector::encode(Tape& tape, Var instances) {
  const Shape& s = instances.shape();
  if (s.size() != 4 || s[1] != cfg_.in_channels) {
    throw DimensionError("detector expects [T," + std::to_string(cfg_.in_channels) + ",h,w], got " + shape_str(s));
  }
  if (s[2] % cfg_.pool_kernel != 0 || s[3] % cfg_.pool_kernel != 0) {
    throw DimensionError(fmt::format("instance size {}x{} is not divisible by pool kernel {}", s[2], s[3],
                                     cfg_.pool_kernel));
  }
  const int T = s[0];
  ConvLSTMCell::Fused fused = cell_.fuse(tape);
  Var h, c;
  std::vector<Var> hs;
  for (int t = 0; t < T; ++t) {
    Var x = ops::slice(instances, 0, t, 1);
    std::tie(h, c) = cell_.recurrent() ? cell_.step(tape, fused, x, h, c) : cell_.step(tape, fused, x, Var{}, Var{});
    hs.push_back(h);
  }
  Var pooled = ops::pool2d(ops::concat(hs, 0), ops::PoolKind::avg, cfg_.pool_kernel, cfg_.pool_kernel);
  const int d = static_cast<int>(pooled.value().numel() / static_cast<std::size_t>(T));
  return ops::reshape(pooled, {T, d});
}

Var Detector::aggregate_features(Tape& tape, Var features, std::vector<Tensor>* weights_out) {
  return aggregate(tape, features, cfg_.aggregation, &heads_, cfg_.attention_heads > 1 ? &projection_ : nullptr,
                   weights_out);
}

Var Detector::forward(Tape& tape, Var instances) {
  return ops::sigmoid(classifier_.forward(tape, aggregate_features(tape, encode(tape, instances))));
}

Var Detector::loss(Tape& tape, Var y_hat, int label) const {
  (void)tape;
  return cfg_.loss == LossKind::bce ? bce_loss(y_hat, label) : focal_loss(y_hat, label, cfg_.focal_gamma);
}

double Detector::detect(const Tensor& instances) {
  Tape tape(false);
  return forward(tape, tape.constant(instances)).value()[0];
}

nn::StateDict Detector::state() {
  nn::StateDict sd;
  cell_.collect(sd);
  for (AttentionHead& h : heads_) sd.params.insert(sd.params.end(), {&h.V, &h.U});
  if (cfg_.aggregation == Aggregation::self_attention && cfg_.attention_heads > 1) projection_.collect(sd);
  classifier_.collect(sd);
  return sd;
}

std::size_t Detector::parameter_count() { return state().parameter_count(); }

Tensor middle_bag(const StudySample& s, int T) {
  return window_instances(s.stack, middle_start(s.stack.dim(0), T), T);
}

InferenceResult infer_study(Detector& model, const StudySample& s, int overlap) {
  const int T = model.config().T;
  const WindowPlan plan = plan_windows(s.stack.dim(0), T, overlap);
  InferenceResult r;
  for (const Window& w : plan.windows) {
    r.probability = std::max(r.probability, model.detect(window_instances(s.stack, w.start, T)));
    ++r.n_windows;
  }
  return r;
}

BagScores score_bags(Detector& model, const std::vector<StudySample>& samples) {
  BagScores out;
  double loss_sum = 0.0;
  for (const StudySample& s : samples) {
    Tape tape(false);
    Var y = model.forward(tape, tape.constant(middle_bag(s, model.config().T)));
    loss_sum += model.loss(tape, y, s.label).value()[0];
    out.scores.push_back(y.value()[0]);
    out.labels.push_back(s.label);
  }
  out.mean_loss = samples.empty() ? 0.0 : loss_sum / static_cast<double>(samples.size());
  return out;
}

Stage2Result train_stage2(Detector& model, const std::vector<StudySample>& train, const std::vector<StudySample>& val,
                          const Stage2TrainConfig& cfg, const std::filesystem::path& out_dir,
                          const std::function<void(const std::string&)>& log) {
  if (train.empty()) throw DataError("stage 2 training split is empty");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw ConfigError("stage 2 needs epochs >= 1 and batch_size >= 1");
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

  const int T = model.config().T;
  std::vector<Tensor> bags;
  for (const StudySample& s : train) bags.push_back(middle_bag(s, T));

  std::ofstream csv(out_dir / "metrics.csv");
  csv << "epoch,train_loss,val_loss,val_acc,val_auroc,val_f1,lr\n";
  Stage2Result result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  result.best_val_auroc = -1.0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double weight = 1.0 / static_cast<double>(stop - start);
      zero_grads(sd.params);
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t idx = order[k];
        Tape tape;
        const StudySample& st = train[idx];
        const int span = static_cast<int>(st.stack.dim(0));
        Var y = cfg.random_negative_windows && st.label == 0 && span > T
                    ? model.forward(tape, tape.constant(window_instances(st.stack, rng.uniform_int(0, span - T), T)))
                    : model.forward(tape, tape.constant(bags[idx]));
        Var loss = model.loss(tape, y, st.label);
        loss_sum += loss.value()[0];
        tape.backward(ops::scale(loss, weight));
      }
      clip_grad_norm(sd.params, cfg.max_grad_norm);
      adam_step(sd.params, adam);
    }

    Stage2EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(train.size());
    m.learning_rate = adam.learning_rate;
    if (!val.empty()) {
      const BagScores vs = score_bags(model, val);
      m.val_loss = vs.mean_loss;
      const ConfusionCounts c = confusion(vs.scores, vs.labels, cfg.threshold);
      m.val_acc = c.accuracy();
      m.val_f1 = c.f1();
      const auto pos = std::count(vs.labels.begin(), vs.labels.end(), 1);
      m.val_auroc = pos > 0 && pos < static_cast<long>(vs.labels.size()) ? auroc(vs.scores, vs.labels).auc : 0.5;
    } else {
      m.val_loss = m.train_loss;
    }
    result.history.push_back(m);
    csv << fmt::format("{},{:.8f},{:.8f},{:.6f},{:.6f},{:.6f},{:.8g}\n", m.epoch, m.train_loss, m.val_loss, m.val_acc,
                       m.val_auroc, m.val_f1, m.learning_rate);
    csv.flush();
    if (log) {
      log(fmt::format("stage2 {} epoch {}/{} train_loss={:.4f} val_loss={:.4f} val_auroc={:.4f} val_acc={:.3f} lr={:.3g}",
                      model.config().variant_name(), epoch, cfg.epochs, m.train_loss, m.val_loss, m.val_auroc,
                      m.val_acc, m.learning_rate));
    }
    if (m.val_loss < result.best_val_loss ||
        (m.val_loss == result.best_val_loss && m.val_auroc > result.best_val_auroc)) {
      result.best_val_auroc = m.val_auroc;
      result.best_val_loss = m.val_loss;
      result.best_epoch = epoch;
      save_checkpoint(out_dir / "best.ckpt", sd, adam.step,
                      {{"stage", 2}, {"epoch", epoch}, {"val_auroc", m.val_auroc}, {"variant", model.config().variant_name()}});
    }
    adam.learning_rate = sched.epoch_end(m.val_loss);
  }
  save_checkpoint(out_dir / "final.ckpt", sd, adam.step,
                  {{"stage", 2}, {"epoch", cfg.epochs}, {"variant", model.config().variant_name()}});
  return result;
}

}  // namespace embolite
