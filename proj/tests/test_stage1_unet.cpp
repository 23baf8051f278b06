#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "embolite/errors.hpp"
#include "embolite/optim.hpp"
#include "embolite/phantom.hpp"
#include "embolite/stage1_unet.hpp"
#include "oracles.hpp"

using namespace embolite;
namespace fs = std::filesystem;

namespace {

UNetConfig small_config(int base = 4, int depth = 2) {
  UNetConfig c;
  c.base_channels = base;
  c.depth = depth;
  return c;
}

PreparedStudy phantom_study(std::uint64_t seed, bool positive, int size = 32) {
  PhantomSpec s;
  s.depth = 32;
  s.height = s.width = size;
  s.seed = seed;
  s.embolus_count = positive ? 2 : 0;
  s.embolus_radius_min = 1.5;
  s.embolus_radius_max = 2.0;
  s.study_id = "s" + std::to_string(seed);
  Phantom p = generate_phantom(s);
  return prepare_study(p.volume, p.annotation, p.label, PreprocessConfig{});
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("unet output contract") {
  Rng rng(1);
  UNetConfig cfg;
  cfg.base_channels = 4;
  UNet net(cfg, rng);
  Tensor x = random_normal({2, 9, 64, 64}, rng, 1.0);
  Tensor y = net.predict(x);
  CHECK(y.shape() == Shape{2, 1, 64, 64});
  CHECK(y.min() > 0.0);
  CHECK(y.max() < 1.0);

  Tape tape;
  net.forward(tape, tape.constant(x), ops::NormMode::train);
  const auto& enc = net.encoder_shapes();
  REQUIRE(enc.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(enc[static_cast<std::size_t>(i)] == Shape{2, 4 << i, 64 >> i, 64 >> i});

  Tape t2;
  CHECK_THROWS_AS(net.forward(t2, t2.constant(Tensor({1, 9, 40, 40})), ops::NormMode::eval), ConfigError);
  UNetConfig bad = cfg;
  bad.input_size = 40;
  CHECK_THROWS_AS(UNet(bad, rng), ConfigError);
  bad.input_size = 0;
  bad.depth = 0;
  CHECK_THROWS_AS(UNet(bad, rng), ConfigError);
}

TEST_CASE("unet parameter count") {
  Rng rng(0);
  UNetConfig a;
  a.base_channels = 8;
  UNetConfig b;
  b.base_channels = 16;
  const double na = static_cast<double>(UNet(a, rng).parameter_count());
  const double nb = static_cast<double>(UNet(b, rng).parameter_count());
  CHECK(nb / na == doctest::Approx(4.0).epsilon(0.02));
  CHECK(UNet(b, rng).parameter_count() == UNet(b, rng).parameter_count());

  // Hand count for depth 1, base 2, 9 -> 1 channels.
  UNetConfig tiny;
  tiny.depth = 1;
  tiny.base_channels = 2;
  // down0: 9->2, 2->2; bottleneck: 2->4, 4->4; up0: 6->2, 2->2; head 2->1
  auto block = [](int i, int o) { return (i * o * 9 + o) + (o * o * 9 + o) + 4 * o; };
  const std::size_t expect = block(9, 2) + block(2, 4) + block(6, 2) + (2 + 1);
  CHECK(UNet(tiny, rng).parameter_count() == expect);
}

TEST_CASE("dice coefficient values") {
  Tensor t({1, 1, 2, 2}, std::vector<double>{1, 0, 1, 1});
  CHECK(dice_coefficient(t, t) == doctest::Approx(1.0).epsilon(1e-12));
  Tensor u({1, 1, 2, 2}, std::vector<double>{0, 1, 0, 0});
  CHECK(dice_coefficient(t, u) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(dice_coefficient(Tensor({4}), Tensor({4})) == 1.0);
  Tensor p({2}, std::vector<double>{0.5, 0.5});
  Tensor q({2}, std::vector<double>{1.0, 0.0});
  CHECK(dice_coefficient(p, q) == doctest::Approx(2.0 * 0.5 / (0.25 + 0.25 + 1.0)).epsilon(1e-5));
  CHECK(dice_coefficient(p, q) == doctest::Approx(0.6667).epsilon(1e-4));
  CHECK(dice_coefficient(t, u) == dice_coefficient(u, t));
  CHECK_THROWS_AS(dice_coefficient(p, t), DimensionError);

  Tape tape;
  Var perfect = dice_loss(tape.constant(t), tape.constant(t));
  CHECK(perfect.value()[0] == doctest::Approx(0.0).epsilon(1e-12));
  Var disjoint = dice_loss(tape.constant(t), tape.constant(u));
  CHECK(disjoint.value()[0] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("dice loss decreases toward the target") {
  Rng rng(3);
  Tensor target({64});
  for (std::size_t i = 0; i < 64; ++i) target[i] = rng.uniform(0, 1) < 0.3 ? 1.0 : 0.0;
  Tensor start = random_uniform({64}, rng, 0.0, 1.0);
  double prev = 2.0;
  for (int k = 0; k <= 20; ++k) {
    const double a = k / 20.0;
    Tensor p({64});
    for (std::size_t i = 0; i < 64; ++i) p[i] = (1 - a) * start[i] + a * target[i];
    const double loss = 1.0 - dice_coefficient(p, target);
    CHECK(loss <= prev + 1e-12);
    prev = loss;
  }
}

TEST_CASE("dice loss gradient") {
  Rng rng(5);
  Parameter p("p", random_uniform({1, 1, 4, 4}, rng, 0.05, 0.95));
  Tensor target({1, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) target[i] = i % 3 == 0 ? 1.0 : 0.0;
  auto rep = oracle::check_gradients({&p}, [&](Tape& t) { return dice_loss(t.parameter(p), t.constant(target)); });
  CHECK(rep.max_rel_error < 1e-5);
  CHECK(rep.checked == 16);
}

TEST_CASE("unet gradient on a miniature") {
  Rng rng(2);
  UNet net(small_config(2, 1), rng);
  nn::StateDict sd = net.state();
  Tensor x = random_normal({2, 9, 4, 4}, rng, 1.0);
  Tensor target({2, 1, 4, 4});
  for (std::size_t i = 0; i < target.numel(); i += 3) target[i] = 1.0;
  auto rep = oracle::check_gradients(sd.params, [&](Tape& t) {
    return dice_loss(net.forward(t, t.constant(x), ops::NormMode::train), t.constant(target));
  }, 1e-5, 200);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("overfit one slab") {
  PreparedStudy s = phantom_study(4, true);
  REQUIRE_FALSE(s.annotation.empty());
  const auto& [z, mask] = *s.annotation.slices.begin();
  Tensor x = make_slab(s.volume, z).channels.reshaped({1, 9, 32, 32});
  Tensor target = mask.reshaped({1, 1, 32, 32});
  Rng rng(1);
  UNet net(small_config(8, 4), rng);
  nn::StateDict sd = net.state();
  AdamState adam;
  adam.learning_rate = 1e-2;
  adam.weight_decay = 0.0;
  for (int step = 0; step < 50; ++step) {
    Tape tape;
    Var loss = dice_loss(net.forward(tape, tape.constant(x), ops::NormMode::train), tape.constant(target));
    zero_grads(sd.params);
    tape.backward(loss);
    adam_step(sd.params, adam);
  }
  Tape tape(false);
  const double dc = dice_coefficient(net.forward(tape, tape.constant(x), ops::NormMode::train).value(), target);
  MESSAGE("overfit dice " << dc);
  CHECK(dc > 0.9);
}

TEST_CASE("predict_volume_mask") {
  Rng rng(0);
  UNet net(small_config(2, 2), rng);
  Volume v;
  v.voxels = random_uniform({1, 16, 16}, rng, 0.0, 1.0);
  Tensor m = predict_volume_mask(net, v);
  CHECK(m.shape() == Shape{1, 16, 16});
  Tensor direct = net.predict(make_slab(v, 0).channels.reshaped({1, 9, 16, 16}));
  CHECK(m.vec() == direct.vec());

  Volume v2;
  v2.voxels = random_uniform({11, 16, 16}, rng, 0.0, 1.0);
  Tensor m2 = predict_volume_mask(net, v2, 4);
  CHECK(m2.shape() == Shape{11, 16, 16});
  CHECK(m2.min() >= 0.0);
  CHECK(m2.max() <= 1.0);
  Tensor last = net.predict(make_slab(v2, 10).channels.reshaped({1, 9, 16, 16}));
  CHECK(slice_leading(m2, 10, 1).vec() == last.vec());
}

TEST_CASE("train_stage1 smoke run is deterministic") {
  std::vector<PreparedStudy> train = {phantom_study(1, true), phantom_study(2, true), phantom_study(3, false)};
  std::vector<PreparedStudy> val = {phantom_study(4, true)};
  Stage1TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 9;
  const fs::path root = fs::temp_directory_path() / "embolite_test_stage1";
  fs::remove_all(root);
  std::vector<double> finals;
  for (const char* run : {"a", "b"}) {
    Rng rng(cfg.seed);
    UNet net(small_config(4, 2), rng);
    Stage1Result r = train_stage1(net, train, val, cfg, root / run);
    REQUIRE(r.history.size() == 2);
    finals.push_back(r.history.back().train_dice_loss);
    CHECK(fs::exists(root / run / "best.ckpt"));
    CHECK(fs::exists(root / run / "final.ckpt"));
  }
  CHECK(finals[0] == finals[1]);
  const std::string csv = read_file(root / "a" / "metrics.csv");
  CHECK(csv == read_file(root / "b" / "metrics.csv"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(csv.rfind("epoch,train_dice_loss,val_dice,lr\n", 0) == 0);

  Rng rng(0);
  UNet net(small_config(4, 2), rng);
  CHECK_THROWS_AS(train_stage1(net, {}, val, cfg, root / "c"), DataError);
  CHECK_THROWS_AS(train_stage1(net, {phantom_study(3, false)}, val, cfg, root / "c"), DataError);
}
