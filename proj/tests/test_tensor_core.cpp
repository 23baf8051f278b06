#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "embolite/checkpoint.hpp"
#include "embolite/errors.hpp"
#include "embolite/gemm.hpp"
#include "embolite/nn.hpp"
#include "embolite/ops.hpp"
#include "embolite/optim.hpp"
#include "oracles.hpp"

using namespace embolite;
namespace fs = std::filesystem;

namespace {

Tensor run(const std::function<Var(Tape&)>& f) {
  Tape tape(false);
  return f(tape).value();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  CHECK_THROWS_AS(Tensor({0, 3}), DimensionError);
  Tensor t({2, 3, 4});
  CHECK(t.numel() == 24);
  t.at({1, 2, 3}) = 5.0;
  CHECK(t[23] == 5.0);
  CHECK(t.dim(-1) == 4);
}

TEST_CASE("conv2d spot values") {
  SUBCASE("box sum") {
    Tensor y = run([](Tape& t) {
      return ops::conv2d(t.constant(Tensor({1, 1, 3, 3}, 1.0)), t.constant(Tensor({1, 1, 3, 3}, 1.0)),
                         t.constant(Tensor({1}, 0.0)), 1, 1);
    });
    CHECK(y.at({0, 0, 1, 1}) == 9.0);
    CHECK(y.at({0, 0, 0, 0}) == 4.0);
    CHECK(y.at({0, 0, 2, 2}) == 4.0);
    CHECK(y.at({0, 0, 0, 1}) == 6.0);
  }
  SUBCASE("identity kernel") {
    Rng rng(1);
    Tensor x = random_normal({2, 1, 5, 4}, rng);
    Tensor k({1, 1, 3, 3}, 0.0);
    k.at({0, 0, 1, 1}) = 1.0;
    Tensor y = run([&](Tape& t) { return ops::conv2d(t.constant(x), t.constant(k), Var{}, 1, 1); });
    CHECK(y == x);
  }
  SUBCASE("random input against nested loops") {
    Rng rng(2);
    Tensor x = random_normal({2, 3, 5, 5}, rng);
    Tensor w = random_normal({4, 3, 3, 3}, rng);
    Tensor b = random_normal({4}, rng);
    Tensor y = run([&](Tape& t) { return ops::conv2d(t.constant(x), t.constant(w), t.constant(b), 1, 1); });
    CHECK(max_abs_diff(y, oracle::conv2d(x, w, b, 1, 1)) < 1e-12);
  }
  SUBCASE("channel mismatch names both shapes") {
    Tape t(false);
    try {
      ops::conv2d(t.constant(Tensor({1, 2, 4, 4})), t.constant(Tensor({1, 3, 3, 3})), Var{}, 1, 1);
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[1,2,4,4]") != std::string::npos);
      CHECK(msg.find("[1,3,3,3]") != std::string::npos);
    }
  }
  SUBCASE("even kernel rejected") {
    Tape t(false);
    CHECK_THROWS_AS(ops::conv2d(t.constant(Tensor({1, 1, 4, 4})), t.constant(Tensor({1, 1, 2, 2})), Var{}, 1, 0),
                    DimensionError);
  }
}

TEST_CASE("conv2d exhaustive small-shape sweep") {
  Rng rng(3);
  int cases = 0;
  for (int h = 1; h <= 6; ++h)
    for (int w = 1; w <= 6; ++w)
      for (int k : {1, 3, 5})
        for (int pad = 0; pad <= 2; ++pad)
          for (int stride = 1; stride <= 2; ++stride) {
            if (h + 2 * pad < k || w + 2 * pad < k) continue;
            const int cin = 1 + (h + w) % 3, cout = 1 + (h * w + k) % 3, n = 1 + (pad + stride) % 2;
            Tensor x = random_normal({n, cin, h, w}, rng);
            Tensor wt = random_normal({cout, cin, k, k}, rng);
            Tensor b = random_normal({cout}, rng);
            Tensor y = run([&](Tape& t) {
              return ops::conv2d(t.constant(x), t.constant(wt), t.constant(b), stride, pad);
            });
            REQUIRE(max_abs_diff(y, oracle::conv2d(x, wt, b, stride, pad)) < 1e-12);
            ++cases;
          }
  CHECK(cases > 500);
}

TEST_CASE("batchnorm2d") {
  SUBCASE("constant input normalizes to zero") {
    ops::BatchNormState st(2);
    Tensor y = run([&](Tape& t) {
      return ops::batchnorm2d(t.constant(Tensor({2, 2, 3, 3}, 0.7)), t.constant(Tensor({2}, 1.0)),
                              t.constant(Tensor({2}, 0.0)), st, ops::NormMode::train);
    });
    for (double v : y.data()) CHECK(std::abs(v) < 1e-9);
  }
  SUBCASE("gamma zero gives beta") {
    Rng rng(4);
    ops::BatchNormState st(2);
    Tensor beta({2}, std::vector<double>{0.3, -1.2});
    Tensor y = run([&](Tape& t) {
      return ops::batchnorm2d(t.constant(random_normal({2, 2, 3, 3}, rng)), t.constant(Tensor({2}, 0.0)),
                              t.constant(beta), st, ops::NormMode::train);
    });
    for (int s = 0; s < 2; ++s)
      for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 3; ++i) CHECK(y.at({s, c, i, 1}) == beta[static_cast<std::size_t>(c)]);
  }
  SUBCASE("per-channel statistics") {
    Rng rng(5);
    ops::BatchNormState st(2);
    Tensor x = random_normal({4, 2, 3, 3}, rng, 3.0);
    Tensor y = run([&](Tape& t) {
      return ops::batchnorm2d(t.constant(x), t.constant(Tensor({2}, 1.0)), t.constant(Tensor({2}, 0.0)), st,
                              ops::NormMode::train);
    });
    for (int c = 0; c < 2; ++c) {
      double mu = 0.0, var = 0.0;
      for (int s = 0; s < 4; ++s)
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) mu += y.at({s, c, i, j});
      mu /= 36.0;
      for (int s = 0; s < 4; ++s)
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) var += (y.at({s, c, i, j}) - mu) * (y.at({s, c, i, j}) - mu);
      var /= 36.0;
      CHECK(std::abs(mu) < 1e-6);
      CHECK(std::abs(var - 1.0) < 1e-4);
    }
    // running stats moved towards the batch statistics with momentum 0.1
    CHECK(st.running_mean[0] != 0.0);
  }
  SUBCASE("degenerate batch") {
    ops::BatchNormState st(1);
    Tape t(false);
    CHECK_THROWS_AS(ops::batchnorm2d(t.constant(Tensor({1, 1, 1, 1})), t.constant(Tensor({1}, 1.0)),
                                     t.constant(Tensor({1}, 0.0)), st, ops::NormMode::train),
                    DimensionError);
    CHECK_NOTHROW(ops::batchnorm2d(t.constant(Tensor({1, 1, 1, 1})), t.constant(Tensor({1}, 1.0)),
                                   t.constant(Tensor({1}, 0.0)), st, ops::NormMode::eval));
  }
}

TEST_CASE("activations") {
  Tensor x({3}, std::vector<double>{0.0, -3.0, 3.0});
  Tensor s = run([&](Tape& t) { return ops::sigmoid(t.constant(x)); });
  CHECK(s[0] == 0.5);
  Tensor r = run([&](Tape& t) { return ops::relu(t.constant(x)); });
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 3.0);

  Parameter p("x", Tensor({1}, 0.7));
  Tape tape;
  Var y = ops::tanh(tape.parameter(p));
  tape.backward(y);
  const double h = 1e-5;
  const double fd = (std::tanh(0.7 + h) - std::tanh(0.7 - h)) / (2 * h);
  CHECK(std::abs(p.grad[0] - fd) < 1e-7);
}

TEST_CASE("pool2d") {
  Tensor block({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  CHECK(run([&](Tape& t) { return ops::pool2d(t.constant(block), ops::PoolKind::avg, 2, 2); })[0] == 2.5);
  CHECK(run([&](Tape& t) { return ops::pool2d(t.constant(block), ops::PoolKind::max, 2, 2); })[0] == 4.0);

  Tensor big({1, 64, 128, 128}, 0.25);
  Tensor pooled = run([&](Tape& t) { return ops::pool2d(t.constant(big), ops::PoolKind::avg, 32, 32); });
  CHECK(pooled.shape() == Shape{1, 64, 4, 4});
  CHECK(pooled.numel() == 1024);
  for (double v : pooled.data()) CHECK(v == 0.25);
  Tensor maxed = run([&](Tape& t) { return ops::pool2d(t.constant(big), ops::PoolKind::max, 32, 32); });
  for (double v : maxed.data()) CHECK(v == 0.25);

  Tape t(false);
  CHECK_THROWS_AS(ops::pool2d(t.constant(Tensor({1, 1, 6, 6})), ops::PoolKind::avg, 4, 4), DimensionError);

  SUBCASE("max tie routes gradient to first element") {
    Parameter p("x", Tensor({1, 1, 2, 2}, 1.0));
    Tape tape;
    tape.backward(ops::pool2d(tape.parameter(p), ops::PoolKind::max, 2, 2));
    CHECK(p.grad.vec() == std::vector<double>{1, 0, 0, 0});
  }
}

TEST_CASE("upsample2x") {
  Tensor x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor y = run([&](Tape& t) { return ops::upsample2x(t.constant(x)); });
  CHECK(y.shape() == Shape{1, 1, 4, 4});
  CHECK(y.vec() == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
  Tensor back = run([&](Tape& t) { return ops::pool2d(ops::upsample2x(t.constant(x)), ops::PoolKind::avg, 2, 2); });
  CHECK(back == x);

  Rng rng(6);
  Parameter p("x", random_normal({1, 2, 3, 3}, rng));
  auto rep = oracle::check_gradients({&p}, [&](Tape& t) { return ops::upsample2x(t.parameter(p)); });
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("linear") {
  Rng rng(7);
  Tensor x = random_normal({3, 5}, rng);
  Tensor eye({5, 5}, 0.0);
  for (int i = 0; i < 5; ++i) eye.at({i, i}) = 1.0;
  CHECK(run([&](Tape& t) { return ops::linear(t.constant(x), t.constant(eye), t.constant(Tensor({5}))); }) == x);

  Tensor b({2}, std::vector<double>{0.5, -2.0});
  Tensor z = run([&](Tape& t) { return ops::linear(t.constant(x), t.constant(Tensor({2, 5})), t.constant(b)); });
  for (int r = 0; r < 3; ++r) {
    CHECK(z.at({r, 0}) == 0.5);
    CHECK(z.at({r, 1}) == -2.0);
  }

  Tensor w = random_normal({2, 5}, rng);
  Tensor y = run([&](Tape& t) { return ops::linear(t.constant(x), t.constant(w), t.constant(b)); });
  for (int r = 0; r < 3; ++r)
    for (int o = 0; o < 2; ++o) {
      double dot = b[static_cast<std::size_t>(o)];
      for (int i = 0; i < 5; ++i) dot += x.at({r, i}) * w.at({o, i});
      CHECK(std::abs(y.at({r, o}) - dot) < 1e-12);
    }
  Tape t(false);
  CHECK_THROWS_AS(ops::linear(t.constant(x), t.constant(Tensor({2, 4})), Var{}), DimensionError);
}

TEST_CASE("gradient correctness of every layer") {
  Rng rng(8);
  constexpr double kTol = 1e-4;

  SUBCASE("conv2d") {
    Parameter x("x", random_normal({2, 3, 5, 4}, rng));
    Parameter w("w", random_normal({2, 3, 3, 3}, rng));
    Parameter b("b", random_normal({2}, rng));
    for (int stride : {1, 2}) {
      auto rep = oracle::check_gradients({&x, &w, &b}, [&](Tape& t) {
        return ops::conv2d(t.parameter(x), t.parameter(w), t.parameter(b), stride, 1);
      });
      CHECK(rep.max_rel_error < kTol);
    }
  }
  SUBCASE("batchnorm train and eval") {
    Parameter x("x", random_normal({3, 2, 3, 3}, rng));
    Parameter g("g", random_normal({2}, rng));
    Parameter b("b", random_normal({2}, rng));
    for (auto mode : {ops::NormMode::train, ops::NormMode::eval}) {
      ops::BatchNormState st(2);
      st.running_mean[0] = 0.3;
      st.running_var[1] = 2.0;
      auto rep = oracle::check_gradients({&x, &g, &b}, [&](Tape& t) {
        ops::BatchNormState local = st;
        return ops::batchnorm2d(t.parameter(x), t.parameter(g), t.parameter(b), local, mode);
      });
      CHECK(rep.max_rel_error < kTol);
    }
  }
  SUBCASE("activations") {
    Parameter x("x", random_normal({4, 5}, rng));
    for (auto kind : {ops::Activation::relu, ops::Activation::sigmoid, ops::Activation::tanh}) {
      auto rep = oracle::check_gradients({&x}, [&](Tape& t) { return ops::activation(t.parameter(x), kind); });
      CHECK(rep.max_rel_error < kTol);
    }
  }
  SUBCASE("pools") {
    Parameter x("x", random_normal({2, 2, 4, 6}, rng));
    for (auto kind : {ops::PoolKind::max, ops::PoolKind::avg}) {
      auto rep = oracle::check_gradients({&x}, [&](Tape& t) { return ops::pool2d(t.parameter(x), kind, 2, 2); });
      CHECK(rep.max_rel_error < kTol);
    }
  }
  SUBCASE("linear, matmul, softmax, row reductions") {
    Parameter x("x", random_normal({3, 4}, rng));
    Parameter w("w", random_normal({2, 4}, rng));
    Parameter b("b", random_normal({2}, rng));
    Parameter m("m", random_normal({4, 5}, rng));
    CHECK(oracle::check_gradients({&x, &w, &b}, [&](Tape& t) {
            return ops::linear(t.parameter(x), t.parameter(w), t.parameter(b));
          }).max_rel_error < kTol);
    CHECK(oracle::check_gradients({&x, &m}, [&](Tape& t) {
            return ops::matmul(t.parameter(x), t.parameter(m));
          }).max_rel_error < kTol);
    CHECK(oracle::check_gradients({&x}, [&](Tape& t) { return ops::softmax(t.parameter(x)); }).max_rel_error < kTol);
    for (auto kind : {ops::RowReduce::mean, ops::RowReduce::max}) {
      CHECK(oracle::check_gradients({&x}, [&](Tape& t) {
              return ops::reduce_rows(t.parameter(x), kind);
            }).max_rel_error < kTol);
    }
  }
  SUBCASE("structural ops") {
    Parameter a("a", random_normal({2, 3, 2, 2}, rng));
    Parameter c("c", random_normal({2, 1, 2, 2}, rng));
    Parameter w("w", random_normal({3}, rng));
    CHECK(oracle::check_gradients({&a, &c}, [&](Tape& t) {
            Var cat = ops::concat({t.parameter(a), t.parameter(c)}, 1);
            return ops::mul(ops::slice(cat, 1, 1, 3), ops::sub(t.parameter(a), ops::scale(t.parameter(a), 0.5)));
          }).max_rel_error < kTol);
    CHECK(oracle::check_gradients({&a, &w}, [&](Tape& t) {
            return ops::reshape(ops::channel_mul(t.parameter(w), t.parameter(a)), {6, 4});
          }).max_rel_error < kTol);
  }
}

TEST_CASE("tape determinism and single visit") {
  auto grads = [] {
    Rng rng(11);
    nn::Conv2d conv("c", 2, 3, 3, rng);
    Tensor x = random_normal({2, 2, 6, 6}, rng);
    Tape t;
    Var y = ops::mean(ops::relu(conv.forward(t, t.constant(x))));
    t.backward(y);
    return std::make_pair(conv.weight().grad, t.last_backward_visits());
  };
  auto [g1, v1] = grads();
  auto [g2, v2] = grads();
  CHECK(g1 == g2);
  // weight, bias, conv, relu, sum, scale; the constant input needs no gradient
  CHECK(v1 == 6);
}

TEST_CASE("finite checks") {
  set_finite_checks(true);
  Tape t(false);
  CHECK_THROWS_AS(t.constant(Tensor({1}, std::nan(""))), NumericError);
  set_finite_checks(false);
  CHECK_NOTHROW(t.constant(Tensor({1}, std::nan(""))));
}

TEST_CASE("f32 matmul precision stays close to f64") {
  Rng rng(12);
  Tensor x = random_normal({1, 4, 8, 8}, rng);
  Tensor w = random_normal({5, 4, 3, 3}, rng);
  auto conv = [&] { return run([&](Tape& t) { return ops::conv2d(t.constant(x), t.constant(w), Var{}, 1, 1); }); };
  Tensor exact = conv();
  PrecisionScope scope(Precision::f32);
  CHECK(max_abs_diff(conv(), exact) < 1e-4);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient, zero decay leaves params") {
    Parameter p("p", Tensor({3}, 1.5));
    AdamState st;
    st.weight_decay = 0.0;
    Parameter* ps[] = {&p};
    adam_step(ps, st);
    CHECK(p.value == Tensor({3}, 1.5));
    CHECK(st.step == 1);
  }
  SUBCASE("first step is lr * sign(grad)") {
    Parameter p("p", Tensor({2}, std::vector<double>{0.5, 0.5}));
    p.grad = Tensor({2}, std::vector<double>{1.0, -4.0});
    AdamState st;
    st.weight_decay = 0.0;
    Parameter* ps[] = {&p};
    adam_step(ps, st);
    CHECK(std::abs(p.value[0] - (0.5 - 1e-3)) < 1e-10);
    CHECK(std::abs(p.value[1] - (0.5 + 1e-3)) < 1e-10);
  }
  SUBCASE("descent on x^2") {
    Parameter p("x", Tensor({1}, 1.0));
    AdamState st;
    st.learning_rate = 1e-2;
    Parameter* ps[] = {&p};
    double prev = 1.0;
    for (int i = 0; i < 100; ++i) {
      p.grad[0] = 2.0 * p.value[0];
      adam_step(ps, st);
      CHECK(std::abs(p.value[0]) < prev);
      prev = std::abs(p.value[0]);
    }
    CHECK(st.step == 100);
  }
  SUBCASE("decoupled weight decay") {
    Parameter p("p", Tensor({1}, 2.0));
    AdamState st;
    st.learning_rate = 0.1;
    st.weight_decay = 0.5;
    Parameter* ps[] = {&p};
    adam_step(ps, st);
    CHECK(p.value[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
  }
  SUBCASE("NaN gradient names the parameter") {
    Parameter p("encoder.weight", Tensor({1}, 0.0));
    p.grad[0] = std::nan("");
    AdamState st;
    Parameter* ps[] = {&p};
    try {
      adam_step(ps, st);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("encoder.weight") != std::string::npos);
    }
  }
}

TEST_CASE("plateau scheduler") {
  SUBCASE("improving metric keeps lr") {
    PlateauScheduler s;
    for (int e = 0; e < 10; ++e) CHECK(s.epoch_end(1.0 - 0.05 * e) == 1e-3);
  }
  SUBCASE("patience 2, three flat epochs, one decay") {
    PlateauScheduler s;
    s.patience = 2;
    s.epoch_end(1.0);
    int decays = 0;
    double lr = s.learning_rate;
    for (int e = 0; e < 3; ++e) {
      const double next = s.epoch_end(1.0);
      if (next < lr) ++decays;
      lr = next;
    }
    CHECK(decays == 1);
    CHECK(lr == doctest::Approx(1e-4));
  }
  SUBCASE("floor at min_lr") {
    PlateauScheduler s;
    s.patience = 0;
    s.learning_rate = 1e-6;
    s.epoch_end(1.0);
    for (int e = 0; e < 5; ++e) CHECK(s.epoch_end(2.0) == 1e-6);
  }
}

TEST_CASE("checkpoint round trip and corruption") {
  const fs::path dir = fs::temp_directory_path() / "embolite_ckpt_test";
  fs::create_directories(dir);
  Rng rng(13);
  nn::Conv2d conv("conv", 2, 3, 3, rng);
  nn::BatchNorm2d bn("bn", 3);
  nn::StateDict sd;
  conv.collect(sd);
  bn.collect(sd);
  save_checkpoint(dir / "a.ckpt", sd, 42, {{"kind", "test"}});

  std::ifstream in(dir / "a.ckpt", std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "EMB1");

  Checkpoint ck = load_checkpoint(dir / "a.ckpt");
  CHECK(ck.step == 42);
  CHECK(ck.meta["kind"] == "test");
  CHECK(ck.tensors.size() == 6);
  CHECK(*ck.find("conv.weight") == conv.weight().value);

  Rng other(14);
  nn::Conv2d conv2("conv", 2, 3, 3, other);
  nn::BatchNorm2d bn2("bn", 3);
  nn::StateDict sd2;
  conv2.collect(sd2);
  bn2.collect(sd2);
  restore_state(ck, sd2);
  CHECK(conv2.weight().value == conv.weight().value);

  {
    std::fstream f(dir / "a.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  try {
    load_checkpoint(dir / "a.ckpt");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 0);
  }
  fs::remove_all(dir);
}
