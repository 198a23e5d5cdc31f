// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "moocembed/checkpoint.hpp"
#include "moocembed/optim.hpp"

using namespace moocembed;

namespace {

Param scalar(double w, double g) {
  Param p("w", Array({1}, {w}));
  p.grad(0) = g;
  return p;
}

// Small regression problem: Dense(3 -> 1) on fixed data, batch-mean squared loss.
struct Regression {
  Rng rng{21};
  Dense dense{"reg", 3, 1, rng};
  Array x = rng_normal(rng, {40, 3});
  Array y = rng_normal(rng, {40, 1});

  ParamRefs params() {
    ParamRefs ps;
    dense.collect(ps);
    return ps;
  }

  double batch(std::span<const std::size_t> idx) {
    Array xb({idx.size(), 3}), yb({idx.size(), 1});
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t c = 0; c < 3; ++c) xb(r, c) = x(idx[r], c);
      yb(r, 0) = y(idx[r], 0);
    }
    Array out = dense.forward(xb);
    Array d(out.shape());
    double loss = 0.0;
    const double n = static_cast<double>(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const double e = out(r, 0) - yb(r, 0);
      loss += e * e / n;
      d(r, 0) = 2.0 * e / n;
    }
    dense.backward(d);
    return loss;
  }

  Trainer::BatchFn fn() {
    return [this](std::span<const std::size_t> idx) { return batch(idx); };
  }
};

TrainConfig config(Rule rule, double lr, std::size_t epochs) {
  TrainConfig c;
  c.optimizer = rule;
  c.learning_rate = lr;
  c.epochs = epochs;
  c.batch_size = 8;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(Optimizer, SgdStep) {
  Param p = scalar(0.0, 1.0);
  Optimizer(Rule::sgd).step({&p}, 0.1);
  EXPECT_DOUBLE_EQ(p.value(0), -0.1);
  EXPECT_EQ(p.grad(0), 0.0);
}

TEST(Optimizer, AdamFirstStepClosedForm) {
  for (double g : {3.0, -0.02, 1e-3}) {
    Param p = scalar(1.0, g);
    Optimizer(Rule::adam).step({&p}, 0.01);
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    const double expected = 1.0 - 0.01 * g / (std::abs(g) + 1e-8);
    EXPECT_NEAR(p.value(0), expected, 1e-15);
    EXPECT_NEAR(std::abs(1.0 - p.value(0)), 0.01, 1e-6);
  }
}

TEST(Optimizer, RmspropFirstStepClosedForm) {
  Param p = scalar(0.0, 2.0);
  Optimizer(Rule::rmsprop).step({&p}, 0.001);
  EXPECT_NEAR(p.value(0), -0.001 * 2.0 / (std::sqrt(0.1 * 4.0) + 1e-8), 1e-15);
}

TEST(Optimizer, ZeroGradientLeavesParameters) {
  for (Rule r : {Rule::sgd, Rule::rmsprop, Rule::adam}) {
    Param p("w", Array({2, 2}, {1, 2, 3, 4}));
    Optimizer opt(r);
    for (int i = 0; i < 3; ++i) opt.step({&p}, 0.1);
    EXPECT_EQ(p.value, Array({2, 2}, {1, 2, 3, 4})) << rule_name(r);
  }
}

TEST(Optimizer, NanGradientNamesParameter) {
  Param p = scalar(0.0, std::nan(""));
  p.name = "encoder.lstm.wx";
  try {
    Optimizer(Rule::adam).step({&p}, 0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.lstm.wx"), std::string::npos);
  }
}

TEST(Optimizer, GroupMultiplierScalesStep) {
  Param a = scalar(0.0, 1.0), b = scalar(0.0, 1.0);
  b.group = "encoder";
  Optimizer(Rule::sgd).step({&a, &b}, 0.1, {{"encoder", 0.1}});
  EXPECT_DOUBLE_EQ(a.value(0), -0.1);
  EXPECT_DOUBLE_EQ(b.value(0), -0.1 * 0.1);
}

TEST(Optimizer, SgdOnConvexQuadraticIsMonotone) {
  Param p = scalar(5.0, 0.0);
  Optimizer opt(Rule::sgd);
  double prev = 25.0;
  for (int i = 0; i < 200; ++i) {
    p.grad(0) = 2.0 * p.value(0);
    opt.step({&p}, 0.05);
    const double loss = p.value(0) * p.value(0);
    ASSERT_LE(loss, prev);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-10);
}

TEST(Train, ZeroLearningRateGivesConstantHistory) {
  Regression r;
  auto h = train(r.params(), 40, config(Rule::adam, 0.0, 5), r.fn());
  ASSERT_EQ(h.size(), 5u);
  for (double v : h) EXPECT_NEAR(v, h[0], 1e-12);
}

TEST(Train, SameSeedIsBitIdentical) {
  Regression a, b;
  auto ha = train(a.params(), 40, config(Rule::rmsprop, 0.01, 10), a.fn());
  auto hb = train(b.params(), 40, config(Rule::rmsprop, 0.01, 10), b.fn());
  EXPECT_EQ(ha, hb);
  EXPECT_LT(ha.back(), ha.front());
}

TEST(Train, AllOnesMultipliersMatchUngrouped) {
  Regression a, b;
  set_group({&b.dense.weight}, "encoder");
  set_group({&b.dense.bias}, "head");
  TrainConfig grouped = config(Rule::adam, 0.01, 8);
  grouped.group_lr_multipliers = {{"encoder", 1.0}, {"head", 1.0}};
  auto ha = train(a.params(), 40, config(Rule::adam, 0.01, 8), a.fn());
  auto hb = train(b.params(), 40, grouped, b.fn());
  EXPECT_EQ(ha, hb);
  EXPECT_EQ(a.dense.weight.value, b.dense.weight.value);
}

TEST(Train, EmptyDatasetRejected) {
  Regression r;
  EXPECT_THROW(train(r.params(), 0, config(Rule::sgd, 0.1, 1), r.fn()), ArgumentError);
}

TEST(Train, PatienceStopsOnFlatValidation) {
  Regression r;
  TrainConfig c = config(Rule::sgd, 0.01, 100);
  c.patience = 3;
  auto h = train(r.params(), 40, c, r.fn(), [](std::size_t, double) { return 1.0; });
  EXPECT_EQ(h.size(), 4u);
}

TEST(Train, StopCallbackEndsEarly) {
  Regression r;
  auto h = train(r.params(), 40, config(Rule::sgd, 0.01, 100), r.fn(), {},
                 [](std::size_t e, double) { return e == 6; });
  EXPECT_EQ(h.size(), 7u);
}

TEST(Train, ResumeFromCheckpointFollowsSameTrajectory) {
  const TrainConfig c = config(Rule::adam, 0.01, 1);
  Regression full;
  Trainer t_full(full.params(), 40, c);
  std::vector<double> want;
  for (int e = 0; e < 8; ++e) want.push_back(t_full.run_epoch(full.fn()));

  Regression first;
  Trainer t_first(first.params(), 40, c);
  std::vector<double> got;
  for (int e = 0; e < 4; ++e) got.push_back(t_first.run_epoch(first.fn()));
  std::stringstream params_buf, state_buf;
  save_params(first.params(), params_buf);
  write_arrays(t_first.state(), state_buf);

  Regression second;
  load_params(second.params(), params_buf);
  Trainer t_second(second.params(), 40, c);
  t_second.restore(read_arrays(state_buf));
  EXPECT_EQ(t_second.epoch(), 4u);
  for (int e = 0; e < 4; ++e) got.push_back(t_second.run_epoch(second.fn()));
  EXPECT_EQ(got, want);
  EXPECT_EQ(second.dense.weight.value, full.dense.weight.value);
}

TEST(Checkpoint, BitExactRoundTrip) {
  Rng rng(31);
  NamedArrays arrays = {{"a", rng_normal(rng, {3})}, {"b.w", rng_normal(rng, {2, 5})}, {"c", rng_normal(rng, {2, 2, 2})}};
  arrays[0].second[1] = -0.0;
  arrays[0].second[2] = std::nextafter(1.0, 2.0);
  std::stringstream buf;
  write_arrays(arrays, buf);
  auto back = read_arrays(buf);
  ASSERT_EQ(back.size(), arrays.size());
  for (std::size_t k = 0; k < arrays.size(); ++k) {
    EXPECT_EQ(back[k].first, arrays[k].first);
    ASSERT_EQ(back[k].second.shape(), arrays[k].second.shape());
    for (std::size_t i = 0; i < arrays[k].second.size(); ++i)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(back[k].second[i]), std::bit_cast<std::uint64_t>(arrays[k].second[i]));
  }
}

TEST(Checkpoint, RejectsForeignAndMismatchedFiles) {
  std::stringstream junk("not a checkpoint at all");
  EXPECT_THROW(read_arrays(junk), ParseError);

  Rng rng(1);
  Dense small("d", 2, 2, rng), big("d", 3, 2, rng), other("e", 2, 2, rng);
  ParamRefs ps_small, ps_big, ps_other;
  small.collect(ps_small);
  big.collect(ps_big);
  other.collect(ps_other);
  std::stringstream buf;
  save_params(ps_small, buf);
  const std::string bytes = buf.str();
  std::stringstream a(bytes), b(bytes), trunc(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_params(ps_big, a), ShapeError);
  EXPECT_THROW(load_params(ps_other, b), ReferenceError);
  EXPECT_THROW(read_arrays(trunc), ParseError);
}

TEST(TrainConfig, ReadsKeyValues) {
  std::istringstream in("# comment\nlearning_rate = 0.004\noptimizer = rmsprop\nepochs=50\nlr_multiplier.encoder = 0.1\n");
  auto c = train_config_from(KeyValues::parse(in));
  EXPECT_DOUBLE_EQ(c.learning_rate, 0.004);
  EXPECT_EQ(c.optimizer, Rule::rmsprop);
  EXPECT_EQ(c.epochs, 50u);
  EXPECT_EQ(c.batch_size, 64u);
  EXPECT_DOUBLE_EQ(c.multiplier("encoder"), 0.1);
  EXPECT_DOUBLE_EQ(c.multiplier("head"), 1.0);
  std::istringstream bad("optimizer = lbfgs\n");
  EXPECT_THROW(train_config_from(KeyValues::parse(bad)), ArgumentError);
  std::istringstream no_eq("learning_rate 0.1\n");
  EXPECT_THROW(KeyValues::parse(no_eq), ParseError);
}
