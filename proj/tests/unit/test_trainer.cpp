#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "stgdn/io.hpp"
#include "stgdn/model.hpp"
#include "stgdn/synthetic.hpp"
#include "stgdn/trainer.hpp"
#include "test_util.hpp"

using namespace stgdn;

namespace {

struct Fixture {
  SynthWorld world;
  Dataset dataset;
  ModelConfig config;
};

Fixture tiny() {
  SynthConfig s;
  s.rows = s.cols = 2;
  s.days = 3;
  s.slots_per_day = 24;
  s.planted = 1;
  Fixture f;
  f.world = generate(s);
  DatasetOptions o;
  o.resolutions = {{Resolution::hour, 2}};
  f.dataset = make_dataset(f.world.flows, f.world.externals, o);
  f.config.rows = f.config.cols = 2;
  f.config.resolutions = o.resolutions;
  f.config.d = 4;
  f.config.layers = 1;
  f.config.heads = 2;
  f.config.k_nbr = 4;
  f.config.k_diff = 1;
  f.config.q_out = 4;
  f.config.d_e = 2;
  f.config.head_hidden = 4;
  f.config.m_dep = 2;
  f.config.omega_sample = 4;
  return f;
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch = 8;
  t.lr = 5e-3;
  return t;
}

ParamSet single(const std::string& name, Tensor t) {
  ParamSet p;
  p.add(name, std::move(t));
  return p;
}

}  // namespace

TEST(Adam, FirstStepMatchesHandFormula) {
  ParamSet p = single("w", Tensor::matrix(1, 4, {0.5, -0.25, 2.0, 0.0}));
  const ParamSet g = single("w", Tensor::matrix(1, 4, {3.0, -1e-3, 0.0, 1e-9}));
  TrainConfig tc;
  tc.lr = 0.01;
  AdamState s = make_adam_state(p, tc);
  const ParamSet before = p;
  adam_step(p, g, s);
  EXPECT_EQ(s.step, 1u);
  for (std::size_t k = 0; k < 4; ++k) {
    const double gk = g.at(0)[k];
    const double expected = before.at(0)[k] - tc.lr * gk / (std::abs(gk) + tc.adam_eps);
    EXPECT_NEAR(p.at(0)[k], expected, 1e-15);
  }
  EXPECT_NEAR(before.at(0)[0] - p.at(0)[0], tc.lr, 1e-6);
  EXPECT_NEAR(p.at(0)[1] - before.at(0)[1], tc.lr, 1e-6);
  EXPECT_EQ(p.at(0)[2], before.at(0)[2]);
}

TEST(Adam, SecondStepBiasCorrection) {
  ParamSet p = single("w", Tensor::matrix(1, 1, {1.0}));
  TrainConfig tc;
  AdamState s = make_adam_state(p, tc);
  adam_step(p, single("w", Tensor::matrix(1, 1, {2.0})), s);
  const double after_one = p.at(0)[0];
  adam_step(p, single("w", Tensor::matrix(1, 1, {-1.0})), s);
  const double m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0, v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0;
  const double mh = m / (1.0 - 0.81), vh = v / (1.0 - 0.999 * 0.999);
  EXPECT_NEAR(p.at(0)[0], after_one - tc.lr * mh / (std::sqrt(vh) + tc.adam_eps), 1e-15);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParamSet p = single("w", testing_util::random_tensor({3, 3}, 1, -1.0, 1.0));
  const ParamSet before = p;
  AdamState s = make_adam_state(p, TrainConfig{});
  adam_step(p, p.zeros_like(), s);
  EXPECT_EQ(p.at(0), before.at(0));
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  ParamSet p;
  p.add("a", Tensor::matrix(1, 2, {1.0, 2.0}));
  p.add("layer.b", Tensor::matrix(1, 2, {3.0, 4.0}));
  ParamSet g = p.zeros_like();
  g.at(0)[0] = 1.0;
  g.at(1)[1] = std::nan("");
  const ParamSet before = p;
  AdamState s = make_adam_state(p, TrainConfig{});
  try {
    adam_step(p, g, s);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("'layer.b'"), std::string::npos) << e.what();
  }
  EXPECT_EQ(p.at(0), before.at(0));
  EXPECT_EQ(s.step, 0u);
  EXPECT_THROW(adam_step(p, single("a", Tensor({1, 2})), s), ValidationError);
}

TEST(Adam, ClipGlobalNorm) {
  ParamSet g;
  g.add("a", Tensor::matrix(1, 2, {3.0, 0.0}));
  g.add("b", Tensor::matrix(1, 1, {4.0}));
  EXPECT_EQ(clip_global_norm(g, 10.0), 5.0);
  EXPECT_EQ(g.at(0)[0], 3.0);
  EXPECT_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g.at(0)[0], 0.6, 1e-15);
  EXPECT_NEAR(g.at(1)[0], 0.8, 1e-15);
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  t.validate();
  for (auto mutate : std::vector<void (*)(TrainConfig&)>{
           [](TrainConfig& c) { c.epochs = 0; }, [](TrainConfig& c) { c.batch = 0; },
           [](TrainConfig& c) { c.lr = -1.0; }, [](TrainConfig& c) { c.beta1 = 1.0; },
           [](TrainConfig& c) { c.lambda = 1.5; }, [](TrainConfig& c) { c.val_fraction = 1.0; },
           [](TrainConfig& c) { c.threads = 0; }}) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ValidationError);
  }
}

TEST(Checkpoint, BitExactRoundTripAndDecodeErrors) {
  const auto f = tiny();
  const ParamSet p = init_parameters(f.config, 3);
  const std::string bytes = encode_checkpoint(f.config.digest(), p);
  const Checkpoint c = decode_checkpoint(bytes);
  EXPECT_EQ(c.digest, f.config.digest());
  ASSERT_EQ(c.params.size(), p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_EQ(c.params.name(i), p.name(i));
    EXPECT_EQ(c.params.at(i), p.at(i));
  }
  EXPECT_EQ(encode_checkpoint(c.digest, c.params), bytes);
  check_checkpoint(c, f.config);

  EXPECT_THROW(decode_checkpoint("NOTACKPT" + bytes.substr(8)), ValidationError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), ValidationError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), ValidationError);
  EXPECT_THROW(decode_checkpoint(""), ValidationError);

  testing_util::TempDir dir("trainer");
  const auto path = (dir.path() / "m.ckpt").string();
  save_checkpoint(path, f.config.digest(), p);
  EXPECT_EQ(io::read_file(path), bytes);
  EXPECT_THROW(load_checkpoint((dir.path() / "missing.ckpt").string()), std::exception);
}

TEST(Checkpoint, MismatchListsShapes) {
  const auto f = tiny();
  ModelConfig wider = f.config;
  wider.d = 6;
  const Checkpoint c{f.config.digest(), init_parameters(f.config, 1)};
  try {
    check_checkpoint(c, wider);
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("hour.wq"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4 x 4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[6 x 6]"), std::string::npos) << msg;
  }
  ModelConfig other = f.config;
  other.slope = 0.1;
  EXPECT_THROW(check_checkpoint(c, other), ValidationError);
}

TEST(Train, DeterministicAcrossRuns) {
  const auto f = tiny();
  testing_util::TempDir dir("trainer");
  auto run = [&](const std::string& tag) {
    Model model(f.config, f.dataset.profiles);
    TrainConfig tc = quick(3);
    tc.checkpoint_path = (dir.path() / (tag + ".ckpt")).string();
    tc.log_path = (dir.path() / (tag + ".log")).string();
    train(model, f.dataset, init_parameters(f.config, 5), tc);
    return io::read_file(tc.checkpoint_path) + io::read_file(tc.log_path);
  };
  EXPECT_EQ(run("a"), run("b"));
}

TEST(Train, LogLinesAndLossDecrease) {
  const auto f = tiny();
  Model model(f.config, f.dataset.profiles);
  testing_util::TempDir dir("trainer");
  TrainConfig tc = quick(6);
  tc.patience = 100;
  tc.log_path = (dir.path() / "train.log").string();
  std::size_t calls = 0;
  const auto r = train(model, f.dataset, init_parameters(f.config, 5), tc, [&](const EpochRecord&) { ++calls; });
  EXPECT_EQ(calls, 6u);
  ASSERT_EQ(r.log.size(), 6u);
  EXPECT_LT(r.log.back().train_loss, r.log.front().train_loss);
  const auto lines = io::split(io::trim(io::read_file(tc.log_path)), '\n');
  ASSERT_EQ(lines.size(), 6u);
  EXPECT_EQ(lines[0], epoch_json(r.log[0]));
  EXPECT_EQ(lines[0].rfind("{\"epoch\":1,\"train_loss\":", 0), 0u);
  EXPECT_EQ(r.fit_examples + r.val_examples, f.dataset.train.size());
}

TEST(Train, PatienceZeroStopsAtFirstNonImprovement) {
  const auto f = tiny();
  Model model(f.config, f.dataset.profiles);
  TrainConfig tc = quick(200);
  tc.lr = 0.05;
  tc.patience = 0;
  const auto r = train(model, f.dataset, init_parameters(f.config, 5), tc);
  ASSERT_FALSE(r.log.empty());
  ASSERT_LT(r.log.size(), 200u);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_FALSE(r.log.back().improved);
  for (std::size_t i = 0; i + 1 < r.log.size(); ++i) EXPECT_TRUE(r.log[i].improved) << i;
  EXPECT_EQ(r.best_epoch, r.log.size() - 1);
}

TEST(Train, EvaluationMatchesLoggedLoss) {
  const auto f = tiny();
  Model model(f.config, f.dataset.profiles);
  TrainConfig tc = quick(1);
  const auto r = train(model, f.dataset, init_parameters(f.config, 5), tc);
  const auto [fit, val] = split_validation(f.dataset, tc.val_fraction);
  EXPECT_NEAR(mean_loss(model, r.final_params, fit, tc.lambda), r.log.back().train_loss, 1e-9);
  EXPECT_NEAR(mean_loss(model, r.best_params, val, tc.lambda), r.log.back().val_loss, 1e-9);
}

TEST(Train, ZeroHeadScoresLikeMidpointPredictor) {
  const auto f = tiny();
  Model model(f.config, f.dataset.profiles);
  ParamSet p = init_parameters(f.config, 5);
  p.get("head.w3").fill(0.0);
  const Metrics m = evaluate(model, p, f.dataset);
  double se[2] = {0.0, 0.0};
  std::size_t n = 0;
  const NormStats& s = f.dataset.norm;
  for (const auto& ex : f.dataset.test) {
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t c = 0; c < 2; ++c) {
        const double mid = 0.5 * (s.lo[c] + s.hi[c]);
        const double truth = f.world.flows.at(Flow(c), r, ex.target);
        se[c] += (truth - mid) * (truth - mid);
      }
      ++n;
    }
  }
  EXPECT_NEAR(m.rmse_in, std::sqrt(se[0] / static_cast<double>(n)), 1e-9);
  EXPECT_NEAR(m.rmse_out, std::sqrt(se[1] / static_cast<double>(n)), 1e-9);
}

TEST(Train, Errors) {
  auto f = tiny();
  Model model(f.config, f.dataset.profiles);
  Dataset empty = f.dataset;
  empty.test.clear();
  EXPECT_THROW(evaluate(model, init_parameters(f.config, 1), empty), ValidationError);
  empty.train.clear();
  EXPECT_THROW(train(model, empty, init_parameters(f.config, 1), quick(1)), ValidationError);
  ModelConfig other = f.config;
  other.d = 6;
  EXPECT_THROW(train(model, f.dataset, init_parameters(other, 1), quick(1)), ValidationError);
}
