#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "common/fixtures.hpp"
#include "common/grad_cases.hpp"
#include "densepipe/checkpoint.hpp"
#include "densepipe/train.hpp"

namespace densepipe {
namespace {

using testing::random_tensor;
using testing::synthetic_set;
using testing::tiny_config;

std::map<std::string, Tensor> scalar(const std::string& name, double v) { return {{name, Tensor({1}, v)}}; }

double step_once(OptimizerKind kind, double theta, double g, double lr) {
  auto params = scalar("w", theta);
  OptimizerState s;
  s.kind = kind;
  optimizer_step(params, scalar("w", g), s, lr);
  EXPECT_EQ(s.step, 1u);
  return params.at("w")[0];
}

TEST(Optimizer, SgdStep) { EXPECT_NEAR(step_once(OptimizerKind::sgd, 1.0, 2.0, 0.1), 0.8, 1e-15); }

TEST(Optimizer, AdamFirstStep) {
  // m = 0.1, v = 0.001; bias correction restores m_hat = 1, v_hat = 1.
  const double delta = step_once(OptimizerKind::adam, 0.0, 1.0, 1e-4);
  EXPECT_NEAR(delta, -1e-4 / (1.0 + 1e-8), 1e-18);
  EXPECT_NEAR(delta, -9.9999e-5, 1e-9);
}

TEST(Optimizer, RmspropFirstStep) {
  const double delta = step_once(OptimizerKind::rmsprop, 0.0, 2.0, 0.01);
  EXPECT_NEAR(delta, -0.01 * 2.0 / std::sqrt(0.4 + 1e-8), 1e-15);
  EXPECT_NEAR(delta, -0.03162, 1e-5);
}

TEST(Optimizer, ZeroGradientLeavesParameters) {
  for (OptimizerKind k : {OptimizerKind::sgd, OptimizerKind::rmsprop, OptimizerKind::adam}) {
    auto params = scalar("w", 0.75);
    OptimizerState s;
    s.kind = k;
    for (int i = 0; i < 3; ++i) optimizer_step(params, scalar("w", 0.0), s, 0.1);
    EXPECT_EQ(params.at("w")[0], 0.75) << to_string(k);
    EXPECT_EQ(s.step, 3u);
  }
}

TEST(Optimizer, FrozenNeverTouched) {
  std::map<std::string, Tensor> params{{"a", Tensor({2}, 1.0)}, {"b", Tensor({2}, 1.0)}};
  const std::map<std::string, Tensor> grads{{"a", Tensor({2}, 5.0)}, {"b", Tensor({2}, 5.0)}};
  OptimizerState s;
  optimizer_step(params, grads, s, 0.1, {"a"});
  EXPECT_EQ(params.at("a"), Tensor({2}, 1.0));
  EXPECT_NE(params.at("b"), Tensor({2}, 1.0));
}

TEST(Optimizer, ShapeMismatch) {
  std::map<std::string, Tensor> params{{"w", Tensor({2})}};
  OptimizerState s;
  EXPECT_THROW(optimizer_step(params, {{"w", Tensor({3})}}, s, 0.1), ShapeError);
  EXPECT_THROW(optimizer_step(params, {{"w", Tensor({2})}}, s, 0.0), ParameterError);
}

TEST(ClassWeights, InverseFrequency) {
  const auto w = inverse_frequency_weights({14000, 10000});
  EXPECT_NEAR(w[0], 24000.0 / 28000.0, 1e-15);
  EXPECT_NEAR(w[0], 0.857142, 1e-6);
  EXPECT_DOUBLE_EQ(w[1], 1.2);
  EXPECT_EQ(inverse_frequency_weights({500, 500}), (std::vector<double>{1.0, 1.0}));
  EXPECT_THROW(inverse_frequency_weights({5, 0}), DataError);
  const auto m = testing::labelled_manifest({14, 10});
  EXPECT_NEAR(compute_class_weights(m)[1], 1.2, 1e-15);
}

TrainHistory history_of(const std::vector<double>& losses) {
  TrainHistory h;
  for (double l : losses) h.epochs.push_back({0.0, 0.0, l, 0.0});
  return h;
}

TEST(EarlyStopping, Rule) {
  const std::vector<double> losses{1.0, 0.9, 0.95, 0.96};
  EXPECT_FALSE(should_stop(history_of({1.0, 0.9, 0.95}), 2));
  EXPECT_TRUE(should_stop(history_of(losses), 2));
  std::vector<double> falling;
  for (int i = 0; i < 20; ++i) {
    falling.push_back(1.0 / (i + 1));
    EXPECT_FALSE(should_stop(history_of(falling), 1));
  }
  EXPECT_TRUE(should_stop(history_of({0.5, 0.5, 0.5}), 2));  // a tie does not refresh best
  EXPECT_FALSE(should_stop(history_of({1.0, 2.0, 3.0}), 0));
}

TrainConfig quick_config(std::size_t epochs) {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.batch_size = 8;
  c.epochs = epochs;
  c.seed = 5;
  c.early_stop_patience = 0;
  return c;
}

class Training : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    train_set_ = new TensorDataset(synthetic_set(48, 1));
    val_set_ = new TensorDataset(synthetic_set(16, 2));
  }
  static void TearDownTestSuite() {
    delete train_set_;
    delete val_set_;
  }
  static TensorDataset* train_set_;
  static TensorDataset* val_set_;
};

TensorDataset* Training::train_set_ = nullptr;
TensorDataset* Training::val_set_ = nullptr;

TEST_F(Training, DeterministicHistory) {
  ModelGraph a = build_model(tiny_config()), b = build_model(tiny_config());
  const TrainResult ra = train(a, *train_set_, *val_set_, quick_config(2));
  const TrainResult rb = train(b, *train_set_, *val_set_, quick_config(2));
  ASSERT_EQ(ra.history.size(), rb.history.size());
  EXPECT_EQ(std::memcmp(ra.history.epochs.data(), rb.history.epochs.data(), ra.history.size() * sizeof(EpochRecord)),
            0);
  EXPECT_EQ(a.graph.params, b.graph.params);
}

TEST_F(Training, LossFallsOverTenEpochs) {
  ModelGraph m = build_model(tiny_config());
  const TrainResult r = train(m, *train_set_, *val_set_, quick_config(10));
  ASSERT_EQ(r.history.size(), 10u);
  EXPECT_FALSE(r.history.stopped_early);
  EXPECT_LT(r.history.epochs[9].train_loss, r.history.epochs[0].train_loss);
}

TEST_F(Training, EarlyStopAndRestoreBest) {
  ModelGraph m = build_model(tiny_config());
  TrainConfig c = quick_config(12);
  c.early_stop_patience = 2;
  TrainHooks hooks;
  // Improvement until epoch 2 then a plateau at the best value.
  hooks.val_loss_override = [](std::size_t epoch, double) {
    const double losses[] = {1.0, 0.9, 0.8};
    return epoch < 3 ? losses[epoch] : 0.8;
  };
  const TrainResult r = train(m, *train_set_, *val_set_, c, hooks);
  EXPECT_EQ(r.history.best_epoch, 2u);
  EXPECT_EQ(r.history.size(), 5u);
  EXPECT_LE(r.history.size(), r.history.best_epoch + c.early_stop_patience + 1);
  EXPECT_TRUE(r.history.stopped_early);
  const ParsedCheckpointConfig meta = parse_checkpoint_config(r.best.config_text);
  EXPECT_EQ(meta.meta.epoch, 2u);
  EXPECT_NEAR(meta.meta.val_loss, 0.8, 1e-12);
  // The model now holds the best epoch's weights.
  for (const auto& [name, t] : m.graph.params) EXPECT_EQ(*r.best.find(name), t) << name;
}

TEST_F(Training, HistoryNeverExceedsEpochs) {
  ModelGraph m = build_model(tiny_config());
  TrainConfig c = quick_config(3);
  c.early_stop_patience = 1;
  const TrainResult r = train(m, *train_set_, *val_set_, c);
  EXPECT_LE(r.history.size(), 3u);
  EXPECT_EQ(r.history.stopped_early, r.history.size() < 3u);
}

TEST_F(Training, DivergenceAborts) {
  ModelGraph m = build_model(tiny_config());
  TrainHooks hooks;
  hooks.val_loss_override = [](std::size_t, double) { return std::nan(""); };
  EXPECT_THROW(train(m, *train_set_, *val_set_, quick_config(2), hooks), TrainingDivergedError);
}

TEST_F(Training, EmptySetsRejected) {
  ModelGraph m = build_model(tiny_config());
  EXPECT_THROW(train(m, TensorDataset{}, *val_set_, quick_config(1)), DataError);
}

TEST(Checkpoint, RoundTripBitIdentical) {
  const testing::ScratchDir dir("ckpt");
  ModelGraph m = build_model(tiny_config(9));
  Rng data(3), rng(4);
  forward(m, random_tensor({4, 1, 32, 32}, data), Mode::train, rng);  // move the running statistics
  save_checkpoint(m, dir / "m.ckpt", {9, 3, 0.25, {"female", "male"}, false});
  const ModelGraph back = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(back.graph.params, m.graph.params);
  EXPECT_EQ(back.graph.buffers, m.graph.buffers);
  const Tensor x = random_tensor({3, 1, 32, 32}, data);
  const Tensor a = infer(m, x).logits(), b = infer(back, x).logits();
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
  const ParsedCheckpointConfig meta = parse_checkpoint_config(read_checkpoint(dir / "m.ckpt").config_text);
  EXPECT_EQ(meta.meta.classes, (std::vector<std::string>{"female", "male"}));
  EXPECT_FALSE(meta.meta.equalize);
  EXPECT_EQ(meta.meta.epoch, 3u);
}

TEST(Checkpoint, OptimizerStateRoundTrip) {
  ModelGraph m = build_model(tiny_config());
  OptimizerState s;
  s.step = 7;
  s.first_moment["stem.conv.weight"] = Tensor({8, 1, 3, 3}, 0.5);
  s.second_moment["stem.conv.weight"] = Tensor({8, 1, 3, 3}, 0.25);
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(make_checkpoint(m, {}, &s)));
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->step, 7u);
  EXPECT_EQ(ck.optimizer->first_moment, s.first_moment);
  EXPECT_EQ(ck.optimizer->second_moment, s.second_moment);
}

TEST(Checkpoint, ByteLayout) {
  ModelGraph m = build_model(tiny_config());
  const std::string bytes = encode_checkpoint(make_checkpoint(m));
  EXPECT_EQ(bytes.substr(0, 4), "PDTL");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
  EXPECT_EQ(bytes.back(), '\0');
}

TEST(Checkpoint, DistinctErrors) {
  ModelGraph m = build_model(tiny_config());
  const std::string good = encode_checkpoint(make_checkpoint(m));
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), CheckpointMagicError);
  bad = good;
  bad[4] = 2;
  EXPECT_THROW(decode_checkpoint(bad), CheckpointVersionError);
  EXPECT_THROW(decode_checkpoint(std::string_view(good).substr(0, good.size() / 2)), CheckpointTruncatedError);

  Checkpoint ck = make_checkpoint(m);
  ck.tensors.pop_back();
  EXPECT_THROW(restore_model(ck), CheckpointMismatchError);
  ck = make_checkpoint(m);
  ck.tensors.front().second = Tensor({1});
  EXPECT_THROW(restore_model(ck), CheckpointMismatchError);
}

TEST(Transfer, HeadShapes) {
  const ModelGraph base = build_model(tiny_config());
  const ModelGraph m = transfer(make_checkpoint(base), HeadConfig::preset('B'), 2, FreezePolicy::none(), 11);
  const std::size_t pooled = base.channel_trace.back();
  EXPECT_EQ(m.graph.params.at("head1.dense.weight").shape(), (Shape{pooled, 1024}));
  EXPECT_EQ(m.graph.params.at("head2.dense.weight").shape(), (Shape{1024, 512}));
  EXPECT_EQ(m.graph.params.at("classifier.weight").shape(), (Shape{512, 2}));
  for (const std::string& name : m.backbone_params()) EXPECT_EQ(m.graph.params.at(name), base.graph.params.at(name));
  EXPECT_EQ(m.graph.buffers, base.graph.buffers);
  EXPECT_TRUE(m.frozen.empty());
}

TEST(Transfer, FreezeBackboneKeepsWeights) {
  const ModelGraph base = build_model(tiny_config());
  ModelGraph m = transfer(make_checkpoint(base), {{12}, 0.5}, 2, FreezePolicy::backbone(), 2);
  EXPECT_EQ(m.frozen.size(), m.backbone_params().size());
  const TensorDataset tr = synthetic_set(16, 3), va = synthetic_set(8, 4);
  const auto head_before = m.graph.params.at("classifier.weight");
  TrainConfig c = quick_config(2);
  c.learning_rate = 1e-2;
  train(m, tr, va, c);
  for (const std::string& name : m.backbone_params()) EXPECT_EQ(m.graph.params.at(name), base.graph.params.at(name));
  EXPECT_EQ(m.graph.buffers, base.graph.buffers);
  EXPECT_NE(m.graph.params.at("classifier.weight"), head_before);
}

TEST(Transfer, FreezeNoneGivesEveryGradient) {
  const ModelGraph base = build_model(tiny_config());
  ModelGraph m = transfer(make_checkpoint(base), {{12}, 0.5}, 2, FreezePolicy::none(), 2);
  Rng data(6), rng(7);
  const ForwardPass p = forward(m, random_tensor({4, 1, 32, 32}, data), Mode::train, rng);
  const BackwardPass g = backward(m, p, random_tensor(p.logits().shape(), data));
  ASSERT_EQ(g.param_grads.size(), m.graph.params.size());
  for (const auto& [name, t] : g.param_grads) {
    double mag = 0.0;
    for (double v : t.values()) mag += std::abs(v);
    EXPECT_GT(mag, 0.0) << name;
  }
}

TEST(Transfer, UnknownFreezeNameAndBadHead) {
  ModelGraph m = build_model(tiny_config());
  EXPECT_THROW(apply_freeze(m, FreezePolicy::explicit_names({"nope"})), ConfigError);
  EXPECT_THROW(transfer(make_checkpoint(m), {{0}, 0.5}, 2, FreezePolicy::none(), 1), ConfigError);
}

}  // namespace
}  // namespace densepipe
