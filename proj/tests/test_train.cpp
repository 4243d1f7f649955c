#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "hcseg/train.hpp"

using namespace hcseg;
namespace fs = std::filesystem;

namespace {

TrainConfig toy_config(std::size_t epochs) {
  TrainConfig cfg;
  cfg.network = NetworkConfig::for_variant(Variant::kMsMiniLinkNet, {32, 32}, 4);
  cfg.epochs = epochs;
  cfg.batch_size = 2;
  cfg.lr = 0.03;
  cfg.seed = 3;
  return cfg;
}

std::vector<DatasetRecord> toy_records(std::size_t n) { return synth_generate(SynthSpec::for_size(32, 32, n, 5)); }

std::vector<std::vector<float>> snapshot(const Network<float>& net) {
  std::vector<std::vector<float>> out;
  for (const auto& p : net.parameters()) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

}  // namespace

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  std::vector<NamedTensor<double>> params{{"p", TensorD({3}, {1.0, -2.0, 0.5})}};
  auto state = AdamState<double>::create(params);
  const std::vector<std::vector<double>> grads{{0.0, 0.0, 0.0}};
  for (int i = 0; i < 5; ++i) adam_step(params, grads, state);
  CHECK(params[0].tensor.values()[0] == 1.0);
  CHECK(params[0].tensor.values()[1] == -2.0);
  CHECK(state.t == 5);
}

TEST_CASE("adam: first step moves by the learning rate") {
  std::vector<NamedTensor<double>> params{{"p", TensorD({1}, {0.0})}};
  auto state = AdamState<double>::create(params);
  const std::vector<std::vector<double>> grads{{1.0}};
  adam_step(params, grads, state);
  // m_hat = v_hat = 1, so the step is lr / (1 + eps).
  CHECK(params[0].tensor.values()[0] == doctest::Approx(-1e-3 / (1 + 1e-8)).epsilon(1e-12));

  // Second step with the same gradient: hand-computed moments.
  adam_step(params, grads, state);
  const double m = 0.9 * 0.1 + 0.1, v = 0.999 * 0.001 + 0.001;
  const double step = 1e-3 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  CHECK(params[0].tensor.values()[0] == doctest::Approx(-1e-3 / (1 + 1e-8) - step).epsilon(1e-12));
}

TEST_CASE("adam: determinism and errors") {
  auto make = [] { return std::vector<NamedTensor<double>>{{"a", TensorD({2}, {0.3, 0.4})}, {"b", TensorD({1}, {1.0})}}; };
  auto p1 = make(), p2 = make();
  auto s1 = AdamState<double>::create(p1), s2 = AdamState<double>::create(p2);
  const std::vector<std::vector<double>> grads{{0.5, -0.25}, {2.0}};
  for (int i = 0; i < 3; ++i) {
    adam_step(p1, grads, s1);
    adam_step(p2, grads, s2);
  }
  for (std::size_t i = 0; i < p1.size(); ++i)
    for (std::size_t k = 0; k < p1[i].tensor.size(); ++k) CHECK(p1[i].tensor[k] == p2[i].tensor[k]);

  const std::vector<std::vector<double>> bad{{0.5, std::numeric_limits<double>::quiet_NaN()}, {1.0}};
  const double before = p1[0].tensor[0];
  try {
    adam_step(p1, bad, s1);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("parameter a") != std::string::npos);
  }
  CHECK(p1[0].tensor[0] == before);
  CHECK(s1.t == 3);
  const std::vector<std::vector<double>> wrong{{0.5}, {1.0}};
  CHECK_THROWS_AS(adam_step(p1, wrong, s1), ShapeError);
}

TEST_CASE("train: zero epochs is the identity") {
  const auto recs = toy_records(4);
  auto cfg = toy_config(0);
  Network<float> net(cfg.network, 1);
  const auto before = snapshot(net);
  const auto h = train(net, recs, recs, cfg);
  CHECK(h.epochs.empty());
  CHECK(h.optimizer_steps == 0);
  CHECK(snapshot(net) == before);
}

TEST_CASE("train: step count, history and errors") {
  const auto recs = toy_records(5);
  auto cfg = toy_config(3);
  cfg.batch_size = 3;
  Network<float> net(cfg.network, 1);
  const auto h = train(net, recs, std::span<const DatasetRecord>{}, cfg);
  CHECK(h.epochs.size() == 3);
  CHECK(h.optimizer_steps == 3 * 2);  // ceil(5 / 3) per epoch

  // A lone trailing image cannot pass the 1x1 bottleneck in train mode.
  auto lone = cfg;
  lone.batch_size = 2;
  CHECK_THROWS_AS(train(net, recs, recs, lone), std::invalid_argument);
  CHECK(std::isnan(h.epochs[0].val_soft_dice));
  for (const auto& e : h.epochs) CHECK(std::isfinite(e.train_loss));

  CHECK_THROWS_AS(train(net, std::span<const DatasetRecord>{}, recs, cfg), std::invalid_argument);
  auto other = cfg;
  other.network.base_channels = 8;
  CHECK_THROWS_AS(train(net, recs, recs, other), std::invalid_argument);
  auto zero_batch = cfg;
  zero_batch.batch_size = 0;
  CHECK_THROWS_AS(train(net, recs, recs, zero_batch), std::invalid_argument);
}

TEST_CASE("train: non-finite loss aborts with context") {
  const auto recs = toy_records(2);
  auto cfg = toy_config(1);
  Network<float> net(cfg.network, 1);
  auto params = net.parameters();
  params.back().tensor.mutable_values()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train(net, recs, recs, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("epoch 1, batch 1") != std::string::npos);
  }
}

TEST_CASE("train is deterministic and checkpoints at the cadence") {
  const auto recs = toy_records(4);
  auto cfg = toy_config(4);
  const auto dir = fs::temp_directory_path() / "hcseg_test_train_ckpt";
  fs::remove_all(dir);
  cfg.checkpoint_every = 2;
  cfg.checkpoint_dir = dir;
  Network<float> a(cfg.network, 7), b(cfg.network, 7);
  const auto ha = train(a, recs, recs, cfg);
  cfg.checkpoint_every = 0;
  const auto hb = train(b, recs, recs, cfg);
  CHECK(snapshot(a) == snapshot(b));
  for (std::size_t i = 0; i < ha.epochs.size(); ++i) {
    CHECK(ha.epochs[i].train_loss == hb.epochs[i].train_loss);
    CHECK(ha.epochs[i].val_soft_dice == hb.epochs[i].val_soft_dice);
  }
  CHECK(fs::exists(dir / "epoch_0002.ckpt"));
  CHECK(fs::exists(dir / "epoch_0004.ckpt"));
  CHECK_FALSE(fs::exists(dir / "epoch_0003.ckpt"));

  // Final checkpoint reloads to an identical report.
  const auto r1 = evaluate(a, recs, cfg.network.input_size);
  auto loaded = load_checkpoint<float>(dir / "epoch_0004.ckpt", cfg.network);
  CHECK(evaluate(loaded, recs, cfg.network.input_size) == r1);
  CHECK(evaluate(a, recs, cfg.network.input_size) == r1);

  write_history_csv(dir / "history.csv", ha);
  std::ifstream in(dir / "history.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 5);
  fs::remove_all(dir);
}

TEST_CASE("train: smoothed toy loss decreases early on") {
  const auto recs = toy_records(8);
  auto cfg = toy_config(20);
  cfg.seed = 0;
  Network<float> net(cfg.network, 0);
  const auto h = train(net, recs, recs, cfg);
  std::vector<double> window;
  for (std::size_t i = 0; i + 5 <= h.epochs.size(); i += 5) {
    double s = 0;
    for (std::size_t k = i; k < i + 5; ++k) s += h.epochs[k].train_loss;
    window.push_back(s / 5);
  }
  for (std::size_t i = 1; i < window.size(); ++i) CHECK(window[i] <= window[i - 1]);
}

TEST_CASE("prediction maps back to native size") {
  auto recs = synth_generate(SynthSpec::for_size(40, 56, 2, 1));
  auto cfg = toy_config(0);
  Network<float> net(cfg.network, 2);
  std::vector<Image> images{recs[0].image, recs[1].image};
  const auto masks = predict_masks(net, images, cfg.network.input_size);
  REQUIRE(masks.size() == 2);
  CHECK(masks[0].rows == 40);
  CHECK(masks[0].cols == 56);
  CHECK(net.mode() == NormMode::kTrain);
  CHECK(predict_masks(net, images, cfg.network.input_size) == masks);
  const auto report = evaluate(net, recs, cfg.network.input_size);
  CHECK(report.rows.size() == 2);
}
