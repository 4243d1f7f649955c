#pragma once

// Adam optimisation, the training loop and network evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "hcseg/data.hpp"
#include "hcseg/loss.hpp"
#include "hcseg/metrics.hpp"
#include "hcseg/segnet.hpp"

namespace hcseg {

/// Non-finite losses or gradients.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t t = 0;

  static AdamState create(const std::vector<NamedTensor<T>>& params, const AdamConfig& config = {});
};

/// One bias-corrected Adam update of every parameter, using `grads[i]` for
/// `params[i]`. Throws NumericError naming the first parameter with a
/// non-finite gradient; nothing is modified in that case.
template <typename T>
void adam_step(const std::vector<NamedTensor<T>>& params, const std::vector<std::vector<T>>& grads, AdamState<T>& state);

/// As above with each parameter's accumulated gradient (missing = zero).
template <typename T>
void adam_step(const std::vector<NamedTensor<T>>& params, AdamState<T>& state);

struct TrainConfig {
  NetworkConfig network;
  std::size_t epochs = 150;
  std::size_t batch_size = 10;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  LossConfig loss;
  /// Save a checkpoint every this many epochs (0 = never) into checkpoint_dir.
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_soft_dice = 0.0;  // NaN without validation records
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  std::size_t optimizer_steps = 0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Trains `net` in place. Shuffling uses `cfg.seed`; the last partial batch
/// is kept. Throws NumericError on a non-finite loss.
template <typename T>
TrainHistory train(Network<T>& net, std::span<const DatasetRecord> train_records,
                   std::span<const DatasetRecord> val_records, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Mean per-image soft Dice of the network's eval-mode predictions.
template <typename T>
double mean_soft_dice(Network<T>& net, std::span<const DatasetRecord> records, Extent2 input_size,
                      const LossConfig& loss);

/// Eval-mode probability maps at the network input size.
template <typename T>
std::vector<Image> predict_probabilities(Network<T>& net, std::span<const Image> images, Extent2 input_size);

/// Probability maps thresholded at 0.5 and mapped back to each image's
/// native size (nearest neighbour).
template <typename T>
std::vector<Mask> predict_masks(Network<T>& net, std::span<const Image> images, Extent2 input_size);

template <typename T>
MetricsReport evaluate(Network<T>& net, std::span<const DatasetRecord> records, Extent2 input_size);

/// epoch,train_loss,val_soft_dice,seconds
void write_history_csv(const std::filesystem::path& path, const TrainHistory& history);

}  // namespace hcseg
