#include "hcseg/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "hcseg/ops.hpp"
#include "hcseg/random.hpp"

namespace hcseg {

template <typename T>
AdamState<T> AdamState<T>::create(const std::vector<NamedTensor<T>>& params, const AdamConfig& config) {
  AdamState s;
  s.config = config;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.size(), T(0));
    s.v.emplace_back(p.tensor.size(), T(0));
  }
  return s;
}

template <typename T>
void adam_step(const std::vector<NamedTensor<T>>& params, const std::vector<std::vector<T>>& grads, AdamState<T>& state) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw std::invalid_argument("adam_step: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].tensor.size() || state.m[i].size() != grads[i].size())
      throw ShapeError("adam_step: size mismatch for " + params[i].name);
    for (T g : grads[i])
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + params[i].name);
  }
  const auto& c = state.config;
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double corr1 = 1.0 - std::pow(c.beta1, t), corr2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].tensor.mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double g = grads[i][k];
      const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * g;
      const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      theta[k] = static_cast<T>(theta[k] - c.lr * (mk / corr1) / (std::sqrt(vk / corr2) + c.epsilon));
    }
  }
}

template <typename T>
void adam_step(const std::vector<NamedTensor<T>>& params, AdamState<T>& state) {
  std::vector<std::vector<T>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    if (p.tensor.has_grad()) grads.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    else grads.emplace_back(p.tensor.size(), T(0));
  }
  adam_step(params, grads, state);
}

void TrainConfig::validate() const {
  network.validate();
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  loss.validate();
  if (checkpoint_every > 0 && checkpoint_dir.empty())
    throw std::invalid_argument("checkpoint cadence set without a checkpoint directory");
}

namespace {

std::string epoch_file(std::size_t epoch) {
  std::string n = std::to_string(epoch);
  return "epoch_" + std::string(n.size() < 4 ? 4 - n.size() : 0, '0') + n + ".ckpt";
}

}  // namespace

template <typename T>
TrainHistory train(Network<T>& net, std::span<const DatasetRecord> train_records,
                   std::span<const DatasetRecord> val_records, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (!(net.config() == cfg.network)) throw std::invalid_argument("train: network config differs from the training config");
  if (train_records.empty()) throw std::invalid_argument("train: empty training set");
  const Extent2 size = cfg.network.input_size;
  const std::size_t divisor = cfg.network.size_divisor();
  if (size.h == divisor && size.w == divisor && train_records.size() % cfg.batch_size == 1)
    throw std::invalid_argument("train: the last batch would hold one image, which batch norm cannot normalize at a " +
                                std::to_string(divisor) + "x" + std::to_string(divisor) +
                                " input; change the batch size or the number of images");

  // Weight maps depend only on the (resized) masks; compute them once.
  std::vector<std::vector<T>> weights;
  weights.reserve(train_records.size());
  for (const auto& r : train_records) {
    const Mask m = r.mask.rows == size.h && r.mask.cols == size.w ? r.mask : resize_nearest(r.mask, size.h, size.w);
    const Image w = weight_map(m, cfg.loss);
    weights.emplace_back(w.data.begin(), w.data.end());
  }

  const auto params = net.parameters();
  auto adam = AdamState<T>::create(params, {cfg.lr});
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_records.size());
  TrainHistory history;
  if (cfg.checkpoint_every > 0) std::filesystem::create_directories(cfg.checkpoint_dir);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    net.set_mode(NormMode::kTrain);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      ++batch_no;
      const std::span<const std::size_t> idx(order.data() + begin, std::min(cfg.batch_size, order.size() - begin));
      const auto batch = assemble_batch<T>(train_records, idx, size);
      std::vector<T> w;
      w.reserve(batch.masks.size());
      for (auto i : idx) w.insert(w.end(), weights[i].begin(), weights[i].end());
      const BasicTensor<T> wt(batch.masks.shape(), std::move(w));

      const auto loss = l_ln(net.forward(batch.images), batch.masks, wt, cfg.loss);
      const double value = loss.item();
      if (!std::isfinite(value))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no));
      for (const auto& p : params) p.tensor.zero_grad();
      loss.backward();
      adam_step(params, adam);
      loss_sum += value * static_cast<double>(idx.size());
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(order.size());
    stats.val_soft_dice = val_records.empty() ? std::numeric_limits<double>::quiet_NaN()
                                              : mean_soft_dice(net, val_records, size, cfg.loss);
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history.epochs.push_back(stats);
    if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)
      save_checkpoint(cfg.checkpoint_dir / epoch_file(epoch), net);
    if (on_epoch) on_epoch(stats);
  }
  for (const auto& p : params) p.tensor.zero_grad();
  history.optimizer_steps = adam.t;
  return history;
}

namespace {

constexpr std::size_t kInferenceBatch = 8;

}  // namespace

template <typename T>
std::vector<Image> predict_probabilities(Network<T>& net, std::span<const Image> images, Extent2 input_size) {
  NoGradGuard guard;
  const NormMode previous = net.mode();
  net.set_mode(NormMode::kEval);
  std::vector<Image> out;
  const std::size_t plane = input_size.h * input_size.w;
  for (std::size_t begin = 0; begin < images.size(); begin += kInferenceBatch) {
    const std::size_t n = std::min(kInferenceBatch, images.size() - begin);
    std::vector<Image> resized;
    for (std::size_t k = 0; k < n; ++k) {
      const Image& im = images[begin + k];
      resized.push_back(im.rows == input_size.h && im.cols == input_size.w ? im
                                                                              : resize_area(im, input_size.h, input_size.w));
    }
    const auto probs = net.forward(image_tensor<T>(resized));
    for (std::size_t k = 0; k < n; ++k) {
      Image p(input_size.h, input_size.w);
      for (std::size_t i = 0; i < plane; ++i) p.data[i] = static_cast<double>(probs[k * plane + i]);
      out.push_back(std::move(p));
    }
  }
  net.set_mode(previous);
  return out;
}

template <typename T>
std::vector<Mask> predict_masks(Network<T>& net, std::span<const Image> images, Extent2 input_size) {
  const auto probs = predict_probabilities(net, images, input_size);
  std::vector<Mask> out;
  for (std::size_t i = 0; i < images.size(); ++i)
    out.push_back(resize_nearest(threshold(probs[i], 0.5), images[i].rows, images[i].cols));
  return out;
}

template <typename T>
double mean_soft_dice(Network<T>& net, std::span<const DatasetRecord> records, Extent2 input_size,
                      const LossConfig& loss) {
  if (records.empty()) throw std::invalid_argument("mean_soft_dice: no records");
  std::vector<Image> images;
  for (const auto& r : records) images.push_back(r.image);
  const auto probs = predict_probabilities(net, images, input_size);
  double sum = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Mask& m0 = records[i].mask;
    const Mask m = m0.rows == input_size.h && m0.cols == input_size.w ? m0 : resize_nearest(m0, input_size.h, input_size.w);
    const Shape shape{input_size.h, input_size.w};
    const TensorD p(shape, probs[i].data);
    const TensorD g(shape, std::vector<double>(m.data.begin(), m.data.end()));
    sum += soft_dice(p, g, loss).item();
  }
  return sum / static_cast<double>(records.size());
}

template <typename T>
MetricsReport evaluate(Network<T>& net, std::span<const DatasetRecord> records, Extent2 input_size) {
  if (records.empty()) throw std::invalid_argument("evaluate: no records");
  std::vector<Image> images;
  for (const auto& r : records) images.push_back(r.image);
  auto masks = predict_masks(net, images, input_size);
  std::vector<EvalCase> cases;
  for (std::size_t i = 0; i < records.size(); ++i)
    cases.push_back({records[i].id, std::move(masks[i]), records[i].mask, records[i].hc_gt_mm, records[i].pixel_size});
  return evaluate_set(cases);
}

void write_history_csv(const std::filesystem::path& path, const TrainHistory& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,train_loss,val_soft_dice,seconds\n";
  for (const auto& e : history.epochs)
    out << e.epoch << ',' << format_double(e.train_loss) << ','
        << (std::isnan(e.val_soft_dice) ? std::string() : format_double(e.val_soft_dice)) << ','
        << format_double(e.seconds) << '\n';
}

#define HCSEG_INSTANTIATE_TRAIN(T)                                                                                   \
  template struct AdamState<T>;                                                                                      \
  template void adam_step(const std::vector<NamedTensor<T>>&, const std::vector<std::vector<T>>&, AdamState<T>&);      \
  template void adam_step(const std::vector<NamedTensor<T>>&, AdamState<T>&);                                      \
  template TrainHistory train(Network<T>&, std::span<const DatasetRecord>, std::span<const DatasetRecord>,           \
                              const TrainConfig&, const EpochCallback&);                                             \
  template double mean_soft_dice(Network<T>&, std::span<const DatasetRecord>, Extent2, const LossConfig&);           \
  template std::vector<Image> predict_probabilities(Network<T>&, std::span<const Image>, Extent2);                   \
  template std::vector<Mask> predict_masks(Network<T>&, std::span<const Image>, Extent2);                            \
  template MetricsReport evaluate(Network<T>&, std::span<const DatasetRecord>, Extent2);

HCSEG_INSTANTIATE_TRAIN(float)
HCSEG_INSTANTIATE_TRAIN(double)

}  // namespace hcseg
