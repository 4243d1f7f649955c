#pragma once

// LinkNet-family segmentation networks: LinkNet, mini-LinkNet (one encoder /
// decoder stage fewer) and their multi-scale forms, which feed a half-scale
// copy of the input into the first half-resolution feature map.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hcseg/nn.hpp"
#include "hcseg/tensor.hpp"

namespace hcseg {

enum class Variant { kLinkNet, kMsLinkNet, kMiniLinkNet, kMsMiniLinkNet };

std::string_view to_string(Variant v);
/// Accepts "linknet", "ms-linknet", "mini-linknet", "ms-mini-linknet".
Variant parse_variant(std::string_view name);
bool is_multiscale(Variant v);
bool is_mini(Variant v);

struct NetworkConfig {
  Variant variant = Variant::kMiniLinkNet;
  Extent2 input_size{256, 384};
  std::size_t input_channels = 1;
  std::size_t base_channels = 64;
  std::size_t encoder_blocks = 3;

  /// Config with the encoder depth the variant requires.
  static NetworkConfig for_variant(Variant v, Extent2 input_size, std::size_t base_channels,
                                   std::size_t input_channels = 1);

  /// Total downsampling factor, 2^(encoder_blocks + 2).
  std::size_t size_divisor() const;
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;
};

/// Non-trainable state (batch-norm running statistics), addressable by name.
template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* values;
};

struct ForwardOptions {
  /// Replace the half-scale input copy by zeros (multi-scale ablation).
  /// No effect on single-scale variants.
  bool zero_half_scale_branch = false;
};

template <typename T>
class Network {
 public:
  /// Fan-in scaled uniform weights, zero biases, gamma = 1 / beta = 0.
  Network(const NetworkConfig& config, std::uint64_t seed);
  ~Network();
  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  /// Deep copy: no storage is shared with the original.
  Network clone() const;

  const NetworkConfig& config() const;

  /// (n, input_channels, h, w) -> probability map (n, 1, h, w) in (0, 1).
  BasicTensor<T> forward(const BasicTensor<T>& batch, const ForwardOptions& options = {});

  /// Trainable tensors in a fixed order, each exactly once.
  std::vector<NamedTensor<T>> parameters() const;
  std::vector<NamedBuffer<T>> buffers();

  void set_mode(NormMode mode);
  NormMode mode() const;

 private:
  struct Layers;
  std::unique_ptr<Layers> layers_;
};

template <typename T>
std::size_t count_parameters(std::span<const NamedTensor<T>> params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

template <typename T>
std::size_t count_parameters(const Network<T>& net) {
  const auto params = net.parameters();
  return count_parameters(std::span<const NamedTensor<T>>(params));
}

template <typename T>
Network<T> build_network(const NetworkConfig& config, std::uint64_t seed = 0) {
  return Network<T>(config, seed);
}

// Checkpoint byte layout (all integers little-endian):
//   magic    8 bytes  "HCSEGCKP"
//   version  u32      1
//   variant  u32      0 linknet, 1 ms-linknet, 2 mini-linknet, 3 ms-mini-linknet
//   input_h, input_w, input_channels, base_channels, encoder_blocks   u32 each
//   dtype    u32      4 = float32, 8 = float64
//   count    u32      number of entries
//   entries, in parameters() order followed by buffers() order:
//     kind u8 (0 parameter, 1 buffer), name_len u32, name bytes (UTF-8),
//     rank u32, dims u32[rank], values (product(dims) * dtype bytes, IEEE-754)
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, Network<T>& net);

/// Reads just the header's network configuration.
NetworkConfig read_checkpoint_config(const std::filesystem::path& path);

/// Rebuilds the network; values stored in the other precision are converted.
/// When `expected` is given, a differing stored config is an error naming both.
template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path, const std::optional<NetworkConfig>& expected = {});

}  // namespace hcseg
