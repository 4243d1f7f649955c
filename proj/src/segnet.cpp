#include "hcseg/segnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "hcseg/ops.hpp"
#include "hcseg/random.hpp"

namespace hcseg {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kLinkNet: return "linknet";
    case Variant::kMsLinkNet: return "ms-linknet";
    case Variant::kMiniLinkNet: return "mini-linknet";
    case Variant::kMsMiniLinkNet: return "ms-mini-linknet";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (auto v : {Variant::kLinkNet, Variant::kMsLinkNet, Variant::kMiniLinkNet, Variant::kMsMiniLinkNet}) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown network variant '" + std::string(name) +
                              "' (expected linknet, ms-linknet, mini-linknet or ms-mini-linknet)");
}

bool is_multiscale(Variant v) { return v == Variant::kMsLinkNet || v == Variant::kMsMiniLinkNet; }
bool is_mini(Variant v) { return v == Variant::kMiniLinkNet || v == Variant::kMsMiniLinkNet; }

NetworkConfig NetworkConfig::for_variant(Variant v, Extent2 input_size, std::size_t base_channels,
                                         std::size_t input_channels) {
  NetworkConfig c;
  c.variant = v;
  c.input_size = input_size;
  c.base_channels = base_channels;
  c.input_channels = input_channels;
  c.encoder_blocks = is_mini(v) ? 3 : 4;
  return c;
}

std::size_t NetworkConfig::size_divisor() const { return std::size_t{1} << (encoder_blocks + 2); }

void NetworkConfig::validate() const {
  const std::size_t required_blocks = is_mini(variant) ? 3 : 4;
  if (encoder_blocks != required_blocks) {
    throw std::invalid_argument(std::string(to_string(variant)) + " requires " + std::to_string(required_blocks) +
                                " encoder blocks, got " + std::to_string(encoder_blocks));
  }
  if (input_channels == 0) throw std::invalid_argument("input channels must be positive");
  if (base_channels < 4 || base_channels % 4 != 0) {
    throw std::invalid_argument("base channels must be a positive multiple of 4, got " +
                                std::to_string(base_channels));
  }
  const auto d = size_divisor();
  if (input_size.h == 0 || input_size.w == 0 || input_size.h % d != 0 || input_size.w % d != 0) {
    throw std::invalid_argument("input size " + std::to_string(input_size.h) + "x" + std::to_string(input_size.w) +
                                " must be a positive multiple of " + std::to_string(d) + " for " +
                                std::string(to_string(variant)));
  }
}

namespace {

template <typename T>
struct ConvUnit {
  ConvSpec spec;
  bool transposed = false;
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  ConvUnit() = default;
  ConvUnit(const ConvSpec& s, bool is_transposed, Rng& rng) : spec(s), transposed(is_transposed) {
    const double fan_in = static_cast<double>(spec.in_channels * spec.kernel.h * spec.kernel.w);
    const double bound = std::sqrt(6.0 / fan_in);
    const Shape shape = spec.weight_shape(transposed);
    std::vector<T> w(numel(shape));
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    weight = BasicTensor<T>(shape, std::move(w));
    weight.set_requires_grad();
    if (spec.has_bias) {
      bias = BasicTensor<T>::zeros({spec.out_channels});
      bias.set_requires_grad();
    }
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return transposed ? transposed_conv2d(x, weight, bias, spec) : conv2d(x, weight, bias, spec);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

ConvSpec conv_spec(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad,
                   std::size_t output_pad = 0) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = {k, k};
  s.stride = {stride, stride};
  s.padding = {pad, pad};
  s.output_padding = {output_pad, output_pad};
  return s;
}

// Convolution (or transposed convolution) + batch norm + optional ReLU.
template <typename T>
struct ConvBn {
  ConvUnit<T> conv;
  BatchNormState<T> bn;
  bool with_relu = true;

  ConvBn() = default;
  ConvBn(const ConvSpec& s, bool transposed, bool relu_after, Rng& rng)
      : conv(s, transposed, rng), bn(BatchNormState<T>::create(s.out_channels)), with_relu(relu_after) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) {
    auto y = batchnorm2d(conv(x), bn);
    return with_relu ? relu(y) : y;
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
    conv.collect(prefix + ".conv", out);
    out.push_back({prefix + ".bn.gamma", bn.gamma});
    out.push_back({prefix + ".bn.beta", bn.beta});
  }
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out) {
    out.push_back({prefix + ".bn.running_mean", &bn.running_mean});
    out.push_back({prefix + ".bn.running_var", &bn.running_var});
  }
  void set_mode(NormMode m) { bn.mode = m; }
};

// ResNet basic block: relu(bn(conv(relu(bn(conv(x))))) + shortcut(x)).
template <typename T>
struct ResidualBlock {
  ConvBn<T> first, second;
  std::optional<ConvBn<T>> projection;

  ResidualBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
      : first(conv_spec(in, out, 3, stride, 1), false, true, rng),
        second(conv_spec(out, out, 3, 1, 1), false, false, rng) {
    if (stride != 1 || in != out) projection.emplace(conv_spec(in, out, 1, stride, 0), false, false, rng);
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) {
    auto main = second(first(x));
    return relu(add(main, projection ? (*projection)(x) : x));
  }

  template <typename F>
  void for_each(F&& f) {
    f("conv1", first);
    f("conv2", second);
    if (projection) f("shortcut", *projection);
  }
};

// LinkNet decoder: 1x1 reduce to m/4, 3x3 stride-2 transposed conv, 1x1 expand to n.
template <typename T>
struct DecoderBlock {
  ConvBn<T> reduce, upsample, expand;

  DecoderBlock(std::size_t in, std::size_t out, Rng& rng)
      : reduce(conv_spec(in, in / 4, 1, 1, 0), false, true, rng),
        upsample(conv_spec(in / 4, in / 4, 3, 2, 1, 1), true, true, rng),
        expand(conv_spec(in / 4, out, 1, 1, 0), false, true, rng) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) { return expand(upsample(reduce(x))); }

  template <typename F>
  void for_each(F&& f) {
    f("reduce", reduce);
    f("upsample", upsample);
    f("expand", expand);
  }
};

}  // namespace

template <typename T>
struct Network<T>::Layers {
  NetworkConfig config;
  ConvBn<T> stem;
  std::optional<ConvBn<T>> fuse;  // multi-scale only
  std::vector<std::pair<ResidualBlock<T>, ResidualBlock<T>>> encoders;
  std::vector<DecoderBlock<T>> decoders;  // decoders[i] undoes encoders[i]
  ConvBn<T> head_upsample, head_conv;
  ConvUnit<T> head_out;
  NormMode mode = NormMode::kTrain;

  Layers(const NetworkConfig& c, Rng& rng) : config(c) {
    const std::size_t base = c.base_channels;
    stem = ConvBn<T>(conv_spec(c.input_channels, base, 7, 2, 3), false, true, rng);
    if (is_multiscale(c.variant)) fuse.emplace(conv_spec(base + c.input_channels, base, 1, 1, 0), false, true, rng);
    std::size_t in = base;
    for (std::size_t i = 0; i < c.encoder_blocks; ++i) {
      const std::size_t out = base << i;
      ResidualBlock<T> a(in, out, 2, rng);
      ResidualBlock<T> b(out, out, 1, rng);
      encoders.emplace_back(std::move(a), std::move(b));
      in = out;
    }
    for (std::size_t i = 0; i < c.encoder_blocks; ++i) {
      const std::size_t m = base << i;
      const std::size_t n = i == 0 ? base : (base << (i - 1));
      decoders.emplace_back(m, n, rng);
    }
    head_upsample = ConvBn<T>(conv_spec(base, base / 2, 3, 2, 1, 1), true, true, rng);
    head_conv = ConvBn<T>(conv_spec(base / 2, base / 2, 3, 1, 1), false, true, rng);
    head_out = ConvUnit<T>(conv_spec(base / 2, 1, 2, 2, 0), true, rng);
  }

  template <typename F>
  void for_each_convbn(F&& f) {
    f(std::string("stem"), stem);
    if (fuse) f(std::string("fuse"), *fuse);
    for (std::size_t i = 0; i < encoders.size(); ++i) {
      const std::string p = "encoder" + std::to_string(i + 1);
      encoders[i].first.for_each([&](const char* n, ConvBn<T>& l) { f(p + ".block1." + n, l); });
      encoders[i].second.for_each([&](const char* n, ConvBn<T>& l) { f(p + ".block2." + n, l); });
    }
    for (std::size_t i = decoders.size(); i-- > 0;) {
      const std::string p = "decoder" + std::to_string(i + 1);
      decoders[i].for_each([&](const char* n, ConvBn<T>& l) { f(p + "." + n, l); });
    }
    f(std::string("head.upsample"), head_upsample);
    f(std::string("head.conv"), head_conv);
  }
};

template <typename T>
Network<T>::Network(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  layers_ = std::make_unique<Layers>(config, rng);
}

template <typename T>
Network<T>::~Network() = default;
template <typename T>
Network<T>::Network(Network&&) noexcept = default;
template <typename T>
Network<T>& Network<T>::operator=(Network&&) noexcept = default;

template <typename T>
Network<T> Network<T>::clone() const {
  Network copy(layers_->config, 0);
  auto src = parameters();
  auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::copy(src[i].tensor.values().begin(), src[i].tensor.values().end(), dst[i].tensor.mutable_values().begin());
  }
  auto sb = const_cast<Network*>(this)->buffers();
  auto db = copy.buffers();
  for (std::size_t i = 0; i < sb.size(); ++i) *db[i].values = *sb[i].values;
  copy.set_mode(mode());
  return copy;
}

template <typename T>
const NetworkConfig& Network<T>::config() const {
  return layers_->config;
}

template <typename T>
BasicTensor<T> Network<T>::forward(const BasicTensor<T>& batch, const ForwardOptions& options) {
  const auto& c = layers_->config;
  if (batch.rank() != 4 || batch.dim(1) != c.input_channels || batch.dim(2) != c.input_size.h ||
      batch.dim(3) != c.input_size.w) {
    throw ShapeError("network expects (n, " + std::to_string(c.input_channels) + ", " +
                     std::to_string(c.input_size.h) + ", " + std::to_string(c.input_size.w) + "), got " +
                     to_string(batch.shape()));
  }
  auto& L = *layers_;
  auto x = L.stem(batch);
  if (L.fuse) {
    auto half = downsample_half(batch);
    if (options.zero_half_scale_branch) half = BasicTensor<T>::zeros(half.shape());
    x = (*L.fuse)(concat(std::vector<BasicTensor<T>>{x, half}, 1));
  }
  x = maxpool2d(x, {3, 3}, {2, 2}, {1, 1});

  std::vector<BasicTensor<T>> skips;
  for (auto& [a, b] : L.encoders) {
    x = b(a(x));
    skips.push_back(x);
  }
  // Deepest decoder first; each result gains the matching encoder output.
  for (std::size_t i = L.decoders.size(); i-- > 0;) {
    x = L.decoders[i](x);
    if (i > 0) x = add(x, skips[i - 1]);
  }
  x = L.head_conv(L.head_upsample(x));
  return sigmoid(L.head_out(x));
}

template <typename T>
std::vector<NamedTensor<T>> Network<T>::parameters() const {
  std::vector<NamedTensor<T>> out;
  layers_->for_each_convbn([&](const std::string& name, ConvBn<T>& l) { l.collect(name, out); });
  layers_->head_out.collect("head.out", out);
  return out;
}

template <typename T>
std::vector<NamedBuffer<T>> Network<T>::buffers() {
  std::vector<NamedBuffer<T>> out;
  layers_->for_each_convbn([&](const std::string& name, ConvBn<T>& l) { l.collect_buffers(name, out); });
  return out;
}

template <typename T>
void Network<T>::set_mode(NormMode mode) {
  layers_->mode = mode;
  layers_->for_each_convbn([&](const std::string&, ConvBn<T>& l) { l.set_mode(mode); });
}

template <typename T>
NormMode Network<T>::mode() const {
  return layers_->mode;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'H', 'C', 'S', 'E', 'G', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void write_le(std::ostream& os, U value) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw CheckpointError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

std::uint32_t variant_code(Variant v) { return static_cast<std::uint32_t>(v); }

Variant variant_from_code(std::uint32_t code) {
  if (code > 3) throw CheckpointError("checkpoint has unknown variant code " + std::to_string(code));
  return static_cast<Variant>(code);
}

std::string describe(const NetworkConfig& c) {
  return std::string(to_string(c.variant)) + " " + std::to_string(c.input_size.h) + "x" +
         std::to_string(c.input_size.w) + " base " + std::to_string(c.base_channels) + " in-channels " +
         std::to_string(c.input_channels);
}

NetworkConfig read_header(std::istream& is, std::uint32_t& dtype, std::uint32_t& count) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw CheckpointError("not a checkpoint file");
  const auto version = read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  NetworkConfig c;
  c.variant = variant_from_code(read_le<std::uint32_t>(is));
  c.input_size.h = read_le<std::uint32_t>(is);
  c.input_size.w = read_le<std::uint32_t>(is);
  c.input_channels = read_le<std::uint32_t>(is);
  c.base_channels = read_le<std::uint32_t>(is);
  c.encoder_blocks = read_le<std::uint32_t>(is);
  dtype = read_le<std::uint32_t>(is);
  if (dtype != 4 && dtype != 8) throw CheckpointError("checkpoint has unknown dtype " + std::to_string(dtype));
  count = read_le<std::uint32_t>(is);
  return c;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, Network<T>& net) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  const auto& c = net.config();
  os.write(kMagic, 8);
  write_le<std::uint32_t>(os, kCheckpointVersion);
  write_le<std::uint32_t>(os, variant_code(c.variant));
  for (auto v : {c.input_size.h, c.input_size.w, c.input_channels, c.base_channels, c.encoder_blocks}) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  }
  write_le<std::uint32_t>(os, sizeof(T));
  const auto params = net.parameters();
  const auto bufs = net.buffers();
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size() + bufs.size()));
  auto write_entry = [&](std::uint8_t kind, const std::string& name, const Shape& shape, std::span<const T> values) {
    write_le<std::uint8_t>(os, kind);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (auto v : values) write_le<T>(os, v);
  };
  for (const auto& p : params) write_entry(0, p.name, p.tensor.shape(), p.tensor.values());
  for (const auto& b : bufs) write_entry(1, b.name, {b.values->size()}, *b.values);
  if (!os) throw CheckpointError("failed writing " + path.string());
}

NetworkConfig read_checkpoint_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::uint32_t dtype = 0, count = 0;
  return read_header(is, dtype, count);
}

template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path, const std::optional<NetworkConfig>& expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::uint32_t dtype = 0, count = 0;
  const NetworkConfig config = read_header(is, dtype, count);
  if (expected && !(*expected == config)) {
    throw CheckpointError("checkpoint holds " + describe(config) + " but " + describe(*expected) + " was requested");
  }
  Network<T> net(config, 0);
  auto params = net.parameters();
  auto bufs = net.buffers();
  if (count != params.size() + bufs.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(count) + " entries, network expects " +
                          std::to_string(params.size() + bufs.size()));
  }
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto kind = read_le<std::uint8_t>(is);
    const auto name_len = read_le<std::uint32_t>(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw CheckpointError("checkpoint truncated");
    const auto rank = read_le<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = read_le<std::uint32_t>(is);

    const bool is_param = e < params.size();
    const std::string& want = is_param ? params[e].name : bufs[e - params.size()].name;
    if (kind != (is_param ? 0 : 1) || name != want) {
      throw CheckpointError("checkpoint entry " + std::to_string(e) + " is '" + name + "', expected '" + want + "'");
    }
    std::span<T> dst = is_param ? params[e].tensor.mutable_values() : std::span<T>(*bufs[e - params.size()].values);
    const Shape expected_shape = is_param ? params[e].tensor.shape() : Shape{dst.size()};
    if (shape != expected_shape) {
      throw CheckpointError("checkpoint entry '" + name + "' has shape " + to_string(shape) + ", expected " +
                            to_string(expected_shape));
    }
    for (auto& v : dst) v = dtype == 4 ? static_cast<T>(read_le<float>(is)) : static_cast<T>(read_le<double>(is));
  }
  return net;
}

template class Network<float>;
template class Network<double>;
template void save_checkpoint(const std::filesystem::path&, Network<float>&);
template void save_checkpoint(const std::filesystem::path&, Network<double>&);
template Network<float> load_checkpoint(const std::filesystem::path&, const std::optional<NetworkConfig>&);
template Network<double> load_checkpoint(const std::filesystem::path&, const std::optional<NetworkConfig>&);

}  // namespace hcseg
