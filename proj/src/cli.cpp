#include "hcseg/cli.hpp"

#include <png.h>

#include <CLI11.hpp>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <optional>

#include "hcseg/data.hpp"
#include "hcseg/loss.hpp"
#include "hcseg/metrics.hpp"
#include "hcseg/segnet.hpp"
#include "hcseg/train.hpp"

namespace hcseg::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

Extent2 parse_size(std::string_view text) {
  const auto x = text.find('x');
  auto number = [&](std::string_view s) {
    std::size_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size() || v == 0)
      throw std::invalid_argument("size must look like HxW with positive integers, got '" + std::string(text) + "'");
    return v;
  };
  if (x == std::string_view::npos) number({});
  return {number(text.substr(0, x)), number(text.substr(x + 1))};
}

Grid<Rgb> boundary_overlay(const Image& image, const Mask& pred, const Mask& gt) {
  const Mask pb = boundary_mask(pred), gb = boundary_mask(gt);
  Grid<Rgb> out(image.rows, image.cols);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto v = static_cast<std::uint8_t>(std::lround(std::clamp(image.data[i], 0.0, 1.0) * 255.0));
    const bool p = pb.data[i] != 0, g = gb.data[i] != 0;
    out.data[i] = p && g ? Rgb{255, 255, 0} : p ? Rgb{255, 0, 0} : g ? Rgb{0, 255, 0} : Rgb{v, v, v};
  }
  return out;
}

Image read_png_gray(const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw ImageIoError(path + ": " + png.message);
  png.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&png);
    throw ImageIoError(path + ": " + png.message);
  }
  Image img(png.height, png.width);
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = buf[i] / 255.0;
  return img;
}

namespace {

struct Failure : std::runtime_error {
  int code;
  Failure(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

void write_json(const fs::path& path, const Json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Json loss_json(const LossConfig& c) {
  return {{"omega0", c.omega0},
          {"sigma", c.sigma},
          {"clamp_epsilon", c.clamp_epsilon},
          {"smooth_epsilon", c.smooth_epsilon},
          {"weight_form", c.form == WeightForm::kGaussian ? "gaussian" : "literal"}};
}

Json network_json(const NetworkConfig& c) {
  return {{"variant", std::string(to_string(c.variant))},
          {"input_size", std::to_string(c.input_size.h) + "x" + std::to_string(c.input_size.w)},
          {"input_channels", c.input_channels},
          {"base_channels", c.base_channels},
          {"encoder_blocks", c.encoder_blocks}};
}

std::string describe(const NetworkConfig& c) {
  return std::string(to_string(c.variant)) + " (base " + std::to_string(c.base_channels) + ", " +
         std::to_string(c.input_size.h) + "x" + std::to_string(c.input_size.w) + ")";
}

struct Options {
  int verbosity = 1;

  // synth
  fs::path synth_out;
  std::size_t synth_count = 16;
  std::string synth_size = "64x64";
  std::uint64_t synth_seed = 0;
  double speckle = 0.2;
  std::vector<double> major, minor, pixel_size;

  // import
  fs::path import_src, import_out;

  // train
  fs::path data, train_out;
  std::string variant = "ms-mini-linknet";
  std::size_t base = 64;
  std::string size = "256x384";
  std::size_t epochs = 150;
  std::size_t batch = 10;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  double split_fraction = 0.8;
  bool augment = false;
  bool validate_on_train = false;
  std::size_t checkpoint_every = 0;
  bool dry_run = false;
  double omega0 = 30.0, sigma = 10.0;
  std::string weight_form = "gaussian";

  // eval / predict
  fs::path checkpoint, eval_data, eval_out, predict_out;
  std::optional<std::string> expect_variant;
  bool overlays = false;
  bool probabilities = false;
  std::vector<std::string> inputs;
};

std::ostream& log_stream(const Options& o, std::ostream& err) {
  static std::ofstream null_stream;
  return o.verbosity > 0 ? err : null_stream;
}

int cmd_synth(const Options& o, std::ostream& out, std::ostream& err) {
  const Extent2 sz = parse_size(o.synth_size);
  if (o.synth_count == 0) throw std::invalid_argument("--count must be positive");
  auto spec = SynthSpec::for_size(sz.h, sz.w, o.synth_count, o.synth_seed);
  spec.speckle = o.speckle;
  if (!o.major.empty()) spec.semi_major = {o.major[0], o.major[1]};
  if (!o.minor.empty()) spec.semi_minor = {o.minor[0], o.minor[1]};
  if (!o.pixel_size.empty()) spec.pixel_size = {o.pixel_size[0], o.pixel_size[1]};
  spec.validate();

  const auto records = synth_generate(spec);
  std::error_code ec;
  fs::create_directories(o.synth_out, ec);
  if (ec || !fs::is_directory(o.synth_out)) throw DataError("cannot create directory " + o.synth_out.string());
  fs::remove(o.synth_out / "manifest.json");  // absent until the dataset is complete
  write_dataset(o.synth_out, records);
  Json m;
  m["tool"] = "hcseg";
  m["version"] = std::string(kVersion);
  m["command"] = "synth";
  m["count"] = spec.count;
  m["size"] = o.synth_size;
  m["seed"] = spec.seed;
  m["semi_major"] = {spec.semi_major.first, spec.semi_major.second};
  m["semi_minor"] = {spec.semi_minor.first, spec.semi_minor.second};
  m["rotation"] = {spec.rotation.first, spec.rotation.second};
  m["speckle"] = spec.speckle;
  m["background_level"] = spec.background_level;
  m["background_amplitude"] = spec.background_amplitude;
  m["interior_offset"] = spec.interior_offset;
  m["rim_intensity"] = spec.rim_intensity;
  m["pixel_size"] = {spec.pixel_size.first, spec.pixel_size.second};
  write_json(o.synth_out / "manifest.json", m);
  out << "wrote " << records.size() << " records to " << o.synth_out.string() << '\n';
  (void)err;
  return kOk;
}

int cmd_import(const Options& o, std::ostream& out, std::ostream& err) {
  if (!fs::is_directory(o.import_src)) throw DataError(o.import_src.string() + ": not a directory");
  fs::create_directories(o.import_out);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(o.import_src)) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::size_t converted = 0, failed = 0;
  bool metadata = false;
  for (const auto& p : files) {
    const auto name = p.filename().string();
    if (name.ends_with("pixel_size_and_HC.csv")) {
      fs::copy_file(p, o.import_out / name, fs::copy_options::overwrite_existing);
      metadata = true;
    } else if (p.extension() == ".png") {
      try {
        write_pgm(o.import_out / (p.stem().string() + ".pgm"), read_png_gray(p.string()));
        ++converted;
      } catch (const ImageIoError& e) {
        err << "error: " << e.what() << '\n';
        ++failed;
      }
    }
  }
  if (!metadata) throw DataError(o.import_src.string() + ": no *pixel_size_and_HC.csv metadata file");
  out << "converted " << converted << " images" << (failed ? ", " + std::to_string(failed) + " failed" : "") << '\n';
  return failed ? kDataError : kOk;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  TrainConfig cfg;
  cfg.network = NetworkConfig::for_variant(parse_variant(o.variant), parse_size(o.size), o.base);
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch;
  cfg.lr = o.lr;
  cfg.seed = o.seed;
  cfg.loss.omega0 = o.omega0;
  cfg.loss.sigma = o.sigma;
  if (o.weight_form == "literal") cfg.loss.form = WeightForm::kLiteral;
  else if (o.weight_form != "gaussian") throw std::invalid_argument("--weight-form must be gaussian or literal");
  cfg.checkpoint_every = o.checkpoint_every;
  if (!o.train_out.empty()) cfg.checkpoint_dir = o.train_out / "checkpoints";
  cfg.network.validate();

  if (o.dry_run) {
    Network<float> net(cfg.network, cfg.seed);
    out << describe(cfg.network) << ": " << count_parameters(net) << " trainable parameters\n";
    return kOk;
  }
  if (o.data.empty()) throw std::invalid_argument("--data is required unless --dry-run is given");
  if (o.train_out.empty()) throw std::invalid_argument("--out is required unless --dry-run is given");
  cfg.validate();

  auto& log = log_stream(o, err);
  auto loaded = load_hc18(o.data);
  for (const auto& w : loaded.warnings) log << "warning: " << w << '\n';
  if (loaded.records.empty()) throw DataError(o.data.string() + ": no usable records");

  std::vector<DatasetRecord> train_set, val_set;
  if (o.validate_on_train) {
    train_set = loaded.records;
    val_set = loaded.records;
  } else {
    auto parts = split(loaded.records, o.split_fraction, o.seed);
    train_set = std::move(parts.train);
    val_set = std::move(parts.validation);
  }
  if (o.augment) {
    train_set = augment_all(train_set);
    val_set = augment_all(val_set);
  }
  Network<float> net(cfg.network, cfg.seed);
  const std::size_t params = count_parameters(net);
  fs::create_directories(o.train_out);

  Json m;
  m["tool"] = "hcseg";
  m["version"] = std::string(kVersion);
  m["command"] = "train";
  m["data"] = o.data.string();
  m["network"] = network_json(cfg.network);
  m["parameters"] = params;
  m["epochs"] = cfg.epochs;
  m["batch_size"] = cfg.batch_size;
  m["lr"] = cfg.lr;
  m["adam"] = {{"beta1", 0.9}, {"beta2", 0.999}, {"epsilon", 1e-8}};
  m["seed"] = cfg.seed;
  m["split_fraction"] = o.validate_on_train ? Json(nullptr) : Json(o.split_fraction);
  m["validate_on_train"] = o.validate_on_train;
  m["augment"] = o.augment;
  m["loss"] = loss_json(cfg.loss);
  m["checkpoint_every"] = cfg.checkpoint_every;
  m["train_records"] = train_set.size();
  m["validation_records"] = val_set.size();
  write_json(o.train_out / "manifest.json", m);

  log << describe(cfg.network) << ", " << params << " parameters, " << train_set.size() << " train / "
      << val_set.size() << " validation records\n";
  const auto history = train(net, train_set, val_set, cfg, [&](const EpochStats& e) {
    if (o.verbosity > 1 || (o.verbosity > 0 && (e.epoch % 10 == 0 || e.epoch == cfg.epochs)))
      log << "epoch " << e.epoch << " loss " << format_double(e.train_loss) << " val soft dice "
          << (std::isnan(e.val_soft_dice) ? std::string("-") : format_double(e.val_soft_dice)) << '\n';
  });
  save_checkpoint(o.train_out / "model.ckpt", net);
  write_history_csv(o.train_out / "history.csv", history);
  out << "trained " << history.epochs.size() << " epochs; checkpoint " << (o.train_out / "model.ckpt").string() << '\n';
  return kOk;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  const NetworkConfig stored = read_checkpoint_config(o.checkpoint);
  if (o.expect_variant) {
    const Variant v = parse_variant(*o.expect_variant);
    if (v != stored.variant)
      throw CheckpointError("checkpoint holds " + describe(stored) + " but --variant " + std::string(to_string(v)) +
                            " was requested");
  }
  auto net = load_checkpoint<float>(o.checkpoint, stored);
  auto loaded = load_hc18(o.eval_data);
  auto& log = log_stream(o, err);
  for (const auto& w : loaded.warnings) log << "warning: " << w << '\n';
  if (loaded.records.empty()) throw DataError(o.eval_data.string() + ": no usable records");

  const Extent2 size = net.config().input_size;
  const auto report = evaluate(net, loaded.records, size);
  fs::create_directories(o.eval_out);
  write_report_csv(o.eval_out / "report.csv", report);
  write_aggregate_csv(o.eval_out / "aggregate.csv", report);
  write_summary_json(o.eval_out / "summary.json", report);
  if (o.overlays) {
    fs::create_directories(o.eval_out / "overlays");
    std::vector<Image> images;
    for (const auto& r : loaded.records) images.push_back(r.image);
    const auto masks = predict_masks(net, images, size);
    for (std::size_t i = 0; i < masks.size(); ++i)
      write_ppm(o.eval_out / "overlays" / (loaded.records[i].id + "_overlay.ppm"),
                boundary_overlay(images[i], masks[i], loaded.records[i].mask));
  }
  out << "Dice " << format_double(report.dice.mean) << "  DF(mm) " << format_double(report.df_mm.mean) << "  ADF(mm) "
      << format_double(report.adf_mm.mean) << "  HD(mm) " << format_double(report.hd_mm.mean) << "  ("
      << report.evaluated << " evaluated, " << report.failed << " failed)\n";
  if (report.has_failures()) log << "warning: " << report.failed << " images failed and are excluded from the aggregates\n";
  return kOk;
}

int cmd_predict(const Options& o, std::ostream& out, std::ostream& err) {
  auto net = load_checkpoint<float>(o.checkpoint);
  fs::create_directories(o.predict_out);
  const Extent2 size = net.config().input_size;
  std::size_t failed = 0;
  for (const auto& in : o.inputs) {
    try {
      const Image img = read_pgm(in);
      const std::vector<Image> one{img};
      const auto prob = predict_probabilities(net, one, size);
      const Mask mask = resize_nearest(threshold(prob[0], 0.5), img.rows, img.cols);
      const std::string stem = fs::path(in).stem().string();
      write_mask_pgm(o.predict_out / (stem + "_mask.pgm"), mask);
      if (o.probabilities) write_pgm(o.predict_out / (stem + "_prob.pgm"), resize_area(prob[0], img.rows, img.cols));
      out << in << " -> " << (o.predict_out / (stem + "_mask.pgm")).string() << '\n';
    } catch (const ImageIoError& e) {
      err << "error: " << e.what() << '\n';
      ++failed;
    }
  }
  return failed ? kDataError : kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fetal head segmentation and head-circumference measurement"};
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", std::string(kVersion));
  Options o;
  bool quiet = false, verbose = false;
  app.add_flag("-q,--quiet", quiet, "Only print results and errors");
  app.add_flag("-v,--verbose", verbose, "Print every epoch");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset in HC18 layout");
  synth->add_option("--out", o.synth_out, "Output directory")->required();
  synth->add_option("--count", o.synth_count, "Number of images");
  synth->add_option("--size", o.synth_size, "Image size HxW");
  synth->add_option("--seed", o.synth_seed, "Random seed");
  synth->add_option("--speckle", o.speckle, "Speckle level in [0, 1)");
  synth->add_option("--semi-major", o.major, "Semi-major axis range in pixels (lo hi)")->expected(2);
  synth->add_option("--semi-minor", o.minor, "Semi-minor axis range in pixels (lo hi)")->expected(2);
  synth->add_option("--pixel-size", o.pixel_size, "Pixel size range in mm (lo hi)")->expected(2);

  auto* imp = app.add_subcommand("import", "Convert an HC18 PNG directory to PGM");
  imp->add_option("--src", o.import_src, "HC18 directory with PNG images and metadata CSV")->required();
  imp->add_option("--out", o.import_out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a network");
  tr->add_option("--data", o.data, "Dataset directory (HC18 layout)");
  tr->add_option("--out", o.train_out, "Output directory for checkpoint, history and manifest");
  tr->add_option("--variant", o.variant, "linknet, ms-linknet, mini-linknet or ms-mini-linknet");
  tr->add_option("--base", o.base, "Base channel count");
  tr->add_option("--size", o.size, "Network input size HxW");
  tr->add_option("--epochs", o.epochs);
  tr->add_option("--batch", o.batch, "Batch size");
  tr->add_option("--lr", o.lr, "Adam learning rate");
  tr->add_option("--seed", o.seed, "Seed for initialization, split and shuffling");
  tr->add_option("--split", o.split_fraction, "Training fraction of source images");
  tr->add_flag("--augment", o.augment, "Add the nine flip/rotation copies of every image");
  tr->add_flag("--validate-on-train", o.validate_on_train, "Use the whole dataset for both training and validation");
  tr->add_option("--checkpoint-every", o.checkpoint_every, "Save a checkpoint every N epochs");
  tr->add_option("--omega0", o.omega0);
  tr->add_option("--sigma", o.sigma);
  tr->add_option("--weight-form", o.weight_form, "gaussian or literal");
  tr->add_flag("--dry-run", o.dry_run, "Build the network, print its parameter count and exit");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", o.checkpoint)->required();
  ev->add_option("--data", o.eval_data)->required();
  ev->add_option("--out", o.eval_out, "Report directory")->required();
  ev->add_option("--variant", o.expect_variant, "Expected network variant");
  ev->add_flag("--overlays", o.overlays, "Write image + boundary overlays");

  auto* pr = app.add_subcommand("predict", "Segment PGM images");
  pr->add_option("--checkpoint", o.checkpoint)->required();
  pr->add_option("--out", o.predict_out)->required();
  pr->add_flag("--probabilities", o.probabilities, "Also write probability maps");
  pr->add_option("images", o.inputs, "Input PGM files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion& e) {
    out << kVersion << '\n';
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return e.get_exit_code() == 0 ? kOk : kUsage;
  }
  o.verbosity = quiet ? 0 : verbose ? 2 : 1;

  try {
    if (*synth) return cmd_synth(o, out, err);
    if (*imp) return cmd_import(o, out, err);
    if (*tr) return cmd_train(o, out, err);
    if (*ev) return cmd_eval(o, out, err);
    if (*pr) return cmd_predict(o, out, err);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::domain_error& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"hcseg"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace hcseg::cli
