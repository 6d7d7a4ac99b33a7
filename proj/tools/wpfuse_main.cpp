// wpfuse: train, fuse, eval, ablate, synth.
//
// Exit codes: 0 success, 2 usage/configuration error, 3 data error
// (unreadable or malformed input), 4 numeric failure, 1 anything else.
// Failures print exactly one line to stderr:
//   wpfuse: error: <usage|data|numeric|internal>: <message>

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "wpfuse/checkpoint.hpp"
#include "wpfuse/errors.hpp"
#include "wpfuse/image_io.hpp"
#include "wpfuse/metrics.hpp"
#include "wpfuse/pipeline.hpp"
#include "wpfuse/run_config.hpp"

namespace fs = std::filesystem;
using namespace wpfuse;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

int fail(const char* kind, int code, std::string message) {
  for (char& c : message)
    if (c == '\n' || c == '\r') c = ' ';
  std::cerr << "wpfuse: error: " << kind << ": " << message << std::endl;
  return code;
}

/// WPFUSE_THREADS caps worker threads; unset or invalid means 1.
int worker_threads() {
  const char* env = std::getenv("WPFUSE_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return n >= 1 ? n : 1;
}

void log_stderr(const std::string& msg) { std::cerr << msg << '\n'; }

void write_text(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << text;
    if (!out) throw IoError("write failed: " + tmp);
  }
  fs::rename(tmp, path);
}

RunConfig prepare_run(const std::string& config_path, const std::optional<std::uint64_t>& seed) {
  RunConfig rc = load_run_config(config_path);
  if (seed) rc.training.seed = *seed;
  rc.validate_paths();
  return rc;
}

int cmd_train(const std::string& config_path, const std::optional<std::uint64_t>& seed) {
  const RunConfig rc = prepare_run(config_path, seed);
  const std::vector<ImagePair> pairs = load_pairs(read_manifest(rc.manifest));
  const std::vector<PatchPair> patches = extract_patches(pairs, rc.training, log_stderr);
  if (patches.empty()) throw ValidationError("no patches survive patch_keep_threshold; nothing to train on");
  fs::create_directories(rc.output_dir);
  const TrainResult r = train(rc.training, patches, {rc.checkpoint, rc.loss_csv}, log_stderr);
  std::cout << "checkpoint=" << rc.checkpoint << " loss_csv=" << rc.loss_csv << " patches=" << patches.size()
            << " steps=" << r.history.size()
            << " final_loss=" << (r.history.empty() ? std::string("nan") : format_number(r.history.back().total))
            << '\n';
  return 0;
}

int cmd_fuse(const std::string& checkpoint, const std::string& path_a, const std::string& path_b,
             const std::string& out_path, bool color) {
  const ModelState<float> model = load_checkpoint(checkpoint);
  const Image<float> a = read_gray_image(path_a);
  Raster b = read_image(path_b);
  double seconds = 0.0;
  if (b.is_color()) {
    if (!color)
      throw ValidationError(path_b + " is RGB; pass --color to fuse its luminance and keep its chrominance");
    const auto t0 = std::chrono::steady_clock::now();
    const ColorImage fused = fuse_color(model, a, b.color);
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_image(out_path, fused);
  } else {
    if (color) throw ValidationError("--color needs an RGB second input, but " + path_b + " is grayscale");
    const FuseResult r = fuse_pair(model, {"pair", a, std::move(b.gray), Modality::kCtMr});
    seconds = r.seconds;
    write_image(out_path, r.fused);
  }
  std::cout << "output=" << out_path << " runtime_s=" << format_number(seconds) << '\n';
  return 0;
}

int cmd_eval(const std::string& fused_path, const std::string& path_a, const std::string& path_b,
             const std::string& out_csv, const std::string& pair_id, double runtime) {
  const Image<float> f = read_gray_image(fused_path), a = read_gray_image(path_a);
  Raster b = read_image(path_b);
  const Image<float> bg = b.is_color() ? rgb_to_yuv(b.color).y : std::move(b.gray);
  const MetricReport r =
      evaluate_all(f.cast<double>(), a.cast<double>(), bg.cast<double>(), runtime, worker_threads());
  std::ostringstream csv;
  write_metric_csv(csv, {{pair_id, r}});
  write_text(out_csv, csv.str());
  std::cout << csv.str();
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::optional<std::uint64_t>& seed) {
  const RunConfig rc = prepare_run(config_path, seed);
  const std::vector<ImagePair> pairs = load_pairs(read_manifest(rc.manifest));
  fs::create_directories(rc.output_dir);
  AblationOptions options;
  options.checkpoint_dir = rc.output_dir;
  options.threads = worker_threads();
  const AblationResult result = run_ablation(rc.training, pairs, options, log_stderr);
  std::ostringstream table, rows;
  write_ablation_table(table, result);
  write_ablation_rows(rows, result);
  write_text(rc.ablation_table, table.str());
  write_text(rc.ablation_rows, rows.str());
  std::cout << table.str();
  return 0;
}

int cmd_synth(const std::string& out_dir, int count, int size, std::uint64_t seed) {
  if (count < 1) throw ConfigError("--pairs must be positive");
  if (size < 16 || size % 8 != 0) throw ConfigError("--size must be a multiple of 8 and at least 16");
  fs::create_directories(out_dir);
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "syn%03d", i);
    const ImagePair p = make_synthetic_pair(size, seed + std::uint64_t(i), id);
    const std::string a = std::string(id) + "_a.png", b = std::string(id) + "_b.png";
    write_image((fs::path(out_dir) / a).string(), p.a);
    write_image((fs::path(out_dir) / b).string(), p.b);
    entries.push_back({id, a, b, Modality::kCtMr});
  }
  const std::string manifest = (fs::path(out_dir) / "manifest.txt").string();
  write_manifest(manifest, entries);
  std::cout << "manifest=" << manifest << " pairs=" << count << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wpfuse: wavelet-pooling U-Net for multimodal medical image fusion"};
  app.require_subcommand(1);
  app.footer(
      "Exit codes: 0 ok, 2 usage, 3 data, 4 numeric.\n"
      "WPFUSE_THREADS caps metric-evaluation worker threads (default 1).");

  std::optional<std::uint64_t> seed;
  auto add_seed = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Override the random seed (fuse and eval are deterministic and ignore it)");
  };

  std::string config;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a run configuration file");
  train_cmd->add_option("--config", config, "Run configuration file")->required();
  add_seed(train_cmd);

  std::string checkpoint, path_a, path_b, out_path;
  bool color = false;
  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse an MR image with a CT image or an RGB functional image");
  fuse_cmd->add_option("--checkpoint", checkpoint, "Trained model")->required();
  fuse_cmd->add_option("--a", path_a, "MR source (grayscale)")->required();
  fuse_cmd->add_option("--b", path_b, "CT source, or SPECT/PET in RGB with --color")->required();
  fuse_cmd->add_option("--out", out_path, "Output image (.png, .pgm, .ppm)")->required();
  fuse_cmd->add_flag("--color", color, "Fuse the luminance of an RGB --b and keep its chrominance");
  add_seed(fuse_cmd);

  std::string fused_path, eval_a, eval_b, eval_out, pair_id = "pair";
  double runtime = 0.0;
  auto* eval_cmd = app.add_subcommand("eval", "Score a fused image against its sources with the nine metrics");
  eval_cmd->add_option("--fused", fused_path, "Fused image")->required();
  eval_cmd->add_option("--a", eval_a, "Source A")->required();
  eval_cmd->add_option("--b", eval_b, "Source B (RGB is reduced to luminance)")->required();
  eval_cmd->add_option("--out", eval_out, "Metric CSV to write")->required();
  eval_cmd->add_option("--pair-id", pair_id, "Row label");
  eval_cmd->add_option("--runtime", runtime, "Fusion runtime in seconds to record (default 0)")
      ->check(CLI::NonNegativeNumber);
  add_seed(eval_cmd);

  std::string ablate_config;
  auto* ablate_cmd = app.add_subcommand("ablate", "Compare wdepp, max and average pooling on held-out pairs");
  ablate_cmd->add_option("--config", ablate_config, "Run configuration file")->required();
  add_seed(ablate_cmd);

  std::string synth_dir;
  int synth_pairs = 32, synth_size = 64;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic MR/CT-like dataset and its manifest");
  synth_cmd->add_option("--out-dir", synth_dir, "Destination directory")->required();
  synth_cmd->add_option("--pairs", synth_pairs, "Number of pairs (default 32)");
  synth_cmd->add_option("--size", synth_size, "Image side in pixels (default 64)");
  add_seed(synth_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", kExitUsage, e.what());
  }

  try {
    if (*train_cmd) return cmd_train(config, seed);
    if (*fuse_cmd) return cmd_fuse(checkpoint, path_a, path_b, out_path, color);
    if (*eval_cmd) return cmd_eval(fused_path, eval_a, eval_b, eval_out, pair_id, runtime);
    if (*ablate_cmd) return cmd_ablate(ablate_config, seed);
    if (*synth_cmd) return cmd_synth(synth_dir, synth_pairs, synth_size, seed.value_or(0));
  } catch (const ConfigError& e) {
    return fail("usage", kExitUsage, e.what());
  } catch (const NumericError& e) {
    return fail("numeric", kExitNumeric, e.what());
  } catch (const IoError& e) {
    return fail("data", kExitData, e.what());
  } catch (const ValidationError& e) {
    return fail("data", kExitData, e.what());
  } catch (const DimensionError& e) {
    return fail("data", kExitData, e.what());
  } catch (const std::exception& e) {
    return fail("internal", 1, e.what());
  }
  return fail("usage", kExitUsage, "no subcommand given");
}
