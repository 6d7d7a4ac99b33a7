#pragma once

// Data ingestion, patch extraction, training, inference (gray and color) and
// the pooling ablation harness. Training and inference run in float.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "wpfuse/image_io.hpp"
#include "wpfuse/losses.hpp"
#include "wpfuse/metrics.hpp"
#include "wpfuse/network.hpp"

namespace wpfuse {

enum class Modality { kCtMr, kMrSpect, kMrPet };

std::string_view to_string(Modality m);
/// Accepts ct_mr, mr_spect, mr_pet.
Modality parse_modality(std::string_view text);

/// Source A is always the MR image; B is CT or the luminance of SPECT/PET.
struct ImagePair {
  std::string pair_id;
  Image<float> a;
  Image<float> b;
  Modality modality = Modality::kCtMr;
};

struct TrainingConfig {
  Index patch_size = 64;
  Index epochs = 30;
  Index batch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  double patch_keep_threshold = 0.02;
  /// Stop after this many optimizer steps; 0 means run all epochs.
  Index max_steps = 0;
  /// Share of pairs held out in the ablation harness.
  double validation_fraction = 0.1;
  NetworkConfig network;

  /// Throws ConfigError.
  void validate() const;
};

struct PatchPair {
  std::string pair_id;
  Index row = 0;  // top-left pixel of the tile
  Index col = 0;
  Image<float> a;
  Image<float> b;
};

/// Receives human-readable progress and warnings. May be empty.
using LogFn = std::function<void(const std::string&)>;

/// Non-overlapping patch_size tiles, kept iff max(std_a, std_b) >=
/// patch_keep_threshold (population std), ordered by (pair_id, row, col).
/// Pairs smaller than one tile are skipped with a warning.
std::vector<PatchPair> extract_patches(const std::vector<ImagePair>& pairs, const TrainingConfig& cfg,
                                       const LogFn& log = {});

/// Adam moments, one tensor per learned parameter.
struct AdamState {
  ModelState<float> m;
  ModelState<float> v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const NetworkConfig& cfg);
};

/// One optimizer step on a batch of sources (batch x H x W x 2). Returns the
/// batch-mean loss evaluated before the update.
LossBreakdown train_step(ModelState<float>& model, AdamState& adam, const FeatureMap<float>& batch,
                         const TrainingConfig& cfg);

struct TrainOutputs {
  std::string checkpoint_path;  // written after every epoch; empty to skip
  std::string loss_csv_path;    // step,intensity,gradient,structure,total; empty to skip
};

struct TrainResult {
  ModelState<float> model;
  std::vector<LossBreakdown> history;  // one entry per optimizer step
};

/// Seeded initialization and per-epoch shuffling; the last batch of an epoch
/// may be short. A non-finite loss throws NumericError naming the step.
TrainResult train(const TrainingConfig& cfg, const std::vector<PatchPair>& patches, const TrainOutputs& outputs = {},
                  const LogFn& log = {});

void write_loss_csv(std::ostream& out, const std::vector<LossBreakdown>& history);
void write_loss_csv(const std::string& path, const std::vector<LossBreakdown>& history);

struct FuseResult {
  Image<float> fused;
  double seconds = 0.0;
};

/// Inference-mode forward pass, timed with a steady clock.
FuseResult fuse_pair(const ModelState<float>& model, const ImagePair& pair);

struct YuvImage {
  Image<float> y, u, v;  // u, v centered at 0
};

/// BT.601 full range: Y = 0.299 R + 0.587 G + 0.114 B.
YuvImage rgb_to_yuv(const ColorImage& c);
/// Exact inverse of rgb_to_yuv, then clipped to [0,1].
ColorImage yuv_to_rgb(const Image<float>& y, const Image<float>& u, const Image<float>& v);

/// Fuses the MR image with the luminance of `func`; chrominance passes through.
ColorImage fuse_color(const ModelState<float>& model, const Image<float>& mr, const ColorImage& func);

// ---------------------------------------------------------------------------
// Dataset manifest: "pair_id, path_a, path_b, modality_tag" per line, '#'
// comments. Relative paths are resolved against the manifest's directory.

struct ManifestEntry {
  std::string pair_id;
  std::string path_a;
  std::string path_b;
  Modality modality = Modality::kCtMr;
};

std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

/// Reads both images. A color B is reduced to its luminance; A must be gray.
ImagePair load_pair(const ManifestEntry& entry);
std::vector<ImagePair> load_pairs(const std::vector<ManifestEntry>& entries);

/// Deterministic head phantom seen by both modalities. A is T1-like MR
/// (bright scalp, dark bone, folded parenchyma); B is CT-like (bright bone and
/// calcifications, flat parenchyma). Shape and contrast vary with the seed.
ImagePair make_synthetic_pair(Index size, std::uint64_t seed, const std::string& pair_id);

/// Indices of training and held-out pairs. The split is by pair, seeded, and
/// keeps at least one pair on each side when there are two or more.
struct PairSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> held_out;
};
PairSplit split_pairs(std::size_t count, double validation_fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Pooling ablation

struct AblationModeResult {
  PoolingMode mode = PoolingMode::kWdepp;
  ModelState<float> model;
  std::vector<LossBreakdown> history;
  std::vector<MetricRow> rows;  // one per held-out pair
  MetricReport mean;
  MetricReport stddev;  // sample standard deviation, 0 for a single pair
};

struct AblationResult {
  std::vector<std::string> held_out_ids;
  std::vector<AblationModeResult> modes;
};

struct AblationOptions {
  std::vector<PoolingMode> modes = {PoolingMode::kWdepp, PoolingMode::kMax, PoolingMode::kAverage};
  std::string checkpoint_dir;  // checkpoint_<mode>.wpf per mode; empty to skip
  int threads = 1;             // metric evaluation only
};

/// Trains one model per pooling mode from the same seed and training patches,
/// then fuses and scores every held-out pair.
AblationResult run_ablation(const TrainingConfig& cfg, const std::vector<ImagePair>& pairs,
                            const AblationOptions& options = {}, const LogFn& log = {});

/// Mean and sample std over rows, per metric and runtime.
void summarize_rows(const std::vector<MetricRow>& rows, MetricReport& mean, MetricReport& stddev);

/// One row per metric plus runtime_s, one "mean ± std" column per mode.
void write_ablation_table(std::ostream& out, const AblationResult& result);
/// mode,pair_id,<metrics>,runtime_s
void write_ablation_rows(std::ostream& out, const AblationResult& result);

}  // namespace wpfuse
