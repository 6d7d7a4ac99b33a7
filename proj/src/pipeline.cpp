#include "wpfuse/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "wpfuse/checkpoint.hpp"
#include "wpfuse/random.hpp"

namespace wpfuse {
namespace {

namespace fs = std::filesystem;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double population_std(const Image<float>& x) {
  const Eigen::ArrayXXd d = x.cast<double>().array();
  return std::sqrt((d - d.mean()).square().mean());
}

void log_line(const LogFn& log, const std::string& msg) {
  if (log) log(msg);
}

FeatureMap<float> make_batch(const std::vector<PatchPair>& patches, const std::vector<std::size_t>& order,
                             std::size_t begin, std::size_t end) {
  const Index p = patches[order[begin]].a.rows();
  FeatureMap<float> batch(Index(end - begin), p, p, 2);
  for (std::size_t i = begin; i < end; ++i) {
    const PatchPair& s = patches[order[i]];
    batch.channel(0, Index(i - begin)) = s.a;
    batch.channel(1, Index(i - begin)) = s.b;
  }
  return batch;
}

// Smooth radial bump, 1 at (cy, cx).
double bump(double y, double x, double cy, double cx, double sy, double sx) {
  const double dy = (y - cy) / sy, dx = (x - cx) / sx;
  return std::exp(-0.5 * (dy * dy + dx * dx));
}

Eigen::Matrix3d rgb_to_yuv_matrix() {
  Eigen::Matrix3d m;
  m << 0.299, 0.587, 0.114,
      -0.168736, -0.331264, 0.5,
      0.5, -0.418688, -0.081312;
  return m;
}

}  // namespace

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::kCtMr: return "ct_mr";
    case Modality::kMrSpect: return "mr_spect";
    case Modality::kMrPet: return "mr_pet";
  }
  return "unknown";
}

Modality parse_modality(std::string_view text) {
  if (text == "ct_mr") return Modality::kCtMr;
  if (text == "mr_spect") return Modality::kMrSpect;
  if (text == "mr_pet") return Modality::kMrPet;
  throw ValidationError("unknown modality tag '" + std::string(text) + "' (expected ct_mr, mr_spect or mr_pet)");
}

void TrainingConfig::validate() const {
  network.validate();
  if (patch_size < 16 || patch_size % 8 != 0)
    throw ConfigError("patch_size must be a multiple of 8 and at least 16, got " + std::to_string(patch_size));
  if (patch_size % network.size_multiple() != 0)
    throw ConfigError("patch_size " + std::to_string(patch_size) + " is not a multiple of " +
                      std::to_string(network.size_multiple()) + " required by decoder_blocks");
  if (epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (max_steps < 0) throw ConfigError("max_steps must be nonnegative");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("beta1 and beta2 must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  if (!(patch_keep_threshold >= 0.0)) throw ConfigError("patch_keep_threshold must be nonnegative");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
    throw ConfigError("validation_fraction must lie in [0, 1)");
}

std::vector<PatchPair> extract_patches(const std::vector<ImagePair>& pairs, const TrainingConfig& cfg,
                                       const LogFn& log) {
  std::vector<const ImagePair*> sorted;
  for (const auto& p : pairs) sorted.push_back(&p);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const ImagePair* x, const ImagePair* y) { return x->pair_id < y->pair_id; });

  const Index ps = cfg.patch_size;
  std::vector<PatchPair> out;
  for (const ImagePair* pair : sorted) {
    if (pair->a.rows() != pair->b.rows() || pair->a.cols() != pair->b.cols())
      throw DimensionError("extract_patches: pair '" + pair->pair_id + "' has mismatched source sizes");
    if (pair->a.rows() < ps || pair->a.cols() < ps) {
      log_line(log, "warning: pair '" + pair->pair_id + "' (" + shape_string(pair->a.rows(), pair->a.cols()) +
                        ") is smaller than one patch; skipped");
      continue;
    }
    for (Index r = 0; r + ps <= pair->a.rows(); r += ps) {
      for (Index c = 0; c + ps <= pair->a.cols(); c += ps) {
        Image<float> a = pair->a.block(r, c, ps, ps), b = pair->b.block(r, c, ps, ps);
        if (std::max(population_std(a), population_std(b)) >= cfg.patch_keep_threshold)
          out.push_back({pair->pair_id, r, c, std::move(a), std::move(b)});
      }
    }
  }
  return out;
}

AdamState AdamState::zeros_like(const NetworkConfig& cfg) {
  return {ModelState<float>::zeros_like(cfg), ModelState<float>::zeros_like(cfg), 0};
}

LossBreakdown train_step(ModelState<float>& model, AdamState& adam, const FeatureMap<float>& batch,
                         const TrainingConfig& cfg) {
  ForwardTape<float> tape;
  const FeatureMap<float> fused = train_forward(model, batch, tape);
  FeatureMap<float> dfused;
  const LossBreakdown loss = batch_loss(fused, batch, &dfused);
  if (!std::isfinite(loss.total)) return loss;

  ModelState<float> grad = ModelState<float>::zeros_like(model.config);
  backward(model, tape, dfused, grad);

  ++adam.step;
  ++model.training_step;
  const double t = double(adam.step);
  const float b1 = float(cfg.beta1), b2 = float(cfg.beta2);
  const float c1 = float(1.0 - std::pow(cfg.beta1, t)), c2 = float(1.0 - std::pow(cfg.beta2, t));
  const float lr = float(cfg.learning_rate), eps = float(cfg.epsilon);
  for_each_tensor(
      [&](const std::string&, TensorKind kind, auto& p, auto& g, auto& m, auto& v) {
        if (kind != TensorKind::kParameter) return;
        m = b1 * m + (1.0f - b1) * g;
        v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
        p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
      },
      model, grad, adam.m, adam.v);
  return loss;
}

void write_loss_csv(std::ostream& out, const std::vector<LossBreakdown>& history) {
  out << "step,intensity,gradient,structure,total\n";
  for (std::size_t i = 0; i < history.size(); ++i) {
    const LossBreakdown& l = history[i];
    out << (i + 1) << ',' << format_number(l.intensity) << ',' << format_number(l.gradient) << ','
        << format_number(l.structure) << ',' << format_number(l.total) << '\n';
  }
}

void write_loss_csv(const std::string& path, const std::vector<LossBreakdown>& history) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    write_loss_csv(out, history);
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move loss history into place: " + path);
}

TrainResult train(const TrainingConfig& cfg, const std::vector<PatchPair>& patches, const TrainOutputs& outputs,
                  const LogFn& log) {
  cfg.validate();
  if (patches.empty()) throw ValidationError("train: no patches to train on");
  for (const auto& p : patches)
    if (p.a.rows() != cfg.patch_size || p.a.cols() != cfg.patch_size || p.b.rows() != cfg.patch_size ||
        p.b.cols() != cfg.patch_size)
      throw DimensionError("train: patch from '" + p.pair_id + "' is not " +
                           shape_string(cfg.patch_size, cfg.patch_size));

  TrainResult result{build_model<float>(cfg.network, cfg.seed), {}};
  AdamState adam = AdamState::zeros_like(cfg.network);
  Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  auto checkpoint = [&]() {
    if (!outputs.checkpoint_path.empty()) save_checkpoint(outputs.checkpoint_path, result.model);
    if (!outputs.loss_csv_path.empty()) write_loss_csv(outputs.loss_csv_path, result.history);
  };

  std::vector<std::size_t> order(patches.size());
  const auto max_steps = std::size_t(cfg.max_steps);
  bool done = false;
  for (Index epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t(0));
    shuffle_rng.shuffle(order);
    for (std::size_t begin = 0; begin < order.size(); begin += std::size_t(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + std::size_t(cfg.batch_size));
      const LossBreakdown loss = train_step(result.model, adam, make_batch(patches, order, begin, end), cfg);
      const std::size_t step = result.history.size() + 1;
      if (!std::isfinite(loss.total)) {
        std::ostringstream msg;
        msg << "training diverged at step " << step << " (epoch " << epoch + 1 << "): total loss " << loss.total;
        throw NumericError(msg.str());
      }
      result.history.push_back(loss);
      if (max_steps > 0 && result.history.size() >= max_steps) {
        done = true;
        break;
      }
    }
    checkpoint();
    log_line(log, "epoch " + std::to_string(epoch + 1) + " step " + std::to_string(result.history.size()) +
                      " loss " + format_number(result.history.back().total));
  }
  if (result.history.empty()) checkpoint();
  return result;
}

FuseResult fuse_pair(const ModelState<float>& model, const ImagePair& pair) {
  const auto t0 = std::chrono::steady_clock::now();
  FuseResult r;
  r.fused = fuse(model, pair.a, pair.b);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

YuvImage rgb_to_yuv(const ColorImage& c) {
  const Eigen::Matrix3d m = rgb_to_yuv_matrix();
  const Index h = c.height(), w = c.width();
  for (const auto& p : c.rgb)
    if (p.rows() != h || p.cols() != w) throw DimensionError("rgb_to_yuv: color planes differ in size");
  std::array<Eigen::ArrayXXd, 3> rgb;
  for (int k = 0; k < 3; ++k) rgb[k] = c.rgb[k].cast<double>().array();
  auto row = [&](int i) {
    return (m(i, 0) * rgb[0] + m(i, 1) * rgb[1] + m(i, 2) * rgb[2]).cast<float>().matrix().eval();
  };
  return {row(0), row(1), row(2)};
}

ColorImage yuv_to_rgb(const Image<float>& y, const Image<float>& u, const Image<float>& v) {
  if (y.rows() != u.rows() || y.cols() != u.cols() || y.rows() != v.rows() || y.cols() != v.cols())
    throw DimensionError("yuv_to_rgb: channel sizes differ");
  static const Eigen::Matrix3d inv = rgb_to_yuv_matrix().inverse();
  const Eigen::ArrayXXd yd = y.cast<double>().array(), ud = u.cast<double>().array(), vd = v.cast<double>().array();
  ColorImage out;
  for (int k = 0; k < 3; ++k)
    out.rgb[k] = (inv(k, 0) * yd + inv(k, 1) * ud + inv(k, 2) * vd).max(0.0).min(1.0).cast<float>().matrix();
  return out;
}

ColorImage fuse_color(const ModelState<float>& model, const Image<float>& mr, const ColorImage& func) {
  const YuvImage yuv = rgb_to_yuv(func);
  const Image<float> fused_y = fuse(model, mr, yuv.y);
  return yuv_to_rgb(fused_y, yuv.u, yuv.v);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (base / p).string(); };

  std::vector<ManifestEntry> entries;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(trim(cell));
    if (cells.size() != 4 || cells[0].empty() || cells[1].empty() || cells[2].empty())
      throw ValidationError(path + ":" + std::to_string(lineno) +
                            ": expected 'pair_id, path_a, path_b, modality_tag'");
    ManifestEntry e{cells[0], resolve(cells[1]), resolve(cells[2]), Modality::kCtMr};
    try {
      e.modality = parse_modality(cells[3]);
    } catch (const ValidationError& err) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": " + err.what());
    }
    for (const auto& prev : entries)
      if (prev.pair_id == e.pair_id)
        throw ValidationError(path + ":" + std::to_string(lineno) + ": duplicate pair_id '" + e.pair_id + "'");
    entries.push_back(std::move(e));
  }
  if (entries.empty()) throw ValidationError(path + ": manifest lists no pairs");
  return entries;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "# pair_id, path_a, path_b, modality_tag\n";
  for (const auto& e : entries)
    out << e.pair_id << ", " << e.path_a << ", " << e.path_b << ", " << to_string(e.modality) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

ImagePair load_pair(const ManifestEntry& entry) {
  ImagePair pair{entry.pair_id, read_gray_image(entry.path_a), {}, entry.modality};
  Raster b = read_image(entry.path_b);
  pair.b = b.is_color() ? rgb_to_yuv(b.color).y : std::move(b.gray);
  if (pair.a.rows() != pair.b.rows() || pair.a.cols() != pair.b.cols())
    throw DimensionError("pair '" + entry.pair_id + "': source sizes differ (" +
                         shape_string(pair.a.rows(), pair.a.cols()) + " vs " +
                         shape_string(pair.b.rows(), pair.b.cols()) + ")");
  return pair;
}

std::vector<ImagePair> load_pairs(const std::vector<ManifestEntry>& entries) {
  std::vector<ImagePair> pairs;
  pairs.reserve(entries.size());
  for (const auto& e : entries) pairs.push_back(load_pair(e));
  return pairs;
}

ImagePair make_synthetic_pair(Index size, std::uint64_t seed, const std::string& pair_id) {
  if (size < 8) throw DimensionError("make_synthetic_pair: size must be at least 8");
  Rng rng(seed);
  const double half = 0.5 * double(size);

  // Ellipses in normalized coordinates [-1,1]^2; membership is a logistic
  // ramp about one pixel wide so edges stay band-limited.
  struct Ellipse {
    double cy, cx, ry, rx, angle;
    double inside(double y, double x, double pixel) const {
      const double c = std::cos(angle), s = std::sin(angle);
      const double u = (c * (x - cx) + s * (y - cy)) / rx, v = (-s * (x - cx) + c * (y - cy)) / ry;
      const double dist = (std::sqrt(u * u + v * v) - 1.0) * std::min(rx, ry);
      return 1.0 / (1.0 + std::exp(dist / pixel));
    }
  };
  const double tilt = rng.uniform(-0.3, 0.3);
  const double hy = rng.uniform(0.8, 0.9), hx = rng.uniform(0.65, 0.78);
  const Ellipse head{0, 0, hy, hx, tilt};
  const Ellipse skull_outer{0, 0, hy - 0.05, hx - 0.05, tilt};
  const Ellipse brain{0, 0, hy - 0.12, hx - 0.12, tilt};
  std::vector<Ellipse> ventricles;
  const double vy = rng.uniform(-0.15, 0.05), vsep = rng.uniform(0.08, 0.14);
  for (double side : {-1.0, 1.0})
    ventricles.push_back({vy, side * vsep, rng.uniform(0.15, 0.25), rng.uniform(0.05, 0.08),
                          side * rng.uniform(0.1, 0.4)});
  const Ellipse lesion{rng.uniform(-0.4, 0.4), rng.uniform(-0.35, 0.35), rng.uniform(0.06, 0.14),
                       rng.uniform(0.06, 0.14), rng.uniform(0.0, 3.14)};
  std::vector<Ellipse> calcifications(2);
  for (auto& e : calcifications) e = {rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4), 0.03, 0.03, 0.0};
  const double fy = rng.uniform(10.0, 16.0), fx = rng.uniform(10.0, 16.0), phase = rng.uniform(0.0, 6.283);
  const double lesion_mr = rng.uniform(0.8, 0.95), lesion_ct = rng.uniform(0.45, 0.6);

  ImagePair pair{pair_id, Image<float>(size, size), Image<float>(size, size), Modality::kCtMr};
  const double pixel = 1.0 / half;
  for (Index x = 0; x < size; ++x) {
    for (Index y = 0; y < size; ++y) {
      const double ny = (double(y) + 0.5) / half - 1.0, nx = (double(x) + 0.5) / half - 1.0;
      const double in_head = head.inside(ny, nx, pixel), in_skull = skull_outer.inside(ny, nx, pixel);
      const double in_brain = brain.inside(ny, nx, pixel);
      const double scalp = in_head - in_skull, bone = in_skull - in_brain;
      double csf = 0.0;
      for (const auto& v : ventricles) csf = std::max(csf, v.inside(ny, nx, pixel));
      csf *= in_brain;
      const double tissue = in_brain - csf;
      const double les = lesion.inside(ny, nx, pixel) * tissue;
      double calc = 0.0;
      for (const auto& e : calcifications) calc = std::max(calc, e.inside(ny, nx, pixel));
      calc *= tissue;

      // T1-like MR: bright scalp, dark bone, textured parenchyma, dark CSF.
      const double folds = 0.12 * std::sin(fy * ny + phase) * std::sin(fx * nx);
      const double mr = 0.75 * scalp + 0.08 * bone + (0.5 + folds) * (tissue - les) + lesion_mr * les + 0.12 * csf;
      // CT: bright bone and calcification, flat parenchyma.
      const double ct = 0.2 * scalp + 0.95 * bone + 0.32 * (tissue - les - calc) + lesion_ct * les + 0.9 * calc +
                        0.08 * csf;
      pair.a(y, x) = float(std::clamp(mr, 0.0, 1.0));
      pair.b(y, x) = float(std::clamp(ct, 0.0, 1.0));
    }
  }
  return pair;
}

PairSplit split_pairs(std::size_t count, double validation_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  Rng rng(seed ^ 0x5eed5a1175ULL);
  rng.shuffle(idx);
  std::size_t held = 0;
  if (count >= 2 && validation_fraction > 0.0)
    held = std::clamp<std::size_t>(std::size_t(std::lround(validation_fraction * double(count))), 1, count - 1);
  PairSplit split;
  split.held_out.assign(idx.begin(), idx.begin() + std::ptrdiff_t(held));
  split.train.assign(idx.begin() + std::ptrdiff_t(held), idx.end());
  std::sort(split.held_out.begin(), split.held_out.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

void summarize_rows(const std::vector<MetricRow>& rows, MetricReport& mean, MetricReport& stddev) {
  mean = {};
  stddev = {};
  if (rows.empty()) return;
  const std::size_t n_metrics = metric_names().size();
  auto field = [&](MetricReport& r, std::size_t i) -> double& {
    return i < n_metrics ? metric_value(r, i) : r.runtime_seconds;
  };
  const double n = double(rows.size());
  for (std::size_t i = 0; i <= n_metrics; ++i) {
    double sum = 0.0;
    for (const auto& row : rows) sum += field(const_cast<MetricReport&>(row.report), i);
    const double mu = sum / n;
    double ss = 0.0;
    for (const auto& row : rows) ss += std::pow(field(const_cast<MetricReport&>(row.report), i) - mu, 2);
    field(mean, i) = mu;
    field(stddev, i) = rows.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  }
}

AblationResult run_ablation(const TrainingConfig& cfg, const std::vector<ImagePair>& pairs,
                            const AblationOptions& options, const LogFn& log) {
  cfg.validate();
  if (pairs.size() < 2) throw ValidationError("run_ablation: need at least two pairs for a held-out split");
  if (options.modes.empty()) throw ConfigError("run_ablation: no pooling modes selected");

  const PairSplit split = split_pairs(pairs.size(), cfg.validation_fraction, cfg.seed);
  std::vector<ImagePair> train_pairs;
  for (std::size_t i : split.train) train_pairs.push_back(pairs[i]);
  const std::vector<PatchPair> patches = extract_patches(train_pairs, cfg, log);
  if (patches.empty()) throw ValidationError("run_ablation: no training patches survive the keep threshold");

  AblationResult result;
  for (std::size_t i : split.held_out) result.held_out_ids.push_back(pairs[i].pair_id);
  log_line(log, "ablation: " + std::to_string(train_pairs.size()) + " training pairs (" +
                    std::to_string(patches.size()) + " patches), " + std::to_string(split.held_out.size()) +
                    " held out");

  for (PoolingMode mode : options.modes) {
    TrainingConfig mode_cfg = cfg;
    mode_cfg.network.pooling_mode = mode;
    TrainOutputs outputs;
    if (!options.checkpoint_dir.empty())
      outputs.checkpoint_path =
          (fs::path(options.checkpoint_dir) / ("checkpoint_" + std::string(to_string(mode)) + ".wpf")).string();
    TrainResult trained = train(mode_cfg, patches, outputs, log);

    AblationModeResult mr;
    mr.mode = mode;
    for (std::size_t i : split.held_out) {
      const FuseResult fused = fuse_pair(trained.model, pairs[i]);
      MetricRow row{pairs[i].pair_id,
                    evaluate_all(fused.fused.cast<double>(), pairs[i].a.cast<double>(), pairs[i].b.cast<double>(),
                                 fused.seconds, options.threads)};
      mr.rows.push_back(std::move(row));
    }
    summarize_rows(mr.rows, mr.mean, mr.stddev);
    mr.model = std::move(trained.model);
    mr.history = std::move(trained.history);
    log_line(log, "ablation: " + std::string(to_string(mode)) + " done, final loss " +
                      (mr.history.empty() ? std::string("n/a") : format_number(mr.history.back().total)));
    result.modes.push_back(std::move(mr));
  }
  return result;
}

void write_ablation_table(std::ostream& out, const AblationResult& result) {
  out << "metric";
  for (const auto& m : result.modes) out << ',' << to_string(m.mode);
  out << '\n';
  const std::size_t n_metrics = metric_names().size();
  for (std::size_t i = 0; i <= n_metrics; ++i) {
    out << (i < n_metrics ? metric_names()[i] : std::string("runtime_s"));
    for (const auto& m : result.modes) {
      const double mu = i < n_metrics ? metric_value(m.mean, i) : m.mean.runtime_seconds;
      const double sd = i < n_metrics ? metric_value(m.stddev, i) : m.stddev.runtime_seconds;
      out << ',' << format_number(mu) << " ± " << format_number(sd);
    }
    out << '\n';
  }
}

void write_ablation_rows(std::ostream& out, const AblationResult& result) {
  out << "mode,pair_id";
  for (const auto& n : metric_names()) out << ',' << n;
  out << ",runtime_s\n";
  for (const auto& m : result.modes) {
    for (const auto& row : m.rows) {
      out << to_string(m.mode) << ',' << row.pair_id;
      for (std::size_t i = 0; i < metric_names().size(); ++i) out << ',' << format_number(metric_value(row.report, i));
      out << ',' << format_number(row.report.runtime_seconds) << '\n';
    }
  }
}

}  // namespace wpfuse
