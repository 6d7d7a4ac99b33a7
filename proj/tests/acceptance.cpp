// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "test_support.hpp"
#include "wpfuse/losses.hpp"
#include "wpfuse/metrics.hpp"
#include "wpfuse/network.hpp"
#include "wpfuse/pipeline.hpp"
#include "wpfuse/wavelet.hpp"
#include "wpfuse/wdepp.hpp"

using namespace wpfuse;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome wavelet_correctness() {
  Rng rng(101);
  double pr = 0.0, add = 0.0;
  const auto t0 = Clock::now();
  for (int k = 0; k < 100; ++k) {
    const Index h = 2 * Index(1 + rng.below(32)), w = 2 * Index(1 + rng.below(32)), c = Index(1 + rng.below(8));
    const auto x = test::random_map<float>(1, h, w, c, rng);
    const auto s = dwt2(x);
    pr = std::max(pr, double((idwt2(s).data - x.data).cwiseAbs().maxCoeff()));
    add = std::max(add, double((lowpass_component(s).data + highpass_component(s).data - x.data).cwiseAbs().maxCoeff()));
  }
  const double t = seconds_since(t0);
  return {pr < 1e-6 && add < 1e-6 && t < 5.0,
          "reconstruction " + fmt("%.3g", pr) + ", additivity " + fmt("%.3g", add) + ", " + fmt("%.3f", t) + " s"};
}

Outcome wdepp_contract() {
  Rng rng(202);
  int shape_failures = 0, range_failures = 0, runs = 0;
  for (Index c : {1, 8, 32}) {
    const auto p = WdeppParams<float>::init(c, rng);
    for (Index h = 4; h <= 64; h += 2)
      for (Index w = 4; w <= 64; w += 2) {
        const auto x = test::random_map<float>(1, h, w, c, rng);
        WdeppCache<float> cache;
        const auto y = wdepp_forward(x, p, cache);
        ++runs;
        if (y.height != h / 2 || y.width != w / 2 || y.channels() != c) ++shape_failures;
        const auto& a = cache.attention.weights;
        if (!(a.minCoeff() > 0.0f && a.maxCoeff() < 1.0f)) ++range_failures;
      }
  }
  const auto inst = test::fixed_wdepp_instance();
  const double oracle = (wdepp_pool(inst.x, inst.params).channel(0) - inst.expected).cwiseAbs().maxCoeff();
  return {shape_failures == 0 && range_failures == 0 && oracle < 1e-6,
          std::to_string(runs) + " shapes, " + std::to_string(shape_failures) + " shape and " +
              std::to_string(range_failures) + " attention-range failures, 4x4 oracle error " + fmt("%.3g", oracle)};
}

Outcome gradient_integrity() {
  NetworkConfig cfg;
  cfg.base_channels = 8;
  cfg.decoder_blocks = 1;
  cfg.encoder_blocks = 2;
  auto m = build_model<double>(cfg, 303);
  FeatureMap<double> x(2, 16, 16, 2);
  for (Index n = 0; n < 2; ++n) {
    const ImagePair p = make_synthetic_pair(16, 305 + std::uint64_t(n), "g");
    x.channel(0, n) = p.a.cast<double>();
    x.channel(1, n) = p.b.cast<double>();
  }
  const test::OutputLoss loss = [&](const FeatureMap<double>& out, FeatureMap<double>* d) {
    return batch_loss(out, x, d).total;
  };
  const auto r = test::check_network_gradients(m, x, loss, 3, 1e-4, 306, false);
  return {r.checked >= 50 && r.worst < 1e-3,
          std::to_string(r.checked) + " coordinates (" + std::to_string(r.skipped) + " skipped at kinks), worst " +
              fmt("%.3g", r.worst) + (r.worst_name.empty() ? "" : " at " + r.worst_name)};
}

Outcome loss_identities() {
  const Eigen::MatrixXd a = make_synthetic_pair(64, 7, "l").a.cast<double>();
  const LossBreakdown l = total_loss<double>(a, a, a);
  Eigen::MatrixXd cb(8, 8);
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j) cb(i, j) = double((i + j) % 2);
  const double hand = intensity_loss<double>(Eigen::MatrixXd::Constant(8, 8, 0.5), cb, Eigen::MatrixXd(1.0 - cb.array()));
  const bool ok = std::abs(l.intensity) < 1e-9 && std::abs(l.gradient) < 1e-9 && std::abs(l.structure) < 1e-6 &&
                  hand == 0.25;
  return {ok, "intensity " + fmt("%.3g", l.intensity) + ", gradient " + fmt("%.3g", l.gradient) + ", structure " +
                  fmt("%.3g", l.structure) + ", hand case " + fmt("%.17g", hand)};
}

Outcome training_behavior() {
  TrainingConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 1;
  cfg.seed = 1;
  const ImagePair p = make_synthetic_pair(64, 11, "overfit");
  const auto t0 = Clock::now();
  const TrainResult r = train(cfg, {{p.pair_id, 0, 0, p.a, p.b}});
  const double t = seconds_since(t0);
  const double ratio = r.history.back().total / r.history.front().total;
  const Image<float> f = fuse(r.model, p.a, p.b);
  const double mad = (f - p.a.cwiseMax(p.b)).cwiseAbs().cast<double>().mean();
  return {r.history.size() == 200 && ratio <= 0.5 && mad < 0.15 && t < 300.0,
          "loss " + fmt("%.4f", r.history.front().total) + " -> " + fmt("%.4f", r.history.back().total) + " (ratio " +
              fmt("%.3f", ratio) + "), MAD from max(A,B) " + fmt("%.4f", mad) + ", " + fmt("%.1f", t) + " s"};
}

Outcome metric_identities() {
  const Eigen::MatrixXd a = make_synthetic_pair(64, 13, "m").a.cast<double>();
  const MetricReport r = evaluate_all(a, a, a, 0.0);
  const double h = entropy(a);
  bool ok = std::abs(r.q_c - 1) < 1e-6 && std::abs(r.q_y - 1) < 1e-6 && r.q_abf >= 0.99 && std::abs(r.viff - 1) < 1e-3 &&
            std::abs(r.mi - 2 * h) < 1e-6 && r.en == h && r.scd == 0.0;

  Eigen::MatrixXd half(8, 8), ramp(16, 16), cb(8, 8), step = Eigen::MatrixXd::Zero(8, 8);
  half.leftCols(4).setZero();
  half.rightCols(4).setOnes();
  for (Index i = 0; i < 256; ++i) ramp.data()[i] = double(i) / 255.0;
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j) cb(i, j) = double((i + j) % 2);
  step.rightCols(4).setOnes();
  const Eigen::MatrixXd flat = Eigen::MatrixXd::Constant(8, 8, 0.4);
  const bool trivial = entropy(flat) == 0.0 && entropy(half) == 1.0 && entropy(ramp) == 8.0 && std_dev(flat) == 0.0 &&
                       std_dev(cb) == 127.5 && spatial_frequency(flat) == 0.0 &&
                       std::abs(spatial_frequency(step) - 255.0 / std::sqrt(7.0)) < 1e-12;
  ok = ok && trivial;
  return {ok, "q_c " + fmt("%.9f", r.q_c) + ", q_y " + fmt("%.9f", r.q_y) + ", q_abf " + fmt("%.4f", r.q_abf) +
                  ", viff " + fmt("%.6f", r.viff) + ", mi - 2H " + fmt("%.3g", r.mi - 2 * h) +
                  (trivial ? ", trivial cases exact" : ", trivial cases differ")};
}

Outcome ablation_harness() {
  std::vector<ImagePair> pairs;
  for (int i = 0; i < 32; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "syn%03d", i);
    pairs.push_back(make_synthetic_pair(64, 700 + std::uint64_t(i), id));
  }
  TrainingConfig cfg;
  cfg.seed = 7;
  cfg.batch_size = 4;
  cfg.epochs = 1000;
  cfg.max_steps = 300;
  cfg.patch_keep_threshold = 0.02;
  const auto t0 = Clock::now();
  const AblationResult r = run_ablation(cfg, pairs);
  const double t = seconds_since(t0);

  double worst = 0.0;
  bool shape = r.modes.size() == 3;
  for (const auto& mode : r.modes) {
    shape = shape && mode.history.size() == 300 && mode.rows.size() == r.held_out_ids.size();
    for (const auto& row : mode.rows) {
      const ImagePair* p = nullptr;
      for (const auto& q : pairs)
        if (q.pair_id == row.pair_id) p = &q;
      if (!p) return {false, "row for unknown pair " + row.pair_id};
      const Image<float> f = fuse(mode.model, p->a, p->b);
      const MetricReport ref = evaluate_all(f.cast<double>(), p->a.cast<double>(), p->b.cast<double>(), 0.0);
      for (std::size_t i = 0; i < metric_names().size(); ++i)
        worst = std::max(worst, std::abs(metric_value(ref, i) - metric_value(row.report, i)));
    }
  }
  std::ostringstream table;
  write_ablation_table(table, r);
  std::istringstream lines(table.str());
  std::string line, header;
  int count = 0;
  while (std::getline(lines, line)) {
    if (count == 0) header = line;
    ++count;
  }
  shape = shape && count == 11 && header == "metric,wdepp,max,average";
  std::printf("%s", table.str().c_str());
  return {shape && worst <= 1e-9, std::to_string(r.held_out_ids.size()) + " held-out pairs, table " +
                                       std::to_string(count) + " lines, max row deviation " + fmt("%.3g", worst) +
                                       ", " + fmt("%.1f", t) + " s"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// train -> fuse -> eval, writing checkpoint, loss CSV and metric CSV into `dir`.
void end_to_end(const fs::path& dir) {
  std::vector<ImagePair> pairs;
  for (int i = 0; i < 4; ++i) pairs.push_back(make_synthetic_pair(64, 900 + std::uint64_t(i), "e" + std::to_string(i)));
  TrainingConfig cfg;
  cfg.seed = 99;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.network.base_channels = 8;
  const auto patches = extract_patches(pairs, cfg);
  const TrainResult r = train(cfg, patches, {(dir / "model.wpf").string(), (dir / "loss.csv").string()});
  std::vector<MetricRow> rows;
  for (const auto& p : pairs) {
    const Image<float> f = fuse(r.model, p.a, p.b);
    rows.push_back({p.pair_id, evaluate_all(f.cast<double>(), p.a.cast<double>(), p.b.cast<double>(), 0.0)});
  }
  write_metric_csv((dir / "metrics.csv").string(), rows);
}

Outcome determinism() {
  const auto a = test::scratch_dir("acceptance_run_a"), b = test::scratch_dir("acceptance_run_b");
  end_to_end(a);
  end_to_end(b);
  const bool loss = slurp(a / "loss.csv") == slurp(b / "loss.csv") && !slurp(a / "loss.csv").empty();
  const bool metrics = slurp(a / "metrics.csv") == slurp(b / "metrics.csv") && !slurp(a / "metrics.csv").empty();
  const bool model = slurp(a / "model.wpf") == slurp(b / "model.wpf");
  return {loss && metrics && model, std::string("loss CSV ") + (loss ? "identical" : "differs") + ", metric CSV " +
                                        (metrics ? "identical" : "differs") + ", checkpoint " +
                                        (model ? "identical" : "differs")};
}

Outcome inference_latency() {
  const auto m = build_model<float>(NetworkConfig{}, 5);
  const ImagePair p = make_synthetic_pair(256, 5, "big");
  fuse(m, p.a, p.b);  // first-touch allocation
  double worst = 0.0;
  for (int k = 0; k < 3; ++k) worst = std::max(worst, fuse_pair(m, p).seconds);
  return {worst < 1.0, "256x256 fuse, slowest of 3: " + fmt("%.3f", worst) + " s"};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    Outcome (*run)();
  };
  const Criterion criteria[] = {
      {"1 wavelet correctness", wavelet_correctness},
      {"2 WDEPP contract", wdepp_contract},
      {"3 gradient integrity", gradient_integrity},
      {"4 loss identities", loss_identities},
      {"5 training behavior", training_behavior},
      {"6 metric identity suite", metric_identities},
      {"7 ablation harness", ablation_harness},
      {"8 determinism", determinism},
      {"9 inference latency", inference_latency},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s criterion %s: %s\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
