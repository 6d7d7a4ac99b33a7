#include "wpfuse/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <future>
#include <sstream>

#include "wpfuse/errors.hpp"
#include "wpfuse/losses.hpp"

namespace wpfuse {

namespace {

using Eigen::ArrayXXd;
using Eigen::MatrixXd;

constexpr int kLevels = 256;

void check_image(const MatrixXd& x, const char* who) {
  if (x.size() == 0) throw ValidationError(std::string(who) + ": empty image");
  if (!all_finite(x)) throw ValidationError(std::string(who) + ": non-finite values");
}

void check_triple(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b, const char* who) {
  check_image(f, who);
  check_image(a, who);
  check_image(b, who);
  if (f.rows() != a.rows() || f.cols() != a.cols() || f.rows() != b.rows() || f.cols() != b.cols())
    throw DimensionError(std::string(who) + ": image shapes differ");
}

// ---- level-domain implementations -----------------------------------------

std::array<double, kLevels> histogram(const MatrixXd& levels) {
  std::array<double, kLevels> h{};
  for (Index i = 0; i < levels.size(); ++i) h[static_cast<int>(levels.data()[i])] += 1.0;
  return h;
}

double entropy_levels(const MatrixXd& f) {
  const auto h = histogram(f);
  const double n = double(f.size());
  double e = 0.0;
  for (double c : h)
    if (c > 0) e -= (c / n) * std::log2(c / n);
  return e;
}

double std_dev_levels(const MatrixXd& f) {
  const double mean = f.mean();
  return std::sqrt((f.array() - mean).square().mean());
}

double spatial_frequency_levels(const MatrixXd& f) {
  const Index h = f.rows(), w = f.cols();
  double rf2 = 0.0, cf2 = 0.0;
  if (w > 1) rf2 = (f.rightCols(w - 1) - f.leftCols(w - 1)).squaredNorm() / double(h * (w - 1));
  if (h > 1) cf2 = (f.bottomRows(h - 1) - f.topRows(h - 1)).squaredNorm() / double((h - 1) * w);
  return std::sqrt(rf2 + cf2);
}

// Q_AB/F sigmoid constants; the gains are set so that perfect transfer
// (G = A = 1) scores exactly 1.
constexpr double kKappaG = -15.0, kSigmaG = 0.5;
constexpr double kKappaA = -22.0, kSigmaA = 0.8;

struct EdgeField {
  ArrayXXd strength, orientation;
};

EdgeField edge_field(const MatrixXd& x) {
  const auto [gx, gy] = sobel<double>(x);
  EdgeField e;
  e.strength = (gx.array().square() + gy.array().square()).sqrt();
  e.orientation = ArrayXXd(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double sx = gx.data()[i], sy = gy.data()[i];
    e.orientation.data()[i] = sx == 0.0 ? M_PI / 2 : std::atan(sy / sx);
  }
  return e;
}

ArrayXXd edge_preservation(const EdgeField& s, const EdgeField& f) {
  const double gain_g = 1.0 + std::exp(kKappaG * (1.0 - kSigmaG));
  const double gain_a = 1.0 + std::exp(kKappaA * (1.0 - kSigmaA));
  ArrayXXd q(s.strength.rows(), s.strength.cols());
  for (Index i = 0; i < q.size(); ++i) {
    const double gs = s.strength.data()[i], gf = f.strength.data()[i];
    double g;
    if (gs == gf) g = 1.0;
    else g = gs > gf ? gf / gs : gs / gf;
    const double a = std::abs(std::abs(s.orientation.data()[i] - f.orientation.data()[i]) - M_PI / 2) * 2.0 / M_PI;
    const double qg = gain_g / (1.0 + std::exp(kKappaG * (g - kSigmaG)));
    const double qa = gain_a / (1.0 + std::exp(kKappaA * (a - kSigmaA)));
    q.data()[i] = qg * qa;
  }
  return q;
}

double q_abf_levels(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b) {
  const EdgeField ef = edge_field(f), ea = edge_field(a), eb = edge_field(b);
  const ArrayXXd qa = edge_preservation(ea, ef), qb = edge_preservation(eb, ef);
  const double den = (ea.strength + eb.strength).sum();
  if (den == 0.0) return 0.0;  // sources without edges
  return (qa * ea.strength + qb * eb.strength).sum() / den;
}

double mutual_information_pair(const MatrixXd& x, const MatrixXd& f) {
  std::vector<double> joint(kLevels * kLevels, 0.0);
  for (Index i = 0; i < x.size(); ++i)
    joint[static_cast<int>(x.data()[i]) * kLevels + static_cast<int>(f.data()[i])] += 1.0;
  const auto hx = histogram(x), hf = histogram(f);
  const double n = double(x.size());
  double mi = 0.0;
  for (int i = 0; i < kLevels; ++i) {
    if (hx[i] == 0) continue;
    for (int j = 0; j < kLevels; ++j) {
      const double c = joint[i * kLevels + j];
      if (c > 0) mi += (c / n) * std::log2(c * n / (hx[i] * hf[j]));
    }
  }
  return mi;
}

double mutual_information_levels(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b) {
  return mutual_information_pair(a, f) + mutual_information_pair(b, f);
}

// Windowed SSIM machinery for Q_C / Q_Y: 7x7 box windows at every position.
constexpr int kBlock = 7;
constexpr double kLevelC1 = (0.01 * 255) * (0.01 * 255);
constexpr double kLevelC2 = (0.03 * 255) * (0.03 * 255);

// Inputs are integer levels, so 7x7 window sums and the products
// 49*S_xy - S_x*S_y are exact in double; exact moments keep the covariance
// ratios of Q_C free of cancellation noise (cov(a,f) + cov(b,f) = 0 for b = 255 - a).
ArrayXXd box_sum(const MatrixXd& x) {
  return detail::filter_valid<double>(x, Eigen::VectorXd::Ones(kBlock)).array();
}

struct WindowMoments {
  ArrayXXd mean_x, mean_y, var_x, var_y, cov;
};

WindowMoments window_moments(const MatrixXd& x, const MatrixXd& y) {
  constexpr double n = kBlock * kBlock;
  const ArrayXXd sx = box_sum(x), sy = box_sum(y);
  WindowMoments m;
  m.mean_x = sx / n;
  m.mean_y = sy / n;
  m.var_x = (n * box_sum(x.cwiseProduct(x)) - sx.square()) / (n * n);
  m.var_y = (n * box_sum(y.cwiseProduct(y)) - sy.square()) / (n * n);
  m.cov = (n * box_sum(x.cwiseProduct(y)) - sx * sy) / (n * n);
  return m;
}

ArrayXXd ssim_map(const WindowMoments& m) {
  return ((2 * m.mean_x * m.mean_y + kLevelC1) * (2 * m.cov + kLevelC2)) /
         ((m.mean_x.square() + m.mean_y.square() + kLevelC1) * (m.var_x + m.var_y + kLevelC2));
}

void check_block_size(const MatrixXd& x, const char* who) {
  if (x.rows() < kBlock || x.cols() < kBlock)
    throw DimensionError(std::string(who) + ": image smaller than the 7x7 window");
}

double q_c_levels(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b) {
  check_block_size(f, "q_c");
  const WindowMoments af = window_moments(a, f), bf = window_moments(b, f);
  const ArrayXXd s_af = ssim_map(af), s_bf = ssim_map(bf);
  ArrayXXd q(s_af.rows(), s_af.cols());
  for (Index i = 0; i < q.size(); ++i) {
    const double ca = af.cov.data()[i], cb = bf.cov.data()[i];
    double sim = 0.5;
    if (ca + cb != 0.0) sim = std::clamp(ca / (ca + cb), 0.0, 1.0);
    q.data()[i] = sim * s_af.data()[i] + (1.0 - sim) * s_bf.data()[i];
  }
  return q.mean();
}

double q_y_levels(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b) {
  check_block_size(f, "q_y");
  const WindowMoments ab = window_moments(a, b), af = window_moments(a, f), bf = window_moments(b, f);
  const ArrayXXd s_ab = ssim_map(ab), s_af = ssim_map(af), s_bf = ssim_map(bf);
  ArrayXXd q(s_ab.rows(), s_ab.cols());
  for (Index i = 0; i < q.size(); ++i) {
    if (s_ab.data()[i] >= 0.75) {
      const double va = ab.var_x.data()[i], vb = ab.var_y.data()[i];
      const double lambda = va + vb > 0.0 ? va / (va + vb) : 0.5;
      q.data()[i] = lambda * s_af.data()[i] + (1.0 - lambda) * s_bf.data()[i];
    } else {
      q.data()[i] = std::max(s_af.data()[i], s_bf.data()[i]);
    }
  }
  return q.mean();
}

double scd_levels(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b) {
  return pearson(f - b, a) + pearson(f - a, b);
}

// VIFF: four Gaussian scales (window 2^(5-k)+1, sigma = window/5), noise
// variance 0.005*255^2, scale weights {1, 0, 0.15, 1}/2.15. At each pixel the
// source with the larger distortion gain g supplies the information terms.
constexpr double kViffNoise = 0.005 * 255.0 * 255.0;
constexpr double kViffFloor = 1e-10;
constexpr double kViffC = 1e-7;
constexpr std::array<double, 4> kViffWeights = {1.0 / 2.15, 0.0, 0.15 / 2.15, 1.0 / 2.15};

Eigen::VectorXd viff_window(int scale) {
  const int n = (1 << (4 - scale + 1)) + 1;
  const double sigma = n / 5.0;
  Eigen::VectorXd g(n);
  const int r = n / 2;
  for (int i = 0; i < n; ++i) g(i) = std::exp(-double((i - r) * (i - r)) / (2 * sigma * sigma));
  return g / g.sum();  // separable factor of the normalized 2D Gaussian
}

MatrixXd subsample2(const MatrixXd& x) {
  MatrixXd out((x.rows() + 1) / 2, (x.cols() + 1) / 2);
  for (Index j = 0; j < out.cols(); ++j)
    for (Index i = 0; i < out.rows(); ++i) out(i, j) = x(2 * i, 2 * j);
  return out;
}

struct ViffTerms {
  ArrayXXd vid, vind, gain;
};

ViffTerms viff_terms(const MatrixXd& ref, const MatrixXd& dist, const Eigen::VectorXd& win) {
  const ArrayXXd mu1 = detail::filter_valid<double>(ref, win).array();
  const ArrayXXd mu2 = detail::filter_valid<double>(dist, win).array();
  ArrayXXd s1 = (detail::filter_valid<double>(ref.cwiseProduct(ref), win).array() - mu1.square()).max(0.0);
  ArrayXXd s2 = (detail::filter_valid<double>(dist.cwiseProduct(dist), win).array() - mu2.square()).max(0.0);
  const ArrayXXd s12 = detail::filter_valid<double>(ref.cwiseProduct(dist), win).array() - mu1 * mu2;
  ArrayXXd g = s12 / (s1 + kViffFloor);
  ArrayXXd sv = s2 - g * s12;
  for (Index i = 0; i < g.size(); ++i) {
    double& gi = g.data()[i];
    double& svi = sv.data()[i];
    double& s1i = s1.data()[i];
    const double s2i = s2.data()[i];
    if (s1i < kViffFloor) {
      gi = 0.0;
      svi = s2i;
      s1i = 0.0;
    }
    if (s2i < kViffFloor) {
      gi = 0.0;
      svi = 0.0;
    }
    if (gi < 0.0) {
      svi = s2i;
      gi = 0.0;
    }
    svi = std::max(svi, kViffFloor);
  }
  ViffTerms t;
  t.vid = (1.0 + g.square() * s1 / (sv + kViffNoise)).log();
  t.vind = (1.0 + s1 / kViffNoise).log();
  t.gain = std::move(g);
  return t;
}

double viff_levels(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b) {
  MatrixXd ra = a, rb = b, d = f;
  double score = 0.0, wsum = 0.0;
  for (int scale = 1; scale <= 4; ++scale) {
    const Eigen::VectorXd win = viff_window(scale);
    const Index n = win.size();
    if (scale > 1) {
      if (ra.rows() < n || ra.cols() < n) break;
      ra = subsample2(detail::filter_valid<double>(ra, win));
      rb = subsample2(detail::filter_valid<double>(rb, win));
      d = subsample2(detail::filter_valid<double>(d, win));
    }
    if (ra.rows() < n || ra.cols() < n) break;
    const ViffTerms ta = viff_terms(ra, d, win), tb = viff_terms(rb, d, win);
    double vid = 0.0, vind = 0.0;
    for (Index i = 0; i < ta.gain.size(); ++i) {
      const double ga = ta.gain.data()[i], gb = tb.gain.data()[i];
      double num, den;
      if (ga > gb) {
        num = ta.vid.data()[i];
        den = ta.vind.data()[i];
      } else if (gb > ga) {
        num = tb.vid.data()[i];
        den = tb.vind.data()[i];
      } else {
        num = 0.5 * (ta.vid.data()[i] + tb.vid.data()[i]);
        den = 0.5 * (ta.vind.data()[i] + tb.vind.data()[i]);
      }
      vid += num + kViffC;
      vind += den + kViffC;
    }
    score += kViffWeights[scale - 1] * (vid / vind);
    wsum += kViffWeights[scale - 1];
  }
  if (wsum == 0.0) throw DimensionError("viff: image smaller than the 17x17 finest window");
  return score / wsum;
}

}  // namespace

// ---- public API -------------------------------------------------------------

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names = {"en", "sd", "sf", "q_abf", "mi", "q_c", "q_y", "scd", "viff"};
  return names;
}

double& metric_value(MetricReport& r, std::size_t index) {
  switch (index) {
    case 0: return r.en;
    case 1: return r.sd;
    case 2: return r.sf;
    case 3: return r.q_abf;
    case 4: return r.mi;
    case 5: return r.q_c;
    case 6: return r.q_y;
    case 7: return r.scd;
    case 8: return r.viff;
  }
  throw std::out_of_range("metric_value: index " + std::to_string(index));
}

double metric_value(const MetricReport& r, std::size_t index) {
  return metric_value(const_cast<MetricReport&>(r), index);
}

MatrixXd quantize_levels(const MatrixXd& image) {
  return (image.array().max(0.0).min(1.0) * 255.0).round().matrix();
}

double entropy(const MatrixXd& f) {
  check_image(f, "entropy");
  return entropy_levels(quantize_levels(f));
}

double std_dev(const MatrixXd& f) {
  check_image(f, "std_dev");
  return std_dev_levels(quantize_levels(f));
}

double spatial_frequency(const MatrixXd& f) {
  check_image(f, "spatial_frequency");
  return spatial_frequency_levels(quantize_levels(f));
}

double q_abf(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b) {
  check_triple(f, a, b, "q_abf");
  return q_abf_levels(quantize_levels(f), quantize_levels(a), quantize_levels(b));
}

double mutual_information_metric(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b) {
  check_triple(f, a, b, "mutual_information");
  return mutual_information_levels(quantize_levels(f), quantize_levels(a), quantize_levels(b));
}

double q_c(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b) {
  check_triple(f, a, b, "q_c");
  return q_c_levels(quantize_levels(f), quantize_levels(a), quantize_levels(b));
}

double q_y(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b) {
  check_triple(f, a, b, "q_y");
  return q_y_levels(quantize_levels(f), quantize_levels(a), quantize_levels(b));
}

double scd(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b) {
  check_triple(f, a, b, "scd");
  return scd_levels(quantize_levels(f), quantize_levels(a), quantize_levels(b));
}

double viff(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b) {
  check_triple(f, a, b, "viff");
  return viff_levels(quantize_levels(f), quantize_levels(a), quantize_levels(b));
}

double pearson(const MatrixXd& x, const MatrixXd& y) {
  const ArrayXXd dx = x.array() - x.mean(), dy = y.array() - y.mean();
  const double sxx = dx.square().sum(), syy = dy.square().sum();
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return (dx * dy).sum() / std::sqrt(sxx * syy);
}

MetricReport evaluate_all(const MatrixXd& f, const MatrixXd& a, const MatrixXd& b, double elapsed_seconds,
                          int threads) {
  check_triple(f, a, b, "evaluate_all");
  if (elapsed_seconds < 0 || !std::isfinite(elapsed_seconds))
    throw ValidationError("evaluate_all: runtime must be finite and nonnegative");
  const MatrixXd lf = quantize_levels(f), la = quantize_levels(a), lb = quantize_levels(b);

  MetricReport r;
  r.runtime_seconds = elapsed_seconds;
  const std::vector<std::pair<double*, std::function<double()>>> jobs = {
      {&r.en, [&] { return entropy_levels(lf); }},
      {&r.sd, [&] { return std_dev_levels(lf); }},
      {&r.sf, [&] { return spatial_frequency_levels(lf); }},
      {&r.q_abf, [&] { return q_abf_levels(lf, la, lb); }},
      {&r.mi, [&] { return mutual_information_levels(lf, la, lb); }},
      {&r.q_c, [&] { return q_c_levels(lf, la, lb); }},
      {&r.q_y, [&] { return q_y_levels(lf, la, lb); }},
      {&r.scd, [&] { return scd_levels(lf, la, lb); }},
      {&r.viff, [&] { return viff_levels(lf, la, lb); }},
  };
  if (threads <= 1) {
    for (const auto& [slot, job] : jobs) *slot = job();
    return r;
  }
  std::size_t next = 0;
  while (next < jobs.size()) {
    std::vector<std::future<double>> running;
    const std::size_t first = next;
    for (; next < jobs.size() && running.size() < static_cast<std::size_t>(threads); ++next)
      running.push_back(std::async(std::launch::async, jobs[next].second));
    for (std::size_t k = 0; k < running.size(); ++k) *jobs[first + k].first = running[k].get();
  }
  return r;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_metric_csv(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << "pair_id";
  for (const auto& n : metric_names()) out << ',' << n;
  out << ",runtime_s\n";
  for (const auto& row : rows) {
    out << row.pair_id;
    for (std::size_t i = 0; i < metric_names().size(); ++i) out << ',' << format_number(metric_value(row.report, i));
    out << ',' << format_number(row.report.runtime_seconds) << '\n';
  }
}

void write_metric_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_metric_csv(out, rows);
  if (!out) throw IoError("write failed for " + path);
}

std::vector<MetricRow> read_metric_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("metric csv: missing header");
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 11) throw IoError("metric csv: expected 11 columns, got " + std::to_string(cells.size()));
    MetricRow row;
    row.pair_id = cells[0];
    double* slots[] = {&row.report.en, &row.report.sd, &row.report.sf, &row.report.q_abf, &row.report.mi,
                       &row.report.q_c, &row.report.q_y, &row.report.scd, &row.report.viff,
                       &row.report.runtime_seconds};
    for (int i = 0; i < 10; ++i) *slots[i] = std::stod(cells[i + 1]);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace wpfuse
