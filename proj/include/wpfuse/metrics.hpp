#pragma once

// Fusion quality metrics. Every metric first quantizes its inputs to 8-bit
// levels, round(255 * clip(x, 0, 1)), and works on those levels.

#include <Eigen/Dense>

#include <iosfwd>
#include <string>
#include <vector>

#include "wpfuse/tensor.hpp"

namespace wpfuse {

struct MetricReport {
  double en = 0.0;
  double sd = 0.0;
  double sf = 0.0;
  double q_abf = 0.0;
  double mi = 0.0;
  double q_c = 0.0;
  double q_y = 0.0;
  double scd = 0.0;
  double viff = 0.0;
  double runtime_seconds = 0.0;
};

/// Metric names in report/CSV order.
const std::vector<std::string>& metric_names();
/// Metric value by position in metric_names().
double metric_value(const MetricReport& r, std::size_t index);
double& metric_value(MetricReport& r, std::size_t index);

/// round(255 * clip(x, 0, 1)) as doubles.
Eigen::MatrixXd quantize_levels(const Eigen::MatrixXd& image);

double entropy(const Eigen::MatrixXd& f);
double std_dev(const Eigen::MatrixXd& f);
double spatial_frequency(const Eigen::MatrixXd& f);

/// Edge-transfer measure with Sobel strength/orientation and sigmoid
/// preservation models.
double q_abf(const Eigen::MatrixXd& f, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// MI(A,F) + MI(B,F) in bits from 256-bin joint histograms.
double mutual_information_metric(const Eigen::MatrixXd& f, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Windowed SSIM weighted by relative source-fused covariance.
double q_c(const Eigen::MatrixXd& f, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Windowed SSIM blended by source variance where the sources agree,
/// best-of-two where they do not.
double q_y(const Eigen::MatrixXd& f, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// r(F - B, A) + r(F - A, B).
double scd(const Eigen::MatrixXd& f, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Multi-scale visual information fidelity for fusion.
double viff(const Eigen::MatrixXd& f, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Pearson correlation; 0 when either operand has zero variance.
double pearson(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

/// All nine metrics. With threads > 1 the metrics are computed concurrently;
/// the result is identical to the serial evaluation.
MetricReport evaluate_all(const Eigen::MatrixXd& f, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                          double elapsed_seconds, int threads = 1);

struct MetricRow {
  std::string pair_id;
  MetricReport report;
};

/// Header: pair_id,en,sd,sf,q_abf,mi,q_c,q_y,scd,viff,runtime_s ; 9 significant digits.
void write_metric_csv(std::ostream& out, const std::vector<MetricRow>& rows);
void write_metric_csv(const std::string& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metric_csv(std::istream& in);

/// %.9g formatting shared by all CSV writers.
std::string format_number(double v);

}  // namespace wpfuse
