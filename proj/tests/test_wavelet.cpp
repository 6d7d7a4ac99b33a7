#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "wpfuse/wavelet.hpp"

using namespace wpfuse;
using test::max_abs_diff;

namespace {

// Separable two-tap analysis: filter along rows with hy, along columns with
// hx, keep even phases.
Eigen::MatrixXd filter_bank(const Eigen::MatrixXd& x, const double hy[2], const double hx[2]) {
  Eigen::MatrixXd out(x.rows() / 2, x.cols() / 2);
  for (Index i = 0; i < out.rows(); ++i)
    for (Index j = 0; j < out.cols(); ++j) {
      double s = 0.0;
      for (int p = 0; p < 2; ++p)
        for (int q = 0; q < 2; ++q) s += hy[p] * hx[q] * x(2 * i + p, 2 * j + q);
      out(i, j) = s;
    }
  return out;
}

const double kLow[2] = {M_SQRT1_2, M_SQRT1_2};
const double kHigh[2] = {M_SQRT1_2, -M_SQRT1_2};

FeatureMap<double> single(const Eigen::MatrixXd& img) {
  FeatureMap<double> x(1, img.rows(), img.cols(), 1);
  x.channel(0) = img;
  return x;
}

Eigen::MatrixXd checkerboard(Index n) {
  Eigen::MatrixXd x(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) x(i, j) = double((i + j) % 2);
  return x;
}

}  // namespace

TEST_CASE("dwt2 of a constant 2x2 block puts everything in LL") {
  const auto s = dwt2(single(Eigen::MatrixXd::Constant(2, 2, 0.3)));
  CHECK(s.ll.data(0, 0) == doctest::Approx(0.6));
  CHECK(s.lh.data(0, 0) == doctest::Approx(0.0));
  CHECK(s.hl.data(0, 0) == doctest::Approx(0.0));
  CHECK(s.hh.data(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("dwt2 of the 4x4 ramp matches the filter-bank oracle and frozen values") {
  Eigen::MatrixXd ramp(4, 4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) ramp(i, j) = (i + j) / 6.0;
  const auto s = dwt2(single(ramp));
  CHECK(max_abs_diff(Eigen::MatrixXd(s.ll.channel(0)), filter_bank(ramp, kLow, kLow)) < 1e-12);
  CHECK(max_abs_diff(Eigen::MatrixXd(s.lh.channel(0)), filter_bank(ramp, kHigh, kLow)) < 1e-12);
  CHECK(max_abs_diff(Eigen::MatrixXd(s.hl.channel(0)), filter_bank(ramp, kLow, kHigh)) < 1e-12);
  CHECK(max_abs_diff(Eigen::MatrixXd(s.hh.channel(0)), filter_bank(ramp, kHigh, kHigh)) < 1e-12);

  // tests/oracles/freeze.py "haar ramp"
  Eigen::MatrixXd ll(2, 2);
  ll << 1.0 / 3.0, 1.0, 1.0, 5.0 / 3.0;
  CHECK(max_abs_diff(Eigen::MatrixXd(s.ll.channel(0)), ll) < 1e-12);
  CHECK(max_abs_diff(Eigen::MatrixXd(s.lh.channel(0)), Eigen::MatrixXd::Constant(2, 2, -1.0 / 6.0)) < 1e-12);
  CHECK(max_abs_diff(Eigen::MatrixXd(s.hl.channel(0)), Eigen::MatrixXd::Constant(2, 2, -1.0 / 6.0)) < 1e-12);
  CHECK(s.hh.data.cwiseAbs().maxCoeff() < 1e-12);

  CHECK(max_abs_diff(Eigen::MatrixXd(idwt2(s).channel(0)), ramp) < 1e-6);
}

TEST_CASE("perfect reconstruction, additivity and energy on random maps") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const Index h = 2 * (1 + Index(rng.below(32))), w = 2 * (1 + Index(rng.below(32))), c = 1 + Index(rng.below(8));
    const auto x = test::random_map<double>(2, h, w, c, rng);
    const auto s = dwt2(x);
    CHECK(s.ll.height == h / 2);
    CHECK(s.ll.width == w / 2);
    CHECK(s.ll.batch == 2);
    CHECK(max_abs_diff(idwt2(s).data, x.data) < 1e-6);
    const auto lo = lowpass_component(s), hi = highpass_component(s);
    CHECK(max_abs_diff(Eigen::MatrixXd(lo.data + hi.data), idwt2(s).data) < 1e-6);
    CHECK(std::abs(lo.data.squaredNorm() + hi.data.squaredNorm() - x.data.squaredNorm()) < 1e-5);
    CHECK(max_abs_diff(lowpass_projection(x).data, lo.data) < 1e-12);
  }
}

TEST_CASE("linearity and channel independence") {
  Rng rng(11);
  const auto x = test::random_map<double>(1, 8, 6, 3, rng), y = test::random_map<double>(1, 8, 6, 3, rng);
  FeatureMap<double> z = x;
  z.data = 2.0 * x.data - 0.5 * y.data;
  const auto sx = dwt2(x), sy = dwt2(y), sz = dwt2(z);
  CHECK(max_abs_diff(sz.hl.data, Eigen::MatrixXd(2.0 * sx.hl.data - 0.5 * sy.hl.data)) < 1e-12);
  CHECK(max_abs_diff(sz.ll.data, Eigen::MatrixXd(2.0 * sx.ll.data - 0.5 * sy.ll.data)) < 1e-12);
  for (Index c = 0; c < 3; ++c) {
    FeatureMap<double> one(1, 8, 6, 1);
    one.channel(0) = x.channel(c);
    CHECK(max_abs_diff(dwt2(one).hh.data.col(0), sx.hh.data.col(c)) == 0.0);
  }
}

TEST_CASE("checkerboard splits into a flat half and the residual") {
  const Eigen::MatrixXd cb = checkerboard(4);
  const auto s = dwt2(single(cb));
  CHECK(max_abs_diff(Eigen::MatrixXd(lowpass_component(s).channel(0)), Eigen::MatrixXd::Constant(4, 4, 0.5)) < 1e-12);
  CHECK(max_abs_diff(Eigen::MatrixXd(highpass_component(s).channel(0)), Eigen::MatrixXd(cb.array() - 0.5)) < 1e-12);
}

TEST_CASE("constant maps have no detail") {
  const auto s = dwt2(single(Eigen::MatrixXd::Constant(6, 4, 0.7)));
  CHECK(max_abs_diff(Eigen::MatrixXd(lowpass_component(s).channel(0)), Eigen::MatrixXd::Constant(6, 4, 0.7)) < 1e-12);
  CHECK(highpass_component(s).data.cwiseAbs().maxCoeff() < 1e-12);
  SubbandSet<double> zero = s;
  for (auto* b : {&zero.ll, &zero.lh, &zero.hl, &zero.hh}) b->data.setZero();
  CHECK(idwt2(zero).data.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("invalid inputs are rejected") {
  CHECK_THROWS_AS(dwt2(single(Eigen::MatrixXd::Zero(3, 4))), DimensionError);
  CHECK_THROWS_AS(dwt2(single(Eigen::MatrixXd::Zero(4, 1))), DimensionError);
  Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(4, 4);
  bad(1, 2) = std::nan("");
  CHECK_THROWS_AS(dwt2(single(bad)), ValidationError);

  auto s = dwt2(single(Eigen::MatrixXd::Zero(4, 4)));
  s.hh = FeatureMap<double>(1, 1, 2, 1);
  CHECK_THROWS_AS(idwt2(s), DimensionError);
  CHECK_THROWS_AS(lowpass_component(s), DimensionError);
}

TEST_CASE("pad_to_even mirrors the last row and column; crop undoes it") {
  Rng rng(3);
  const auto x = test::random_map<double>(1, 5, 7, 2, rng);
  const auto p = pad_to_even(x);
  CHECK(p.height == 6);
  CHECK(p.width == 8);
  CHECK(p.at(0, 5, 3, 1) == x.at(0, 4, 3, 1));
  CHECK(p.at(0, 2, 7, 0) == x.at(0, 2, 6, 0));
  CHECK(p.at(0, 5, 7, 0) == x.at(0, 4, 6, 0));
  CHECK(max_abs_diff(crop(idwt2(dwt2(p)), 5, 7).data, x.data) < 1e-6);
}
