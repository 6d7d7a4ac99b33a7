#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "wpfuse/wdepp.hpp"

using namespace wpfuse;
using test::max_abs_diff;
using FM = FeatureMap<double>;

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

template <typename F>
void for_each_param(WdeppParams<double>& p, F&& f) {
  for (auto* m : {&p.sqex.squeeze.weight, &p.sqex.excite.weight, &p.projection.weight}) f(*m);
}

void randomize(WdeppParams<double>& p, Rng& rng) {
  auto fill = [&](auto& m) {
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-0.8, 0.8);
  };
  fill(p.sqex.squeeze.weight);
  fill(p.sqex.squeeze.bias);
  fill(p.sqex.excite.weight);
  fill(p.sqex.excite.bias);
  fill(p.projection.weight);
  fill(p.projection.bias);
}

}  // namespace

TEST_CASE("build_feature_set on constant, random and checkerboard maps") {
  FM c(1, 4, 6, 2);
  c.data.setConstant(0.4);
  const FM fc = build_feature_set(c);
  CHECK(fc.channels() == 4);
  CHECK(max_abs_diff(fc.data.leftCols(2), Eigen::MatrixXd::Constant(24, 2, 0.4)) < 1e-12);
  CHECK(fc.data.rightCols(2).cwiseAbs().maxCoeff() < 1e-12);

  Rng rng(1);
  const FM x = test::random_map<double>(2, 6, 8, 3, rng);
  const FM f = build_feature_set(x);
  CHECK(max_abs_diff(Eigen::MatrixXd(f.data.leftCols(3) + f.data.rightCols(3)), x.data) < 1e-6);
  const auto s = dwt2(x);
  CHECK(max_abs_diff(f.data.leftCols(3), lowpass_component(s).data) < 1e-12);
  CHECK(max_abs_diff(f.data.rightCols(3), highpass_component(s).data) < 1e-12);

  FM cb(1, 8, 8, 1);
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j) cb.at(0, i, j, 0) = double((i + j) % 2);
  const FM fcb = build_feature_set(cb);
  CHECK(max_abs_diff(fcb.data.col(0), Eigen::VectorXd::Constant(64, 0.5)) < 1e-12);
  CHECK(max_abs_diff(fcb.data.col(1), Eigen::VectorXd(cb.data.col(0).array() - 0.5)) < 1e-12);

  CHECK_THROWS_AS(build_feature_set(FM(1, 5, 4, 1)), DimensionError);
}

TEST_CASE("channel attention") {
  Rng rng(2);
  auto p = SqExParams<double>::init(6, rng);
  CHECK(p.squeeze.out_channels() == 4);
  const FM f = test::random_map<double>(3, 4, 4, 6, rng);
  const Eigen::MatrixXd w = channel_attention(f, p);
  CHECK(w.rows() == 3);
  CHECK(w.cols() == 6);
  CHECK(w.minCoeff() > 0.0);
  CHECK(w.maxCoeff() < 1.0);

  p.excite.weight.setZero();
  p.excite.bias.setZero();
  CHECK(max_abs_diff(channel_attention(f, p), Eigen::MatrixXd::Constant(3, 6, 0.5)) == 0.0);
  CHECK_THROWS_AS(channel_attention(test::random_map<double>(1, 4, 4, 5, rng), p), DimensionError);
}

TEST_CASE("channel attention on a hand-set 2-channel instance") {
  FM f(1, 2, 2, 2);
  f.channel(0) << 0.1, 0.3, 0.5, 0.7;  // mean 0.4
  f.channel(1) << 1.0, -1.0, 2.0, 0.0;  // mean 0.5
  auto p = SqExParams<double>::zeros(2);
  const Index hid = p.squeeze.out_channels();
  REQUIRE(hid == 4);
  for (Index k = 0; k < hid; ++k) {
    p.squeeze.weight(0, k) = 0.5 * double(k) - 0.6;
    p.squeeze.weight(1, k) = 1.0 - 0.3 * double(k);
    p.squeeze.bias(k) = 0.05 * double(k);
    p.excite.weight(k, 0) = 0.2 * double(k + 1);
    p.excite.weight(k, 1) = -0.4 + 0.1 * double(k);
  }
  p.excite.bias << 0.1, -0.2;

  const double m0 = 0.4, m1 = 0.5;
  double logit[2] = {0.1, -0.2};
  for (Index k = 0; k < hid; ++k) {
    const double h = std::max(0.0, m0 * (0.5 * double(k) - 0.6) + m1 * (1.0 - 0.3 * double(k)) + 0.05 * double(k));
    logit[0] += h * 0.2 * double(k + 1);
    logit[1] += h * (-0.4 + 0.1 * double(k));
  }
  const Eigen::MatrixXd w = channel_attention(f, p);
  CHECK(w(0, 0) == doctest::Approx(sigmoid(logit[0])).epsilon(1e-12));
  CHECK(w(0, 1) == doctest::Approx(sigmoid(logit[1])).epsilon(1e-12));
}

TEST_CASE("wdepp_pool shapes, range and zero propagation") {
  Rng rng(3);
  for (auto [h, w, c] : {std::tuple<Index, Index, Index>{4, 4, 1}, {64, 64, 32}, {6, 10, 8}}) {
    const auto p = WdeppParams<double>::init(c, rng);
    const FM y = wdepp_pool(test::random_map<double>(1, h, w, c, rng), p);
    CHECK(y.height == h / 2);
    CHECK(y.width == w / 2);
    CHECK(y.channels() == c);
    CHECK(y.data.minCoeff() >= 0.0);
  }
  const auto p = WdeppParams<double>::init(4, rng);
  CHECK(wdepp_pool(FM(2, 8, 8, 4), p).data.cwiseAbs().maxCoeff() == 0.0);

  auto bad = p;
  bad.projection.weight(0, 0) = std::nan("");
  CHECK_THROWS_AS(wdepp_pool(FM(1, 8, 8, 4), bad), ValidationError);
  CHECK_THROWS_AS(wdepp_pool(FM(1, 8, 8, 3), p), DimensionError);
  CHECK_THROWS_AS(wdepp_pool(FM(1, 7, 8, 4), p), DimensionError);
}

TEST_CASE("wdepp_pool matches a stage-by-stage oracle on a 4x4 instance") {
  const auto inst = test::fixed_wdepp_instance();
  const FM y = wdepp_pool(inst.x, inst.params);
  CHECK(max_abs_diff(Eigen::MatrixXd(y.channel(0)), inst.expected) < 1e-6);
}

TEST_CASE("wdepp reduces to maxpool(relu(x)) with unit attention and a summing projection") {
  Rng rng(4);
  const FM x = test::random_map<double>(2, 8, 6, 1, rng);
  auto p = WdeppParams<double>::zeros(1);
  p.sqex.excite.bias.setConstant(40.0);
  p.projection.weight << 1.0, 1.0;
  MaxPoolCache<double> cache;
  const FM expected = maxpool2_forward(relu_forward(x), cache);
  CHECK(max_abs_diff(wdepp_pool(x, p).data, expected.data) < 1e-6);
}

TEST_CASE("wdepp backward matches central differences") {
  Rng rng(5);
  FM x = test::random_map<double>(2, 6, 4, 3, rng);
  auto p = WdeppParams<double>::init(3, rng);
  randomize(p, rng);
  WdeppCache<double> cache;
  const FM y = wdepp_forward(x, p, cache);
  const FM r = test::random_map<double>(2, 3, 2, 3, rng);
  auto g = WdeppParams<double>::zeros(3);
  const FM dx = wdepp_backward(p, cache, r, g);

  auto objective = [&](std::uint64_t* sig) {
    WdeppCache<double> c;
    const double v = wdepp_forward(x, p, c).data.cwiseProduct(r.data).sum();
    if (sig) {
      std::uint64_t s = 1469598103934665603ull;
      for (Index i = 0; i < c.projected.data.size(); ++i) s = (s ^ (c.projected.data.data()[i] > 0)) * 1099511628211ull;
      for (Index i = 0; i < c.pool.argmax.size(); ++i) s = (s ^ c.pool.argmax.data()[i]) * 1099511628211ull;
      for (Index i = 0; i < c.attention.hidden.size(); ++i) s = (s ^ (c.attention.hidden.data()[i] > 0)) * 1099511628211ull;
      *sig = s;
    }
    return v;
  };
  const double h = 1e-4;
  int checked = 0, skipped = 0;
  double worst = 0.0;
  auto probe = [&](double& v, double analytic) {
    const double keep = v;
    std::uint64_t s_up, s_down;
    v = keep + h;
    const double up = objective(&s_up);
    v = keep - h;
    const double down = objective(&s_down);
    v = keep;
    if (s_up != s_down) {
      ++skipped;
      return;
    }
    ++checked;
    worst = std::max(worst, test::rel_error(analytic, (up - down) / (2 * h)));
  };
  for (Index i = 0; i < x.data.size(); ++i) probe(x.data.data()[i], dx.data.data()[i]);
  for (Index i = 0; i < p.sqex.squeeze.weight.size(); ++i)
    probe(p.sqex.squeeze.weight.data()[i], g.sqex.squeeze.weight.data()[i]);
  for (Index i = 0; i < p.sqex.squeeze.bias.size(); ++i)
    probe(p.sqex.squeeze.bias.data()[i], g.sqex.squeeze.bias.data()[i]);
  for (Index i = 0; i < p.sqex.excite.weight.size(); ++i)
    probe(p.sqex.excite.weight.data()[i], g.sqex.excite.weight.data()[i]);
  for (Index i = 0; i < p.sqex.excite.bias.size(); ++i)
    probe(p.sqex.excite.bias.data()[i], g.sqex.excite.bias.data()[i]);
  for (Index i = 0; i < p.projection.weight.size(); ++i)
    probe(p.projection.weight.data()[i], g.projection.weight.data()[i]);
  for (Index i = 0; i < p.projection.bias.size(); ++i)
    probe(p.projection.bias.data()[i], g.projection.bias.data()[i]);
  CHECK(y.data.minCoeff() >= 0.0);
  CHECK(checked > 100);
  CHECK(skipped < checked / 10);
  CHECK(worst < 1e-3);
}
