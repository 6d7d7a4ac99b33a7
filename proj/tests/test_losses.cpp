#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "wpfuse/losses.hpp"

using namespace wpfuse;
using test::max_abs_diff;
using Img = Eigen::MatrixXd;

namespace {

Img checkerboard(Index h, Index w) {
  Img x(h, w);
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j) x(i, j) = double((i + j) % 2);
  return x;
}

// Central-difference check of an image gradient at `count` sampled pixels.
// Errors are relative, with a floor of 1e-4 of the largest gradient entry so
// that near-zero border entries do not report roundoff as error.
template <typename Fn>
double worst_image_fd(Img f, const Img& analytic, Fn&& fn, int count, std::uint64_t seed) {
  Rng rng(seed);
  const double h = 1e-4;
  const double floor = 1e-4 * analytic.cwiseAbs().maxCoeff();
  double worst = 0.0;
  for (int k = 0; k < count; ++k) {
    const Index i = Index(rng.below(std::uint64_t(f.size())));
    const double keep = f.data()[i];
    f.data()[i] = keep + h;
    const double up = fn(f);
    f.data()[i] = keep - h;
    const double down = fn(f);
    f.data()[i] = keep;
    const double numeric = (up - down) / (2 * h), exact = analytic.data()[i];
    worst = std::max(worst, std::abs(exact - numeric) / std::max({std::abs(exact), std::abs(numeric), floor}));
  }
  return worst;
}

}  // namespace

TEST_CASE("intensity loss") {
  Img f = Img::Zero(2, 2), a(2, 2), b(2, 2);
  a << 1, 0, 0, 0;
  b << 0, 0, 0, 0;
  CHECK(intensity_loss<double>(f, a, b) == doctest::Approx(0.25));
  CHECK(intensity_loss<double>(Img::Zero(4, 4), Img::Ones(4, 4), Img::Zero(4, 4)) == doctest::Approx(1.0));
  CHECK(intensity_loss<double>(a.cwiseMax(b), a, b) == 0.0);
  CHECK_THROWS_AS(intensity_loss<double>(Img::Zero(2, 2), Img::Zero(2, 3), Img::Zero(2, 2)), DimensionError);
}

TEST_CASE("gradient loss") {
  Img ramp(8, 8);
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j) ramp(i, j) = double(j) / 7.0;
  CHECK(gradient_loss<double>(ramp, Img::Zero(8, 8)) == doctest::Approx(1.0612244897959182).epsilon(1e-12));
  CHECK(gradient_loss<double>(ramp, ramp) == 0.0);
  CHECK(gradient_loss<double>(ramp.array() + 0.3, ramp) < 1e-20);
  CHECK(gradient_loss<double>(ramp.transpose(), Img::Zero(8, 8)) ==
        doctest::Approx(1.0612244897959182).epsilon(1e-12));
}

TEST_CASE("sobel_adjoint is the adjoint of sobel") {
  Rng rng(1);
  const Img x = test::random_image(7, 9, rng, -1, 1);
  const Img u = test::random_image(7, 9, rng, -1, 1), v = test::random_image(7, 9, rng, -1, 1);
  const auto [gx, gy] = sobel<double>(x);
  const double lhs = gx.cwiseProduct(u).sum() + gy.cwiseProduct(v).sum();
  const double rhs = x.cwiseProduct(sobel_adjoint<double>(u, v)).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("ms_ssim values") {
  Rng rng(2);
  const Img x = test::random_image(32, 32, rng);
  CHECK(ms_ssim<double>(x, x) == doctest::Approx(1.0).epsilon(1e-12));

  const Img cb = checkerboard(16, 16);
  const double anti = ms_ssim<double>(cb, Img(1.0 - cb.array()));
  CHECK(anti == doctest::Approx(-0.99640646835695712).epsilon(1e-9));
  CHECK(anti < 0.5);

  CHECK(ms_ssim<double>(test::pattern(32, 40, 1), test::pattern(32, 40, 2)) ==
        doctest::Approx(-0.092651228894978718).epsilon(1e-9));
  CHECK(ms_ssim_scale_count(64, 64) == 3);
  CHECK(ms_ssim_scale_count(10, 64) == 0);
  CHECK_THROWS_AS(ms_ssim<double>(Img::Zero(8, 8), Img::Zero(8, 8)), DimensionError);
}

TEST_CASE("ms_ssim is insensitive to a common intensity offset") {
  Rng rng(3);
  const Img x = test::random_image(48, 48, rng);
  const Img y = 0.7 * x + 0.3 * test::random_image(48, 48, rng);
  const double base = ms_ssim<double>(x, y);
  for (double c : {0.1, 0.25, -0.2}) {
    const Img xs = x.array() + c, ys = y.array() + c;
    CHECK(std::abs(ms_ssim<double>(xs, ys) - base) < 1e-3);
  }
}

TEST_CASE("structure loss") {
  Rng rng(4);
  const Img a = test::random_image(32, 32, rng), b = test::random_image(32, 32, rng);
  const Img f = 0.5 * (a + b);
  CHECK(structure_loss<double>(f, a, b) == doctest::Approx(structure_loss<double>(f, b, a)).epsilon(1e-14));
  CHECK(structure_loss<double>(a, a, b) == doctest::Approx(0.5 - 0.5 * ms_ssim<double>(b, a)).epsilon(1e-12));
  CHECK(structure_loss<double>(a, a, a) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("total loss is the sum of its terms") {
  Rng rng(5);
  const Img a = test::random_image(24, 24, rng), b = test::random_image(24, 24, rng), f = test::random_image(24, 24, rng);
  const LossBreakdown l = total_loss<double>(f, a, b);
  CHECK(l.total == doctest::Approx(l.intensity + l.gradient + l.structure).epsilon(1e-15));
  CHECK(l.intensity == doctest::Approx(intensity_loss<double>(f, a, b)));
  CHECK(l.gradient == doctest::Approx(gradient_loss<double>(f, a)));
  CHECK(l.structure == doctest::Approx(structure_loss<double>(f, a, b)));
}

TEST_CASE("loss gradients match central differences") {
  Rng rng(6);
  const Img a = test::random_image(64, 64, rng), b = test::random_image(64, 64, rng);
  const Img f = test::random_image(64, 64, rng);
  CHECK(worst_image_fd(f, intensity_loss_gradient<double>(f, a, b),
                       [&](const Img& g) { return intensity_loss<double>(g, a, b); }, 40, 1) < 1e-6);
  CHECK(worst_image_fd(f, gradient_loss_gradient<double>(f, a),
                       [&](const Img& g) { return gradient_loss<double>(g, a); }, 40, 2) < 1e-6);
  CHECK(worst_image_fd(f, ms_ssim_gradient<double>(a, f),
                       [&](const Img& g) { return ms_ssim<double>(a, g); }, 40, 3) < 1e-5);
  CHECK(worst_image_fd(f, structure_loss_gradient<double>(f, a, b),
                       [&](const Img& g) { return structure_loss<double>(g, a, b); }, 40, 4) < 1e-5);

  // Anticorrelated inputs exercise the negative branch of the signed power.
  const Img cb = checkerboard(32, 32);
  const Img g = Img(1.0 - cb.array()) + 0.05 * test::random_image(32, 32, rng);
  CHECK(ms_ssim<double>(cb, g) < 0.0);
  CHECK(worst_image_fd(g, ms_ssim_gradient<double>(cb, g), [&](const Img& h) { return ms_ssim<double>(cb, h); }, 40,
                       5) < 1e-5);
}

TEST_CASE("batch loss averages per-sample terms") {
  Rng rng(7);
  FeatureMap<double> fused = test::random_map<double>(3, 16, 16, 1, rng, 0, 1);
  FeatureMap<double> src = test::random_map<double>(3, 16, 16, 2, rng, 0, 1);
  FeatureMap<double> grad;
  const LossBreakdown l = batch_loss(fused, src, &grad);
  double total = 0.0;
  for (Index n = 0; n < 3; ++n)
    total += total_loss<double>(fused.channel(0, n), src.channel(0, n), src.channel(1, n)).total / 3.0;
  CHECK(l.total == doctest::Approx(total).epsilon(1e-12));
  const Img g1 = grad.channel(0, 1);
  const Img expected = total_loss_gradient<double>(fused.channel(0, 1), src.channel(0, 1), src.channel(1, 1)) / 3.0;
  CHECK(max_abs_diff(g1, expected) < 1e-15);
  CHECK_THROWS_AS(batch_loss(fused, fused), DimensionError);
}
