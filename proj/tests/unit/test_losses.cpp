#include "ctxseg/losses.hpp"

#include <doctest.h>

#include <cmath>

using namespace ctxseg;

namespace {

MatrixX<double> row2(double a, double b) {
  MatrixX<double> m(1, 2);
  m << a, b;
  return m;
}

}  // namespace

TEST_CASE("dice: perfect prediction on an all-ones channel is ~0") {
  MatrixX<double> ones = MatrixX<double>::Ones(1, 8);
  double d = dice_loss(ones, ones, {1});
  CHECK(std::abs(d) < 1e-4);
}

TEST_CASE("dice: all-wrong prediction on an 8-voxel channel") {
  MatrixX<double> p = MatrixX<double>::Ones(1, 8);
  MatrixX<double> y = MatrixX<double>::Zero(1, 8);
  double d = dice_loss(p, y, {1});
  double expected = 1.0 - kDiceEps / (8.0 + kDiceEps);
  CHECK(d == doctest::Approx(expected).epsilon(1e-12));
  CHECK(d == doctest::Approx(0.999999).epsilon(1e-6));
}

TEST_CASE("dice: hand-evaluated 2-voxel case = 0.5") {
  double d = dice_loss(row2(0.5, 0.5), row2(1.0, 0.0), {1});
  double expected = 1.0 - (2 * 0.5 + kDiceEps) / (1.0 + 1.0 + kDiceEps);
  CHECK(d == doctest::Approx(expected).epsilon(1e-12));
  CHECK(d == doctest::Approx(0.5).epsilon(1e-4));
}

TEST_CASE("bce: p = 0.5 everywhere gives ln 2") {
  MatrixX<double> p = MatrixX<double>::Constant(2, 5, 0.5);
  MatrixX<double> y = MatrixX<double>::Zero(2, 5);
  y(0, 0) = 1.0;
  CHECK(bce_loss(p, y, {1, 1}) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("bce: single voxel p=0.01 vs target 0") {
  MatrixX<double> p(1, 1), y(1, 1);
  p << 0.01;
  y << 0.0;
  CHECK(bce_loss(p, y, {1}) == doctest::Approx(-std::log(0.99)).epsilon(1e-9));
  CHECK(bce_loss(p, y, {1}) == doctest::Approx(0.01005).epsilon(1e-3));
}

TEST_CASE("bce: voxel permutation leaves the mean unchanged") {
  MatrixX<double> p(1, 4), y(1, 4);
  p << 0.2, 0.7, 0.9, 0.4;
  y << 0, 1, 1, 0;
  MatrixX<double> pp(1, 4), yp(1, 4);
  pp << 0.9, 0.2, 0.4, 0.7;
  yp << 1, 0, 0, 1;
  CHECK(bce_loss(p, y, {1}) == doctest::Approx(bce_loss(pp, yp, {1})).epsilon(1e-15));
}

TEST_CASE("total: lambda 0 reduces exactly to bce; composition is exact") {
  MatrixX<double> p = row2(0.5, 0.5);
  MatrixX<double> y = row2(1.0, 0.0);
  CHECK(total_loss(p, y, {1}, 0.0) == bce_loss(p, y, {1}));
  double total = total_loss(p, y, {1}, 1.0);
  CHECK(std::abs(total - (bce_loss(p, y, {1}) + dice_loss(p, y, {1}))) < 1e-12);
  // hand value: bce = -(ln 0.5 + ln 0.5)/2 = ln 2; dice ~ 0.5
  CHECK(total == doctest::Approx(std::log(2.0) + 0.5).epsilon(1e-4));
}

TEST_CASE("unannotated channels contribute nothing") {
  MatrixX<double> p(2, 3), y(2, 3);
  p << 0.3, 0.6, 0.9, 0.1, 0.2, 0.3;
  y << 0, 1, 1, 1, 0, 1;
  double with = total_loss(p, y, {1, 0}, 1.0);
  // zeroing the unannotated channel's prediction must not move the loss
  MatrixX<double> pz = p;
  pz.row(1).setZero();
  pz.row(1).array() += 0.5;
  double zeroed = total_loss(pz, y, {1, 0}, 1.0);
  CHECK(with == zeroed);

  CHECK_THROWS_AS(total_loss(p, y, {0, 0}, 1.0), Error);
}

TEST_CASE("loss gradient matches finite differences on logits") {
  MatrixX<double> z(2, 4);
  z << 0.3, -1.2, 0.8, 0.1, -0.4, 0.9, -2.0, 1.5;
  MatrixX<double> y(2, 4);
  y << 1, 0, 1, 0, 0, 1, 0, 1;
  std::vector<uint8_t> annotated{1, 1};
  const double lambda = 1.0;

  auto probs_of = [](const MatrixX<double>& zz) {
    return MatrixX<double>(zz.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); }));
  };
  MatrixX<double> g = total_loss_grad_logits(probs_of(z), y, annotated, lambda);

  const double h = 1e-6;
  for (Index c = 0; c < z.rows(); ++c)
    for (Index i = 0; i < z.cols(); ++i) {
      MatrixX<double> zp = z, zm = z;
      zp(c, i) += h;
      zm(c, i) -= h;
      double fd = (total_loss(probs_of(zp), y, annotated, lambda) -
                   total_loss(probs_of(zm), y, annotated, lambda)) /
                  (2 * h);
      CHECK(g(c, i) == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("gradient of unannotated channels is exactly zero") {
  MatrixX<double> p = MatrixX<double>::Constant(2, 3, 0.4);
  MatrixX<double> y = MatrixX<double>::Zero(2, 3);
  auto g = total_loss_grad_logits(p, y, {0, 1}, 1.0);
  CHECK(g.row(0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.row(1).cwiseAbs().maxCoeff() > 0.0);
}
