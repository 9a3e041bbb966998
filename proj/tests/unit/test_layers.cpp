#include "ctxseg/nn/attention.hpp"
#include "ctxseg/nn/layers.hpp"

#include "helpers.hpp"

#include <doctest.h>

using namespace ctxseg;
using ctxseg_test::fd_check_params;

namespace {

// Scalar probe loss: fixed random weighting of all outputs.
MatrixX<double> probe_like(const MatrixX<double>& y, std::uint64_t seed) {
  MatrixX<double> w(y.rows(), y.cols());
  Rng rng = make_rng(seed);
  fill_gaussian(w, 1.0, rng);
  return w;
}

// FD check of the gradient wrt an input matrix.
template <typename Fn>
double fd_input_max_err(MatrixX<double>& x, const MatrixX<double>& gx, Fn loss, double h) {
  double worst = 0;
  for (Index i = 0; i < x.size(); ++i) {
    double orig = x.data()[i];
    x.data()[i] = orig + h;
    double lp = loss();
    x.data()[i] = orig - h;
    double lm = loss();
    x.data()[i] = orig;
    double fd = (lp - lm) / (2 * h);
    worst = std::max(worst, ctxseg_test::grad_rel_err(fd, gx.data()[i]));
  }
  return worst;
}

}  // namespace

TEST_CASE("linear: forward shape and gradient check") {
  ParamStore<double> store;
  Linear<double> fc(store, "fc", 5, 3);
  Rng rng = make_rng(1);
  fc.init_xavier(rng);
  fc.b->w.setRandom();
  MatrixX<double> x(4, 5);
  fill_gaussian(x, 1.0, rng);
  auto w = probe_like(MatrixX<double>(4, 3), 2);

  auto loss = [&] {
    return (fc.forward(x, nullptr).array() * w.array()).sum();
  };
  typename Linear<double>::Cache c;
  MatrixX<double> y = fc.forward(x, &c);
  CHECK(y.rows() == 4);
  CHECK(y.cols() == 3);
  Grads<double> g(store);
  MatrixX<double> gx = fc.backward(w, c, g);
  auto rep = fd_check_params(store, g, loss, 1e-6);
  CHECK(rep.max_rel_err < 1e-7);
  CHECK(fd_input_max_err(x, gx, loss, 1e-6) < 1e-7);
}

TEST_CASE("layernorm: unit variance rows and gradient check") {
  ParamStore<double> store;
  LayerNorm<double> ln(store, "ln", 6);
  Rng rng = make_rng(3);
  ln.gamma->w.setRandom();
  ln.gamma->w.array() += 1.5;
  ln.beta->w.setRandom();
  MatrixX<double> x(3, 6);
  fill_gaussian(x, 2.0, rng);

  typename LayerNorm<double>::Cache c;
  MatrixX<double> y = ln.forward(x, &c);
  for (Index r = 0; r < y.rows(); ++r) {
    double m = c.xhat.row(r).mean();
    double v = (c.xhat.row(r).array() - m).square().mean();
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
  }

  auto w = probe_like(y, 5);
  auto loss = [&] { return (ln.forward(x, nullptr).array() * w.array()).sum(); };
  Grads<double> g(store);
  MatrixX<double> gx = ln.backward(w, c, g);
  CHECK(fd_check_params(store, g, loss, 1e-6).max_rel_err < 1e-6);
  CHECK(fd_input_max_err(x, gx, loss, 1e-6) < 1e-6);
}

TEST_CASE("activations: values and slopes") {
  CHECK(act_value(Act::relu, -2.0) == 0.0);
  CHECK(act_value(Act::leaky_relu, -2.0) == doctest::Approx(-0.02));
  CHECK(act_value(Act::gelu, 0.0) == 0.0);
  // gelu slope by finite difference
  for (double x : {-1.3, -0.2, 0.0, 0.7, 2.1}) {
    double h = 1e-6;
    double fd = (act_value(Act::gelu, x + h) - act_value(Act::gelu, x - h)) / (2 * h);
    CHECK(act_slope(Act::gelu, x) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("ffn gradient check") {
  ParamStore<double> store;
  Ffn<double> ffn(store, "ffn", 4, 8, Act::gelu);
  Rng rng = make_rng(7);
  ffn.init(rng);
  MatrixX<double> x(3, 4);
  fill_gaussian(x, 1.0, rng);
  auto w = probe_like(MatrixX<double>(3, 4), 8);
  auto loss = [&] { return (ffn.forward(x, nullptr).array() * w.array()).sum(); };
  typename Ffn<double>::Cache c;
  ffn.forward(x, &c);
  Grads<double> g(store);
  MatrixX<double> gx = ffn.backward(w, c, g);
  CHECK(fd_check_params(store, g, loss, 1e-6).max_rel_err < 1e-6);
  CHECK(fd_input_max_err(x, gx, loss, 1e-6) < 1e-6);
}

TEST_CASE("conv3d: 1x1x1 kernel counts 2*3+3 = 9 parameters") {
  ParamStore<double> store;
  Conv3d<double> conv(store, "c", 2, 3, 1, 1, 0);
  CHECK(store.scalar_count() == 9);
}

TEST_CASE("conv3d: same-padding conv on a delta reproduces the kernel") {
  ParamStore<double> store;
  Conv3d<double> conv(store, "c", 1, 1, 3, 1, 1);
  Rng rng = make_rng(11);
  conv.init_he(rng);
  Shape3 dims{5, 5, 5};
  MatrixX<double> x = MatrixX<double>::Zero(1, voxels_of(dims));
  x(0, grid_index(dims, 2, 2, 2)) = 1.0;
  Shape3 od;
  MatrixX<double> y = conv.forward(x, dims, &od, nullptr);
  CHECK(od == dims);
  // value at (2+a-1, 2+b-1, 2+c-1) equals W[(a*3+b)*3+c] mirrored
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 3; ++c) {
        double got = y(0, grid_index(dims, 2 - (a - 1), 2 - (b - 1), 2 - (c - 1)));
        CHECK(got == doctest::Approx(conv.W->w(0, (a * 3 + b) * 3 + c) + conv.b->w(0, 0)));
      }
}

TEST_CASE("conv3d gradient check (stride 1 pad 1 and stride 2)") {
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, std::tuple{2, 2, 0}}) {
    ParamStore<double> store;
    Conv3d<double> conv(store, "c", 2, 3, k, stride, pad);
    Rng rng = make_rng(13);
    conv.init_he(rng);
    conv.b->w.setRandom();
    Shape3 dims{4, 4, 4};
    MatrixX<double> x(2, voxels_of(dims));
    fill_gaussian(x, 1.0, rng);
    Shape3 od;
    typename Conv3d<double>::Cache c;
    MatrixX<double> y = conv.forward(x, dims, &od, &c);
    auto w = probe_like(y, 17);
    auto loss = [&] {
      Shape3 tmp;
      return (conv.forward(x, dims, &tmp, nullptr).array() * w.array()).sum();
    };
    Grads<double> g(store);
    MatrixX<double> gx = conv.backward(w, c, g);
    CHECK(fd_check_params(store, g, loss, 1e-6).max_rel_err < 1e-6);
    CHECK(fd_input_max_err(x, gx, loss, 1e-6) < 1e-6);
  }
}

TEST_CASE("conv transpose: doubles extents; gradient check") {
  ParamStore<double> store;
  ConvTranspose3d<double> up(store, "u", 3, 2);
  Rng rng = make_rng(19);
  up.init_he(rng);
  up.b->w.setRandom();
  Shape3 dims{2, 3, 2};
  MatrixX<double> x(3, voxels_of(dims));
  fill_gaussian(x, 1.0, rng);
  Shape3 od;
  typename ConvTranspose3d<double>::Cache c;
  MatrixX<double> y = up.forward(x, dims, &od, &c);
  CHECK(od == Shape3{4, 6, 4});
  CHECK(y.rows() == 2);
  auto w = probe_like(y, 23);
  auto loss = [&] {
    Shape3 tmp;
    return (up.forward(x, dims, &tmp, nullptr).array() * w.array()).sum();
  };
  Grads<double> g(store);
  MatrixX<double> gx = up.backward(w, c, g);
  CHECK(fd_check_params(store, g, loss, 1e-6).max_rel_err < 1e-6);
  CHECK(fd_input_max_err(x, gx, loss, 1e-6) < 1e-6);
}

TEST_CASE("instance norm: per-channel stats and gradient check") {
  ParamStore<double> store;
  InstanceNorm3d<double> inorm(store, "in", 3);
  Rng rng = make_rng(29);
  inorm.gamma->w.setRandom();
  inorm.gamma->w.array() += 1.5;
  inorm.beta->w.setRandom();
  MatrixX<double> x(3, 16);
  fill_gaussian(x, 3.0, rng);
  typename InstanceNorm3d<double>::Cache c;
  MatrixX<double> y = inorm.forward(x, &c);
  auto w = probe_like(y, 31);
  auto loss = [&] { return (inorm.forward(x, nullptr).array() * w.array()).sum(); };
  Grads<double> g(store);
  MatrixX<double> gx = inorm.backward(w, c, g);
  CHECK(fd_check_params(store, g, loss, 1e-6).max_rel_err < 1e-6);
  CHECK(fd_input_max_err(x, gx, loss, 1e-6) < 1e-6);
}

// ---------------------------------------------------------------------------
// multi-head attention

TEST_CASE("mha: identity weights, single token -> output equals v") {
  ParamStore<double> store;
  MultiheadAttention<double> mha(store, "a", 4, 1);
  mha.init_identity();
  MatrixX<double> q(1, 4), k(1, 4), v(1, 4);
  q << 1, 2, 3, 4;
  k << -1, 0, 1, 2;
  v << 5, 6, 7, 8;
  MatrixX<double> out = mha.forward(q, k, v, nullptr);
  for (Index i = 0; i < 4; ++i) CHECK(out(0, i) == doctest::Approx(v(0, i)).epsilon(1e-12));
}

TEST_CASE("mha: attention rows sum to one") {
  ParamStore<double> store;
  MultiheadAttention<double> mha(store, "a", 6, 2);
  Rng rng = make_rng(37);
  mha.init(rng);
  MatrixX<double> q(2, 6), kv(3, 6);
  fill_gaussian(q, 1.0, rng);
  fill_gaussian(kv, 1.0, rng);
  typename MultiheadAttention<double>::Cache c;
  mha.forward(q, kv, kv, &c);
  for (const auto& A : c.attn)
    for (Index r = 0; r < A.rows(); ++r)
      CHECK(A.row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("mha matches a direct dense evaluation") {
  // brute force: per head, softmax(q Wq (k Wk)^T / sqrt(dh)) (v Wv), concat, Wo
  ParamStore<double> store;
  const int width = 6, heads = 2, dh = 3;
  MultiheadAttention<double> mha(store, "a", width, heads);
  Rng rng = make_rng(41);
  mha.init(rng);
  mha.bq->w.setRandom();
  mha.bk->w.setRandom();
  mha.bv->w.setRandom();
  mha.bo->w.setRandom();
  MatrixX<double> q(2, width), kv(3, width);
  fill_gaussian(q, 1.0, rng);
  fill_gaussian(kv, 1.0, rng);

  MatrixX<double> out = mha.forward(q, kv, kv, nullptr);

  MatrixX<double> Q = q * mha.Wq->w.transpose();
  Q.rowwise() += mha.bq->w.col(0).transpose();
  MatrixX<double> K = kv * mha.Wk->w.transpose();
  K.rowwise() += mha.bk->w.col(0).transpose();
  MatrixX<double> V = kv * mha.Wv->w.transpose();
  V.rowwise() += mha.bv->w.col(0).transpose();
  MatrixX<double> concat(2, width);
  for (int h = 0; h < heads; ++h) {
    for (Index r = 0; r < 2; ++r) {
      VectorX<double> scores(3);
      for (Index s = 0; s < 3; ++s)
        scores(s) = Q.row(r).segment(h * dh, dh).dot(K.row(s).segment(h * dh, dh)) /
                    std::sqrt(double(dh));
      VectorX<double> e = (scores.array() - scores.maxCoeff()).exp();
      e /= e.sum();
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(dh);
      for (Index s = 0; s < 3; ++s) acc += e(s) * V.row(s).segment(h * dh, dh);
      concat.row(r).segment(h * dh, dh) = acc;
    }
  }
  MatrixX<double> expect = concat * mha.Wo->w.transpose();
  expect.rowwise() += mha.bo->w.col(0).transpose();
  CHECK((out - expect).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("mha gradient check (distinct q, k, v inputs)") {
  ParamStore<double> store;
  MultiheadAttention<double> mha(store, "a", 4, 2);
  Rng rng = make_rng(43);
  mha.init(rng);
  MatrixX<double> q(2, 4), k(3, 4), v(3, 4);
  fill_gaussian(q, 1.0, rng);
  fill_gaussian(k, 1.0, rng);
  fill_gaussian(v, 1.0, rng);
  auto w = probe_like(MatrixX<double>(2, 4), 47);
  auto loss = [&] { return (mha.forward(q, k, v, nullptr).array() * w.array()).sum(); };

  typename MultiheadAttention<double>::Cache c;
  mha.forward(q, k, v, &c);
  Grads<double> g(store);
  MatrixX<double> gq = MatrixX<double>::Zero(2, 4);
  MatrixX<double> gk = MatrixX<double>::Zero(3, 4);
  MatrixX<double> gv = MatrixX<double>::Zero(3, 4);
  mha.backward(w, c, g, gq, gk, gv);
  CHECK(fd_check_params(store, g, loss, 1e-6).max_rel_err < 1e-6);
  CHECK(fd_input_max_err(q, gq, loss, 1e-6) < 1e-6);
  CHECK(fd_input_max_err(k, gk, loss, 1e-6) < 1e-6);
  CHECK(fd_input_max_err(v, gv, loss, 1e-6) < 1e-6);
}
