#include "ctxseg/fusion.hpp"

#include "helpers.hpp"

#include <doctest.h>

using namespace ctxseg;
using ctxseg_test::fd_check_params;

namespace {

// Direct formula evaluation, independent of the block implementation: plain
// per-row layer norm, per-head softmax attention, two-layer feed-forward.
MatrixX<double> oracle_ln(const MatrixX<double>& x, const LayerNorm<double>& ln) {
  MatrixX<double> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    double mu = x.row(r).mean();
    double var = (x.row(r).array() - mu).square().mean();
    for (Index c = 0; c < x.cols(); ++c)
      y(r, c) = (x(r, c) - mu) / std::sqrt(var + 1e-5) * ln.gamma->w(c, 0) + ln.beta->w(c, 0);
  }
  return y;
}

MatrixX<double> oracle_mha(const MatrixX<double>& q, const MatrixX<double>& k,
                           const MatrixX<double>& v, const MultiheadAttention<double>& mha) {
  const Index C = q.cols();
  const int heads = mha.heads;
  const Index dh = C / heads;
  MatrixX<double> Q = q * mha.Wq->w.transpose();
  Q.rowwise() += mha.bq->w.col(0).transpose();
  MatrixX<double> K = k * mha.Wk->w.transpose();
  K.rowwise() += mha.bk->w.col(0).transpose();
  MatrixX<double> V = v * mha.Wv->w.transpose();
  V.rowwise() += mha.bv->w.col(0).transpose();
  MatrixX<double> concat(q.rows(), C);
  for (int h = 0; h < heads; ++h)
    for (Index r = 0; r < q.rows(); ++r) {
      VectorX<double> s(k.rows());
      for (Index j = 0; j < k.rows(); ++j)
        s(j) = Q.row(r).segment(h * dh, dh).dot(K.row(j).segment(h * dh, dh)) /
               std::sqrt(double(dh));
      VectorX<double> e = (s.array() - s.maxCoeff()).exp();
      e /= e.sum();
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(dh);
      for (Index j = 0; j < k.rows(); ++j) acc += e(j) * V.row(j).segment(h * dh, dh);
      concat.row(r).segment(h * dh, dh) = acc;
    }
  MatrixX<double> out = concat * mha.Wo->w.transpose();
  out.rowwise() += mha.bo->w.col(0).transpose();
  return out;
}

MatrixX<double> oracle_ffn(const MatrixX<double>& x, const Ffn<double>& ffn) {
  MatrixX<double> h = x * ffn.fc1.W->w.transpose();
  h.rowwise() += ffn.fc1.b->w.col(0).transpose();
  for (Index i = 0; i < h.size(); ++i) h.data()[i] = act_value(ffn.act.kind, h.data()[i]);
  MatrixX<double> y = h * ffn.fc2.W->w.transpose();
  y.rowwise() += ffn.fc2.b->w.col(0).transpose();
  return y;
}

// Pre-norm token update then feature-map update, straight from the block's
// parameter tensors.
std::pair<MatrixX<double>, MatrixX<double>> oracle_bidirectional(
    const MatrixX<double>& p, const MatrixX<double>& X, const FusionBlock<double>& fb) {
  MatrixX<double> p1 = oracle_ln(p, fb.ln_p1);
  MatrixX<double> x1 = oracle_ln(X, fb.ln_x1);
  MatrixX<double> p2 = oracle_mha(p1, x1, x1, fb.mha_p) + p;
  MatrixX<double> phat = oracle_ffn(oracle_ln(p2, fb.ln_p2), fb.ffn_p) + p2;

  MatrixX<double> phat_ln = oracle_ln(phat, fb.ln_phat);
  MatrixX<double> x2q = oracle_ln(X, fb.ln_x2);
  MatrixX<double> x2 = oracle_mha(x2q, phat_ln, phat_ln, fb.mha_x) + X;
  MatrixX<double> xhat = oracle_ffn(oracle_ln(x2, fb.ln_x3), fb.ffn_x) + x2;
  return {phat, xhat};
}

std::pair<MatrixX<double>, MatrixX<double>> oracle_joint(const MatrixX<double>& p,
                                                         const MatrixX<double>& X,
                                                         const FusionBlock<double>& fb) {
  MatrixX<double> I(X.rows() + p.rows(), X.cols());
  I.topRows(X.rows()) = X;
  I.bottomRows(p.rows()) = p;
  MatrixX<double> In = oracle_ln(I, fb.ln_p1);
  MatrixX<double> I2 = oracle_mha(In, In, In, fb.mha_p) + I;
  MatrixX<double> Ihat = oracle_ffn(oracle_ln(I2, fb.ln_p2), fb.ffn_p) + I2;
  return {MatrixX<double>(Ihat.bottomRows(p.rows())), MatrixX<double>(Ihat.topRows(X.rows()))};
}

struct Instance {
  ParamStore<double> store;
  std::unique_ptr<FusionBlock<double>> block;
  MatrixX<double> tokens, fmap;
  std::vector<int> task_ids;
};

Instance make_instance(FusionVariant variant, int n_tok, int n_vox, Index width, int heads,
                       std::uint64_t seed) {
  Instance in;
  in.block = std::make_unique<FusionBlock<double>>(in.store, "f", width, heads, 2 * width,
                                                   variant);
  Rng rng = make_rng(seed);
  in.block->init(rng);
  // randomize biases and norm offsets so identities cannot hide bugs
  for (auto& p : in.store) {
    if (p.w.cols() != 1) continue;
    if (p.name.find(".gamma") != std::string::npos) {
      fill_gaussian(p.w, 0.2, rng);
      p.w.array() += 1.0;
    } else {
      fill_gaussian(p.w, 0.3, rng);
    }
  }
  in.tokens.resize(n_tok, width);
  fill_gaussian(in.tokens, 1.0, rng);
  in.fmap.resize(n_vox, width);
  fill_gaussian(in.fmap, 1.0, rng);
  for (int i = 0; i < n_tok; ++i) in.task_ids.push_back(i);
  return in;
}

void zero_output_projections(Instance& in) {
  for (auto& p : in.store) {
    if (p.name.find(".wo") != std::string::npos || p.name.find(".bo") != std::string::npos ||
        p.name.find(".fc2.") != std::string::npos)
      p.w.setZero();
  }
}

}  // namespace

TEST_CASE("bidirectional matches the direct two-stage evaluation") {
  // 1 task token against a single-voxel map, and a larger mixed case
  for (auto [t, n] : {std::pair{1, 1}, std::pair{3, 8}}) {
    Instance in = make_instance(FusionVariant::bidirectional, t, n, 8, 2, 101 + t);
    auto got = in.block->forward(in.tokens, in.task_ids, in.fmap, nullptr);
    auto [p_exp, x_exp] = oracle_bidirectional(in.tokens, in.fmap, *in.block);
    CHECK((got.tokens - p_exp).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((got.fmap - x_exp).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("joint matches the direct concatenated-block evaluation") {
  Instance in = make_instance(FusionVariant::joint, 1, 2, 8, 2, 107);
  auto got = in.block->forward(in.tokens, in.task_ids, in.fmap, nullptr);
  auto [p_exp, x_exp] = oracle_joint(in.tokens, in.fmap, *in.block);
  CHECK((got.tokens - p_exp).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((got.fmap - x_exp).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("unidirectional equals stage one of bidirectional with shared params") {
  Instance bi = make_instance(FusionVariant::bidirectional, 3, 6, 8, 2, 109);
  ParamStore<double> uni_store;
  FusionBlock<double> uni(uni_store, "f", 8, 2, 16, FusionVariant::unidirectional);
  uni_store.copy_values_from(bi.store);  // stage-1 names match

  auto got_uni = uni.forward(bi.tokens, bi.task_ids, bi.fmap, nullptr);
  auto got_bi = bi.block->forward(bi.tokens, bi.task_ids, bi.fmap, nullptr);
  CHECK((got_uni.tokens - got_bi.tokens).cwiseAbs().maxCoeff() == 0.0);

  // the feature map passes through bit-identically
  CHECK(got_uni.fmap == bi.fmap);
}

TEST_CASE("zeroed output projections reduce every variant to the identity") {
  for (auto variant :
       {FusionVariant::bidirectional, FusionVariant::unidirectional, FusionVariant::joint}) {
    Instance in = make_instance(variant, 2, 4, 8, 2, 113);
    zero_output_projections(in);
    auto got = in.block->forward(in.tokens, in.task_ids, in.fmap, nullptr);
    CHECK((got.tokens - in.tokens).cwiseAbs().maxCoeff() == 0.0);
    CHECK((got.fmap - in.fmap).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("shape preservation across variants") {
  for (auto variant :
       {FusionVariant::bidirectional, FusionVariant::unidirectional, FusionVariant::joint}) {
    Instance in = make_instance(variant, 5, 12, 8, 4, 127);
    auto got = in.block->forward(in.tokens, in.task_ids, in.fmap, nullptr);
    CHECK(got.tokens.rows() == in.tokens.rows());
    CHECK(got.tokens.cols() == in.tokens.cols());
    CHECK(got.fmap.rows() == in.fmap.rows());
    CHECK(got.fmap.cols() == in.fmap.cols());
  }
}

TEST_CASE("permuting prior rows permutes posteriors and leaves the map bit-identical") {
  for (auto variant : {FusionVariant::bidirectional, FusionVariant::joint}) {
    Instance in = make_instance(variant, 4, 6, 8, 2, 131);
    // give the tokens distinct global ids in non-sorted order
    in.task_ids = {7, 2, 9, 4};
    auto base = in.block->forward(in.tokens, in.task_ids, in.fmap, nullptr);

    std::vector<int> perm{2, 0, 3, 1};  // permuted oracle order
    std::vector<int> perm_ids;
    MatrixX<double> perm_tokens(in.tokens.rows(), in.tokens.cols());
    for (size_t i = 0; i < perm.size(); ++i) {
      perm_ids.push_back(in.task_ids[static_cast<size_t>(perm[i])]);
      perm_tokens.row(static_cast<Index>(i)) = in.tokens.row(perm[i]);
    }
    auto permuted = in.block->forward(perm_tokens, perm_ids, in.fmap, nullptr);

    // posterior rows permute identically; row placement inside the GEMMs can
    // cost a few ulps, bit-exactness is provided one level up by the model's
    // canonical token ordering
    for (size_t i = 0; i < perm.size(); ++i)
      CHECK((permuted.tokens.row(static_cast<Index>(i)) - base.tokens.row(perm[i]))
                .cwiseAbs()
                .maxCoeff() < 1e-12);
    // feature map output is exactly invariant (keys always reduce canonically)
    CHECK((permuted.fmap - base.fmap).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("fusion gradient check on a tiny instance") {
  for (auto variant :
       {FusionVariant::bidirectional, FusionVariant::unidirectional, FusionVariant::joint}) {
    Instance in = make_instance(variant, 2, 3, 4, 2, 137);
    MatrixX<double> wt(2, 4), wx(3, 4);
    Rng rng = make_rng(139);
    fill_gaussian(wt, 1.0, rng);
    fill_gaussian(wx, 1.0, rng);
    auto loss = [&] {
      auto out = in.block->forward(in.tokens, in.task_ids, in.fmap, nullptr);
      return (out.tokens.array() * wt.array()).sum() + (out.fmap.array() * wx.array()).sum();
    };
    typename FusionBlock<double>::Cache c;
    in.block->forward(in.tokens, in.task_ids, in.fmap, &c);
    Grads<double> g(in.store);
    MatrixX<double> g_tok, g_map;
    in.block->backward(wt, wx, c, g, g_tok, g_map);
    auto rep = fd_check_params(in.store, g, loss, 1e-6);
    INFO("variant worst param: " << rep.worst_param << " an=" << rep.worst_analytic
                                 << " fd=" << rep.worst_fd);
    CHECK(rep.max_rel_err < 1e-5);

    // input grads too
    double worst = 0;
    auto fd_on = [&](MatrixX<double>& m, const MatrixX<double>& gm) {
      for (Index i = 0; i < m.size(); ++i) {
        double orig = m.data()[i];
        double h = 1e-6;
        m.data()[i] = orig + h;
        double lp = loss();
        m.data()[i] = orig - h;
        double lm = loss();
        m.data()[i] = orig;
        double fd = (lp - lm) / (2 * h);
        worst = std::max(worst, ctxseg_test::grad_rel_err(fd, gm.data()[i]));
      }
    };
    fd_on(in.tokens, g_tok);
    fd_on(in.fmap, g_map);
    CHECK(worst < 1e-5);
  }
}
