#pragma once

#include "ctxseg/nn/layers.hpp"

namespace ctxseg {

// Multi-head attention: per-head scaled dot-product softmax(Q K^T / sqrt(d_h)) V,
// heads concatenated, then the output projection.
template <typename T>
struct MultiheadAttention {
  Param<T>*Wq = nullptr, *Wk = nullptr, *Wv = nullptr, *Wo = nullptr;  // C x C
  Param<T>*bq = nullptr, *bk = nullptr, *bv = nullptr, *bo = nullptr;  // C x 1
  int heads = 1;

  MultiheadAttention() = default;
  MultiheadAttention(ParamStore<T>& store, const std::string& prefix, Index width, int heads_)
      : heads(heads_) {
    require(width % heads_ == 0, "config", "attention width must divide head count");
    Wq = store.add(prefix + ".wq", width, width);
    Wk = store.add(prefix + ".wk", width, width);
    Wv = store.add(prefix + ".wv", width, width);
    Wo = store.add(prefix + ".wo", width, width);
    bq = store.add(prefix + ".bq", width, 1);
    bk = store.add(prefix + ".bk", width, 1);
    bv = store.add(prefix + ".bv", width, 1);
    bo = store.add(prefix + ".bo", width, 1);
  }

  Index width() const { return Wq->w.rows(); }
  Index head_dim() const { return width() / heads; }

  void init(Rng& rng) {
    fill_xavier_uniform(Wq->w, width(), width(), rng);
    fill_xavier_uniform(Wk->w, width(), width(), rng);
    fill_xavier_uniform(Wv->w, width(), width(), rng);
    fill_xavier_uniform(Wo->w, width(), width(), rng);
  }
  void init_identity() {
    Wq->w.setIdentity();
    Wk->w.setIdentity();
    Wv->w.setIdentity();
    Wo->w.setIdentity();
  }

  struct Cache {
    MatrixX<T> q_in, k_in, v_in;
    MatrixX<T> Q, K, V;
    std::vector<MatrixX<T>> attn;  // per head, nq x nk
    MatrixX<T> concat;             // nq x C
  };

  MatrixX<T> forward(const MatrixX<T>& q_in, const MatrixX<T>& k_in, const MatrixX<T>& v_in,
                     Cache* c) const {
    require(k_in.rows() == v_in.rows(), "shape", "attention key/value count mismatch");
    require(q_in.cols() == width() && k_in.cols() == width() && v_in.cols() == width(), "shape",
            "attention width mismatch");
    const Index dh = head_dim();
    const T scale = T(1) / std::sqrt(T(dh));

    MatrixX<T> Q = q_in * Wq->w.transpose();
    Q.rowwise() += bq->w.col(0).transpose();
    MatrixX<T> K = k_in * Wk->w.transpose();
    K.rowwise() += bk->w.col(0).transpose();
    MatrixX<T> V = v_in * Wv->w.transpose();
    V.rowwise() += bv->w.col(0).transpose();

    MatrixX<T> concat(q_in.rows(), width());
    if (c) c->attn.assign(static_cast<size_t>(heads), {});
    for (int h = 0; h < heads; ++h) {
      auto Qh = Q.middleCols(h * dh, dh);
      auto Kh = K.middleCols(h * dh, dh);
      auto Vh = V.middleCols(h * dh, dh);
      MatrixX<T> scores = (Qh * Kh.transpose()) * scale;
      for (Index r = 0; r < scores.rows(); ++r) {
        T mx = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - mx).exp();
        scores.row(r) /= scores.row(r).sum();
      }
      concat.middleCols(h * dh, dh).noalias() = scores * Vh;
      if (c) c->attn[static_cast<size_t>(h)] = std::move(scores);
    }
    MatrixX<T> out = concat * Wo->w.transpose();
    out.rowwise() += bo->w.col(0).transpose();
    if (c) {
      c->q_in = q_in;
      c->k_in = k_in;
      c->v_in = v_in;
      c->Q = std::move(Q);
      c->K = std::move(K);
      c->V = std::move(V);
      c->concat = std::move(concat);
    }
    return out;
  }

  // Accumulates parameter grads and adds input grads onto g_q/g_k/g_v.
  void backward(const MatrixX<T>& gy, const Cache& c, Grads<T>& g, MatrixX<T>& g_q,
                MatrixX<T>& g_k, MatrixX<T>& g_v) const {
    const Index dh = head_dim();
    const T scale = T(1) / std::sqrt(T(dh));

    g.of(Wo).noalias() += gy.transpose() * c.concat;
    g.of(bo).col(0).noalias() += gy.colwise().sum().transpose();
    MatrixX<T> gconcat = gy * Wo->w;

    MatrixX<T> gQ = MatrixX<T>::Zero(c.Q.rows(), c.Q.cols());
    MatrixX<T> gK = MatrixX<T>::Zero(c.K.rows(), c.K.cols());
    MatrixX<T> gV = MatrixX<T>::Zero(c.V.rows(), c.V.cols());
    for (int h = 0; h < heads; ++h) {
      const MatrixX<T>& A = c.attn[static_cast<size_t>(h)];
      auto gHh = gconcat.middleCols(h * dh, dh);
      auto Qh = c.Q.middleCols(h * dh, dh);
      auto Kh = c.K.middleCols(h * dh, dh);
      auto Vh = c.V.middleCols(h * dh, dh);

      gV.middleCols(h * dh, dh).noalias() += A.transpose() * gHh;
      MatrixX<T> gA = gHh * Vh.transpose();
      // softmax rows: gS = A .* (gA - rowsum(gA .* A))
      MatrixX<T> gS(A.rows(), A.cols());
      for (Index r = 0; r < A.rows(); ++r) {
        T dot = (gA.row(r).array() * A.row(r).array()).sum();
        gS.row(r) = (A.row(r).array() * (gA.row(r).array() - dot)).matrix();
      }
      gS *= scale;
      gQ.middleCols(h * dh, dh).noalias() += gS * Kh;
      gK.middleCols(h * dh, dh).noalias() += gS.transpose() * Qh;
    }

    g.of(Wq).noalias() += gQ.transpose() * c.q_in;
    g.of(bq).col(0).noalias() += gQ.colwise().sum().transpose();
    g.of(Wk).noalias() += gK.transpose() * c.k_in;
    g.of(bk).col(0).noalias() += gK.colwise().sum().transpose();
    g.of(Wv).noalias() += gV.transpose() * c.v_in;
    g.of(bv).col(0).noalias() += gV.colwise().sum().transpose();

    g_q.noalias() += gQ * Wq->w;
    g_k.noalias() += gK * Wk->w;
    g_v.noalias() += gV * Wv->w;
  }
};

}  // namespace ctxseg
