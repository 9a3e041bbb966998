#pragma once

#include "ctxseg/nn/attention.hpp"

#include <numeric>
#include <string>
#include <vector>

namespace ctxseg {

enum class FusionVariant { bidirectional, unidirectional, joint };

inline FusionVariant fusion_variant_from_string(const std::string& s) {
  if (s == "bidirectional") return FusionVariant::bidirectional;
  if (s == "unidirectional") return FusionVariant::unidirectional;
  if (s == "joint") return FusionVariant::joint;
  fail("config", "unknown fusion variant: " + s);
}

// Canonical row order for the key/value side of token reductions: task rows
// sorted by global task id, modality rows after in pool order. Reductions over
// tokens always run in this order, which makes the feature-map output exactly
// invariant to oracle permutations.
inline std::vector<int> canonical_token_order(const std::vector<int>& task_ids, int n_rows) {
  std::vector<int> perm(static_cast<size_t>(n_rows));
  std::iota(perm.begin(), perm.end(), 0);
  const int n_task = static_cast<int>(task_ids.size());
  std::sort(perm.begin(), perm.begin() + n_task, [&](int a, int b) {
    return task_ids[static_cast<size_t>(a)] < task_ids[static_cast<size_t>(b)];
  });
  return perm;
}

template <typename T>
MatrixX<T> permute_rows(const MatrixX<T>& m, const std::vector<int>& perm) {
  MatrixX<T> out(m.rows(), m.cols());
  for (size_t c = 0; c < perm.size(); ++c) out.row(static_cast<Index>(c)) = m.row(perm[c]);
  return out;
}

template <typename T>
void unpermute_rows_add(const MatrixX<T>& g_can, const std::vector<int>& perm, MatrixX<T>& g) {
  for (size_t c = 0; c < perm.size(); ++c) g.row(perm[c]) += g_can.row(static_cast<Index>(c));
}

// Prior fusion block at one backbone scale. Token matrices are rows x width,
// feature maps enter as n x width (row per voxel).
//
// bidirectional: tokens aggregate from the map (pre-norm MHA + FFN with
// residuals), then the map aggregates from the updated tokens.
// unidirectional: first half only; the feature map passes through untouched.
// joint: one self-attention block over [map; tokens] concatenated.
template <typename T>
struct FusionBlock {
  FusionVariant variant = FusionVariant::bidirectional;
  Index width = 0;

  // stage 1 (shared by bidirectional/unidirectional) or the joint block
  LayerNorm<T> ln_p1, ln_x1, ln_p2;
  MultiheadAttention<T> mha_p;
  Ffn<T> ffn_p;
  // stage 2, bidirectional only
  LayerNorm<T> ln_phat, ln_x2, ln_x3;
  MultiheadAttention<T> mha_x;
  Ffn<T> ffn_x;

  FusionBlock() = default;
  FusionBlock(ParamStore<T>& store, const std::string& prefix, Index width_, int heads,
              Index ffn_hidden, FusionVariant variant_, Act ffn_act = Act::gelu)
      : variant(variant_), width(width_) {
    if (variant == FusionVariant::joint) {
      ln_p1 = LayerNorm<T>(store, prefix + ".ln1", width);
      mha_p = MultiheadAttention<T>(store, prefix + ".mha", width, heads);
      ln_p2 = LayerNorm<T>(store, prefix + ".ln2", width);
      ffn_p = Ffn<T>(store, prefix + ".ffn", width, ffn_hidden, ffn_act);
      return;
    }
    ln_p1 = LayerNorm<T>(store, prefix + ".p_ln", width);
    ln_x1 = LayerNorm<T>(store, prefix + ".x_ln", width);
    mha_p = MultiheadAttention<T>(store, prefix + ".p_mha", width, heads);
    ln_p2 = LayerNorm<T>(store, prefix + ".p_ffn_ln", width);
    ffn_p = Ffn<T>(store, prefix + ".p_ffn", width, ffn_hidden, ffn_act);
    if (variant == FusionVariant::bidirectional) {
      ln_phat = LayerNorm<T>(store, prefix + ".phat_ln", width);
      ln_x2 = LayerNorm<T>(store, prefix + ".x2_ln", width);
      mha_x = MultiheadAttention<T>(store, prefix + ".x_mha", width, heads);
      ln_x3 = LayerNorm<T>(store, prefix + ".x_ffn_ln", width);
      ffn_x = Ffn<T>(store, prefix + ".x_ffn", width, ffn_hidden, ffn_act);
    }
  }

  void init(Rng& rng) {
    mha_p.init(rng);
    ffn_p.init(rng);
    if (variant == FusionVariant::bidirectional) {
      mha_x.init(rng);
      ffn_x.init(rng);
    }
  }

  struct Result {
    MatrixX<T> tokens;  // posterior tokens, bundle order
    MatrixX<T> fmap;    // prior-injected map (input copy for unidirectional)
  };

  struct Cache {
    std::vector<int> perm;
    // stage 1 / joint
    typename LayerNorm<T>::Cache ln_p1c, ln_x1c, ln_p2c;
    typename MultiheadAttention<T>::Cache mhac;
    typename Ffn<T>::Cache ffnc;
    MatrixX<T> p2;  // post-attention residual sum
    // stage 2
    typename LayerNorm<T>::Cache ln_phatc, ln_x2c, ln_x3c;
    typename MultiheadAttention<T>::Cache mhaxc;
    typename Ffn<T>::Cache ffnxc;
    MatrixX<T> x2;
    Index n_vox = 0, n_tok = 0;
  };

  Result forward(const MatrixX<T>& tokens, const std::vector<int>& task_ids,
                 const MatrixX<T>& fmap, Cache* c) const {
    require(tokens.cols() == width && fmap.cols() == width, "shape",
            "fusion width mismatch: tokens " + std::to_string(tokens.cols()) + ", map " +
                std::to_string(fmap.cols()) + ", block " + std::to_string(width));
    auto perm = canonical_token_order(task_ids, static_cast<int>(tokens.rows()));
    if (c) {
      c->perm = perm;
      c->n_vox = fmap.rows();
      c->n_tok = tokens.rows();
    }
    if (variant == FusionVariant::joint) return forward_joint(tokens, perm, fmap, c);

    Cache local;
    Cache* cc = c ? c : &local;

    // tokens <- map
    MatrixX<T> p1 = ln_p1.forward(tokens, &cc->ln_p1c);
    MatrixX<T> x1 = ln_x1.forward(fmap, &cc->ln_x1c);
    MatrixX<T> p2 = mha_p.forward(p1, x1, x1, &cc->mhac) + tokens;
    cc->p2 = p2;
    MatrixX<T> phat = ffn_p.forward(ln_p2.forward(p2, &cc->ln_p2c), &cc->ffnc) + p2;

    Result r;
    r.tokens = phat;
    if (variant == FusionVariant::unidirectional) {
      r.fmap = fmap;
      return r;
    }

    // map <- posterior tokens, reduced in canonical token order
    MatrixX<T> phat_ln = ln_phat.forward(phat, &cc->ln_phatc);
    MatrixX<T> phat_can = permute_rows(phat_ln, perm);
    MatrixX<T> x2q = ln_x2.forward(fmap, &cc->ln_x2c);
    MatrixX<T> x2 = mha_x.forward(x2q, phat_can, phat_can, &cc->mhaxc) + fmap;
    cc->x2 = x2;
    r.fmap = ffn_x.forward(ln_x3.forward(x2, &cc->ln_x3c), &cc->ffnxc) + x2;
    return r;
  }

  void backward(const MatrixX<T>& g_tokens_out, const MatrixX<T>& g_fmap_out, const Cache& c,
                Grads<T>& g, MatrixX<T>& g_tokens_in, MatrixX<T>& g_fmap_in) const {
    g_tokens_in = MatrixX<T>::Zero(c.n_tok, width);
    g_fmap_in = MatrixX<T>::Zero(c.n_vox, width);
    if (variant == FusionVariant::joint) {
      backward_joint(g_tokens_out, g_fmap_out, c, g, g_tokens_in, g_fmap_in);
      return;
    }

    MatrixX<T> g_phat = g_tokens_out;
    if (variant == FusionVariant::unidirectional) {
      // the feature map passes through unchanged
      g_fmap_in += g_fmap_out;
    }
    if (variant == FusionVariant::bidirectional) {
      // X_hat = ffn_x(ln_x3(x2)) + x2
      MatrixX<T> g_x2 = g_fmap_out;
      g_x2 += ln_x3.backward(ffn_x.backward(g_fmap_out, c.ffnxc, g), c.ln_x3c, g);
      // x2 = mha_x(ln_x2(fmap), phat_can, phat_can) + fmap
      g_fmap_in += g_x2;
      MatrixX<T> g_x2q = MatrixX<T>::Zero(c.n_vox, width);
      MatrixX<T> g_kcan = MatrixX<T>::Zero(c.n_tok, width);
      MatrixX<T> g_vcan = MatrixX<T>::Zero(c.n_tok, width);
      mha_x.backward(g_x2, c.mhaxc, g, g_x2q, g_kcan, g_vcan);
      g_fmap_in += ln_x2.backward(g_x2q, c.ln_x2c, g);
      MatrixX<T> g_phat_ln = MatrixX<T>::Zero(c.n_tok, width);
      unpermute_rows_add(MatrixX<T>(g_kcan + g_vcan), c.perm, g_phat_ln);
      g_phat += ln_phat.backward(g_phat_ln, c.ln_phatc, g);
    }

    // phat = ffn_p(ln_p2(p2)) + p2
    MatrixX<T> g_p2 = g_phat;
    g_p2 += ln_p2.backward(ffn_p.backward(g_phat, c.ffnc, g), c.ln_p2c, g);
    // p2 = mha_p(ln_p1(tokens), x1, x1) + tokens
    g_tokens_in += g_p2;
    MatrixX<T> g_p1 = MatrixX<T>::Zero(c.n_tok, width);
    MatrixX<T> g_x1a = MatrixX<T>::Zero(c.n_vox, width);
    MatrixX<T> g_x1b = MatrixX<T>::Zero(c.n_vox, width);
    mha_p.backward(g_p2, c.mhac, g, g_p1, g_x1a, g_x1b);
    g_tokens_in += ln_p1.backward(g_p1, c.ln_p1c, g);
    g_fmap_in += ln_x1.backward(MatrixX<T>(g_x1a + g_x1b), c.ln_x1c, g);
  }

 private:
  Result forward_joint(const MatrixX<T>& tokens, const std::vector<int>& perm,
                       const MatrixX<T>& fmap, Cache* c) const {
    Cache local;
    Cache* cc = c ? c : &local;
    const Index n = fmap.rows(), t = tokens.rows();
    MatrixX<T> I(n + t, width);
    I.topRows(n) = fmap;
    I.bottomRows(t) = tokens;
    MatrixX<T> In = ln_p1.forward(I, &cc->ln_p1c);
    // Keys/values see tokens in canonical order; queries keep natural order.
    MatrixX<T> Ican(n + t, width);
    Ican.topRows(n) = In.topRows(n);
    for (size_t i = 0; i < perm.size(); ++i)
      Ican.row(n + static_cast<Index>(i)) = In.row(n + perm[i]);
    MatrixX<T> I2 = mha_p.forward(In, Ican, Ican, &cc->mhac) + I;
    cc->p2 = I2;
    MatrixX<T> Ihat = ffn_p.forward(ln_p2.forward(I2, &cc->ln_p2c), &cc->ffnc) + I2;
    Result r;
    r.fmap = Ihat.topRows(n);
    r.tokens = Ihat.bottomRows(t);
    return r;
  }

  void backward_joint(const MatrixX<T>& g_tokens_out, const MatrixX<T>& g_fmap_out,
                      const Cache& c, Grads<T>& g, MatrixX<T>& g_tokens_in,
                      MatrixX<T>& g_fmap_in) const {
    const Index n = c.n_vox, t = c.n_tok;
    MatrixX<T> g_Ihat(n + t, width);
    g_Ihat.topRows(n) = g_fmap_out;
    g_Ihat.bottomRows(t) = g_tokens_out;
    MatrixX<T> g_I2 = g_Ihat;
    g_I2 += ln_p2.backward(ffn_p.backward(g_Ihat, c.ffnc, g), c.ln_p2c, g);
    MatrixX<T> g_I = g_I2;
    MatrixX<T> g_q = MatrixX<T>::Zero(n + t, width);
    MatrixX<T> g_kcan = MatrixX<T>::Zero(n + t, width);
    MatrixX<T> g_vcan = MatrixX<T>::Zero(n + t, width);
    mha_p.backward(g_I2, c.mhac, g, g_q, g_kcan, g_vcan);
    MatrixX<T> g_kv = g_kcan + g_vcan;
    MatrixX<T> g_In = g_q;
    g_In.topRows(n) += g_kv.topRows(n);
    for (size_t i = 0; i < c.perm.size(); ++i)
      g_In.row(n + c.perm[i]) += g_kv.row(n + static_cast<Index>(i));
    g_I += ln_p1.backward(g_In, c.ln_p1c, g);
    g_fmap_in += g_I.topRows(n);
    g_tokens_in += g_I.bottomRows(t);
  }
};

}  // namespace ctxseg
