#pragma once

#include "ctxseg/nn/param.hpp"
#include "ctxseg/rng.hpp"

#include <cmath>
#include <string>

namespace ctxseg {

enum class Act { none, relu, leaky_relu, gelu };

inline Act act_from_string(const std::string& s) {
  if (s == "none") return Act::none;
  if (s == "relu") return Act::relu;
  if (s == "leaky_relu") return Act::leaky_relu;
  if (s == "gelu") return Act::gelu;
  fail("config", "unknown activation: " + s);
}

template <typename T>
T act_value(Act a, T x) {
  switch (a) {
    case Act::none: return x;
    case Act::relu: return x > T(0) ? x : T(0);
    case Act::leaky_relu: return x > T(0) ? x : T(0.01) * x;
    case Act::gelu: {
      return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
    }
  }
  return x;
}

template <typename T>
T act_slope(Act a, T x) {  // derivative at the pre-activation
  switch (a) {
    case Act::none: return T(1);
    case Act::relu: return x > T(0) ? T(1) : T(0);
    case Act::leaky_relu: return x > T(0) ? T(1) : T(0.01);
    case Act::gelu: {
      T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
      T pdf = std::exp(-x * x / T(2)) / std::sqrt(T(2) * T(M_PI));
      return cdf + x * pdf;
    }
  }
  return T(1);
}

template <typename T>
void act_apply(Act a, MatrixX<T>& m) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = act_value(a, m(i, j));
}

// Elementwise activation with cached pre-activations.
template <typename T>
struct Activation {
  Act kind = Act::relu;
  struct Cache {
    MatrixX<T> pre;
  };
  MatrixX<T> forward(const MatrixX<T>& x, Cache* c) const {
    if (c) c->pre = x;
    MatrixX<T> y = x;
    act_apply(kind, y);
    return y;
  }
  MatrixX<T> backward(const MatrixX<T>& gy, const Cache& c) const {
    MatrixX<T> gx = gy;
    for (Index i = 0; i < gx.rows(); ++i)
      for (Index j = 0; j < gx.cols(); ++j) gx(i, j) *= act_slope(kind, c.pre(i, j));
    return gx;
  }
};

// ---------------------------------------------------------------------------

// Dense layer on token matrices (rows = tokens). y = x W^T + b.
template <typename T>
struct Linear {
  Param<T>* W = nullptr;  // out x in
  Param<T>* b = nullptr;  // out x 1

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& prefix, Index in, Index out) {
    W = store.add(prefix + ".weight", out, in);
    b = store.add(prefix + ".bias", out, 1);
  }

  Index in_dim() const { return W->w.cols(); }
  Index out_dim() const { return W->w.rows(); }

  void init_xavier(Rng& rng) { fill_xavier_uniform(W->w, W->w.cols(), W->w.rows(), rng); }
  void init_identity() {
    require(W->w.rows() == W->w.cols(), "internal", "identity init needs a square map");
    W->w.setIdentity();
    b->w.setZero();
  }

  struct Cache {
    MatrixX<T> x;
  };

  MatrixX<T> forward(const MatrixX<T>& x, Cache* c) const {
    require(x.cols() == W->w.cols(), "shape",
            "linear " + W->name + ": got width " + std::to_string(x.cols()));
    if (c) c->x = x;
    MatrixX<T> y = x * W->w.transpose();
    y.rowwise() += b->w.col(0).transpose();
    return y;
  }

  MatrixX<T> backward(const MatrixX<T>& gy, const Cache& c, Grads<T>& g) const {
    g.of(W).noalias() += gy.transpose() * c.x;
    g.of(b).col(0).noalias() += gy.colwise().sum().transpose();
    return gy * W->w;
  }
};

// ---------------------------------------------------------------------------

// Per-row normalization over the channel axis (rows = tokens).
template <typename T>
struct LayerNorm {
  Param<T>* gamma = nullptr;  // C x 1
  Param<T>* beta = nullptr;   // C x 1
  T eps = T(1e-5);

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& prefix, Index width) {
    gamma = store.add(prefix + ".gamma", width, 1);
    beta = store.add(prefix + ".beta", width, 1);
    gamma->w.setOnes();
  }

  struct Cache {
    MatrixX<T> xhat;     // normalized input
    VectorX<T> inv_std;  // per row
  };

  MatrixX<T> forward(const MatrixX<T>& x, Cache* c) const {
    require(x.cols() == gamma->w.rows(), "shape", "layernorm width mismatch");
    const Index n = x.rows(), C = x.cols();
    MatrixX<T> xhat(n, C);
    VectorX<T> inv_std(n);
    for (Index r = 0; r < n; ++r) {
      T mu = x.row(r).mean();
      T var = (x.row(r).array() - mu).square().sum() / T(C);
      T is = T(1) / std::sqrt(var + eps);
      xhat.row(r) = (x.row(r).array() - mu) * is;
      inv_std(r) = is;
    }
    MatrixX<T> y = xhat.array().rowwise() * gamma->w.col(0).transpose().array();
    y.rowwise() += beta->w.col(0).transpose();
    if (c) {
      c->xhat = std::move(xhat);
      c->inv_std = std::move(inv_std);
    }
    return y;
  }

  MatrixX<T> backward(const MatrixX<T>& gy, const Cache& c, Grads<T>& g) const {
    const Index n = gy.rows(), C = gy.cols();
    g.of(gamma).col(0).noalias() += (gy.array() * c.xhat.array()).colwise().sum().matrix().transpose();
    g.of(beta).col(0).noalias() += gy.colwise().sum().transpose();
    MatrixX<T> gx(n, C);
    for (Index r = 0; r < n; ++r) {
      Eigen::Array<T, 1, Eigen::Dynamic> gh =
          gy.row(r).array() * gamma->w.col(0).transpose().array();
      T m1 = gh.mean();
      T m2 = (gh * c.xhat.row(r).array()).mean();
      gx.row(r) = ((gh - m1 - c.xhat.row(r).array() * m2) * c.inv_std(r)).matrix();
    }
    return gx;
  }
};

// ---------------------------------------------------------------------------

// Two dense layers with an activation between (hidden = ratio * width).
template <typename T>
struct Ffn {
  Linear<T> fc1, fc2;
  Activation<T> act;

  Ffn() = default;
  Ffn(ParamStore<T>& store, const std::string& prefix, Index width, Index hidden,
      Act activation = Act::gelu)
      : fc1(store, prefix + ".fc1", width, hidden), fc2(store, prefix + ".fc2", hidden, width) {
    act.kind = activation;
  }

  struct Cache {
    typename Linear<T>::Cache c1, c2;
    typename Activation<T>::Cache ca;
  };

  MatrixX<T> forward(const MatrixX<T>& x, Cache* c) const {
    Cache local;
    Cache* cc = c ? c : &local;
    return fc2.forward(act.forward(fc1.forward(x, &cc->c1), &cc->ca), &cc->c2);
  }

  MatrixX<T> backward(const MatrixX<T>& gy, const Cache& c, Grads<T>& g) const {
    return fc1.backward(act.backward(fc2.backward(gy, c.c2, g), c.ca), c.c1, g);
  }

  void init(Rng& rng) {
    fc1.init_xavier(rng);
    fc2.init_xavier(rng);
  }
};

// ---------------------------------------------------------------------------
// 3D convolution stack. Feature maps are C x n matrices with n = D*H*W in
// row-major (d, h, w) order.

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline Shape3 conv_out_dims(const Shape3& in, int k, int stride, int pad) {
  return {conv_out_extent(in[0], k, stride, pad), conv_out_extent(in[1], k, stride, pad),
          conv_out_extent(in[2], k, stride, pad)};
}

// im2col: rows = Cin*k^3, cols = output voxels.
template <typename T>
void im2col3d(const MatrixX<T>& x, const Shape3& dims, int k, int stride, int pad,
              MatrixX<T>& col) {
  const Shape3 out = conv_out_dims(dims, k, stride, pad);
  const Index cin = x.rows();
  const Index n_out = voxels_of(out);
  col.resize(cin * k * k * k, n_out);
  for (Index ci = 0; ci < cin; ++ci) {
    const T* src = x.data() + ci * x.cols();
    for (int kd = 0; kd < k; ++kd)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          Index row = ((ci * k + kd) * k + kh) * k + kw;
          T* dst = col.data() + row * n_out;
          Index o = 0;
          for (int od = 0; od < out[0]; ++od) {
            int id = od * stride - pad + kd;
            bool d_ok = id >= 0 && id < dims[0];
            for (int oh = 0; oh < out[1]; ++oh) {
              int ih = oh * stride - pad + kh;
              bool h_ok = ih >= 0 && ih < dims[1];
              for (int ow = 0; ow < out[2]; ++ow, ++o) {
                int iw = ow * stride - pad + kw;
                dst[o] = (d_ok && h_ok && iw >= 0 && iw < dims[2])
                             ? src[(static_cast<Index>(id) * dims[1] + ih) * dims[2] + iw]
                             : T(0);
              }
            }
          }
        }
  }
}

// Transpose of im2col: scatter-add column gradients back onto the input grid.
template <typename T>
void col2im3d(const MatrixX<T>& col, const Shape3& dims, int k, int stride, int pad,
              MatrixX<T>& gx) {
  const Shape3 out = conv_out_dims(dims, k, stride, pad);
  const Index n_out = voxels_of(out);
  const Index cin = gx.rows();
  for (Index ci = 0; ci < cin; ++ci) {
    T* dst = gx.data() + ci * gx.cols();
    for (int kd = 0; kd < k; ++kd)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          Index row = ((ci * k + kd) * k + kh) * k + kw;
          const T* src = col.data() + row * n_out;
          Index o = 0;
          for (int od = 0; od < out[0]; ++od) {
            int id = od * stride - pad + kd;
            bool d_ok = id >= 0 && id < dims[0];
            for (int oh = 0; oh < out[1]; ++oh) {
              int ih = oh * stride - pad + kh;
              bool h_ok = ih >= 0 && ih < dims[1];
              for (int ow = 0; ow < out[2]; ++ow, ++o) {
                int iw = ow * stride - pad + kw;
                if (d_ok && h_ok && iw >= 0 && iw < dims[2])
                  dst[(static_cast<Index>(id) * dims[1] + ih) * dims[2] + iw] += src[o];
              }
            }
          }
        }
  }
}

template <typename T>
struct Conv3d {
  Param<T>* W = nullptr;  // Cout x (Cin*k^3)
  Param<T>* b = nullptr;  // Cout x 1
  int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;

  Conv3d() = default;
  Conv3d(ParamStore<T>& store, const std::string& prefix, int cin_, int cout_, int k_,
         int stride_, int pad_)
      : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_) {
    W = store.add(prefix + ".weight", cout, static_cast<Index>(cin) * k * k * k);
    b = store.add(prefix + ".bias", cout, 1);
  }

  void init_he(Rng& rng) { fill_he_normal(W->w, W->w.cols(), rng); }

  struct Cache {
    MatrixX<T> x;  // input map (im2col is recomputed in backward)
    Shape3 dims;
  };

  MatrixX<T> forward(const MatrixX<T>& x, const Shape3& dims, Shape3* out_dims,
                     Cache* c) const {
    require(x.rows() == cin, "shape", "conv " + W->name + ": channel mismatch");
    MatrixX<T> col;
    im2col3d(x, dims, k, stride, pad, col);
    MatrixX<T> y = W->w * col;
    y.colwise() += b->w.col(0);
    *out_dims = conv_out_dims(dims, k, stride, pad);
    if (c) {
      c->x = x;
      c->dims = dims;
    }
    return y;
  }

  MatrixX<T> backward(const MatrixX<T>& gy, const Cache& c, Grads<T>& g) const {
    MatrixX<T> col;
    im2col3d(c.x, c.dims, k, stride, pad, col);
    g.of(W).noalias() += gy * col.transpose();
    g.of(b).col(0).noalias() += gy.rowwise().sum();
    MatrixX<T> gcol = W->w.transpose() * gy;
    MatrixX<T> gx = MatrixX<T>::Zero(c.x.rows(), c.x.cols());
    col2im3d(gcol, c.dims, k, stride, pad, gx);
    return gx;
  }
};

// Stride-2 2x2x2 transposed convolution (exact x2 upsample, no overlap).
template <typename T>
struct ConvTranspose3d {
  Param<T>* W = nullptr;  // (Cout*8) x Cin
  Param<T>* b = nullptr;  // Cout x 1
  int cin = 0, cout = 0;

  ConvTranspose3d() = default;
  ConvTranspose3d(ParamStore<T>& store, const std::string& prefix, int cin_, int cout_)
      : cin(cin_), cout(cout_) {
    W = store.add(prefix + ".weight", static_cast<Index>(cout) * 8, cin);
    b = store.add(prefix + ".bias", cout, 1);
  }

  void init_he(Rng& rng) { fill_he_normal(W->w, W->w.cols(), rng); }

  struct Cache {
    MatrixX<T> x;
    Shape3 dims;
  };

  MatrixX<T> forward(const MatrixX<T>& x, const Shape3& dims, Shape3* out_dims,
                     Cache* c) const {
    require(x.rows() == cin, "shape", "convT channel mismatch");
    MatrixX<T> blocks = W->w * x;  // (Cout*8) x n_in
    Shape3 od{dims[0] * 2, dims[1] * 2, dims[2] * 2};
    MatrixX<T> y(cout, voxels_of(od));
    for (int co = 0; co < cout; ++co) {
      T* dst = y.data() + static_cast<Index>(co) * y.cols();
      for (int off = 0; off < 8; ++off) {
        const int a = off >> 2, bb = (off >> 1) & 1, cc = off & 1;
        const T* src = blocks.data() + (static_cast<Index>(co) * 8 + off) * blocks.cols();
        Index idx = 0;
        for (int i = 0; i < dims[0]; ++i)
          for (int j = 0; j < dims[1]; ++j)
            for (int kk = 0; kk < dims[2]; ++kk, ++idx)
              dst[(static_cast<Index>(2 * i + a) * od[1] + 2 * j + bb) * od[2] + 2 * kk + cc] =
                  src[idx] + b->w(co, 0);
      }
    }
    *out_dims = od;
    if (c) {
      c->x = x;
      c->dims = dims;
    }
    return y;
  }

  MatrixX<T> backward(const MatrixX<T>& gy, const Cache& c, Grads<T>& g) const {
    const Shape3 od{c.dims[0] * 2, c.dims[1] * 2, c.dims[2] * 2};
    MatrixX<T> gblocks(static_cast<Index>(cout) * 8, c.x.cols());
    for (int co = 0; co < cout; ++co) {
      const T* src = gy.data() + static_cast<Index>(co) * gy.cols();
      T gb = T(0);
      for (int off = 0; off < 8; ++off) {
        const int a = off >> 2, bb = (off >> 1) & 1, cc = off & 1;
        T* dst = gblocks.data() + (static_cast<Index>(co) * 8 + off) * gblocks.cols();
        Index idx = 0;
        for (int i = 0; i < c.dims[0]; ++i)
          for (int j = 0; j < c.dims[1]; ++j)
            for (int kk = 0; kk < c.dims[2]; ++kk, ++idx) {
              T v = src[(static_cast<Index>(2 * i + a) * od[1] + 2 * j + bb) * od[2] + 2 * kk + cc];
              dst[idx] = v;
              gb += v;
            }
      }
      g.of(b)(co, 0) += gb;
    }
    g.of(W).noalias() += gblocks * c.x.transpose();
    return W->w.transpose() * gblocks;
  }
};

// Per-channel normalization over the spatial axis of a C x n map.
template <typename T>
struct InstanceNorm3d {
  Param<T>* gamma = nullptr;  // C x 1
  Param<T>* beta = nullptr;   // C x 1
  T eps = T(1e-5);

  InstanceNorm3d() = default;
  InstanceNorm3d(ParamStore<T>& store, const std::string& prefix, Index channels) {
    gamma = store.add(prefix + ".gamma", channels, 1);
    beta = store.add(prefix + ".beta", channels, 1);
    gamma->w.setOnes();
  }

  struct Cache {
    MatrixX<T> xhat;
    VectorX<T> inv_std;  // per channel
  };

  MatrixX<T> forward(const MatrixX<T>& x, Cache* c) const {
    require(x.rows() == gamma->w.rows(), "shape", "instance norm channel mismatch");
    const Index C = x.rows(), n = x.cols();
    MatrixX<T> xhat(C, n);
    VectorX<T> inv_std(C);
    for (Index ch = 0; ch < C; ++ch) {
      T mu = x.row(ch).mean();
      T var = (x.row(ch).array() - mu).square().sum() / T(n);
      T is = T(1) / std::sqrt(var + eps);
      xhat.row(ch) = (x.row(ch).array() - mu) * is;
      inv_std(ch) = is;
    }
    MatrixX<T> y = xhat.array().colwise() * gamma->w.col(0).array();
    y.colwise() += beta->w.col(0);
    if (c) {
      c->xhat = std::move(xhat);
      c->inv_std = std::move(inv_std);
    }
    return y;
  }

  MatrixX<T> backward(const MatrixX<T>& gy, const Cache& c, Grads<T>& g) const {
    const Index C = gy.rows(), n = gy.cols();
    g.of(gamma).col(0).noalias() += (gy.array() * c.xhat.array()).rowwise().sum().matrix();
    g.of(beta).col(0).noalias() += gy.rowwise().sum();
    MatrixX<T> gx(C, n);
    for (Index ch = 0; ch < C; ++ch) {
      Eigen::Array<T, 1, Eigen::Dynamic> gh = gy.row(ch).array() * gamma->w(ch, 0);
      T m1 = gh.mean();
      T m2 = (gh * c.xhat.row(ch).array()).mean();
      gx.row(ch) = ((gh - m1 - c.xhat.row(ch).array() * m2) * c.inv_std(ch)).matrix();
    }
    return gx;
  }
};

}  // namespace ctxseg
