#pragma once

#include "ctxseg/fusion.hpp"
#include "ctxseg/nn/layers.hpp"

#include <vector>

namespace ctxseg {

struct BackboneConfig {
  int base_width = 16;
  int n_stages = 4;                   // stride-2 stages below full resolution
  std::vector<int> stage_widths;      // optional override, one entry per stage
  int encoder_blocks = 1;             // residual blocks per encoder stage
  int decoder_blocks = 1;             // residual blocks per decoder stage
  int stem_blocks = 0;                // residual blocks at full resolution
  std::vector<int> fusion_scales{4, 8, 16};
  FusionVariant fusion_variant = FusionVariant::bidirectional;
  Shape3 patch_size{32, 32, 32};
  Act activation = Act::leaky_relu;

  // stage 0 is the stem (scale 1x); stage s >= 1 sits at scale 2^s.
  int width_of(int stage) const {
    if (stage >= 1 && !stage_widths.empty())
      return stage_widths[static_cast<size_t>(stage - 1)];
    return base_width << stage;
  }

  int stage_of_scale(int scale) const {
    int s = 0;
    while ((1 << s) < scale) ++s;
    require((1 << s) == scale, "config", "fusion scale must be a power of two");
    return s;
  }

  void validate() const {
    require(base_width >= 1, "config", "base_width must be positive");
    require(n_stages >= 1 && n_stages <= 6, "config", "n_stages out of range");
    require(!fusion_scales.empty(), "config", "fusion_scales must be non-empty");
    if (!stage_widths.empty())
      require(static_cast<int>(stage_widths.size()) == n_stages, "config",
              "stage_widths must have one entry per stage");
    for (int sc : fusion_scales) {
      require(sc == 4 || sc == 8 || sc == 16, "config",
              "fusion scales are limited to {4, 8, 16}");
      require(stage_of_scale(sc) <= n_stages, "config",
              "fusion scale deeper than the backbone");
    }
    for (int a = 0; a < 3; ++a) {
      int p = patch_size[static_cast<size_t>(a)];
      require(p >= (1 << n_stages) && p % (1 << n_stages) == 0, "config",
              "patch size must be divisible by 2^n_stages");
    }
  }
};

// conv3 -> IN -> act -> conv3 -> IN, residual add, act.
template <typename T>
struct ResBlock {
  Conv3d<T> conv1, conv2;
  InstanceNorm3d<T> in1, in2;
  Activation<T> act;

  ResBlock() = default;
  ResBlock(ParamStore<T>& store, const std::string& prefix, int channels, Act activation) {
    conv1 = Conv3d<T>(store, prefix + ".conv1", channels, channels, 3, 1, 1);
    in1 = InstanceNorm3d<T>(store, prefix + ".in1", channels);
    conv2 = Conv3d<T>(store, prefix + ".conv2", channels, channels, 3, 1, 1);
    in2 = InstanceNorm3d<T>(store, prefix + ".in2", channels);
    act.kind = activation;
  }

  void init(Rng& rng) {
    conv1.init_he(rng);
    conv2.init_he(rng);
  }

  struct Cache {
    typename Conv3d<T>::Cache c1, c2;
    typename InstanceNorm3d<T>::Cache n1, n2;
    typename Activation<T>::Cache a1, a2;
  };

  MatrixX<T> forward(const MatrixX<T>& x, const Shape3& dims, Cache* c) const {
    Cache local;
    Cache* cc = c ? c : &local;
    Shape3 d = dims;
    MatrixX<T> h = conv1.forward(x, dims, &d, &cc->c1);
    h = act.forward(in1.forward(h, &cc->n1), &cc->a1);
    h = conv2.forward(h, d, &d, &cc->c2);
    h = in2.forward(h, &cc->n2);
    h += x;
    return act.forward(h, &cc->a2);
  }

  MatrixX<T> backward(const MatrixX<T>& gy, const Cache& c, Grads<T>& g) const {
    MatrixX<T> gsum = act.backward(gy, c.a2);
    MatrixX<T> gh = in2.backward(gsum, c.n2, g);
    gh = conv2.backward(gh, c.c2, g);
    gh = act.backward(gh, c.a1);
    gh = in1.backward(gh, c.n1, g);
    MatrixX<T> gx = conv1.backward(gh, c.c1, g);
    gx += gsum;
    return gx;
  }
};

// Stride-2 downsample conv, norm, act, then residual blocks.
template <typename T>
struct EncoderStage {
  Conv3d<T> down;
  InstanceNorm3d<T> norm;
  Activation<T> act;
  std::vector<ResBlock<T>> blocks;

  EncoderStage() = default;
  EncoderStage(ParamStore<T>& store, const std::string& prefix, int cin, int cout, int n_blocks,
               Act activation) {
    down = Conv3d<T>(store, prefix + ".down", cin, cout, 2, 2, 0);
    norm = InstanceNorm3d<T>(store, prefix + ".in", cout);
    act.kind = activation;
    for (int b = 0; b < n_blocks; ++b)
      blocks.emplace_back(store, prefix + ".block" + std::to_string(b), cout, activation);
  }

  void init(Rng& rng) {
    down.init_he(rng);
    for (auto& b : blocks) b.init(rng);
  }

  struct Cache {
    typename Conv3d<T>::Cache dc;
    typename InstanceNorm3d<T>::Cache nc;
    typename Activation<T>::Cache ac;
    std::vector<typename ResBlock<T>::Cache> bc;
    Shape3 out_dims;
  };

  MatrixX<T> forward(const MatrixX<T>& x, const Shape3& dims, Cache* c) const {
    Cache local;
    Cache* cc = c ? c : &local;
    Shape3 d;
    MatrixX<T> h = down.forward(x, dims, &d, &cc->dc);
    h = act.forward(norm.forward(h, &cc->nc), &cc->ac);
    cc->bc.resize(blocks.size());
    for (size_t b = 0; b < blocks.size(); ++b) h = blocks[b].forward(h, d, &cc->bc[b]);
    cc->out_dims = d;
    return h;
  }

  MatrixX<T> backward(const MatrixX<T>& gy, const Cache& c, Grads<T>& g) const {
    MatrixX<T> gh = gy;
    for (size_t b = blocks.size(); b-- > 0;) gh = blocks[b].backward(gh, c.bc[b], g);
    gh = act.backward(gh, c.ac);
    gh = norm.backward(gh, c.nc, g);
    return down.backward(gh, c.dc, g);
  }
};

// x2 transposed-conv upsample, skip concat, merge conv, then residual blocks.
template <typename T>
struct DecoderStage {
  ConvTranspose3d<T> up;
  Conv3d<T> merge;
  InstanceNorm3d<T> norm;
  Activation<T> act;
  std::vector<ResBlock<T>> blocks;
  int skip_channels = 0;

  DecoderStage() = default;
  DecoderStage(ParamStore<T>& store, const std::string& prefix, int cin, int cskip, int n_blocks,
               Act activation)
      : skip_channels(cskip) {
    up = ConvTranspose3d<T>(store, prefix + ".up", cin, cskip);
    merge = Conv3d<T>(store, prefix + ".merge", 2 * cskip, cskip, 3, 1, 1);
    norm = InstanceNorm3d<T>(store, prefix + ".in", cskip);
    act.kind = activation;
    for (int b = 0; b < n_blocks; ++b)
      blocks.emplace_back(store, prefix + ".block" + std::to_string(b), cskip, activation);
  }

  void init(Rng& rng) {
    up.init_he(rng);
    merge.init_he(rng);
    for (auto& b : blocks) b.init(rng);
  }

  struct Cache {
    typename ConvTranspose3d<T>::Cache uc;
    typename Conv3d<T>::Cache mc;
    typename InstanceNorm3d<T>::Cache nc;
    typename Activation<T>::Cache ac;
    std::vector<typename ResBlock<T>::Cache> bc;
    Shape3 out_dims;
  };

  MatrixX<T> forward(const MatrixX<T>& x, const Shape3& dims, const MatrixX<T>& skip,
                     Cache* c) const {
    Cache local;
    Cache* cc = c ? c : &local;
    Shape3 d;
    MatrixX<T> u = up.forward(x, dims, &d, &cc->uc);
    require(u.cols() == skip.cols(), "shape", "decoder skip spatial mismatch");
    MatrixX<T> cat(2 * skip_channels, u.cols());
    cat.topRows(skip_channels) = u;
    cat.bottomRows(skip_channels) = skip;
    MatrixX<T> h = merge.forward(cat, d, &d, &cc->mc);
    h = act.forward(norm.forward(h, &cc->nc), &cc->ac);
    cc->bc.resize(blocks.size());
    for (size_t b = 0; b < blocks.size(); ++b) h = blocks[b].forward(h, d, &cc->bc[b]);
    cc->out_dims = d;
    return h;
  }

  // Returns grad wrt x; adds the skip gradient onto g_skip.
  MatrixX<T> backward(const MatrixX<T>& gy, const Cache& c, Grads<T>& g,
                      MatrixX<T>& g_skip) const {
    MatrixX<T> gh = gy;
    for (size_t b = blocks.size(); b-- > 0;) gh = blocks[b].backward(gh, c.bc[b], g);
    gh = act.backward(gh, c.ac);
    gh = norm.backward(gh, c.nc, g);
    MatrixX<T> gcat = merge.backward(gh, c.mc, g);
    g_skip += gcat.bottomRows(skip_channels);
    return up.backward(MatrixX<T>(gcat.topRows(skip_channels)), c.uc, g);
  }
};

}  // namespace ctxseg
