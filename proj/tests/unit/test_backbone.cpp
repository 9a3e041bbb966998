#include "ctxseg/backbone.hpp"

#include "ctxseg/model.hpp"
#include "helpers.hpp"

#include <doctest.h>

using namespace ctxseg;
using ctxseg_test::tiny_model_config;

namespace {

MatrixX<float> random_patch(const Shape3& dims, std::uint64_t seed) {
  MatrixX<float> x(1, voxels_of(dims));
  Rng rng = make_rng(seed);
  fill_gaussian(x, 1.f, rng);
  return x;
}

}  // namespace

TEST_CASE("forward shape contract: 3 fusion scales, full-resolution output") {
  ModelConfig mc;
  mc.backbone.base_width = 2;
  mc.backbone.n_stages = 4;
  mc.backbone.fusion_scales = {4, 8, 16};
  mc.backbone.patch_size = {16, 16, 16};
  mc.token_dim = 8;
  mc.modality_tokens = 2;
  mc.heads = 2;
  SegModel<float> model(mc, 3, 2, 1);
  SegModel<float>::Workspace ws;
  auto out = model.forward(random_patch({16, 16, 16}, 1), {16, 16, 16}, {0, 2}, 1, ws);
  CHECK(out.posteriors_per_scale.size() == 3);
  CHECK(out.dims == Shape3{16, 16, 16});
  CHECK(out.feats->rows() == 2);                    // C' = base_width
  CHECK(out.feats->cols() == 16 * 16 * 16);
  CHECK(out.probs->rows() == 2);                    // |t_k|
  CHECK(out.probs->cols() == 16 * 16 * 16);
  // posterior token sets carry |t_k| + l rows at each scale's width
  CHECK((*out.posteriors_per_scale[0]).rows() == 4);
  CHECK((*out.posteriors_per_scale[0]).cols() == 8);   // 4x scale width = 4*W
  CHECK((*out.posteriors_per_scale[2]).cols() == 32);  // 16x scale width
}

TEST_CASE("single-scale ablation config produces one posterior set") {
  ModelConfig mc = tiny_model_config();
  mc.backbone.n_stages = 4;
  mc.backbone.fusion_scales = {16};
  mc.backbone.patch_size = {16, 16, 16};
  SegModel<float> model(mc, 2, 1, 3);
  SegModel<float>::Workspace ws;
  auto out = model.forward(random_patch({16, 16, 16}, 2), {16, 16, 16}, {1}, 0, ws);
  CHECK(out.posteriors_per_scale.size() == 1);
  CHECK(out.dims == Shape3{16, 16, 16});
}

TEST_CASE("output spatial size equals input for several patch sizes") {
  ModelConfig mc = tiny_model_config();
  SegModel<float> model(mc, 2, 1, 4);
  SegModel<float>::Workspace ws;
  for (int extent : {4, 8, 12}) {
    Shape3 dims{extent, extent, extent};
    auto out = model.forward(random_patch(dims, 5), dims, {0, 1}, 0, ws);
    CHECK(out.dims == dims);
  }
  // non-divisible extent is rejected
  CHECK_THROWS_AS(model.forward(random_patch({5, 4, 4}, 6), {5, 4, 4}, {0}, 0, ws), Error);
}

TEST_CASE("zeroed fusion projections match the no-prior backbone bit-for-bit") {
  ModelConfig with = tiny_model_config();
  ModelConfig without = with;
  without.use_priors = false;

  SegModel<float> a(with, 2, 1, 7);
  SegModel<float> b(without, 2, 1, 7);
  // share backbone weights by name; zero every fusion output projection in a
  for (auto& p : b.params()) {
    const Param<float>* src = a.params().find(p.name);
    if (src) p.w = src->w;
  }
  for (auto& p : a.params()) {
    if (p.name.find(".wo") != std::string::npos || p.name.find(".bo") != std::string::npos ||
        p.name.find("fc2") != std::string::npos)
      if (p.name.rfind("fuse", 0) == 0) p.w.setZero();
  }
  SegModel<float>::Workspace wa, wb;
  auto patch = random_patch({8, 8, 8}, 9);
  auto ra = a.forward(patch, {8, 8, 8}, {0, 1}, 0, wa);
  auto rb = b.forward(patch, {8, 8, 8}, {0, 1}, 0, wb);
  CHECK((*ra.feats - *rb.feats).cwiseAbs().maxCoeff() == 0.f);
}

TEST_CASE("count_parameters: empty store, tiny conv, and monotonicity") {
  ParamStore<float> empty;
  CHECK(empty.scalar_count() == 0);

  ParamStore<float> one;
  Conv3d<float> conv(one, "c", 2, 3, 1, 1, 0);
  CHECK(one.scalar_count() == 9);

  ModelConfig small = tiny_model_config();
  ModelConfig base = small;
  base.backbone.base_width = 4;
  SegModel<float> ms(small, 2, 1, 1);
  SegModel<float> mb(base, 2, 1, 1);
  CHECK(mb.parameter_count() > ms.parameter_count());
}

TEST_CASE("doubling base width scales conv-dominated parameter counts ~4x") {
  ModelConfig a;
  a.backbone.base_width = 8;
  a.backbone.n_stages = 3;
  a.backbone.fusion_scales = {4, 8};
  a.backbone.patch_size = {8, 8, 8};
  a.use_priors = false;  // conv-dominated
  ModelConfig b = a;
  b.backbone.base_width = 16;
  SegModel<float> ma(a, 2, 1, 1);
  SegModel<float> mb(b, 2, 1, 1);
  double ratio = static_cast<double>(mb.parameter_count()) /
                 static_cast<double>(ma.parameter_count());
  CHECK(ratio > 3.5);
  CHECK(ratio < 4.5);
}

TEST_CASE("oracle permutation permutes prototypes and channels bit-exactly") {
  ModelConfig mc = tiny_model_config();
  SegModel<float> model(mc, 5, 2, 23);
  SegModel<float>::Workspace wa, wb;
  auto patch = random_patch({8, 8, 8}, 29);
  std::vector<int> base{0, 1, 2, 3, 4};
  std::vector<int> perm{3, 0, 4, 2, 1};
  auto ra = model.forward(patch, {8, 8, 8}, base, 1, wa);
  auto rb = model.forward(patch, {8, 8, 8}, perm, 1, wb);
  for (int r = 0; r < 5; ++r) {
    CHECK((wb.protos.row(r) - wa.protos.row(perm[static_cast<size_t>(r)])).cwiseAbs().maxCoeff() ==
          0.f);
    CHECK((wb.probs.row(r) - wa.probs.row(perm[static_cast<size_t>(r)])).cwiseAbs().maxCoeff() ==
          0.f);
  }
  CHECK((*ra.feats - *rb.feats).cwiseAbs().maxCoeff() == 0.f);
}

TEST_CASE("forward is deterministic given state and patch") {
  ModelConfig mc = tiny_model_config();
  SegModel<float> model(mc, 2, 1, 11);
  SegModel<float>::Workspace w1, w2;
  auto patch = random_patch({4, 4, 4}, 13);
  auto r1 = model.forward(patch, {4, 4, 4}, {0, 1}, 0, w1);
  auto r2 = model.forward(patch, {4, 4, 4}, {0, 1}, 0, w2);
  CHECK((*r1.probs - *r2.probs).cwiseAbs().maxCoeff() == 0.f);
}

TEST_CASE("residual block keeps spatial dims and passes a gradient check") {
  ParamStore<double> store;
  ResBlock<double> block(store, "rb", 2, Act::gelu);
  Rng rng = make_rng(17);
  block.init(rng);
  Shape3 dims{3, 3, 3};
  MatrixX<double> x(2, voxels_of(dims));
  fill_gaussian(x, 1.0, rng);
  typename ResBlock<double>::Cache c;
  MatrixX<double> y = block.forward(x, dims, &c);
  CHECK(y.rows() == 2);
  CHECK(y.cols() == x.cols());

  MatrixX<double> w(y.rows(), y.cols());
  fill_gaussian(w, 1.0, rng);
  auto loss = [&] { return (block.forward(x, dims, nullptr).array() * w.array()).sum(); };
  Grads<double> g(store);
  block.backward(w, c, g);
  auto rep = ctxseg_test::fd_check_params(store, g, loss, 1e-6, 24);
  CHECK(rep.max_rel_err < 1e-5);
}
