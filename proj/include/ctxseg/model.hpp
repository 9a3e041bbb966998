#pragma once

#include "ctxseg/backbone.hpp"
#include "ctxseg/context_head.hpp"
#include "ctxseg/prior_store.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <string>
#include <vector>

namespace ctxseg {

struct ModelConfig {
  BackboneConfig backbone;
  int token_dim = 64;        // prior token width C
  int modality_tokens = 10;  // l
  int heads = 4;
  int ffn_ratio = 4;
  bool use_priors = true;          // false: plain backbone + static classifier head
  bool use_modality_prior = true;  // false: bundles carry task tokens only
  Act fusion_act = Act::gelu;
  Act head_act = Act::gelu;

  void validate() const {
    backbone.validate();
    require(token_dim >= 1 && modality_tokens >= 1 && heads >= 1 && ffn_ratio >= 1, "config",
            "model dimensions must be positive");
    if (use_priors)
      for (int sc : backbone.fusion_scales) {
        int w = backbone.width_of(backbone.stage_of_scale(sc));
        require(w % heads == 0, "config",
                "stage width at scale " + std::to_string(sc) + " must divide head count");
      }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["base_width"] = backbone.base_width;
    j["n_stages"] = backbone.n_stages;
    if (!backbone.stage_widths.empty()) j["stage_widths"] = backbone.stage_widths;
    j["encoder_blocks"] = backbone.encoder_blocks;
    j["decoder_blocks"] = backbone.decoder_blocks;
    j["stem_blocks"] = backbone.stem_blocks;
    j["fusion_scales"] = backbone.fusion_scales;
    j["fusion_variant"] = backbone.fusion_variant == FusionVariant::bidirectional
                              ? "bidirectional"
                              : backbone.fusion_variant == FusionVariant::unidirectional
                                    ? "unidirectional"
                                    : "joint";
    j["patch_size"] = {backbone.patch_size[0], backbone.patch_size[1], backbone.patch_size[2]};
    auto act_name = [](Act a) {
      switch (a) {
        case Act::none: return "none";
        case Act::relu: return "relu";
        case Act::leaky_relu: return "leaky_relu";
        case Act::gelu: return "gelu";
      }
      return "relu";
    };
    j["activation"] = act_name(backbone.activation);
    j["fusion_activation"] = act_name(fusion_act);
    j["head_activation"] = act_name(head_act);
    j["token_dim"] = token_dim;
    j["modality_tokens"] = modality_tokens;
    j["heads"] = heads;
    j["ffn_ratio"] = ffn_ratio;
    j["use_priors"] = use_priors;
    j["use_modality_prior"] = use_modality_prior;
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.backbone.base_width = j.value("base_width", c.backbone.base_width);
    c.backbone.n_stages = j.value("n_stages", c.backbone.n_stages);
    if (j.contains("stage_widths"))
      c.backbone.stage_widths = j.at("stage_widths").get<std::vector<int>>();
    c.backbone.encoder_blocks = j.value("encoder_blocks", c.backbone.encoder_blocks);
    c.backbone.decoder_blocks = j.value("decoder_blocks", c.backbone.decoder_blocks);
    c.backbone.stem_blocks = j.value("stem_blocks", c.backbone.stem_blocks);
    if (j.contains("fusion_scales"))
      c.backbone.fusion_scales = j.at("fusion_scales").get<std::vector<int>>();
    c.backbone.fusion_variant =
        fusion_variant_from_string(j.value("fusion_variant", std::string("bidirectional")));
    if (j.contains("patch_size")) {
      auto p = j.at("patch_size");
      c.backbone.patch_size = {p.at(0).get<int>(), p.at(1).get<int>(), p.at(2).get<int>()};
    }
    c.backbone.activation = act_from_string(j.value("activation", std::string("leaky_relu")));
    c.fusion_act = act_from_string(j.value("fusion_activation", std::string("gelu")));
    c.head_act = act_from_string(j.value("head_activation", std::string("gelu")));
    c.token_dim = j.value("token_dim", c.token_dim);
    c.modality_tokens = j.value("modality_tokens", c.modality_tokens);
    c.heads = j.value("heads", c.heads);
    c.ffn_ratio = j.value("ffn_ratio", c.ffn_ratio);
    c.use_priors = j.value("use_priors", c.use_priors);
    c.use_modality_prior = j.value("use_modality_prior", c.use_modality_prior);
    return c;
  }
};

// The full conditioned segmentation network: residual encoder-decoder with
// prior fusion hooks, multi-scale posterior aggregation, and the inner-product
// prediction head. With use_priors off it degrades to the plain backbone with
// a learnable per-task classifier matrix (the traditional-paradigm baseline).
template <typename T>
class SegModel {
 public:
  SegModel(const ModelConfig& cfg, int n_tasks, int n_modalities, std::uint64_t seed)
      : cfg_(cfg), n_tasks_(n_tasks), n_modalities_(n_modalities) {
    cfg_.validate();
    require(n_tasks >= 1 && n_modalities >= 1, "config", "registry must hold tasks/modalities");
    const auto& bb = cfg_.backbone;
    const int w0 = bb.width_of(0);

    stem_conv_ = Conv3d<T>(store_, "stem.conv", 1, w0, 3, 1, 1);
    stem_norm_ = InstanceNorm3d<T>(store_, "stem.in", w0);
    stem_act_.kind = bb.activation;
    for (int b = 0; b < bb.stem_blocks; ++b)
      stem_blocks_.emplace_back(store_, "stem.block" + std::to_string(b), w0, bb.activation);

    for (int s = 1; s <= bb.n_stages; ++s)
      enc_.emplace_back(store_, "enc" + std::to_string(s), bb.width_of(s - 1), bb.width_of(s),
                        bb.encoder_blocks, bb.activation);

    fusion_scales_ = bb.fusion_scales;
    std::sort(fusion_scales_.begin(), fusion_scales_.end());
    if (cfg_.use_priors) {
      for (int sc : fusion_scales_) {
        const int w = bb.width_of(bb.stage_of_scale(sc));
        fusion_.emplace_back(store_, "fuse" + std::to_string(sc), w, cfg_.heads,
                             static_cast<Index>(cfg_.ffn_ratio) * w, bb.fusion_variant,
                             cfg_.fusion_act);
        scale_proj_.emplace_back(store_, "proj" + std::to_string(sc), cfg_.token_dim, w);
      }
    }

    for (int s = bb.n_stages; s >= 1; --s)
      dec_.emplace_back(store_, "dec" + std::to_string(s), bb.width_of(s), bb.width_of(s - 1),
                        bb.decoder_blocks, bb.activation);

    if (cfg_.use_priors) {
      pools_ = PriorPools<T>(store_, n_tasks, n_modalities, cfg_.modality_tokens, cfg_.token_dim,
                             derive_seed(seed, 1));
      int concat_width = 0;
      for (int sc : fusion_scales_) concat_width += bb.width_of(bb.stage_of_scale(sc));
      head_ = PrototypeHead<T>(store_, "head", concat_width, w0, cfg_.head_act);
    } else {
      classifier_ = store_.add("baseline.classifier", n_tasks, w0);
    }

    init_parameters(seed);
  }

  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const ModelConfig& config() const { return cfg_; }
  int task_count() const { return n_tasks_; }
  int modality_count() const { return n_modalities_; }
  int decoder_width() const { return cfg_.backbone.width_of(0); }
  const std::vector<int>& fusion_scales() const { return fusion_scales_; }
  PriorPools<T>& pools() { return pools_; }
  const PriorPools<T>& pools() const { return pools_; }
  std::int64_t parameter_count() const { return store_.scalar_count(); }

  // Grows the task pool (or classifier) for incremental learning.
  void extend_tasks(int n_new, std::uint64_t seed) {
    if (cfg_.use_priors) {
      pools_.extend_tasks(n_new, seed);
    } else {
      MatrixX<T> grown(classifier_->w.rows() + n_new, classifier_->w.cols());
      grown.topRows(classifier_->w.rows()) = classifier_->w;
      MatrixX<T> fresh(n_new, classifier_->w.cols());
      Rng rng = make_rng(derive_seed(seed, 0xC1A55u));
      fill_truncated_normal(fresh, T(0.02), rng);
      grown.bottomRows(n_new) = fresh;
      classifier_->w = std::move(grown);
    }
    n_tasks_ += n_new;
  }

  struct FusionWs {
    typename Linear<T>::Cache proj;
    typename FusionBlock<T>::Cache fuse;
    MatrixX<T> posterior;  // (t[+l]) x C_s
  };

  struct Workspace {
    typename Conv3d<T>::Cache stem_c;
    typename InstanceNorm3d<T>::Cache stem_n;
    typename Activation<T>::Cache stem_a;
    std::vector<typename ResBlock<T>::Cache> stem_b;
    std::vector<typename EncoderStage<T>::Cache> enc;
    std::vector<typename DecoderStage<T>::Cache> dec;
    std::vector<FusionWs> fuse;
    std::vector<MatrixX<T>> acts;  // stage outputs (post fusion), 0..n_stages
    std::vector<Shape3> dims;
    PriorBundle<T> bundle;  // canonical task order (sorted by global id)
    typename PrototypeHead<T>::Cache head_c;
    MatrixX<T> feats, protos, logits, probs;  // protos/logits/probs in oracle order
    MatrixX<T> protos_can;
    std::vector<int> oracle_tasks;
    std::vector<int> canon_tasks;      // sorted global ids
    std::vector<int> canon_of_oracle;  // oracle row -> canonical row
    Shape3 out_dims{0, 0, 0};
  };

  struct ForwardResult {
    const MatrixX<T>* feats = nullptr;   // C' x n
    const MatrixX<T>* protos = nullptr;  // t x C'
    const MatrixX<T>* probs = nullptr;   // t x n
    std::vector<const MatrixX<T>*> posteriors_per_scale;
    Shape3 dims{0, 0, 0};
  };

  ForwardResult forward(const MatrixX<T>& image, const Shape3& in_dims,
                        const std::vector<int>& task_ids, int modality_id,
                        Workspace& ws) const {
    require(image.rows() == 1 && image.cols() == voxels_of(in_dims), "shape",
            "image must be a 1 x n grid row");
    for (int a = 0; a < 3; ++a)
      require(in_dims[static_cast<size_t>(a)] % (1 << cfg_.backbone.n_stages) == 0, "shape",
              "input extent " + shape_str(in_dims) + " not divisible by the stage stride");
    require(!task_ids.empty(), "oracle", "empty task oracle");

    const int n_stages = cfg_.backbone.n_stages;
    ws.enc.resize(static_cast<size_t>(n_stages));
    ws.dec.resize(static_cast<size_t>(n_stages));
    ws.fuse.resize(fusion_.size());
    ws.stem_b.resize(stem_blocks_.size());
    ws.acts.assign(static_cast<size_t>(n_stages) + 1, {});
    ws.dims.assign(static_cast<size_t>(n_stages) + 1, {});
    ws.oracle_tasks = task_ids;

    // The whole token path runs in canonical order (tasks sorted by global
    // id); outputs are copied back into oracle order at the end. Row-copy
    // reordering keeps per-task values bit-identical under any oracle
    // permutation, which GEMM row placement would not.
    const int t = static_cast<int>(task_ids.size());
    ws.canon_tasks = task_ids;
    std::sort(ws.canon_tasks.begin(), ws.canon_tasks.end());
    const auto& canon_tasks = ws.canon_tasks;
    ws.canon_of_oracle.resize(static_cast<size_t>(t));
    for (int i = 0; i < t; ++i) {
      auto it = std::lower_bound(canon_tasks.begin(), canon_tasks.end(),
                                 task_ids[static_cast<size_t>(i)]);
      ws.canon_of_oracle[static_cast<size_t>(i)] =
          static_cast<int>(it - canon_tasks.begin());
    }

    // stem
    Shape3 d = in_dims;
    MatrixX<T> x = stem_conv_.forward(image, in_dims, &d, &ws.stem_c);
    x = stem_act_.forward(stem_norm_.forward(x, &ws.stem_n), &ws.stem_a);
    for (size_t b = 0; b < stem_blocks_.size(); ++b)
      x = stem_blocks_[b].forward(x, d, &ws.stem_b[b]);
    ws.acts[0] = x;
    ws.dims[0] = d;

    if (cfg_.use_priors)
      ws.bundle = pools_.select(canon_tasks, modality_id, cfg_.use_modality_prior);

    // encoder with fusion hooks at the configured scales
    for (int s = 1; s <= n_stages; ++s) {
      x = enc_[static_cast<size_t>(s - 1)].forward(ws.acts[static_cast<size_t>(s - 1)],
                                                   ws.dims[static_cast<size_t>(s - 1)],
                                                   &ws.enc[static_cast<size_t>(s - 1)]);
      d = ws.enc[static_cast<size_t>(s - 1)].out_dims;
      int fi = fusion_index_of_stage(s);
      if (fi >= 0 && cfg_.use_priors) {
        auto& fws = ws.fuse[static_cast<size_t>(fi)];
        MatrixX<T> proj =
            scale_proj_[static_cast<size_t>(fi)].forward(ws.bundle.tokens, &fws.proj);
        MatrixX<T> fmap = x.transpose();  // n x C_s
        auto out = fusion_[static_cast<size_t>(fi)].forward(proj, ws.bundle.task_ids, fmap,
                                                            &fws.fuse);
        fws.posterior = std::move(out.tokens);
        x = out.fmap.transpose();
      }
      ws.acts[static_cast<size_t>(s)] = x;
      ws.dims[static_cast<size_t>(s)] = d;
    }

    // decoder (skips carry the prior-injected stage outputs)
    MatrixX<T> dcur = ws.acts[static_cast<size_t>(n_stages)];
    Shape3 ddims = ws.dims[static_cast<size_t>(n_stages)];
    for (int i = 0; i < n_stages; ++i) {
      int skip_stage = n_stages - 1 - i;
      dcur = dec_[static_cast<size_t>(i)].forward(dcur, ddims,
                                                  ws.acts[static_cast<size_t>(skip_stage)],
                                                  &ws.dec[static_cast<size_t>(i)]);
      ddims = ws.dec[static_cast<size_t>(i)].out_dims;
    }
    ws.feats = std::move(dcur);
    ws.out_dims = ddims;

    // prototypes (canonical order), then prediction, then oracle-order copies
    MatrixX<T> protos_can;
    if (cfg_.use_priors) {
      std::vector<const MatrixX<T>*> posts;
      for (const auto& f : ws.fuse) posts.push_back(&f.posterior);
      protos_can = head_.compute(posts, t, &ws.head_c);
    } else {
      protos_can.resize(t, classifier_->w.cols());
      for (int i = 0; i < t; ++i) {
        int tid = canon_tasks[static_cast<size_t>(i)];
        require(tid >= 0 && tid < static_cast<int>(classifier_->w.rows()), "oracle",
                "task id out of range for classifier head");
        protos_can.row(i) = classifier_->w.row(tid);
      }
    }

    MatrixX<T> logits_can = protos_can * ws.feats;
    ws.protos_can = std::move(protos_can);
    ws.protos.resize(t, ws.protos_can.cols());
    ws.logits.resize(t, logits_can.cols());
    for (int i = 0; i < t; ++i) {
      int c = ws.canon_of_oracle[static_cast<size_t>(i)];
      ws.protos.row(i) = ws.protos_can.row(c);
      ws.logits.row(i) = logits_can.row(c);
    }
    ws.probs = ws.logits.unaryExpr([](T z) { return T(1) / (T(1) + std::exp(-z)); });

    ForwardResult r;
    r.feats = &ws.feats;
    r.protos = &ws.protos;
    r.probs = &ws.probs;
    r.dims = ws.out_dims;
    for (auto& f : ws.fuse) r.posteriors_per_scale.push_back(&f.posterior);
    return r;
  }

  // g_logits: d loss / d logits, rows in oracle order.
  void backward(const MatrixX<T>& g_logits, Workspace& ws, Grads<T>& g) const {
    const int n_stages = cfg_.backbone.n_stages;
    const int t = static_cast<int>(ws.oracle_tasks.size());

    // back to canonical row order
    MatrixX<T> g_logits_can(t, g_logits.cols());
    for (int i = 0; i < t; ++i)
      g_logits_can.row(ws.canon_of_oracle[static_cast<size_t>(i)]) = g_logits.row(i);

    MatrixX<T> g_protos = g_logits_can * ws.feats.transpose();
    MatrixX<T> g_feats = ws.protos_can.transpose() * g_logits_can;

    // head
    std::vector<MatrixX<T>> g_post(fusion_.size());
    if (cfg_.use_priors) {
      auto g_task_rows = head_.backward(g_protos, ws.head_c, g);
      for (size_t fi = 0; fi < fusion_.size(); ++fi) {
        const auto& post = ws.fuse[fi].posterior;
        g_post[fi] = MatrixX<T>::Zero(post.rows(), post.cols());
        g_post[fi].topRows(t) = g_task_rows[fi];
      }
    } else {
      auto& gc = g.of(classifier_);
      for (int i = 0; i < t; ++i)
        gc.row(ws.canon_tasks[static_cast<size_t>(i)]) += g_protos.row(i);
    }

    // decoder
    std::vector<MatrixX<T>> g_acts(static_cast<size_t>(n_stages) + 1);
    for (int s = 0; s <= n_stages; ++s)
      g_acts[static_cast<size_t>(s)] =
          MatrixX<T>::Zero(ws.acts[static_cast<size_t>(s)].rows(),
                           ws.acts[static_cast<size_t>(s)].cols());
    MatrixX<T> g_d = g_feats;
    for (int i = n_stages - 1; i >= 0; --i) {
      int skip_stage = n_stages - 1 - i;
      g_d = dec_[static_cast<size_t>(i)].backward(g_d, ws.dec[static_cast<size_t>(i)], g,
                                                  g_acts[static_cast<size_t>(skip_stage)]);
    }
    g_acts[static_cast<size_t>(n_stages)] += g_d;

    // encoder in reverse, routing through fusion blocks where present
    MatrixX<T> g_bundle;
    if (cfg_.use_priors)
      g_bundle = MatrixX<T>::Zero(ws.bundle.rows(), ws.bundle.width());
    for (int s = n_stages; s >= 1; --s) {
      MatrixX<T> g_stage = std::move(g_acts[static_cast<size_t>(s)]);
      int fi = fusion_index_of_stage(s);
      if (fi >= 0 && cfg_.use_priors) {
        auto& fws = ws.fuse[static_cast<size_t>(fi)];
        MatrixX<T> g_tokens_in, g_fmap_in;
        MatrixX<T> g_fmap_out = g_stage.transpose();
        fusion_[static_cast<size_t>(fi)].backward(g_post[static_cast<size_t>(fi)], g_fmap_out,
                                                  fws.fuse, g, g_tokens_in, g_fmap_in);
        g_stage = g_fmap_in.transpose();
        g_bundle += scale_proj_[static_cast<size_t>(fi)].backward(g_tokens_in, fws.proj, g);
      }
      g_acts[static_cast<size_t>(s - 1)] +=
          enc_[static_cast<size_t>(s - 1)].backward(g_stage, ws.enc[static_cast<size_t>(s - 1)],
                                                    g);
    }
    if (cfg_.use_priors) pools_.scatter(ws.bundle, g_bundle, g);

    // stem
    MatrixX<T> g_x = std::move(g_acts[0]);
    for (size_t b = stem_blocks_.size(); b-- > 0;)
      g_x = stem_blocks_[b].backward(g_x, ws.stem_b[b], g);
    g_x = stem_act_.backward(g_x, ws.stem_a);
    g_x = stem_norm_.backward(g_x, ws.stem_n, g);
    stem_conv_.backward(g_x, ws.stem_c, g);  // input grad discarded
  }

 private:
  int fusion_index_of_stage(int stage) const {
    for (size_t i = 0; i < fusion_scales_.size(); ++i)
      if (cfg_.backbone.stage_of_scale(fusion_scales_[i]) == stage) return static_cast<int>(i);
    return -1;
  }

  void init_parameters(std::uint64_t seed) {
    Rng rng = make_rng(derive_seed(seed, 2));
    stem_conv_.init_he(rng);
    for (auto& b : stem_blocks_) b.init(rng);
    for (auto& e : enc_) e.init(rng);
    for (auto& f : fusion_) f.init(rng);
    for (auto& p : scale_proj_) p.init_xavier(rng);
    for (auto& d : dec_) d.init(rng);
    if (cfg_.use_priors) {
      head_.init(rng);
    } else {
      fill_truncated_normal(classifier_->w, T(0.02), rng);
    }
  }

  ModelConfig cfg_;
  int n_tasks_ = 0;
  int n_modalities_ = 0;
  ParamStore<T> store_;

  Conv3d<T> stem_conv_;
  InstanceNorm3d<T> stem_norm_;
  Activation<T> stem_act_;
  std::vector<ResBlock<T>> stem_blocks_;
  std::vector<EncoderStage<T>> enc_;
  std::vector<DecoderStage<T>> dec_;
  std::vector<int> fusion_scales_;
  std::vector<FusionBlock<T>> fusion_;
  std::vector<Linear<T>> scale_proj_;
  PriorPools<T> pools_;
  PrototypeHead<T> head_;
  Param<T>* classifier_ = nullptr;
};

}  // namespace ctxseg
