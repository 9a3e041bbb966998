#pragma once

#include "ctxseg/losses.hpp"
#include "ctxseg/model.hpp"
#include "ctxseg/optim.hpp"
#include "ctxseg/preprocess.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

namespace ctxseg {

struct TrainConfig {
  int batch_size = 2;
  int epochs = 10;
  int steps_per_epoch = 0;  // 0: one pass over the training split per epoch
  std::string optimizer = "lamb";
  double lr = 0.002;
  double lr_decay = 0.97;  // exponential, per epoch
  double weight_decay = 0.0;
  double lambda_dice = 1.0;
  std::uint64_t seed = 0;
  std::string freeze_policy = "none";  // none | backbone_and_old_tokens
  std::string sampler = "uniform_union";  // uniform_union | dataset_balanced
  int first_trainable_task = 0;  // used by backbone_and_old_tokens
  AugmentConfig augment;
  int threads = 0;  // 0: min(hardware, batch_size)

  void validate() const {
    require(batch_size >= 1, "config", "batch_size must be >= 1");
    require(epochs >= 0, "config", "epochs must be >= 0");
    require(lambda_dice >= 0, "config", "lambda (dice weight) must be >= 0");
    require(lr > 0, "config", "learning rate must be positive");
    require(freeze_policy == "none" || freeze_policy == "backbone_and_old_tokens", "config",
            "unknown freeze policy: " + freeze_policy);
    require(sampler == "uniform_union" || sampler == "dataset_balanced", "config",
            "unknown sampler policy: " + sampler);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["steps_per_epoch"] = steps_per_epoch;
    j["optimizer"] = optimizer;
    j["lr"] = lr;
    j["lr_decay"] = lr_decay;
    j["weight_decay"] = weight_decay;
    j["lambda_dice"] = lambda_dice;
    j["seed"] = seed;
    j["freeze_policy"] = freeze_policy;
    j["sampler"] = sampler;
    j["threads"] = threads;
    j["augment"] = {{"p_rotate", augment.p_rotate},
                    {"max_rotate_deg", augment.max_rotate_deg},
                    {"p_scale", augment.p_scale},
                    {"scale", {augment.scale_lo, augment.scale_hi}},
                    {"p_brightness", augment.p_brightness},
                    {"brightness_range", augment.brightness_range},
                    {"p_contrast", augment.p_contrast},
                    {"contrast", {augment.contrast_lo, augment.contrast_hi}},
                    {"p_gamma", augment.p_gamma},
                    {"gamma", {augment.gamma_lo, augment.gamma_hi}}};
    return j;
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
    c.optimizer = j.value("optimizer", c.optimizer);
    c.lr = j.value("lr", c.lr);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lambda_dice = j.value("lambda_dice", c.lambda_dice);
    c.seed = j.value("seed", c.seed);
    c.freeze_policy = j.value("freeze_policy", c.freeze_policy);
    c.sampler = j.value("sampler", c.sampler);
    c.threads = j.value("threads", c.threads);
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      c.augment.p_rotate = a.value("p_rotate", c.augment.p_rotate);
      c.augment.max_rotate_deg = a.value("max_rotate_deg", c.augment.max_rotate_deg);
      c.augment.p_scale = a.value("p_scale", c.augment.p_scale);
      if (a.contains("scale")) {
        c.augment.scale_lo = a.at("scale").at(0).get<double>();
        c.augment.scale_hi = a.at("scale").at(1).get<double>();
      }
      c.augment.p_brightness = a.value("p_brightness", c.augment.p_brightness);
      c.augment.brightness_range = a.value("brightness_range", c.augment.brightness_range);
      c.augment.p_contrast = a.value("p_contrast", c.augment.p_contrast);
      if (a.contains("contrast")) {
        c.augment.contrast_lo = a.at("contrast").at(0).get<double>();
        c.augment.contrast_hi = a.at("contrast").at(1).get<double>();
      }
      c.augment.p_gamma = a.value("p_gamma", c.augment.p_gamma);
      if (a.contains("gamma")) {
        c.augment.gamma_lo = a.at("gamma").at(0).get<double>();
        c.augment.gamma_hi = a.at("gamma").at(1).get<double>();
      }
    }
    return c;
  }
};

struct SampleDraw {
  std::string dataset_key;
  int sample_index = 0;
};

// One batch of independent draws; each slot carries its own dataset (and
// therefore its own oracle).
inline std::vector<SampleDraw> sample_batch(const PreprocessedStore& store,
                                            const std::string& policy, int batch_size,
                                            Rng& rng) {
  std::vector<std::pair<std::string, int>> unionized;
  std::vector<std::string> keys;
  std::map<std::string, std::vector<int>> train_idx;
  for (const auto& [key, ds] : store.datasets) {
    auto idx = ds.train_indices();
    if (idx.empty()) continue;
    keys.push_back(key);
    train_idx[key] = idx;
    for (int i : idx) unionized.emplace_back(key, i);
  }
  require(!unionized.empty(), "data", "preprocessed store has no training samples");

  std::vector<SampleDraw> batch;
  for (int b = 0; b < batch_size; ++b) {
    if (policy == "dataset_balanced") {
      const auto& key = keys[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(keys.size()) - 1))];
      const auto& idx = train_idx[key];
      batch.push_back({key, idx[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(idx.size()) - 1))]});
    } else {
      const auto& pick =
          unionized[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(unionized.size()) - 1))];
      batch.push_back({pick.first, pick.second});
    }
  }
  return batch;
}

template <typename T>
struct StepStats {
  T loss = T(0), bce = T(0), dice = T(0);
};

// Joint training driver (mixed batches, per-sample oracles, pool updates).
template <typename T>
class Trainer {
 public:
  Trainer(SegModel<T>& model, const PreprocessedStore& store, const TrainConfig& cfg)
      : model_(model), store_(store), cfg_(cfg),
        sampler_rng_(make_rng(derive_seed(cfg.seed, 0x5A3Bu))) {
    tune_allocator();
    cfg_.validate();
    slices_ = build_slices();
    optimizer_ = make_optimizer<T>(cfg_.optimizer, static_cast<T>(cfg_.weight_decay));
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    threads_ = cfg_.threads > 0 ? cfg_.threads : std::max(1, std::min(hw, cfg_.batch_size));
    ws_.resize(static_cast<size_t>(threads_));
    thread_grads_.reserve(static_cast<size_t>(threads_));
    for (int i = 0; i < threads_; ++i) thread_grads_.emplace_back(model_.params());
    preload();
  }

  // Runs the configured schedule; logs one JSON line per epoch.
  T run(std::ostream* log = nullptr) {
    Rng& sampler_rng = sampler_rng_;
    T last_epoch_loss = T(0);
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const T lr = static_cast<T>(cfg_.lr * std::pow(cfg_.lr_decay, epoch));
      const int steps = steps_per_epoch();
      T sum = T(0);
      for (int s = 0; s < steps; ++s) {
        auto stats = step(sampler_rng, epoch, s, lr);
        sum += stats.loss;
      }
      last_epoch_loss = sum / T(std::max(1, steps));
      if (log) {
        nlohmann::json line = {{"epoch", epoch},
                               {"steps", steps},
                               {"loss", static_cast<double>(last_epoch_loss)},
                               {"lr", static_cast<double>(lr)}};
        (*log) << line.dump() << "\n" << std::flush;
      }
    }
    return last_epoch_loss;
  }

  // One optimizer step on a freshly sampled mixed batch.
  StepStats<T> step(Rng& sampler_rng, int epoch, int step_index, T lr) {
    auto draws = sample_batch(store_, cfg_.sampler, cfg_.batch_size, sampler_rng);
    grads_.reset(model_.params());

    std::vector<StepStats<T>> stats(draws.size());
    auto run_slot = [&](int slot, int thread_id) {
      const auto& draw = draws[static_cast<size_t>(slot)];
      Rng aug_rng = make_rng(derive_seed(cfg_.seed, 0xA06u, static_cast<std::uint64_t>(epoch),
                                         static_cast<std::uint64_t>(step_index),
                                         static_cast<std::uint64_t>(slot)));
      stats[static_cast<size_t>(slot)] =
          accumulate_sample(draw, aug_rng, ws_[static_cast<size_t>(thread_id)],
                            thread_grads_[static_cast<size_t>(thread_id)]);
    };

    for (auto& tg : thread_grads_) tg.set_zero();
    if (threads_ <= 1 || draws.size() == 1) {
      for (size_t slot = 0; slot < draws.size(); ++slot) run_slot(static_cast<int>(slot), 0);
    } else {
      std::vector<std::thread> pool;
      for (int tid = 0; tid < threads_; ++tid)
        pool.emplace_back([&, tid]() {
          for (size_t slot = static_cast<size_t>(tid); slot < draws.size();
               slot += static_cast<size_t>(threads_))
            run_slot(static_cast<int>(slot), tid);
        });
      for (auto& th : pool) th.join();
    }
    // Fixed-order reduction keeps results independent of the thread count.
    for (auto& tg : thread_grads_) grads_.add(tg);
    grads_.scale(T(1) / T(draws.size()));
    apply_freeze_mask(model_.params(), slices_, grads_);
    optimizer_->step(model_.params(), grads_, slices_, lr);

    StepStats<T> mean;
    for (const auto& s : stats) {
      mean.loss += s.loss;
      mean.bce += s.bce;
      mean.dice += s.dice;
    }
    mean.loss /= T(draws.size());
    mean.bce /= T(draws.size());
    mean.dice /= T(draws.size());
    require(std::isfinite(static_cast<double>(mean.loss)), "train",
            "non-finite loss at epoch " + std::to_string(epoch) + " step " +
                std::to_string(step_index));
    return mean;
  }

  const Grads<T>& last_grads() const { return grads_; }
  const std::vector<TrainableSlice>& trainable_slices() const { return slices_; }
  Rng& sampler_rng() { return sampler_rng_; }
  std::string rng_state() const {
    std::ostringstream os;
    os << sampler_rng_;
    return os.str();
  }
  int steps_per_epoch() const {
    if (cfg_.steps_per_epoch > 0) return cfg_.steps_per_epoch;
    const int total = store_.total_train_samples();
    return std::max(1, (total + cfg_.batch_size - 1) / cfg_.batch_size);
  }

 private:
  std::vector<TrainableSlice> build_slices() const {
    if (cfg_.freeze_policy == "none") return all_trainable(model_.params());
    // backbone_and_old_tokens: only task-pool rows >= first_trainable_task move.
    const Param<T>* pool = model_.config().use_priors
                               ? model_.pools().task_pool()
                               : model_.params().find("baseline.classifier");
    require(pool != nullptr, "config", "freeze policy needs a task pool");
    require(cfg_.first_trainable_task >= 0 && cfg_.first_trainable_task < pool->w.rows(),
            "config", "first_trainable_task out of range");
    return {{pool->id, cfg_.first_trainable_task, pool->w.rows()}};
  }

  void preload() {
    for (const auto& [key, ds] : store_.datasets) {
      auto& vec = volumes_[key];
      vec.resize(ds.samples.size());
      for (size_t i = 0; i < ds.samples.size(); ++i) {
        if (!ds.samples[i].train_split) continue;
        vec[i].first = store_.load_image(key, static_cast<int>(i));
        vec[i].second = store_.load_label(key, static_cast<int>(i));
      }
    }
  }

  StepStats<T> accumulate_sample(const SampleDraw& draw, Rng& aug_rng,
                                 typename SegModel<T>::Workspace& ws, Grads<T>& g) {
    const auto& ds = store_.registry.dataset(draw.dataset_key);
    const auto& pair = volumes_.at(draw.dataset_key).at(static_cast<size_t>(draw.sample_index));
    PatchPair patch =
        augment_and_crop(pair.first, pair.second, ds.task_ids, ds.label_value_map,
                         model_.config().backbone.patch_size, cfg_.augment, aug_rng);

    const Index n = voxels_of(patch.patch_size);
    MatrixX<T> image(1, n);
    for (Index i = 0; i < n; ++i) image(0, i) = static_cast<T>(patch.image[static_cast<size_t>(i)]);
    MatrixX<T> targets(static_cast<Index>(ds.task_ids.size()), n);
    for (size_t c = 0; c < patch.labels.size(); ++c)
      for (Index i = 0; i < n; ++i)
        targets(static_cast<Index>(c), i) = static_cast<T>(patch.labels[c][static_cast<size_t>(i)]);

    model_.forward(image, patch.patch_size, ds.task_ids, ds.modality_id, ws);
    StepStats<T> s;
    s.bce = bce_loss(ws.probs, targets, patch.annotated);
    s.dice = dice_loss(ws.probs, targets, patch.annotated);
    s.loss = s.bce + static_cast<T>(cfg_.lambda_dice) * s.dice;
    MatrixX<T> g_logits =
        total_loss_grad_logits(ws.probs, targets, patch.annotated,
                               static_cast<T>(cfg_.lambda_dice));
    model_.backward(g_logits, ws, g);
    return s;
  }

  SegModel<T>& model_;
  const PreprocessedStore& store_;
  TrainConfig cfg_;
  Rng sampler_rng_;
  std::vector<TrainableSlice> slices_;
  std::unique_ptr<Optimizer<T>> optimizer_;
  Grads<T> grads_;
  std::vector<Grads<T>> thread_grads_;
  std::vector<typename SegModel<T>::Workspace> ws_;
  int threads_ = 1;
  std::map<std::string, std::vector<std::pair<Volume, Volume>>> volumes_;
};

}  // namespace ctxseg
