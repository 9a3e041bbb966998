#pragma once

#include "ctxseg/nn/param.hpp"
#include "ctxseg/rng.hpp"

#include <vector>

namespace ctxseg {

// Oracle-selected token rows: tasks first (oracle order), then the modality
// block. task_slice is rows [0, n_task).
template <typename T>
struct PriorBundle {
  MatrixX<T> tokens;
  std::vector<int> task_ids;
  int n_task = 0;
  int modality_id = -1;
  bool has_modality = false;

  Index rows() const { return tokens.rows(); }
  Index width() const { return tokens.cols(); }
};

// Learnable task pool (|T| x C) and modality pool (|M|*l x C, row blocks of
// l per modality). Selection copies rows out; gradients are scattered back
// onto exactly the selected rows.
template <typename T>
class PriorPools {
 public:
  PriorPools() = default;
  PriorPools(ParamStore<T>& store, int n_tasks, int n_modalities, int tokens_per_modality,
             int token_dim, std::uint64_t seed)
      : l_(tokens_per_modality), token_dim_(token_dim) {
    require(n_tasks >= 1 && n_modalities >= 1 && tokens_per_modality >= 1 && token_dim >= 1,
            "config", "prior pool dimensions must be positive");
    task_pool_ = store.add("priors.task_pool", n_tasks, token_dim);
    modality_pool_ =
        store.add("priors.modality_pool", static_cast<Index>(n_modalities) * tokens_per_modality,
                  token_dim);
    Rng rng = make_rng(derive_seed(seed, 0xA11Au));
    fill_truncated_normal(task_pool_->w, T(0.02), rng);
    fill_truncated_normal(modality_pool_->w, T(0.02), rng);
  }

  Param<T>* task_pool() { return task_pool_; }
  const Param<T>* task_pool() const { return task_pool_; }
  Param<T>* modality_pool() { return modality_pool_; }
  const Param<T>* modality_pool() const { return modality_pool_; }
  int tokens_per_modality() const { return l_; }
  int token_dim() const { return token_dim_; }
  int task_count() const { return static_cast<int>(task_pool_->w.rows()); }
  int modality_count() const { return static_cast<int>(modality_pool_->w.rows()) / l_; }

  PriorBundle<T> select(const std::vector<int>& task_ids, int modality_id,
                        bool include_modality = true) const {
    std::vector<bool> seen(static_cast<size_t>(task_count()), false);
    for (int t : task_ids) {
      require(t >= 0 && t < task_count(), "oracle",
              "task id out of range: " + std::to_string(t));
      require(!seen[static_cast<size_t>(t)], "oracle",
              "duplicate task id in oracle: " + std::to_string(t));
      seen[static_cast<size_t>(t)] = true;
    }
    PriorBundle<T> b;
    b.task_ids = task_ids;
    b.n_task = static_cast<int>(task_ids.size());
    b.modality_id = modality_id;
    b.has_modality = include_modality;
    const Index rows = b.n_task + (include_modality ? l_ : 0);
    b.tokens.resize(rows, token_dim_);
    for (int i = 0; i < b.n_task; ++i)
      b.tokens.row(i) = task_pool_->w.row(task_ids[static_cast<size_t>(i)]);
    if (include_modality) {
      require(modality_id >= 0 && modality_id < modality_count(), "oracle",
              "modality id out of range: " + std::to_string(modality_id));
      b.tokens.middleRows(b.n_task, l_) =
          modality_pool_->w.middleRows(static_cast<Index>(modality_id) * l_, l_);
    }
    return b;
  }

  // Routes token-space gradients back to the rows the oracle selected.
  void scatter(const PriorBundle<T>& b, const MatrixX<T>& g_tokens, Grads<T>& g) const {
    require(g_tokens.rows() == b.rows() && g_tokens.cols() == token_dim_, "shape",
            "bundle gradient shape mismatch");
    auto& gt = g.of(task_pool_);
    for (int i = 0; i < b.n_task; ++i)
      gt.row(b.task_ids[static_cast<size_t>(i)]) += g_tokens.row(i);
    if (b.has_modality) {
      g.of(modality_pool_).middleRows(static_cast<Index>(b.modality_id) * l_, l_) +=
          g_tokens.middleRows(b.n_task, l_);
    }
  }

  // Appends freshly initialized task rows; existing rows are untouched.
  void extend_tasks(int n_new, std::uint64_t seed) {
    require(n_new >= 1, "config", "extend_tasks needs at least one new task");
    const Index old_rows = task_pool_->w.rows();
    MatrixX<T> grown(old_rows + n_new, token_dim_);
    grown.topRows(old_rows) = task_pool_->w;
    MatrixX<T> fresh(n_new, token_dim_);
    Rng rng = make_rng(derive_seed(seed, 0xE27Eu, static_cast<std::uint64_t>(old_rows)));
    fill_truncated_normal(fresh, T(0.02), rng);
    grown.bottomRows(n_new) = fresh;
    task_pool_->w = std::move(grown);
  }

 private:
  Param<T>* task_pool_ = nullptr;
  Param<T>* modality_pool_ = nullptr;
  int l_ = 1;
  int token_dim_ = 1;
};

}  // namespace ctxseg
