#pragma once

#include "ctxseg/nn/param.hpp"

#include <cmath>
#include <memory>
#include <string>
#include <vector>

namespace ctxseg {

// Row range of one parameter that receives updates. Everything outside the
// trainable set is frozen: gradients are zeroed and the optimizer never
// touches the values.
struct TrainableSlice {
  int param_id = -1;
  Index row_begin = 0;
  Index row_end = 0;
};

template <typename T>
std::vector<TrainableSlice> all_trainable(const ParamStore<T>& store) {
  std::vector<TrainableSlice> s;
  for (const auto& p : store) s.push_back({p.id, 0, p.w.rows()});
  return s;
}

// Zeroes gradient entries outside the trainable slices (frozen parameters
// report exactly zero gradient norms).
template <typename T>
void apply_freeze_mask(const ParamStore<T>& store, const std::vector<TrainableSlice>& slices,
                       Grads<T>& g) {
  std::vector<std::pair<Index, Index>> keep(static_cast<size_t>(store.count()), {0, 0});
  for (const auto& s : slices) keep[static_cast<size_t>(s.param_id)] = {s.row_begin, s.row_end};
  for (const auto& p : store) {
    auto [b, e] = keep[static_cast<size_t>(p.id)];
    auto& gm = g.of(&p);
    if (b > 0) gm.topRows(b).setZero();
    if (e < gm.rows()) gm.bottomRows(gm.rows() - e).setZero();
    if (b == e) gm.setZero();
  }
}

template <typename T>
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(ParamStore<T>& store, const Grads<T>& g,
                    const std::vector<TrainableSlice>& slices, T lr) = 0;
  virtual std::string name() const = 0;
};

template <typename T>
class Adam final : public Optimizer<T> {
 public:
  Adam(T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8), T weight_decay = T(0))
      : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(ParamStore<T>& store, const Grads<T>& g, const std::vector<TrainableSlice>& slices,
            T lr) override {
    ensure_state(store, slices);
    ++t_;
    const T bc1 = T(1) - std::pow(b1_, T(t_));
    const T bc2 = T(1) - std::pow(b2_, T(t_));
    for (size_t i = 0; i < slices.size(); ++i) {
      const auto& s = slices[i];
      if (s.row_end <= s.row_begin) continue;
      auto w = store.at(s.param_id).w.middleRows(s.row_begin, s.row_end - s.row_begin);
      auto gr = g.at(s.param_id).middleRows(s.row_begin, s.row_end - s.row_begin);
      auto& m = m_[i];
      auto& v = v_[i];
      m = b1_ * m + (T(1) - b1_) * gr;
      v = (b2_ * v.array() + (T(1) - b2_) * gr.array().square()).matrix();
      MatrixX<T> update =
          ((m / bc1).array() / ((v / bc2).array().sqrt() + eps_)).matrix();
      if (wd_ != T(0)) update += wd_ * w;
      w -= lr * update;
    }
  }

  std::string name() const override { return "adam"; }

 private:
  void ensure_state(const ParamStore<T>& store, const std::vector<TrainableSlice>& slices) {
    if (m_.size() == slices.size()) return;
    m_.clear();
    v_.clear();
    for (const auto& s : slices) {
      Index rows = s.row_end - s.row_begin;
      Index cols = store.at(s.param_id).w.cols();
      m_.push_back(MatrixX<T>::Zero(rows, cols));
      v_.push_back(MatrixX<T>::Zero(rows, cols));
    }
  }

  T b1_, b2_, eps_, wd_;
  long t_ = 0;
  std::vector<MatrixX<T>> m_, v_;
};

// Layer-wise adaptive moments: the Adam direction is rescaled per slice by
// the trust ratio ||w|| / ||update||.
template <typename T>
class Lamb final : public Optimizer<T> {
 public:
  Lamb(T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-6), T weight_decay = T(0))
      : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(ParamStore<T>& store, const Grads<T>& g, const std::vector<TrainableSlice>& slices,
            T lr) override {
    ensure_state(store, slices);
    ++t_;
    const T bc1 = T(1) - std::pow(b1_, T(t_));
    const T bc2 = T(1) - std::pow(b2_, T(t_));
    for (size_t i = 0; i < slices.size(); ++i) {
      const auto& s = slices[i];
      if (s.row_end <= s.row_begin) continue;
      auto w = store.at(s.param_id).w.middleRows(s.row_begin, s.row_end - s.row_begin);
      auto gr = g.at(s.param_id).middleRows(s.row_begin, s.row_end - s.row_begin);
      auto& m = m_[i];
      auto& v = v_[i];
      m = b1_ * m + (T(1) - b1_) * gr;
      v = (b2_ * v.array() + (T(1) - b2_) * gr.array().square()).matrix();
      MatrixX<T> update =
          ((m / bc1).array() / ((v / bc2).array().sqrt() + eps_)).matrix();
      if (wd_ != T(0)) update += wd_ * w;
      T wn = w.norm();
      T un = update.norm();
      T trust = (wn > T(0) && un > T(0)) ? wn / un : T(1);
      w -= lr * trust * update;
    }
  }

  std::string name() const override { return "lamb"; }

 private:
  void ensure_state(const ParamStore<T>& store, const std::vector<TrainableSlice>& slices) {
    if (m_.size() == slices.size()) return;
    m_.clear();
    v_.clear();
    for (const auto& s : slices) {
      Index rows = s.row_end - s.row_begin;
      Index cols = store.at(s.param_id).w.cols();
      m_.push_back(MatrixX<T>::Zero(rows, cols));
      v_.push_back(MatrixX<T>::Zero(rows, cols));
    }
  }

  T b1_, b2_, eps_, wd_;
  long t_ = 0;
  std::vector<MatrixX<T>> m_, v_;
};

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(const std::string& name, T weight_decay) {
  if (name == "lamb") return std::make_unique<Lamb<T>>(T(0.9), T(0.999), T(1e-6), weight_decay);
  if (name == "adam") return std::make_unique<Adam<T>>(T(0.9), T(0.999), T(1e-8), weight_decay);
  fail("config", "unknown optimizer: " + name);
}

}  // namespace ctxseg
