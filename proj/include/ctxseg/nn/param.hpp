#pragma once

#include "ctxseg/common.hpp"

#include <deque>
#include <string>
#include <vector>

namespace ctxseg {

// One learnable tensor. Vectors are stored as n x 1. Ids index into the
// owning store and into gradient buffers.
template <typename T>
struct Param {
  int id = -1;
  std::string name;
  MatrixX<T> w;

  Index size() const { return w.size(); }
};

// Owns every parameter of a network with stable names and addresses.
template <typename T>
class ParamStore {
 public:
  Param<T>* add(const std::string& name, Index rows, Index cols) {
    for (const auto& p : params_)
      require(p.name != name, "internal", "duplicate parameter name: " + name);
    Param<T> p;
    p.id = static_cast<int>(params_.size());
    p.name = name;
    p.w = MatrixX<T>::Zero(rows, cols);
    params_.push_back(std::move(p));
    return &params_.back();
  }

  Param<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  const Param<T>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  int count() const { return static_cast<int>(params_.size()); }
  Param<T>& at(int id) { return params_[static_cast<size_t>(id)]; }
  const Param<T>& at(int id) const { return params_[static_cast<size_t>(id)]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.w.size();
    return n;
  }

  // Copies values by name from another store (shapes must match).
  template <typename U>
  void copy_values_from(const ParamStore<U>& other) {
    for (auto& p : params_) {
      const Param<U>* q = other.find(p.name);
      require(q != nullptr, "checkpoint", "missing parameter: " + p.name);
      require(q->w.rows() == p.w.rows() && q->w.cols() == p.w.cols(), "checkpoint",
              "shape mismatch for parameter " + p.name);
      p.w = q->w.template cast<T>();
    }
  }

 private:
  std::deque<Param<T>> params_;  // deque: stable addresses for layer members
};

// Per-parameter gradient buffers, shaped like the store.
template <typename T>
class Grads {
 public:
  Grads() = default;
  explicit Grads(const ParamStore<T>& store) { reset(store); }

  void reset(const ParamStore<T>& store) {
    g_.clear();
    g_.reserve(static_cast<size_t>(store.count()));
    for (const auto& p : store) g_.push_back(MatrixX<T>::Zero(p.w.rows(), p.w.cols()));
  }

  void set_zero() {
    for (auto& m : g_) m.setZero();
  }

  MatrixX<T>& of(const Param<T>* p) { return g_[static_cast<size_t>(p->id)]; }
  const MatrixX<T>& of(const Param<T>* p) const { return g_[static_cast<size_t>(p->id)]; }
  MatrixX<T>& at(int id) { return g_[static_cast<size_t>(id)]; }
  const MatrixX<T>& at(int id) const { return g_[static_cast<size_t>(id)]; }
  int count() const { return static_cast<int>(g_.size()); }

  void add(const Grads& other, T scale = T(1)) {
    for (size_t i = 0; i < g_.size(); ++i) g_[i] += scale * other.g_[i];
  }
  void scale(T s) {
    for (auto& m : g_) m *= s;
  }

 private:
  std::vector<MatrixX<T>> g_;
};

inline std::int64_t count_parameters_impl(std::int64_t n) { return n; }

}  // namespace ctxseg
