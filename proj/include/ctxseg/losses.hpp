#pragma once

#include "ctxseg/common.hpp"

#include <cmath>
#include <vector>

namespace ctxseg {

inline constexpr double kDiceEps = 1e-5;

// Soft Dice averaged over annotated channels:
// per channel 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps).
template <typename T>
T dice_loss(const MatrixX<T>& probs, const MatrixX<T>& targets,
            const std::vector<uint8_t>& annotated) {
  require(probs.rows() == targets.rows() && probs.cols() == targets.cols(), "shape",
          "dice_loss shape mismatch");
  require(static_cast<Index>(annotated.size()) == probs.rows(), "shape",
          "annotated mask length mismatch");
  T sum = T(0);
  int n_annot = 0;
  for (Index c = 0; c < probs.rows(); ++c) {
    if (!annotated[static_cast<size_t>(c)]) continue;
    ++n_annot;
    T inter = (probs.row(c).array() * targets.row(c).array()).sum();
    T denom = probs.row(c).sum() + targets.row(c).sum() + T(kDiceEps);
    sum += T(1) - (T(2) * inter + T(kDiceEps)) / denom;
  }
  require(n_annot > 0, "loss", "dice_loss with no annotated channels");
  return sum / T(n_annot);
}

// Mean binary cross-entropy over annotated channels and voxels.
template <typename T>
T bce_loss(const MatrixX<T>& probs, const MatrixX<T>& targets,
           const std::vector<uint8_t>& annotated) {
  require(probs.rows() == targets.rows() && probs.cols() == targets.cols(), "shape",
          "bce_loss shape mismatch");
  require(static_cast<Index>(annotated.size()) == probs.rows(), "shape",
          "annotated mask length mismatch");
  const T tiny = std::numeric_limits<T>::epsilon();
  T sum = T(0);
  std::int64_t count = 0;
  for (Index c = 0; c < probs.rows(); ++c) {
    if (!annotated[static_cast<size_t>(c)]) continue;
    for (Index i = 0; i < probs.cols(); ++i) {
      T p = probs(c, i);
      T y = targets(c, i);
      sum -= y * std::log(std::max(p, tiny)) + (T(1) - y) * std::log(std::max(T(1) - p, tiny));
    }
    count += probs.cols();
  }
  require(count > 0, "loss", "bce_loss with no annotated channels");
  return sum / T(count);
}

template <typename T>
T total_loss(const MatrixX<T>& probs, const MatrixX<T>& targets,
             const std::vector<uint8_t>& annotated, T lambda) {
  T bce = bce_loss(probs, targets, annotated);
  if (lambda == T(0)) return bce;
  return bce + lambda * dice_loss(probs, targets, annotated);
}

// d(total_loss)/d(logits); rows of unannotated channels are zero.
template <typename T>
MatrixX<T> total_loss_grad_logits(const MatrixX<T>& probs, const MatrixX<T>& targets,
                                  const std::vector<uint8_t>& annotated, T lambda) {
  int n_annot = 0;
  for (uint8_t a : annotated) n_annot += a ? 1 : 0;
  require(n_annot > 0, "loss", "loss gradient with no annotated channels");
  const T voxels = T(probs.cols());
  MatrixX<T> g = MatrixX<T>::Zero(probs.rows(), probs.cols());
  for (Index c = 0; c < probs.rows(); ++c) {
    if (!annotated[static_cast<size_t>(c)]) continue;
    // bce: (p - y) / (A * V)
    g.row(c) = (probs.row(c) - targets.row(c)) / (T(n_annot) * voxels);
    if (lambda != T(0)) {
      T inter = (probs.row(c).array() * targets.row(c).array()).sum();
      T num = T(2) * inter + T(kDiceEps);
      T den = probs.row(c).sum() + targets.row(c).sum() + T(kDiceEps);
      // dDice/dp = -(2*y*den - num) / den^2, averaged over annotated channels;
      // chain through the sigmoid: dp/dz = p(1-p).
      auto p = probs.row(c).array();
      auto y = targets.row(c).array();
      g.row(c) += (lambda / T(n_annot)) *
                  ((num - T(2) * y * den) / (den * den) * p * (T(1) - p)).matrix();
    }
  }
  return g;
}

}  // namespace ctxseg
