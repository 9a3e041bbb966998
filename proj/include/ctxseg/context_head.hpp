#pragma once

#include "ctxseg/nn/layers.hpp"

#include <vector>

namespace ctxseg {

// probs[t, i] = sigmoid(<prototype_t, feats[:, i]>). Tasks stay independent
// binary channels; nothing normalizes across the task axis.
template <typename T>
MatrixX<T> predict_probabilities(const MatrixX<T>& prototypes, const MatrixX<T>& feats) {
  require(prototypes.cols() == feats.rows(), "shape",
          "prototype width must equal the decoder channel width");
  MatrixX<T> logits = prototypes * feats;
  return logits.unaryExpr([](T z) { return T(1) / (T(1) + std::exp(-z)); });
}

// Aggregates per-scale task posteriors into final prototypes: concatenate a
// task's posterior token across scales, then a shared two-layer MLP.
template <typename T>
struct PrototypeHead {
  Linear<T> mlp1, mlp2;
  Activation<T> act;

  PrototypeHead() = default;
  PrototypeHead(ParamStore<T>& store, const std::string& prefix, Index concat_width,
                Index out_width, Act activation = Act::gelu)
      : mlp1(store, prefix + ".mlp1", concat_width, out_width),
        mlp2(store, prefix + ".mlp2", out_width, out_width) {
    act.kind = activation;
  }

  void init(Rng& rng) {
    mlp1.init_xavier(rng);
    mlp2.init_xavier(rng);
  }

  struct Cache {
    typename Linear<T>::Cache c1, c2;
    typename Activation<T>::Cache ca;
    std::vector<Index> scale_widths;
  };

  // posteriors_per_scale: token matrices whose first n_task rows are task
  // posteriors in oracle order (modality rows are dropped here).
  MatrixX<T> compute(const std::vector<const MatrixX<T>*>& posteriors_per_scale, int n_task,
                     Cache* c) const {
    require(!posteriors_per_scale.empty(), "shape", "prototype head needs posteriors");
    Index concat_width = 0;
    for (const auto* p : posteriors_per_scale) {
      require(p->rows() >= n_task, "shape",
              "scale posterior has fewer rows than the task count");
      concat_width += p->cols();
    }
    require(concat_width == mlp1.in_dim(), "shape", "posterior concat width mismatch");
    MatrixX<T> concat(n_task, concat_width);
    Index col = 0;
    if (c) c->scale_widths.clear();
    for (const auto* p : posteriors_per_scale) {
      concat.middleCols(col, p->cols()) = p->topRows(n_task);
      col += p->cols();
      if (c) c->scale_widths.push_back(p->cols());
    }
    Cache local;
    Cache* cc = c ? c : &local;
    return mlp2.forward(act.forward(mlp1.forward(concat, &cc->c1), &cc->ca), &cc->c2);
  }

  // Returns d loss / d (per-scale task posterior rows), split per scale.
  std::vector<MatrixX<T>> backward(const MatrixX<T>& g_protos, const Cache& c,
                                   Grads<T>& g) const {
    MatrixX<T> g_concat =
        mlp1.backward(act.backward(mlp2.backward(g_protos, c.c2, g), c.ca), c.c1, g);
    std::vector<MatrixX<T>> out;
    Index col = 0;
    for (Index w : c.scale_widths) {
      out.emplace_back(g_concat.middleCols(col, w));
      col += w;
    }
    return out;
  }
};

}  // namespace ctxseg
