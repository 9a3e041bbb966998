#pragma once

#include "ctxseg/io.hpp"
#include "ctxseg/model.hpp"
#include "ctxseg/preprocess.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace ctxseg {

// Overlap 2|A^B| / (|A|+|B|); both-empty is defined as 1.
inline double dice_score(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
  require(a.size() == b.size(), "shape", "dice_score mask size mismatch");
  std::int64_t inter = 0, ca = 0, cb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ca += a[i] ? 1 : 0;
    cb += b[i] ? 1 : 0;
    inter += (a[i] && b[i]) ? 1 : 0;
  }
  if (ca + cb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(ca + cb);
}

// Tile starts covering [0, size-patch] with stride patch*(1-overlap); the
// final window is clamped so every voxel is covered.
inline std::vector<int> window_starts(int size, int patch, double overlap) {
  require(size >= patch, "eval", "volume smaller than the window");
  require(overlap >= 0.0 && overlap < 1.0, "eval", "overlap must lie in [0, 1)");
  if (size == patch) return {0};
  int stride = std::max(1, static_cast<int>(std::lround(patch * (1.0 - overlap))));
  std::vector<int> starts;
  for (int s = 0; s + patch < size; s += stride) starts.push_back(s);
  starts.push_back(size - patch);
  for (size_t i = 1; i < starts.size(); ++i)
    if (starts[i] == starts[i - 1]) {
      starts.erase(starts.begin() + static_cast<long>(i));
      --i;
    }
  return starts;
}

// Full-volume probabilities by Gaussian-center-weighted window averaging.
// The volume is symmetrically zero-padded up to the patch size if needed.
template <typename T>
MatrixX<T> sliding_window_infer(const SegModel<T>& model,
                                typename SegModel<T>::Workspace& ws, const Volume& image,
                                const std::vector<int>& task_ids, int modality_id,
                                const Shape3& patch, double overlap) {
  require(image.kind == VolumeKind::image, "eval", "inference expects an image volume");
  Shape3 padded_dims;
  Shape3 off{0, 0, 0};
  bool padded = false;
  for (int a = 0; a < 3; ++a) {
    padded_dims[static_cast<size_t>(a)] =
        std::max(image.dims[static_cast<size_t>(a)], patch[static_cast<size_t>(a)]);
    if (padded_dims[static_cast<size_t>(a)] != image.dims[static_cast<size_t>(a)]) padded = true;
    off[static_cast<size_t>(a)] =
        (padded_dims[static_cast<size_t>(a)] - image.dims[static_cast<size_t>(a)]) / 2;
  }
  std::vector<float> grid(static_cast<size_t>(voxels_of(padded_dims)), 0.f);
  for (int i = 0; i < image.dims[0]; ++i)
    for (int j = 0; j < image.dims[1]; ++j)
      for (int k = 0; k < image.dims[2]; ++k)
        grid[static_cast<size_t>(
            grid_index(padded_dims, i + off[0], j + off[1], k + off[2]))] = image.at(i, j, k);

  // Separable Gaussian center weights, sigma = patch/8.
  std::array<std::vector<T>, 3> axis_w;
  for (int a = 0; a < 3; ++a) {
    int p = patch[static_cast<size_t>(a)];
    axis_w[static_cast<size_t>(a)].resize(static_cast<size_t>(p));
    double sigma = p / 8.0;
    double c = (p - 1) / 2.0;
    for (int i = 0; i < p; ++i)
      axis_w[static_cast<size_t>(a)][static_cast<size_t>(i)] =
          static_cast<T>(std::exp(-0.5 * ((i - c) / sigma) * ((i - c) / sigma)));
  }

  const Index n_total = voxels_of(padded_dims);
  const Index t = static_cast<Index>(task_ids.size());
  MatrixX<T> num = MatrixX<T>::Zero(t, n_total);
  VectorX<T> den = VectorX<T>::Zero(n_total);

  auto starts0 = window_starts(padded_dims[0], patch[0], overlap);
  auto starts1 = window_starts(padded_dims[1], patch[1], overlap);
  auto starts2 = window_starts(padded_dims[2], patch[2], overlap);
  MatrixX<T> window(1, voxels_of(patch));
  for (int s0 : starts0)
    for (int s1 : starts1)
      for (int s2 : starts2) {
        Index p = 0;
        for (int i = 0; i < patch[0]; ++i)
          for (int j = 0; j < patch[1]; ++j)
            for (int k = 0; k < patch[2]; ++k, ++p)
              window(0, p) = static_cast<T>(grid[static_cast<size_t>(
                  grid_index(padded_dims, s0 + i, s1 + j, s2 + k))]);
        model.forward(window, patch, task_ids, modality_id, ws);
        p = 0;
        for (int i = 0; i < patch[0]; ++i) {
          T wi = axis_w[0][static_cast<size_t>(i)];
          for (int j = 0; j < patch[1]; ++j) {
            T wij = wi * axis_w[1][static_cast<size_t>(j)];
            for (int k = 0; k < patch[2]; ++k, ++p) {
              T w = wij * axis_w[2][static_cast<size_t>(k)];
              Index gi = grid_index(padded_dims, s0 + i, s1 + j, s2 + k);
              num.col(gi) += w * ws.probs.col(p);
              den(gi) += w;
            }
          }
        }
      }

  for (Index i = 0; i < n_total; ++i) num.col(i) /= den(i);
  if (!padded) return num;
  MatrixX<T> out(t, voxels_of(image.dims));
  Index p = 0;
  for (int i = 0; i < image.dims[0]; ++i)
    for (int j = 0; j < image.dims[1]; ++j)
      for (int k = 0; k < image.dims[2]; ++k, ++p)
        out.col(p) = num.col(grid_index(padded_dims, i + off[0], j + off[1], k + off[2]));
  return out;
}

struct EvalTaskRow {
  int task_id = -1;
  std::string task_name;
  double mean_dice = 0.0;
};

struct EvalReport {
  std::string dataset_key;
  std::vector<EvalTaskRow> per_task;
  std::vector<std::vector<double>> per_sample;  // [sample][task]
  double mean_dice = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["dataset"] = dataset_key;
    j["mean_dice"] = mean_dice;
    j["per_task"] = nlohmann::json::array();
    for (const auto& r : per_task)
      j["per_task"].push_back(
          {{"task_id", r.task_id}, {"task", r.task_name}, {"mean_dice", r.mean_dice}});
    j["per_sample"] = per_sample;
    return j;
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    require(out.good(), "io", "cannot write " + path);
    out << "dataset,task_id,task,mean_dice\n";
    for (const auto& r : per_task)
      out << dataset_key << "," << r.task_id << "," << r.task_name << "," << r.mean_dice << "\n";
    out << dataset_key << ",,mean," << mean_dice << "\n";
  }
};

enum class EvalSplit { train, eval, all };

inline EvalSplit eval_split_from_string(const std::string& s) {
  if (s == "train") return EvalSplit::train;
  if (s == "eval") return EvalSplit::eval;
  if (s == "all") return EvalSplit::all;
  fail("config", "unknown split: " + s);
}

// Per-task Dice on a registered dataset using its own oracle. task_subset
// empty means all of the dataset's tasks.
template <typename T>
EvalReport evaluate(const SegModel<T>& model, const PreprocessedStore& store,
                    const std::string& dataset_key, std::vector<int> task_subset,
                    EvalSplit split, const Shape3& patch, double overlap) {
  const auto& ds = store.registry.dataset(dataset_key);
  if (task_subset.empty()) task_subset = ds.task_ids;
  for (int t : task_subset)
    require(std::find(ds.task_ids.begin(), ds.task_ids.end(), t) != ds.task_ids.end(), "eval",
            "task " + std::to_string(t) + " is not annotated in dataset " + dataset_key);

  std::map<int, int> value_of_task;
  for (const auto& [lv, tid] : ds.label_value_map) value_of_task[tid] = lv;

  const auto& cached = store.dataset(dataset_key);
  std::vector<int> indices;
  for (size_t i = 0; i < cached.samples.size(); ++i) {
    bool tr = cached.samples[i].train_split;
    if (split == EvalSplit::all || (split == EvalSplit::train && tr) ||
        (split == EvalSplit::eval && !tr))
      indices.push_back(static_cast<int>(i));
  }
  require(!indices.empty(), "eval", "no samples in the requested split of " + dataset_key);

  EvalReport report;
  report.dataset_key = dataset_key;
  typename SegModel<T>::Workspace ws;
  std::vector<double> task_sum(task_subset.size(), 0.0);

  for (int idx : indices) {
    Volume image = store.load_image(dataset_key, idx);
    Volume label = store.load_label(dataset_key, idx);
    MatrixX<T> probs =
        sliding_window_infer(model, ws, image, task_subset, ds.modality_id, patch, overlap);

    std::vector<double> row;
    const size_t n = static_cast<size_t>(voxels_of(image.dims));
    for (size_t c = 0; c < task_subset.size(); ++c) {
      std::vector<uint8_t> pred(n), gt(n);
      int lv = value_of_task.at(task_subset[c]);
      for (size_t i = 0; i < n; ++i) {
        pred[i] = probs(static_cast<Index>(c), static_cast<Index>(i)) > T(0.5) ? 1 : 0;
        gt[i] = static_cast<int>(std::lround(label.values[i])) == lv ? 1 : 0;
      }
      double d = dice_score(pred, gt);
      task_sum[c] += d;
      row.push_back(d);
    }
    report.per_sample.push_back(std::move(row));
  }

  double total = 0.0;
  for (size_t c = 0; c < task_subset.size(); ++c) {
    EvalTaskRow r;
    r.task_id = task_subset[c];
    r.task_name = store.registry.tasks[static_cast<size_t>(task_subset[c])].name;
    r.mean_dice = task_sum[c] / static_cast<double>(indices.size());
    total += r.mean_dice;
    report.per_task.push_back(std::move(r));
  }
  report.mean_dice = total / static_cast<double>(task_subset.size());
  return report;
}

struct GeneralizeMapping {
  int source_task_id = -1;
  int target_label_value = 0;
};

// Zero-shot transfer of a trained model: infer on the target dataset with the
// source oracle restricted to the mapped tasks, score against target labels.
template <typename T>
EvalReport generalize(const SegModel<T>& model, const PreprocessedStore& store,
                      const std::string& source_key, const std::string& target_key,
                      const std::vector<GeneralizeMapping>& mapping, const Shape3& patch,
                      double overlap) {
  require(!mapping.empty(), "eval", "generalize needs a non-empty class mapping");
  const auto& src = store.registry.dataset(source_key);
  std::vector<int> task_ids;
  for (const auto& m : mapping) {
    require(std::find(src.task_ids.begin(), src.task_ids.end(), m.source_task_id) !=
                src.task_ids.end(),
            "eval", "mapping source task not in source dataset");
    task_ids.push_back(m.source_task_id);
  }

  const auto& cached = store.dataset(target_key);
  EvalReport report;
  report.dataset_key = target_key;
  typename SegModel<T>::Workspace ws;
  std::vector<double> task_sum(mapping.size(), 0.0);

  for (size_t idx = 0; idx < cached.samples.size(); ++idx) {
    Volume image = store.load_image(target_key, static_cast<int>(idx));
    Volume label = store.load_label(target_key, static_cast<int>(idx));
    MatrixX<T> probs =
        sliding_window_infer(model, ws, image, task_ids, src.modality_id, patch, overlap);
    std::vector<double> row;
    const size_t n = static_cast<size_t>(voxels_of(image.dims));
    for (size_t c = 0; c < mapping.size(); ++c) {
      std::vector<uint8_t> pred(n), gt(n);
      for (size_t i = 0; i < n; ++i) {
        pred[i] = probs(static_cast<Index>(c), static_cast<Index>(i)) > T(0.5) ? 1 : 0;
        gt[i] = static_cast<int>(std::lround(label.values[i])) == mapping[c].target_label_value
                    ? 1
                    : 0;
      }
      double d = dice_score(pred, gt);
      task_sum[c] += d;
      row.push_back(d);
    }
    report.per_sample.push_back(std::move(row));
  }

  double total = 0.0;
  for (size_t c = 0; c < mapping.size(); ++c) {
    EvalTaskRow r;
    r.task_id = mapping[c].source_task_id;
    r.task_name = store.registry.tasks[static_cast<size_t>(mapping[c].source_task_id)].name;
    r.mean_dice = task_sum[c] / static_cast<double>(cached.samples.size());
    total += r.mean_dice;
    report.per_task.push_back(std::move(r));
  }
  report.mean_dice = total / static_cast<double>(mapping.size());
  return report;
}

// Dot-product similarity between each task prototype and the decoder feature
// map, exported as per-task mid-slice PGM images (min-max scaled per task).
template <typename T>
std::vector<std::string> export_prototype_heatmaps(const SegModel<T>& model, const Volume& image,
                                                   const std::vector<int>& task_ids,
                                                   int modality_id,
                                                   const CollectiveRegistry& registry,
                                                   const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  typename SegModel<T>::Workspace ws;

  // Pad to the stage stride so the whole volume fits one forward pass.
  const int stride = 1 << model.config().backbone.n_stages;
  Shape3 dims;
  for (int a = 0; a < 3; ++a)
    dims[static_cast<size_t>(a)] =
        ((image.dims[static_cast<size_t>(a)] + stride - 1) / stride) * stride;
  MatrixX<T> grid = MatrixX<T>::Zero(1, voxels_of(dims));
  for (int i = 0; i < image.dims[0]; ++i)
    for (int j = 0; j < image.dims[1]; ++j)
      for (int k = 0; k < image.dims[2]; ++k)
        grid(0, grid_index(dims, i, j, k)) = static_cast<T>(image.at(i, j, k));

  model.forward(grid, dims, task_ids, modality_id, ws);
  MatrixX<T> heat = ws.protos * ws.feats;  // t x n dot products

  std::vector<std::string> files;
  const int mid = dims[0] / 2;
  for (size_t c = 0; c < task_ids.size(); ++c) {
    T lo = heat.row(static_cast<Index>(c)).minCoeff();
    T hi = heat.row(static_cast<Index>(c)).maxCoeff();
    T range = hi > lo ? hi - lo : T(1);
    std::vector<unsigned char> px(static_cast<size_t>(dims[1]) * dims[2]);
    for (int j = 0; j < dims[1]; ++j)
      for (int k = 0; k < dims[2]; ++k) {
        T v = (heat(static_cast<Index>(c), grid_index(dims, mid, j, k)) - lo) / range;
        px[static_cast<size_t>(j * dims[2] + k)] =
            static_cast<unsigned char>(std::lround(static_cast<double>(v) * 255.0));
      }
    const auto& name = registry.tasks[static_cast<size_t>(task_ids[c])].name;
    std::string path =
        (fs::path(out_dir) / ("prototype_" + std::to_string(task_ids[c]) + "_" + name + ".pgm"))
            .string();
    save_pgm(path, px, dims[1], dims[2]);
    files.push_back(std::move(path));
  }
  return files;
}

}  // namespace ctxseg
