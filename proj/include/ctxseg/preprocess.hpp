#pragma once

#include "ctxseg/registry.hpp"
#include "ctxseg/rng.hpp"
#include "ctxseg/volume.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ctxseg {

// Brings a volume to the canonical axis order; no-op if already canonical.
Volume reorient(const Volume& v);

// Resamples to the target spacing. Output size per axis is
// round(in_size * in_spacing / target), minimum 1. Images are trilinear,
// labels nearest-neighbor. Voxel centers sit at index*spacing with a shared
// origin, so spacing-equal input is returned grid-identically.
Volume resample(const Volume& v, const Vector3d& target_spacing_mm);

// Per-modality clipping policy applied before z-scoring.
struct NormalizationPolicy {
  enum class Mode { window, percentile } mode = Mode::window;
  double window_lo = -990.0, window_hi = 500.0;  // window mode
  double pct_lo = 2.0, pct_hi = 98.0;            // percentile mode

  static NormalizationPolicy ct() { return {}; }
  static NormalizationPolicy mr() {
    NormalizationPolicy p;
    p.mode = Mode::percentile;
    return p;
  }
  // "CT*" -> window, "MR*" -> percentile (case-insensitive); errors otherwise.
  static NormalizationPolicy for_modality(const std::string& modality_name);
};

// Clip per policy, then z-score to zero mean / unit std. Constant volumes
// come back all-zero with *constant_flag set instead of erroring.
Volume normalize_intensity(const Volume& v, const NormalizationPolicy& policy,
                           bool* constant_flag = nullptr);
Volume normalize_intensity(const Volume& v, const std::string& modality_name,
                           bool* constant_flag = nullptr);

// Linear-interpolated percentile of the sorted sample (q in [0,100]).
double percentile(std::vector<float> values, double q);

struct AugmentConfig {
  double p_rotate = 0.2;
  double max_rotate_deg = 30.0;
  double p_scale = 0.2;
  double scale_lo = 0.85, scale_hi = 1.15;
  double p_brightness = 0.15;
  double brightness_range = 0.1;
  double p_contrast = 0.15;
  double contrast_lo = 0.9, contrast_hi = 1.1;
  double p_gamma = 0.15;
  double gamma_lo = 0.8, gamma_hi = 1.2;

  static AugmentConfig none() {
    AugmentConfig a;
    a.p_rotate = a.p_scale = a.p_brightness = a.p_contrast = a.p_gamma = 0.0;
    return a;
  }
};

struct PatchPair {
  Shape3 patch_size{0, 0, 0};
  std::vector<float> image;                  // patch_size voxels
  std::vector<std::vector<uint8_t>> labels;  // one binary grid per task, oracle order
  std::vector<uint8_t> annotated;            // per-task supervision flag
};

// Spatial jitter (rotation/scale), intensity jitter, then a random crop.
// Both grids see the same transform; labels stay nearest-neighbor. A fixed
// seed makes this a pure function. crop_offset overrides the random corner.
PatchPair augment_and_crop(const Volume& image, const Volume& label,
                           const std::vector<int>& task_ids,
                           const std::map<int, int>& label_value_map, const Shape3& patch_size,
                           const AugmentConfig& cfg, Rng& rng,
                           std::optional<Shape3> crop_offset = std::nullopt);

// reorient -> resample -> normalize, the fixed pipeline order.
Volume preprocess_image(const Volume& v, const Vector3d& target_spacing,
                        const NormalizationPolicy& policy, bool* constant_flag = nullptr);
Volume preprocess_label(const Volume& v, const Vector3d& target_spacing);

// ---------------------------------------------------------------------------
// Preprocessed cache: raw volumes plus a manifest with a train/eval split.

struct CachedSample {
  std::string image_path;
  std::string label_path;
  bool train_split = true;
};

struct CachedDataset {
  std::string key;
  std::vector<CachedSample> samples;
  std::vector<int> train_indices() const;
  std::vector<int> eval_indices() const;
};

class PreprocessedStore {
 public:
  std::map<std::string, CachedDataset> datasets;
  CollectiveRegistry registry;

  const CachedDataset& dataset(const std::string& key) const;
  Volume load_image(const std::string& key, int index) const;
  Volume load_label(const std::string& key, int index) const;
  int total_train_samples() const;

  // Restricts the store to some datasets (registry snapshot is kept whole).
  PreprocessedStore subset_datasets(const std::vector<std::string>& keys) const;
  // Marks only the given sample indices of one dataset as the train split.
  PreprocessedStore with_train_subset(const std::string& key,
                                      const std::vector<int>& train_samples) const;

  void save_manifest(const std::string& cache_dir) const;
  static PreprocessedStore load(const std::string& cache_dir);
};

struct PreprocessOptions {
  Vector3d target_spacing{1.5, 1.5, 1.5};
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
};

// Runs the pipeline over every registered sample and writes the cache.
PreprocessedStore run_preprocess(const CollectiveRegistry& registry, const std::string& cache_dir,
                                 const PreprocessOptions& options);

}  // namespace ctxseg
