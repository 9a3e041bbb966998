#pragma once

#include "ctxseg/registry.hpp"
#include "ctxseg/volume.hpp"

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace ctxseg {

// A rendered object. Objects with a lesion contribute two regions to the
// hidden full label: "<name>_shell" (object minus lesion) and the lesion.
struct SynthObject {
  enum class Kind { sphere, box, tube };
  Kind kind = Kind::sphere;
  std::string name;
  Vector3d center{0, 0, 0};  // nominal center, voxel units
  double jitter = 0.0;       // per-axis uniform center jitter
  double size_lo = 0.0, size_hi = 0.0;  // radius (sphere/tube) or half-extent (box)
  double length_lo = 0.0, length_hi = 0.0;  // tube only
  int tube_axis = 0;                        // tube only
  float ct_value = 0.f;

  struct Lesion {
    std::string name;
    double radius_frac_lo = 0.3, radius_frac_hi = 0.5;
    float ct_value = 0.f;
  };
  std::optional<Lesion> lesion;
};

struct SynthDataset {
  std::string key;
  std::string modality;  // "CT" or "MR"
  int samples = 4;
  std::vector<std::string> annotates;  // region or whole-object names, label values 1..n
};

struct ConflictPair {
  std::string object;     // object with a lesion
  std::string whole_in;   // dataset annotating the whole object
  std::string parts_in;   // dataset annotating shell + lesion separately
};

struct SynthSpec {
  Shape3 grid{48, 48, 48};
  double spacing_mm = 1.5;
  std::uint64_t seed = 0;
  float background_ct_value = -600.f;
  float ct_noise_sigma = 25.f;
  float mr_speckle_sigma = 0.06f;
  Shape3 patch_size{32, 32, 32};
  std::vector<SynthObject> objects;
  std::vector<SynthDataset> datasets;
  std::vector<ConflictPair> conflict_pairs;
  std::vector<SharedTaskRule> shared_task_rules;

  void validate() const;
  static SynthSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  // The 3-dataset / 2-modality / 1-conflict-pair benchmark collection.
  static SynthSpec benchmark(std::uint64_t seed, int samples_per_dataset = 8);
};

// All region names in tissue-id order (full-label value = index + 1).
std::vector<std::string> region_names(const SynthSpec& spec);

// Geometry for one sample: the tissue-id grid (0 = background) and the
// clean CT-value image before noise/modality transform.
struct RenderedSample {
  Volume tissue_ids;  // label kind, values 1..R
  Volume image;       // image kind
};

RenderedSample render_sample(const SynthSpec& spec, const std::string& dataset_key,
                             int sample_index);

// Monotone CT->MR intensity remap used by MR-like datasets.
float mr_remap(float ct_value);

// Writes images, per-dataset labels, hidden full labels, and registry.json
// under out_dir. Returns the dataset configs ready for build_collective.
std::vector<DatasetConfig> generate_collection(const SynthSpec& spec, const std::string& out_dir);

}  // namespace ctxseg
