#pragma once

#include "ctxseg/common.hpp"

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace ctxseg {

// One binary segmentation task in the collective table.
struct TaskDescriptor {
  int task_id = -1;
  std::string name;
  std::string source_dataset;  // first dataset that declared it
  std::string definition_note;
};

struct ModalityDescriptor {
  int modality_id = -1;
  std::string name;
};

// Declared form of a dataset, before global task ids exist.
struct DatasetClass {
  std::string name;
  int label_value = 0;  // foreground value in the annotation volumes
};

struct SampleRef {
  std::string image_path;
  std::string label_path;
};

struct DatasetConfig {
  std::string key;
  std::string modality_name;
  std::vector<DatasetClass> classes;
  std::vector<SampleRef> manifest;
};

// Classes in two datasets that denote the same definition share one task id.
struct SharedTaskRule {
  std::string dataset_a;
  std::string dataset_b;
  std::string class_name;
};

// Built form: classes resolved to global task ids.
struct DatasetDescriptor {
  std::string key;
  int modality_id = -1;
  std::vector<int> task_ids;             // declaration order (ascending label value)
  std::map<int, int> label_value_map;    // annotation label value -> task id
  std::vector<SampleRef> sample_manifest;
};

class CollectiveRegistry {
 public:
  std::map<std::string, DatasetDescriptor> datasets;
  std::vector<TaskDescriptor> tasks;
  std::vector<ModalityDescriptor> modalities;
  std::vector<SharedTaskRule> shared_task_rules;

  int task_count() const { return static_cast<int>(tasks.size()); }
  int modality_count() const { return static_cast<int>(modalities.size()); }

  const DatasetDescriptor& dataset(const std::string& key) const;
  bool has_dataset(const std::string& key) const { return datasets.count(key) > 0; }
  int find_task(const std::string& dataset_key, const std::string& class_name) const;

  // Stable content hash used to tie checkpoints to a task-id assignment.
  std::uint64_t content_hash() const;

  nlohmann::json to_json() const;
  static CollectiveRegistry from_json(const nlohmann::json& j);
};

// Assigns global task and modality ids. Datasets keep declaration order,
// classes are taken in ascending label value; rule-merged classes share ids.
CollectiveRegistry build_collective(const std::vector<DatasetConfig>& descriptors,
                                    const std::vector<SharedTaskRule>& shared_task_rules);

// Appends new datasets to an existing registry without disturbing any
// previously assigned id. New tasks get ids |T|, |T|+1, ...
CollectiveRegistry extend_collective(const CollectiveRegistry& base,
                                     const std::vector<DatasetConfig>& new_descriptors,
                                     const std::vector<SharedTaskRule>& new_rules);

struct Oracle {
  std::vector<int> task_ids;
  int modality_id = -1;
};

Oracle resolve_oracle(const CollectiveRegistry& registry, const std::string& dataset_key);

// Registry config file: {"datasets":[...], "shared_task_rules":[...]}.
// Manifests are either explicit pairs or image/label globs matched in
// sorted order. Relative paths resolve against the config file directory.
std::vector<DatasetConfig> load_dataset_configs(const std::string& config_path,
                                                std::vector<SharedTaskRule>* rules_out);

CollectiveRegistry load_registry(const std::string& config_path);

}  // namespace ctxseg
