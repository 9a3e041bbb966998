#include "ctxseg/registry.hpp"

#include "ctxseg/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

namespace fs = std::filesystem;
using nlohmann::json;

namespace ctxseg {

const DatasetDescriptor& CollectiveRegistry::dataset(const std::string& key) const {
  auto it = datasets.find(key);
  if (it == datasets.end()) fail("registry", "unknown dataset key: " + key);
  return it->second;
}

int CollectiveRegistry::find_task(const std::string& dataset_key,
                                  const std::string& class_name) const {
  const auto& ds = dataset(dataset_key);
  for (int tid : ds.task_ids) {
    if (tasks[static_cast<size_t>(tid)].name == class_name) return tid;
  }
  return -1;
}

std::uint64_t CollectiveRegistry::content_hash() const {
  std::uint64_t h = 0x243f6a8885a308d3ull;
  auto mix_str = [&h](const std::string& s) {
    for (unsigned char c : s) h = mix64(h ^ c);
  };
  for (const auto& t : tasks) {
    h = mix64(h ^ static_cast<std::uint64_t>(t.task_id));
    mix_str(t.name);
    mix_str(t.source_dataset);
  }
  for (const auto& m : modalities) {
    h = mix64(h ^ static_cast<std::uint64_t>(m.modality_id));
    mix_str(m.name);
  }
  for (const auto& [key, ds] : datasets) {
    mix_str(key);
    h = mix64(h ^ static_cast<std::uint64_t>(ds.modality_id));
    for (int tid : ds.task_ids) h = mix64(h ^ static_cast<std::uint64_t>(tid));
    for (const auto& [lv, tid] : ds.label_value_map)
      h = mix64(h ^ (static_cast<std::uint64_t>(lv) << 20) ^ static_cast<std::uint64_t>(tid));
  }
  return h;
}

namespace {

void validate_configs(const std::vector<DatasetConfig>& descriptors) {
  std::set<std::string> keys;
  for (const auto& d : descriptors) {
    require(!d.key.empty(), "registry", "dataset with empty key");
    require(keys.insert(d.key).second, "registry", "duplicate dataset key: " + d.key);
    require(!d.modality_name.empty(), "registry", d.key + ": empty modality name");
    require(!d.classes.empty(), "registry", d.key + ": dataset declares no classes");
    std::set<int> values;
    std::set<std::string> names;
    for (const auto& c : d.classes) {
      require(c.label_value > 0, "registry",
              d.key + ": class " + c.name + " has non-positive label value");
      require(values.insert(c.label_value).second, "registry",
              d.key + ": duplicate label value " + std::to_string(c.label_value));
      require(names.insert(c.name).second, "registry",
              d.key + ": duplicate class name " + c.name);
    }
  }
}

struct ClassNode {
  int dataset_index;
  int class_index;  // into sorted-by-label-value order
};

}  // namespace

CollectiveRegistry build_collective(const std::vector<DatasetConfig>& descriptors,
                                    const std::vector<SharedTaskRule>& shared_task_rules) {
  validate_configs(descriptors);

  std::map<std::string, int> dataset_index;
  for (size_t i = 0; i < descriptors.size(); ++i)
    dataset_index[descriptors[i].key] = static_cast<int>(i);

  // Classes per dataset in ascending label value: this fixes id assignment order.
  std::vector<std::vector<DatasetClass>> ordered(descriptors.size());
  for (size_t i = 0; i < descriptors.size(); ++i) {
    ordered[i] = descriptors[i].classes;
    std::sort(ordered[i].begin(), ordered[i].end(),
              [](const DatasetClass& a, const DatasetClass& b) {
                return a.label_value < b.label_value;
              });
  }

  // Union-find over (dataset, class) nodes; shared rules merge across datasets.
  std::vector<int> uf;
  std::vector<std::pair<int, int>> node_of;  // flat node -> (dataset, class)
  std::vector<std::vector<int>> node_index(descriptors.size());
  for (size_t i = 0; i < descriptors.size(); ++i) {
    node_index[i].resize(ordered[i].size());
    for (size_t c = 0; c < ordered[i].size(); ++c) {
      node_index[i][c] = static_cast<int>(uf.size());
      uf.push_back(static_cast<int>(uf.size()));
      node_of.emplace_back(static_cast<int>(i), static_cast<int>(c));
    }
  }
  std::function<int(int)> find = [&](int x) {
    while (uf[x] != x) x = uf[x] = uf[uf[x]];
    return x;
  };
  auto locate = [&](const std::string& key, const std::string& cls) -> int {
    auto it = dataset_index.find(key);
    require(it != dataset_index.end(), "registry", "shared rule references unknown dataset " + key);
    const auto& classes = ordered[static_cast<size_t>(it->second)];
    for (size_t c = 0; c < classes.size(); ++c)
      if (classes[c].name == cls) return node_index[static_cast<size_t>(it->second)][c];
    fail("registry", "shared rule references unknown class " + cls + " in dataset " + key);
  };
  for (const auto& r : shared_task_rules) {
    int a = find(locate(r.dataset_a, r.class_name));
    int b = find(locate(r.dataset_b, r.class_name));
    if (a != b) uf[std::max(a, b)] = std::min(a, b);
  }

  CollectiveRegistry reg;
  reg.shared_task_rules = shared_task_rules;

  std::map<std::string, int> modality_ids;
  std::vector<int> root_to_task(uf.size(), -1);

  for (size_t i = 0; i < descriptors.size(); ++i) {
    const auto& cfg = descriptors[i];
    auto mit = modality_ids.find(cfg.modality_name);
    int mid;
    if (mit == modality_ids.end()) {
      mid = static_cast<int>(reg.modalities.size());
      modality_ids[cfg.modality_name] = mid;
      reg.modalities.push_back({mid, cfg.modality_name});
    } else {
      mid = mit->second;
    }

    DatasetDescriptor ds;
    ds.key = cfg.key;
    ds.modality_id = mid;
    ds.sample_manifest = cfg.manifest;
    // ids are handed out in ascending label value
    for (size_t c = 0; c < ordered[i].size(); ++c) {
      int root = find(node_index[i][c]);
      int& tid = root_to_task[static_cast<size_t>(root)];
      if (tid < 0) {
        tid = static_cast<int>(reg.tasks.size());
        TaskDescriptor td;
        td.task_id = tid;
        td.name = ordered[i][c].name;
        td.source_dataset = cfg.key;
        reg.tasks.push_back(td);
      } else {
        auto& td = reg.tasks[static_cast<size_t>(tid)];
        if (!td.definition_note.empty()) td.definition_note += ", ";
        td.definition_note += "shared with " + cfg.key;
      }
      ds.label_value_map[ordered[i][c].label_value] = tid;
    }
    // the oracle keeps the declared class order
    for (const auto& cls : cfg.classes)
      ds.task_ids.push_back(ds.label_value_map.at(cls.label_value));
    reg.datasets[cfg.key] = std::move(ds);
  }

  // Post: ids are contiguous by construction; keep the check as a guard.
  std::set<int> all;
  for (const auto& [k, d] : reg.datasets) all.insert(d.task_ids.begin(), d.task_ids.end());
  require(static_cast<int>(all.size()) == reg.task_count() &&
              (all.empty() || (*all.begin() == 0 && *all.rbegin() == reg.task_count() - 1)),
          "internal", "task id assignment is not contiguous");
  return reg;
}

CollectiveRegistry extend_collective(const CollectiveRegistry& base,
                                     const std::vector<DatasetConfig>& new_descriptors,
                                     const std::vector<SharedTaskRule>& new_rules) {
  // Rebuild from scratch with the original declaration order preserved, then
  // verify the base assignment did not move.
  std::vector<DatasetConfig> all_cfg;
  std::vector<std::string> base_order;
  for (const auto& t : base.tasks) {
    if (std::find(base_order.begin(), base_order.end(), t.source_dataset) == base_order.end())
      base_order.push_back(t.source_dataset);
  }
  // Recover per-dataset configs from the built registry.
  std::vector<std::pair<std::string, const DatasetDescriptor*>> ds_sorted;
  for (const auto& [k, d] : base.datasets) ds_sorted.emplace_back(k, &d);
  // Declaration order: order of first task id, datasets without new tasks after.
  std::sort(ds_sorted.begin(), ds_sorted.end(), [&](const auto& a, const auto& b) {
    int ia = a.second->task_ids.empty() ? 1 << 30 : a.second->task_ids.front();
    int ib = b.second->task_ids.empty() ? 1 << 30 : b.second->task_ids.front();
    if (ia != ib) return ia < ib;
    return a.first < b.first;
  });
  for (const auto& [k, d] : ds_sorted) {
    DatasetConfig cfg;
    cfg.key = k;
    cfg.modality_name = base.modalities[static_cast<size_t>(d->modality_id)].name;
    // recover the declared class order from task_ids, not the sorted map
    for (int tid : d->task_ids) {
      int lv = -1;
      for (const auto& [value, t] : d->label_value_map)
        if (t == tid) lv = value;
      require(lv > 0, "internal", "task id without a label value in " + k);
      cfg.classes.push_back({base.tasks[static_cast<size_t>(tid)].name, lv});
    }
    cfg.manifest = d->sample_manifest;
    all_cfg.push_back(std::move(cfg));
  }
  for (const auto& d : new_descriptors) {
    require(!base.has_dataset(d.key), "registry",
            "extend: dataset key already registered: " + d.key);
    all_cfg.push_back(d);
  }
  std::vector<SharedTaskRule> all_rules = base.shared_task_rules;
  all_rules.insert(all_rules.end(), new_rules.begin(), new_rules.end());

  CollectiveRegistry merged = build_collective(all_cfg, all_rules);
  for (const auto& [k, d] : base.datasets) {
    const auto& nd = merged.dataset(k);
    require(nd.task_ids == d.task_ids && nd.modality_id == d.modality_id, "registry",
            "extend: new rules would reassign ids of existing dataset " + k);
  }
  require(merged.task_count() >= base.task_count(), "internal", "extend shrank the task table");
  return merged;
}

Oracle resolve_oracle(const CollectiveRegistry& registry, const std::string& dataset_key) {
  const auto& ds = registry.dataset(dataset_key);
  return Oracle{ds.task_ids, ds.modality_id};
}

// ---------------------------------------------------------------------------
// JSON forms

json CollectiveRegistry::to_json() const {
  json j;
  j["version"] = 1;
  j["tasks"] = json::array();
  for (const auto& t : tasks)
    j["tasks"].push_back({{"task_id", t.task_id},
                          {"name", t.name},
                          {"source_dataset", t.source_dataset},
                          {"definition_note", t.definition_note}});
  j["modalities"] = json::array();
  for (const auto& m : modalities)
    j["modalities"].push_back({{"modality_id", m.modality_id}, {"name", m.name}});
  j["datasets"] = json::array();
  for (const auto& [key, d] : datasets) {
    json ds;
    ds["key"] = key;
    ds["modality_id"] = d.modality_id;
    ds["task_ids"] = d.task_ids;
    ds["label_value_map"] = json::object();
    for (const auto& [lv, tid] : d.label_value_map)
      ds["label_value_map"][std::to_string(lv)] = tid;
    ds["manifest"] = json::array();
    for (const auto& s : d.sample_manifest)
      ds["manifest"].push_back({{"image", s.image_path}, {"label", s.label_path}});
    j["datasets"].push_back(std::move(ds));
  }
  j["shared_task_rules"] = json::array();
  for (const auto& r : shared_task_rules)
    j["shared_task_rules"].push_back({r.dataset_a, r.dataset_b, r.class_name});
  j["content_hash"] = content_hash();
  return j;
}

CollectiveRegistry CollectiveRegistry::from_json(const json& j) {
  require(j.value("version", 0) == 1, "registry", "unsupported registry snapshot version");
  CollectiveRegistry reg;
  for (const auto& t : j.at("tasks")) {
    TaskDescriptor td;
    td.task_id = t.at("task_id").get<int>();
    td.name = t.at("name").get<std::string>();
    td.source_dataset = t.value("source_dataset", "");
    td.definition_note = t.value("definition_note", "");
    reg.tasks.push_back(std::move(td));
  }
  for (const auto& m : j.at("modalities"))
    reg.modalities.push_back({m.at("modality_id").get<int>(), m.at("name").get<std::string>()});
  for (const auto& d : j.at("datasets")) {
    DatasetDescriptor ds;
    ds.key = d.at("key").get<std::string>();
    ds.modality_id = d.at("modality_id").get<int>();
    ds.task_ids = d.at("task_ids").get<std::vector<int>>();
    for (const auto& [k, v] : d.at("label_value_map").items())
      ds.label_value_map[std::stoi(k)] = v.get<int>();
    if (d.contains("manifest"))
      for (const auto& s : d.at("manifest"))
        ds.sample_manifest.push_back(
            {s.at("image").get<std::string>(), s.at("label").get<std::string>()});
    reg.datasets[ds.key] = std::move(ds);
  }
  if (j.contains("shared_task_rules"))
    for (const auto& r : j.at("shared_task_rules"))
      reg.shared_task_rules.push_back(
          {r.at(0).get<std::string>(), r.at(1).get<std::string>(), r.at(2).get<std::string>()});
  return reg;
}

namespace {

std::vector<SampleRef> resolve_manifest(const json& ds, const fs::path& base_dir) {
  std::vector<SampleRef> out;
  auto resolve = [&](const std::string& p) {
    fs::path fp(p);
    return fp.is_absolute() ? fp.string() : (base_dir / fp).lexically_normal().string();
  };
  if (ds.contains("manifest")) {
    for (const auto& s : ds.at("manifest")) {
      if (s.is_array())
        out.push_back({resolve(s.at(0).get<std::string>()), resolve(s.at(1).get<std::string>())});
      else
        out.push_back({resolve(s.at("image").get<std::string>()),
                       resolve(s.at("label").get<std::string>())});
    }
    return out;
  }
  if (ds.contains("images_glob")) {
    // Minimal glob: a directory plus a '*' filename pattern, matched sorted.
    auto expand = [&](const std::string& pattern) {
      fs::path pat = fs::path(resolve(pattern));
      fs::path dir = pat.parent_path();
      std::string fname = pat.filename().string();
      auto star = fname.find('*');
      require(star != std::string::npos, "config", "glob pattern needs a '*': " + pattern);
      std::string prefix = fname.substr(0, star);
      std::string suffix = fname.substr(star + 1);
      std::vector<std::string> hits;
      if (fs::exists(dir))
        for (const auto& e : fs::directory_iterator(dir)) {
          std::string f = e.path().filename().string();
          if (f.size() >= prefix.size() + suffix.size() && f.rfind(prefix, 0) == 0 &&
              f.compare(f.size() - suffix.size(), suffix.size(), suffix) == 0)
            hits.push_back(e.path().string());
        }
      std::sort(hits.begin(), hits.end());
      return hits;
    };
    auto images = expand(ds.at("images_glob").get<std::string>());
    auto labels = expand(ds.at("labels_glob").get<std::string>());
    require(images.size() == labels.size(), "config",
            "images_glob and labels_glob matched different counts");
    for (size_t i = 0; i < images.size(); ++i) out.push_back({images[i], labels[i]});
  }
  return out;
}

}  // namespace

std::vector<DatasetConfig> load_dataset_configs(const std::string& config_path,
                                                std::vector<SharedTaskRule>* rules_out) {
  std::ifstream in(config_path);
  require(in.good(), "io", "cannot open registry config: " + config_path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail("config", std::string("registry config parse error: ") + e.what());
  }
  fs::path base = fs::path(config_path).parent_path();

  std::vector<DatasetConfig> configs;
  require(j.contains("datasets"), "config", "registry config missing 'datasets'");
  for (const auto& ds : j.at("datasets")) {
    DatasetConfig cfg;
    cfg.key = ds.at("key").get<std::string>();
    cfg.modality_name = ds.at("modality").get<std::string>();
    for (const auto& c : ds.at("classes"))
      cfg.classes.push_back(
          {c.at("name").get<std::string>(), c.at("label_value").get<int>()});
    cfg.manifest = resolve_manifest(ds, base);
    configs.push_back(std::move(cfg));
  }
  if (rules_out) {
    rules_out->clear();
    if (j.contains("shared_task_rules"))
      for (const auto& r : j.at("shared_task_rules"))
        rules_out->push_back(
            {r.at(0).get<std::string>(), r.at(1).get<std::string>(), r.at(2).get<std::string>()});
  }
  return configs;
}

CollectiveRegistry load_registry(const std::string& config_path) {
  std::vector<SharedTaskRule> rules;
  auto configs = load_dataset_configs(config_path, &rules);
  return build_collective(configs, rules);
}

}  // namespace ctxseg
