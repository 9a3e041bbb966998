#include "ctxseg/synthgen.hpp"

#include "ctxseg/io.hpp"
#include "ctxseg/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

namespace fs = std::filesystem;
using nlohmann::json;

namespace ctxseg {

std::vector<std::string> region_names(const SynthSpec& spec) {
  std::vector<std::string> names;
  for (const auto& o : spec.objects) {
    if (o.lesion) {
      names.push_back(o.name + "_shell");
      names.push_back(o.lesion->name);
    } else {
      names.push_back(o.name);
    }
  }
  return names;
}

namespace {

// Region ids (1-based) covered by an annotation name: the whole object, its
// shell, or its lesion.
std::vector<int> regions_for_annotation(const SynthSpec& spec, const std::string& name) {
  auto regions = region_names(spec);
  std::vector<int> out;
  for (size_t r = 0; r < regions.size(); ++r)
    if (regions[r] == name) out.push_back(static_cast<int>(r) + 1);
  if (!out.empty()) return out;
  // Whole object with a lesion: union of shell and lesion regions.
  for (const auto& o : spec.objects) {
    if (o.name == name && o.lesion) {
      for (size_t r = 0; r < regions.size(); ++r)
        if (regions[r] == o.name + "_shell" || regions[r] == o.lesion->name)
          out.push_back(static_cast<int>(r) + 1);
      return out;
    }
  }
  fail("synth", "annotation '" + name + "' matches no rendered object or region");
}

}  // namespace

void SynthSpec::validate() const {
  require(!objects.empty(), "synth", "empty object list");
  require(!datasets.empty(), "synth", "no datasets in spec");
  for (int a = 0; a < 3; ++a) {
    require(grid[static_cast<size_t>(a)] >= 8, "synth", "grid too small");
    require(patch_size[static_cast<size_t>(a)] <= grid[static_cast<size_t>(a)], "synth",
            "patch larger than grid");
  }
  std::set<std::string> names;
  for (const auto& o : objects) {
    require(names.insert(o.name).second, "synth", "duplicate object name " + o.name);
    require(o.size_hi >= o.size_lo && o.size_lo > 0, "synth", o.name + ": bad size range");
    if (o.lesion) require(names.insert(o.lesion->name).second, "synth", "duplicate lesion name");
  }
  auto regions = region_names(*this);
  std::set<std::string> keys;
  for (const auto& d : datasets) {
    require(keys.insert(d.key).second, "synth", "duplicate dataset key " + d.key);
    require(d.samples >= 1, "synth", d.key + ": needs at least one sample");
    require(!d.annotates.empty(), "synth", d.key + ": annotates nothing");
    std::set<int> covered;
    for (const auto& a : d.annotates)
      for (int r : regions_for_annotation(*this, a))
        require(covered.insert(r).second, "synth",
                d.key + ": annotations overlap on region id " + std::to_string(r));
  }
  if (datasets.size() >= 2)
    require(!conflict_pairs.empty(), "synth",
            "collections with >= 2 datasets must declare a conflict pair");
  for (const auto& cp : conflict_pairs) {
    const SynthObject* obj = nullptr;
    for (const auto& o : objects)
      if (o.name == cp.object) obj = &o;
    require(obj && obj->lesion, "synth", "conflict pair object must have a lesion");
    auto has = [&](const std::string& key, const std::string& ann) {
      for (const auto& d : datasets)
        if (d.key == key)
          return std::find(d.annotates.begin(), d.annotates.end(), ann) != d.annotates.end();
      fail("synth", "conflict pair references unknown dataset " + key);
    };
    require(has(cp.whole_in, cp.object), "synth",
            cp.whole_in + " does not annotate the whole object " + cp.object);
    require(has(cp.parts_in, cp.object + "_shell") && has(cp.parts_in, obj->lesion->name),
            "synth", cp.parts_in + " does not annotate both parts of " + cp.object);
  }
}

float mr_remap(float ct_value) {
  return 900.f / (1.f + std::exp(-(ct_value + 100.f) / 180.f));
}

RenderedSample render_sample(const SynthSpec& spec, const std::string& dataset_key,
                             int sample_index) {
  int ds_index = -1;
  for (size_t i = 0; i < spec.datasets.size(); ++i)
    if (spec.datasets[i].key == dataset_key) ds_index = static_cast<int>(i);
  require(ds_index >= 0, "synth", "unknown dataset key " + dataset_key);
  const auto& ds = spec.datasets[static_cast<size_t>(ds_index)];

  Rng rng = make_rng(derive_seed(spec.seed, static_cast<std::uint64_t>(ds_index),
                                 static_cast<std::uint64_t>(sample_index)));

  RenderedSample out;
  out.tissue_ids = Volume(spec.grid, VolumeKind::label);
  out.image = Volume(spec.grid, VolumeKind::image);
  out.tissue_ids.spacing_mm = out.image.spacing_mm =
      Vector3d(spec.spacing_mm, spec.spacing_mm, spec.spacing_mm);

  std::vector<float> region_ct;  // per region id - 1
  int next_region = 1;

  for (const auto& o : spec.objects) {
    Vector3d c = o.center;
    for (int a = 0; a < 3; ++a) c[a] += uniform<double>(rng, -o.jitter, o.jitter);
    double s0 = uniform<double>(rng, o.size_lo, o.size_hi);
    double s1 = o.kind == SynthObject::Kind::box ? uniform<double>(rng, o.size_lo, o.size_hi) : s0;
    double s2 = o.kind == SynthObject::Kind::box ? uniform<double>(rng, o.size_lo, o.size_hi) : s0;
    double length = o.kind == SynthObject::Kind::tube
                        ? uniform<double>(rng, o.length_lo, o.length_hi)
                        : 0.0;

    int body_region = next_region++;
    region_ct.push_back(o.ct_value);
    int lesion_region = -1;
    Vector3d lc = c;
    double lr = 0.0;
    if (o.lesion) {
      lesion_region = next_region++;
      region_ct.push_back(o.lesion->ct_value);
      double frac = uniform<double>(rng, o.lesion->radius_frac_lo, o.lesion->radius_frac_hi);
      lr = frac * s0;
      double max_off = std::max(0.0, (s0 - lr) * 0.5);
      for (int a = 0; a < 3; ++a) lc[a] += uniform<double>(rng, -max_off, max_off);
    }

    auto inside = [&](double i, double j, double k) {
      double d0 = i - c[0], d1 = j - c[1], d2 = k - c[2];
      switch (o.kind) {
        case SynthObject::Kind::sphere:
          return d0 * d0 + d1 * d1 + d2 * d2 <= s0 * s0;
        case SynthObject::Kind::box:
          return std::abs(d0) <= s0 && std::abs(d1) <= s1 && std::abs(d2) <= s2;
        case SynthObject::Kind::tube: {
          double along = (o.tube_axis == 0 ? d0 : o.tube_axis == 1 ? d1 : d2);
          double p0 = o.tube_axis == 0 ? d1 : d0;
          double p1 = o.tube_axis == 2 ? d1 : d2;
          return p0 * p0 + p1 * p1 <= s0 * s0 && std::abs(along) <= length / 2.0;
        }
      }
      return false;
    };

    for (int i = 0; i < spec.grid[0]; ++i)
      for (int j = 0; j < spec.grid[1]; ++j)
        for (int k = 0; k < spec.grid[2]; ++k) {
          if (!inside(i, j, k)) continue;
          int region = body_region;
          if (lesion_region > 0) {
            double d0 = i - lc[0], d1 = j - lc[1], d2 = k - lc[2];
            if (d0 * d0 + d1 * d1 + d2 * d2 <= lr * lr) region = lesion_region;
          }
          out.tissue_ids.at(i, j, k) = static_cast<float>(region);
        }
  }

  // Intensities: fixed mean per tissue plus noise; MR applies a monotone
  // remap and multiplicative speckle on the same geometry.
  const bool mr = ds.modality.rfind("MR", 0) == 0 || ds.modality.rfind("mr", 0) == 0;
  for (int i = 0; i < spec.grid[0]; ++i)
    for (int j = 0; j < spec.grid[1]; ++j)
      for (int k = 0; k < spec.grid[2]; ++k) {
        int region = static_cast<int>(out.tissue_ids.at(i, j, k));
        float mean = region == 0 ? spec.background_ct_value
                                 : region_ct[static_cast<size_t>(region - 1)];
        float noise = gaussian<float>(rng);
        if (mr) {
          float v = mr_remap(mean);
          out.image.at(i, j, k) = v * (1.f + spec.mr_speckle_sigma * noise);
        } else {
          out.image.at(i, j, k) = mean + spec.ct_noise_sigma * noise;
        }
      }
  return out;
}

std::vector<DatasetConfig> generate_collection(const SynthSpec& spec, const std::string& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);

  std::vector<DatasetConfig> configs;
  for (const auto& ds : spec.datasets) {
    fs::create_directories(fs::path(out_dir) / ds.key / "images");
    fs::create_directories(fs::path(out_dir) / ds.key / "labels");
    fs::create_directories(fs::path(out_dir) / ds.key / "full_labels");

    DatasetConfig cfg;
    cfg.key = ds.key;
    cfg.modality_name = ds.modality;
    for (size_t a = 0; a < ds.annotates.size(); ++a)
      cfg.classes.push_back({ds.annotates[a], static_cast<int>(a) + 1});

    for (int s = 0; s < ds.samples; ++s) {
      RenderedSample r = render_sample(spec, ds.key, s);

      Volume label(spec.grid, VolumeKind::label);
      label.spacing_mm = r.image.spacing_mm;
      for (size_t a = 0; a < ds.annotates.size(); ++a) {
        auto regions = regions_for_annotation(spec, ds.annotates[a]);
        for (std::int64_t v = 0; v < label.size(); ++v) {
          int region = static_cast<int>(r.tissue_ids.values[static_cast<size_t>(v)]);
          if (std::find(regions.begin(), regions.end(), region) != regions.end())
            label.values[static_cast<size_t>(v)] = static_cast<float>(a + 1);
        }
      }

      char name[32];
      std::snprintf(name, sizeof(name), "s%04d.raw", s);
      std::string img_rel = ds.key + "/images/" + name;
      std::string lab_rel = ds.key + "/labels/" + name;
      save_raw_volume(r.image, (fs::path(out_dir) / img_rel).string());
      save_raw_volume(label, (fs::path(out_dir) / lab_rel).string());
      save_raw_volume(r.tissue_ids, (fs::path(out_dir) / ds.key / "full_labels" / name).string());
      cfg.manifest.push_back({img_rel, lab_rel});
    }
    configs.push_back(std::move(cfg));
  }

  json reg;
  reg["datasets"] = json::array();
  for (const auto& cfg : configs) {
    json ds;
    ds["key"] = cfg.key;
    ds["modality"] = cfg.modality_name;
    ds["classes"] = json::array();
    for (const auto& c : cfg.classes)
      ds["classes"].push_back({{"name", c.name}, {"label_value", c.label_value}});
    ds["manifest"] = json::array();
    for (const auto& s : cfg.manifest) ds["manifest"].push_back({{"image", s.image_path},
                                                                 {"label", s.label_path}});
    reg["datasets"].push_back(std::move(ds));
  }
  reg["shared_task_rules"] = json::array();
  for (const auto& r : spec.shared_task_rules)
    reg["shared_task_rules"].push_back({r.dataset_a, r.dataset_b, r.class_name});
  std::ofstream rf(fs::path(out_dir) / "registry.json");
  require(rf.good(), "io", "cannot write registry.json in " + out_dir);
  rf << reg.dump(2) << "\n";

  std::ofstream sf(fs::path(out_dir) / "synth_spec.json");
  sf << spec.to_json().dump(2) << "\n";

  // Make manifest paths absolute for direct use of the returned configs.
  for (auto& cfg : configs)
    for (auto& s : cfg.manifest) {
      s.image_path = (fs::path(out_dir) / s.image_path).string();
      s.label_path = (fs::path(out_dir) / s.label_path).string();
    }
  return configs;
}

// ---------------------------------------------------------------------------
// JSON forms

json SynthSpec::to_json() const {
  json j;
  j["grid"] = {grid[0], grid[1], grid[2]};
  j["spacing_mm"] = spacing_mm;
  j["seed"] = seed;
  j["background_ct_value"] = background_ct_value;
  j["ct_noise_sigma"] = ct_noise_sigma;
  j["mr_speckle_sigma"] = mr_speckle_sigma;
  j["patch_size"] = {patch_size[0], patch_size[1], patch_size[2]};
  j["objects"] = json::array();
  for (const auto& o : objects) {
    json jo;
    jo["name"] = o.name;
    jo["kind"] = o.kind == SynthObject::Kind::sphere ? "sphere"
                 : o.kind == SynthObject::Kind::box  ? "box"
                                                     : "tube";
    jo["center"] = {o.center[0], o.center[1], o.center[2]};
    jo["jitter"] = o.jitter;
    jo["size"] = {o.size_lo, o.size_hi};
    if (o.kind == SynthObject::Kind::tube) {
      jo["length"] = {o.length_lo, o.length_hi};
      jo["axis"] = o.tube_axis;
    }
    jo["ct_value"] = o.ct_value;
    if (o.lesion)
      jo["lesion"] = {{"name", o.lesion->name},
                      {"radius_frac", {o.lesion->radius_frac_lo, o.lesion->radius_frac_hi}},
                      {"ct_value", o.lesion->ct_value}};
    j["objects"].push_back(std::move(jo));
  }
  j["datasets"] = json::array();
  for (const auto& d : datasets)
    j["datasets"].push_back({{"key", d.key},
                             {"modality", d.modality},
                             {"samples", d.samples},
                             {"annotates", d.annotates}});
  j["conflict_pairs"] = json::array();
  for (const auto& c : conflict_pairs)
    j["conflict_pairs"].push_back(
        {{"object", c.object}, {"whole_in", c.whole_in}, {"parts_in", c.parts_in}});
  j["shared_task_rules"] = json::array();
  for (const auto& r : shared_task_rules)
    j["shared_task_rules"].push_back({r.dataset_a, r.dataset_b, r.class_name});
  return j;
}

SynthSpec SynthSpec::from_json(const json& j) {
  SynthSpec s;
  if (j.contains("grid")) {
    auto g = j.at("grid");
    s.grid = {g.at(0).get<int>(), g.at(1).get<int>(), g.at(2).get<int>()};
  }
  s.spacing_mm = j.value("spacing_mm", s.spacing_mm);
  s.seed = j.value("seed", s.seed);
  s.background_ct_value = j.value("background_ct_value", s.background_ct_value);
  s.ct_noise_sigma = j.value("ct_noise_sigma", s.ct_noise_sigma);
  s.mr_speckle_sigma = j.value("mr_speckle_sigma", s.mr_speckle_sigma);
  if (j.contains("patch_size")) {
    auto p = j.at("patch_size");
    s.patch_size = {p.at(0).get<int>(), p.at(1).get<int>(), p.at(2).get<int>()};
  }
  for (const auto& jo : j.at("objects")) {
    SynthObject o;
    o.name = jo.at("name").get<std::string>();
    std::string kind = jo.at("kind").get<std::string>();
    o.kind = kind == "sphere" ? SynthObject::Kind::sphere
             : kind == "box"  ? SynthObject::Kind::box
             : kind == "tube" ? SynthObject::Kind::tube
                              : throw Error("synth", "unknown object kind " + kind);
    auto c = jo.at("center");
    o.center = Vector3d(c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>());
    o.jitter = jo.value("jitter", 0.0);
    o.size_lo = jo.at("size").at(0).get<double>();
    o.size_hi = jo.at("size").at(1).get<double>();
    if (o.kind == SynthObject::Kind::tube) {
      o.length_lo = jo.at("length").at(0).get<double>();
      o.length_hi = jo.at("length").at(1).get<double>();
      o.tube_axis = jo.value("axis", 0);
    }
    o.ct_value = jo.at("ct_value").get<float>();
    if (jo.contains("lesion")) {
      SynthObject::Lesion l;
      l.name = jo.at("lesion").at("name").get<std::string>();
      l.radius_frac_lo = jo.at("lesion").at("radius_frac").at(0).get<double>();
      l.radius_frac_hi = jo.at("lesion").at("radius_frac").at(1).get<double>();
      l.ct_value = jo.at("lesion").at("ct_value").get<float>();
      o.lesion = l;
    }
    s.objects.push_back(std::move(o));
  }
  for (const auto& jd : j.at("datasets")) {
    SynthDataset d;
    d.key = jd.at("key").get<std::string>();
    d.modality = jd.at("modality").get<std::string>();
    d.samples = jd.value("samples", 4);
    d.annotates = jd.at("annotates").get<std::vector<std::string>>();
    s.datasets.push_back(std::move(d));
  }
  if (j.contains("conflict_pairs"))
    for (const auto& jc : j.at("conflict_pairs"))
      s.conflict_pairs.push_back({jc.at("object").get<std::string>(),
                                  jc.at("whole_in").get<std::string>(),
                                  jc.at("parts_in").get<std::string>()});
  if (j.contains("shared_task_rules"))
    for (const auto& r : j.at("shared_task_rules"))
      s.shared_task_rules.push_back(
          {r.at(0).get<std::string>(), r.at(1).get<std::string>(), r.at(2).get<std::string>()});
  return s;
}

SynthSpec SynthSpec::benchmark(std::uint64_t seed, int samples_per_dataset) {
  SynthSpec s;
  s.seed = seed;

  s.ct_noise_sigma = 20.f;
  s.mr_speckle_sigma = 0.05f;

  SynthObject ball;
  ball.kind = SynthObject::Kind::sphere;
  ball.name = "ball";
  ball.center = Vector3d(15, 15, 15);
  ball.jitter = 4.0;
  ball.size_lo = 8.0;
  ball.size_hi = 11.0;
  ball.ct_value = 120.f;
  ball.lesion = SynthObject::Lesion{"core", 0.45, 0.62, 400.f};
  s.objects.push_back(ball);

  SynthObject slab;
  slab.kind = SynthObject::Kind::box;
  slab.name = "slab";
  slab.center = Vector3d(34, 34, 13);
  slab.jitter = 3.0;
  slab.size_lo = 4.0;
  slab.size_hi = 7.0;
  slab.ct_value = -150.f;
  s.objects.push_back(slab);

  SynthObject rod;
  rod.kind = SynthObject::Kind::tube;
  rod.name = "rod";
  rod.center = Vector3d(12, 36, 36);
  rod.jitter = 3.0;
  rod.size_lo = 3.0;
  rod.size_hi = 4.5;
  rod.length_lo = 16.0;
  rod.length_hi = 24.0;
  rod.tube_axis = 1;
  rod.ct_value = 260.f;
  s.objects.push_back(rod);

  s.datasets.push_back({"ct_whole", "CT", samples_per_dataset, {"ball", "slab"}});
  s.datasets.push_back({"ct_parts", "CT", samples_per_dataset, {"ball_shell", "core"}});
  s.datasets.push_back({"mr_rod", "MR", samples_per_dataset, {"rod", "slab"}});
  s.conflict_pairs.push_back({"ball", "ct_whole", "ct_parts"});
  s.shared_task_rules.push_back({"ct_whole", "mr_rod", "slab"});
  return s;
}

}  // namespace ctxseg
