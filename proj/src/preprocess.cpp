#include "ctxseg/preprocess.hpp"

#include "ctxseg/io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace fs = std::filesystem;
using nlohmann::json;

namespace ctxseg {

Volume reorient(const Volume& v) {
  require(v.orientation.valid(), "preprocess", "malformed orientation descriptor");
  if (v.orientation.is_canonical()) return v;

  const auto& perm = v.orientation.perm;
  const auto& flip = v.orientation.flip;
  Volume out;
  out.kind = v.kind;
  out.orientation = Orientation::canonical();
  for (int a = 0; a < 3; ++a) {
    out.dims[static_cast<size_t>(a)] = v.dims[static_cast<size_t>(perm[static_cast<size_t>(a)])];
    out.spacing_mm[a] = v.spacing_mm[perm[static_cast<size_t>(a)]];
  }
  out.values.resize(static_cast<size_t>(out.size()));

  std::array<int, 3> src{};
  for (int i = 0; i < out.dims[0]; ++i)
    for (int j = 0; j < out.dims[1]; ++j)
      for (int k = 0; k < out.dims[2]; ++k) {
        const std::array<int, 3> dst{i, j, k};
        for (int a = 0; a < 3; ++a) {
          int s = perm[static_cast<size_t>(a)];
          src[static_cast<size_t>(s)] =
              flip[static_cast<size_t>(a)] ? v.dims[static_cast<size_t>(s)] - 1 - dst[static_cast<size_t>(a)]
                                           : dst[static_cast<size_t>(a)];
        }
        out.at(i, j, k) = v.at(src[0], src[1], src[2]);
      }
  return out;
}

namespace {

float sample_trilinear(const Volume& v, double x0, double x1, double x2) {
  auto clampd = [](double x, double lo, double hi) { return std::min(std::max(x, lo), hi); };
  x0 = clampd(x0, 0.0, v.dims[0] - 1.0);
  x1 = clampd(x1, 0.0, v.dims[1] - 1.0);
  x2 = clampd(x2, 0.0, v.dims[2] - 1.0);
  int i0 = static_cast<int>(std::floor(x0)), j0 = static_cast<int>(std::floor(x1)),
      k0 = static_cast<int>(std::floor(x2));
  int i1 = std::min(i0 + 1, v.dims[0] - 1), j1 = std::min(j0 + 1, v.dims[1] - 1),
      k1 = std::min(k0 + 1, v.dims[2] - 1);
  double fi = x0 - i0, fj = x1 - j0, fk = x2 - k0;
  double c00 = v.at(i0, j0, k0) * (1 - fk) + v.at(i0, j0, k1) * fk;
  double c01 = v.at(i0, j1, k0) * (1 - fk) + v.at(i0, j1, k1) * fk;
  double c10 = v.at(i1, j0, k0) * (1 - fk) + v.at(i1, j0, k1) * fk;
  double c11 = v.at(i1, j1, k0) * (1 - fk) + v.at(i1, j1, k1) * fk;
  double c0 = c00 * (1 - fj) + c01 * fj;
  double c1 = c10 * (1 - fj) + c11 * fj;
  return static_cast<float>(c0 * (1 - fi) + c1 * fi);
}

float sample_nearest(const Volume& v, double x0, double x1, double x2) {
  int i = static_cast<int>(std::lround(x0));
  int j = static_cast<int>(std::lround(x1));
  int k = static_cast<int>(std::lround(x2));
  i = std::clamp(i, 0, v.dims[0] - 1);
  j = std::clamp(j, 0, v.dims[1] - 1);
  k = std::clamp(k, 0, v.dims[2] - 1);
  return v.at(i, j, k);
}

}  // namespace

Volume resample(const Volume& v, const Vector3d& target_spacing_mm) {
  require(v.orientation.is_canonical(), "preprocess", "resample expects canonical orientation");
  for (int a = 0; a < 3; ++a)
    require(target_spacing_mm[a] > 0, "preprocess", "non-positive target spacing");

  Shape3 out_dims;
  bool identity = true;
  for (int a = 0; a < 3; ++a) {
    double exact = v.dims[static_cast<size_t>(a)] * v.spacing_mm[a] / target_spacing_mm[a];
    out_dims[static_cast<size_t>(a)] = std::max(1, static_cast<int>(std::lround(exact)));
    if (std::abs(v.spacing_mm[a] - target_spacing_mm[a]) > 1e-12) identity = false;
  }
  if (identity) return v;

  Volume out(out_dims, v.kind);
  out.spacing_mm = target_spacing_mm;
  const bool nearest = v.kind == VolumeKind::label;
  double r0 = target_spacing_mm[0] / v.spacing_mm[0];
  double r1 = target_spacing_mm[1] / v.spacing_mm[1];
  double r2 = target_spacing_mm[2] / v.spacing_mm[2];
  for (int i = 0; i < out_dims[0]; ++i)
    for (int j = 0; j < out_dims[1]; ++j)
      for (int k = 0; k < out_dims[2]; ++k)
        out.at(i, j, k) = nearest ? sample_nearest(v, i * r0, j * r1, k * r2)
                                  : sample_trilinear(v, i * r0, j * r1, k * r2);
  return out;
}

NormalizationPolicy NormalizationPolicy::for_modality(const std::string& modality_name) {
  std::string up;
  for (char c : modality_name) up.push_back(static_cast<char>(std::toupper(c)));
  if (up.rfind("CT", 0) == 0) return ct();
  if (up.rfind("MR", 0) == 0) return mr();
  fail("preprocess", "no normalization policy for modality '" + modality_name +
                         "' (expected CT* or MR* name)");
}

double percentile(std::vector<float> values, double q) {
  require(!values.empty(), "preprocess", "percentile of empty sample");
  std::sort(values.begin(), values.end());
  double rank = q / 100.0 * (static_cast<double>(values.size()) - 1.0);
  size_t lo = static_cast<size_t>(std::floor(rank));
  size_t hi = std::min(lo + 1, values.size() - 1);
  double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Volume normalize_intensity(const Volume& v, const NormalizationPolicy& policy,
                           bool* constant_flag) {
  require(v.kind == VolumeKind::image, "preprocess", "normalize_intensity expects an image");
  if (constant_flag) *constant_flag = false;

  Volume out = v;
  double lo, hi;
  if (policy.mode == NormalizationPolicy::Mode::window) {
    lo = policy.window_lo;
    hi = policy.window_hi;
  } else {
    lo = percentile(v.values, policy.pct_lo);
    hi = percentile(v.values, policy.pct_hi);
  }
  for (auto& x : out.values)
    x = static_cast<float>(std::min(std::max(static_cast<double>(x), lo), hi));

  double mean = 0.0;
  for (float x : out.values) mean += x;
  mean /= static_cast<double>(out.values.size());
  double var = 0.0;
  for (float x : out.values) var += (x - mean) * (x - mean);
  var /= static_cast<double>(out.values.size());

  if (var <= 0.0) {
    for (auto& x : out.values) x = 0.f;
    if (constant_flag) *constant_flag = true;
    return out;
  }
  double inv_std = 1.0 / std::sqrt(var);
  for (auto& x : out.values) x = static_cast<float>((x - mean) * inv_std);
  return out;
}

Volume normalize_intensity(const Volume& v, const std::string& modality_name,
                           bool* constant_flag) {
  return normalize_intensity(v, NormalizationPolicy::for_modality(modality_name), constant_flag);
}

Volume preprocess_image(const Volume& v, const Vector3d& target_spacing,
                        const NormalizationPolicy& policy, bool* constant_flag) {
  return normalize_intensity(resample(reorient(v), target_spacing), policy, constant_flag);
}

Volume preprocess_label(const Volume& v, const Vector3d& target_spacing) {
  require(v.kind == VolumeKind::label, "preprocess", "preprocess_label expects a label volume");
  return resample(reorient(v), target_spacing);
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

struct Affine3 {
  // row-major 3x3 applied around the volume center
  double m[3][3];
};

Affine3 identity_affine() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

Affine3 matmul(const Affine3& a, const Affine3& b) {
  Affine3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += a.m[i][k] * b.m[k][j];
      c.m[i][j] = s;
    }
  return c;
}

// Rotation about grid axis `axis` (0=d,1=h,2=w) by `deg` degrees.
Affine3 rotation_about(int axis, double deg) {
  double r = deg * M_PI / 180.0, c = std::cos(r), s = std::sin(r);
  Affine3 a = identity_affine();
  int u = (axis + 1) % 3, v = (axis + 2) % 3;
  a.m[u][u] = c;
  a.m[u][v] = -s;
  a.m[v][u] = s;
  a.m[v][v] = c;
  return a;
}

Volume apply_affine(const Volume& v, const Affine3& inv, bool nearest) {
  Volume out(v.dims, v.kind);
  out.spacing_mm = v.spacing_mm;
  double c0 = (v.dims[0] - 1) / 2.0, c1 = (v.dims[1] - 1) / 2.0, c2 = (v.dims[2] - 1) / 2.0;
  for (int i = 0; i < v.dims[0]; ++i)
    for (int j = 0; j < v.dims[1]; ++j)
      for (int k = 0; k < v.dims[2]; ++k) {
        double d0 = i - c0, d1 = j - c1, d2 = k - c2;
        double s0 = inv.m[0][0] * d0 + inv.m[0][1] * d1 + inv.m[0][2] * d2 + c0;
        double s1 = inv.m[1][0] * d0 + inv.m[1][1] * d1 + inv.m[1][2] * d2 + c1;
        double s2 = inv.m[2][0] * d0 + inv.m[2][1] * d1 + inv.m[2][2] * d2 + c2;
        bool inside = s0 >= -0.5 && s0 <= v.dims[0] - 0.5 && s1 >= -0.5 &&
                      s1 <= v.dims[1] - 0.5 && s2 >= -0.5 && s2 <= v.dims[2] - 0.5;
        if (!inside) {
          out.at(i, j, k) = 0.f;
          continue;
        }
        out.at(i, j, k) =
            nearest ? sample_nearest(v, s0, s1, s2) : sample_trilinear(v, s0, s1, s2);
      }
  return out;
}

Volume pad_to(const Volume& v, const Shape3& min_dims) {
  Shape3 dims;
  bool needed = false;
  for (int a = 0; a < 3; ++a) {
    dims[static_cast<size_t>(a)] = std::max(v.dims[static_cast<size_t>(a)], min_dims[static_cast<size_t>(a)]);
    if (dims[static_cast<size_t>(a)] != v.dims[static_cast<size_t>(a)]) needed = true;
  }
  if (!needed) return v;
  Volume out(dims, v.kind);
  out.spacing_mm = v.spacing_mm;
  Shape3 off;
  for (int a = 0; a < 3; ++a)
    off[static_cast<size_t>(a)] = (dims[static_cast<size_t>(a)] - v.dims[static_cast<size_t>(a)]) / 2;
  for (int i = 0; i < v.dims[0]; ++i)
    for (int j = 0; j < v.dims[1]; ++j)
      for (int k = 0; k < v.dims[2]; ++k)
        out.at(i + off[0], j + off[1], k + off[2]) = v.at(i, j, k);
  return out;
}

}  // namespace

PatchPair augment_and_crop(const Volume& image, const Volume& label,
                           const std::vector<int>& task_ids,
                           const std::map<int, int>& label_value_map, const Shape3& patch_size,
                           const AugmentConfig& cfg, Rng& rng,
                           std::optional<Shape3> crop_offset) {
  require(image.same_grid(label), "preprocess", "image/label grids differ");
  require(image.kind == VolumeKind::image && label.kind == VolumeKind::label, "preprocess",
          "augment_and_crop kinds mismatch");

  // Fixed draw order; every branch consumes its gate draw so seeds stay aligned.
  bool do_rotate = uniform<double>(rng, 0.0, 1.0) < cfg.p_rotate;
  double ang[3] = {0, 0, 0};
  if (do_rotate)
    for (double& a : ang) a = uniform<double>(rng, -cfg.max_rotate_deg, cfg.max_rotate_deg);
  bool do_scale = uniform<double>(rng, 0.0, 1.0) < cfg.p_scale;
  double scale = do_scale ? uniform<double>(rng, cfg.scale_lo, cfg.scale_hi) : 1.0;
  bool do_brightness = uniform<double>(rng, 0.0, 1.0) < cfg.p_brightness;
  double brightness =
      do_brightness ? uniform<double>(rng, -cfg.brightness_range, cfg.brightness_range) : 0.0;
  bool do_contrast = uniform<double>(rng, 0.0, 1.0) < cfg.p_contrast;
  double contrast = do_contrast ? uniform<double>(rng, cfg.contrast_lo, cfg.contrast_hi) : 1.0;
  bool do_gamma = uniform<double>(rng, 0.0, 1.0) < cfg.p_gamma;
  double gamma = do_gamma ? uniform<double>(rng, cfg.gamma_lo, cfg.gamma_hi) : 1.0;

  Volume img = image;
  Volume lab = label;
  if (do_rotate || do_scale) {
    // Inverse map: undo scale, then the rotations in reverse order.
    Affine3 inv = identity_affine();
    for (int a = 0; a < 3; ++a) inv.m[a][a] = 1.0 / scale;
    Affine3 rot = matmul(rotation_about(0, -ang[0]),
                         matmul(rotation_about(1, -ang[1]), rotation_about(2, -ang[2])));
    inv = matmul(rot, inv);
    img = apply_affine(img, inv, false);
    lab = apply_affine(lab, inv, true);
  }
  if (do_brightness)
    for (auto& x : img.values) x += static_cast<float>(brightness);
  if (do_contrast)
    for (auto& x : img.values) x *= static_cast<float>(contrast);
  if (do_gamma) {
    auto [mn_it, mx_it] = std::minmax_element(img.values.begin(), img.values.end());
    double mn = *mn_it, mx = *mx_it;
    if (mx > mn) {
      double range = mx - mn;
      for (auto& x : img.values)
        x = static_cast<float>(std::pow((x - mn) / range, gamma) * range + mn);
    }
  }

  img = pad_to(img, patch_size);
  lab = pad_to(lab, patch_size);

  Shape3 off;
  for (int a = 0; a < 3; ++a) {
    int slack = img.dims[static_cast<size_t>(a)] - patch_size[static_cast<size_t>(a)];
    require(slack >= 0, "preprocess", "patch larger than padded volume");
    off[static_cast<size_t>(a)] = slack == 0 ? 0 : uniform_int(rng, 0, slack);
  }
  if (crop_offset) {
    for (int a = 0; a < 3; ++a)
      require((*crop_offset)[static_cast<size_t>(a)] >= 0 &&
                  (*crop_offset)[static_cast<size_t>(a)] + patch_size[static_cast<size_t>(a)] <=
                      img.dims[static_cast<size_t>(a)],
              "preprocess", "crop offset out of range");
    off = *crop_offset;
  }

  PatchPair pair;
  pair.patch_size = patch_size;
  pair.image.resize(static_cast<size_t>(voxels_of(patch_size)));
  pair.labels.assign(task_ids.size(),
                     std::vector<uint8_t>(static_cast<size_t>(voxels_of(patch_size)), 0));
  pair.annotated.assign(task_ids.size(), 1);

  std::map<int, int> task_channel;  // task id -> channel index
  for (size_t c = 0; c < task_ids.size(); ++c) task_channel[task_ids[c]] = static_cast<int>(c);

  size_t p = 0;
  for (int i = 0; i < patch_size[0]; ++i)
    for (int j = 0; j < patch_size[1]; ++j)
      for (int k = 0; k < patch_size[2]; ++k, ++p) {
        pair.image[p] = img.at(i + off[0], j + off[1], k + off[2]);
        float lv = lab.at(i + off[0], j + off[1], k + off[2]);
        int value = static_cast<int>(std::lround(lv));
        if (value == 0) continue;
        auto it = label_value_map.find(value);
        require(it != label_value_map.end(), "preprocess",
                "label value " + std::to_string(value) + " missing from label_value_map");
        auto ch = task_channel.find(it->second);
        if (ch != task_channel.end()) pair.labels[static_cast<size_t>(ch->second)][p] = 1;
      }
  return pair;
}

// ---------------------------------------------------------------------------
// Cache

std::vector<int> CachedDataset::train_indices() const {
  std::vector<int> out;
  for (size_t i = 0; i < samples.size(); ++i)
    if (samples[i].train_split) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> CachedDataset::eval_indices() const {
  std::vector<int> out;
  for (size_t i = 0; i < samples.size(); ++i)
    if (!samples[i].train_split) out.push_back(static_cast<int>(i));
  return out;
}

const CachedDataset& PreprocessedStore::dataset(const std::string& key) const {
  auto it = datasets.find(key);
  if (it == datasets.end()) fail("data", "dataset not in preprocessed cache: " + key);
  return it->second;
}

Volume PreprocessedStore::load_image(const std::string& key, int index) const {
  const auto& ds = dataset(key);
  require(index >= 0 && index < static_cast<int>(ds.samples.size()), "data",
          "sample index out of range");
  Volume v = load_raw_volume(ds.samples[static_cast<size_t>(index)].image_path);
  v.kind = VolumeKind::image;
  return v;
}

Volume PreprocessedStore::load_label(const std::string& key, int index) const {
  const auto& ds = dataset(key);
  require(index >= 0 && index < static_cast<int>(ds.samples.size()), "data",
          "sample index out of range");
  Volume v = load_raw_volume(ds.samples[static_cast<size_t>(index)].label_path);
  v.kind = VolumeKind::label;
  return v;
}

int PreprocessedStore::total_train_samples() const {
  int n = 0;
  for (const auto& [k, d] : datasets) n += static_cast<int>(d.train_indices().size());
  return n;
}

PreprocessedStore PreprocessedStore::subset_datasets(const std::vector<std::string>& keys) const {
  PreprocessedStore out;
  out.registry = registry;
  for (const auto& k : keys) out.datasets[k] = dataset(k);
  return out;
}

PreprocessedStore PreprocessedStore::with_train_subset(const std::string& key,
                                                       const std::vector<int>& train_samples) const {
  PreprocessedStore out = *this;
  auto& ds = out.datasets.at(key);
  for (auto& s : ds.samples) s.train_split = false;
  for (int i : train_samples) {
    require(i >= 0 && i < static_cast<int>(ds.samples.size()), "data",
            "train subset index out of range");
    ds.samples[static_cast<size_t>(i)].train_split = true;
  }
  return out;
}

void PreprocessedStore::save_manifest(const std::string& cache_dir) const {
  json j;
  j["version"] = 1;
  j["registry"] = registry.to_json();
  j["datasets"] = json::object();
  for (const auto& [key, ds] : datasets) {
    json samples = json::array();
    for (const auto& s : ds.samples)
      samples.push_back(
          {{"image", s.image_path}, {"label", s.label_path}, {"train", s.train_split}});
    j["datasets"][key] = {{"samples", std::move(samples)}};
  }
  std::ofstream out(fs::path(cache_dir) / "manifest.json");
  require(out.good(), "io", "cannot write cache manifest in " + cache_dir);
  out << j.dump(2) << "\n";
}

PreprocessedStore PreprocessedStore::load(const std::string& cache_dir) {
  std::ifstream in(fs::path(cache_dir) / "manifest.json");
  require(in.good(), "io", "no cache manifest in " + cache_dir);
  json j;
  in >> j;
  PreprocessedStore store;
  store.registry = CollectiveRegistry::from_json(j.at("registry"));
  for (const auto& [key, d] : j.at("datasets").items()) {
    CachedDataset ds;
    ds.key = key;
    for (const auto& s : d.at("samples"))
      ds.samples.push_back({s.at("image").get<std::string>(), s.at("label").get<std::string>(),
                            s.at("train").get<bool>()});
    store.datasets[key] = std::move(ds);
  }
  return store;
}

PreprocessedStore run_preprocess(const CollectiveRegistry& registry, const std::string& cache_dir,
                                 const PreprocessOptions& options) {
  PreprocessedStore store;
  store.registry = registry;
  fs::create_directories(cache_dir);

  for (const auto& [key, ds] : registry.datasets) {
    require(!ds.sample_manifest.empty(), "data", "dataset " + key + " has an empty manifest");
    const auto policy = NormalizationPolicy::for_modality(
        registry.modalities[static_cast<size_t>(ds.modality_id)].name);
    CachedDataset cached;
    cached.key = key;
    fs::create_directories(fs::path(cache_dir) / key);

    // Deterministic 80/20-style split: shuffle indices with the split seed.
    std::vector<int> order(ds.sample_manifest.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(derive_seed(options.split_seed, std::hash<std::string>{}(key)));
    std::shuffle(order.begin(), order.end(), rng);
    int n_train = static_cast<int>(
        std::lround(options.train_fraction * static_cast<double>(order.size())));
    n_train = std::clamp(n_train, 1, static_cast<int>(order.size()));
    if (order.size() > 1 && n_train == static_cast<int>(order.size())) --n_train;
    std::vector<bool> is_train(order.size(), false);
    for (int i = 0; i < n_train; ++i) is_train[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;

    for (size_t i = 0; i < ds.sample_manifest.size(); ++i) {
      const auto& ref = ds.sample_manifest[i];
      Volume img = load_volume(ref.image_path, VolumeKind::image);
      Volume lab = load_volume(ref.label_path, VolumeKind::label);
      img = preprocess_image(img, options.target_spacing, policy);
      lab = preprocess_label(lab, options.target_spacing);
      require(img.same_grid(lab), "preprocess",
              "image/label grid mismatch after preprocessing sample " + std::to_string(i) +
                  " of " + key);

      char name[32];
      std::snprintf(name, sizeof(name), "%04zu", i);
      std::string img_path = (fs::path(cache_dir) / key / ("img_" + std::string(name) + ".raw")).string();
      std::string lab_path = (fs::path(cache_dir) / key / ("lab_" + std::string(name) + ".raw")).string();
      save_raw_volume(img, img_path);
      save_raw_volume(lab, lab_path);
      cached.samples.push_back({img_path, lab_path, is_train[i]});
    }
    store.datasets[key] = std::move(cached);
  }
  store.save_manifest(cache_dir);
  return store;
}

}  // namespace ctxseg
