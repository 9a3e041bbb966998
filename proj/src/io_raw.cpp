#include "ctxseg/io.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

using nlohmann::json;

namespace ctxseg {

namespace {

std::string axis_token(int axis, bool flip) {
  static const char* names[3] = {"z", "y", "x"};
  return std::string(flip ? "-" : "+") + names[axis];
}

void parse_axis_token(const std::string& tok, int* axis, bool* flip) {
  require(tok.size() == 2 && (tok[0] == '+' || tok[0] == '-'), "io",
          "bad axis token in sidecar: " + tok);
  *flip = tok[0] == '-';
  switch (tok[1]) {
    case 'z': *axis = 0; break;
    case 'y': *axis = 1; break;
    case 'x': *axis = 2; break;
    default: fail("io", "bad axis token in sidecar: " + tok);
  }
}

}  // namespace

void save_raw_volume(const Volume& v, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "io", "cannot write " + path);
  out.write(reinterpret_cast<const char*>(v.values.data()),
            static_cast<std::streamsize>(v.values.size() * sizeof(float)));
  require(out.good(), "io", "short write to " + path);

  json j;
  j["dims"] = {v.dims[0], v.dims[1], v.dims[2]};
  j["spacing_mm"] = {v.spacing_mm[0], v.spacing_mm[1], v.spacing_mm[2]};
  j["axes"] = {axis_token(v.orientation.perm[0], v.orientation.flip[0]),
               axis_token(v.orientation.perm[1], v.orientation.flip[1]),
               axis_token(v.orientation.perm[2], v.orientation.flip[2])};
  j["kind"] = v.kind == VolumeKind::label ? "label" : "image";
  j["dtype"] = "float32";
  std::ofstream sj(path + ".json");
  require(sj.good(), "io", "cannot write " + path + ".json");
  sj << j.dump(2) << "\n";
}

Volume load_raw_volume(const std::string& path) {
  std::ifstream sj(path + ".json");
  require(sj.good(), "io", "missing sidecar for " + path);
  json j;
  sj >> j;
  Volume v;
  auto d = j.at("dims");
  v.dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
  auto s = j.at("spacing_mm");
  v.spacing_mm = Vector3d(s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>());
  if (j.contains("axes")) {
    for (int a = 0; a < 3; ++a) {
      int axis;
      bool flip;
      parse_axis_token(j.at("axes").at(a).get<std::string>(), &axis, &flip);
      v.orientation.perm[static_cast<size_t>(a)] = axis;
      v.orientation.flip[static_cast<size_t>(a)] = flip;
    }
  }
  v.kind = j.value("kind", "image") == "label" ? VolumeKind::label : VolumeKind::image;
  require(j.value("dtype", "float32") == "float32", "io", "unsupported raw dtype");

  v.values.resize(static_cast<size_t>(v.size()));
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "io", "cannot open " + path);
  in.read(reinterpret_cast<char*>(v.values.data()),
          static_cast<std::streamsize>(v.values.size() * sizeof(float)));
  require(in.gcount() == static_cast<std::streamsize>(v.values.size() * sizeof(float)), "io",
          "truncated raw volume " + path);
  return v;
}

void save_pgm(const std::string& path, const std::vector<unsigned char>& pixels, int height,
              int width) {
  require(static_cast<size_t>(height) * static_cast<size_t>(width) == pixels.size(), "io",
          "pgm pixel count mismatch");
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "io", "cannot write " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  require(out.good(), "io", "short write to " + path);
}

Volume load_volume(const std::string& path, VolumeKind kind) {
  Volume v;
  auto ends_with = [&](const std::string& suf) {
    return path.size() >= suf.size() &&
           path.compare(path.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (ends_with(".nii") || ends_with(".nii.gz"))
    v = load_nifti(path);
  else if (ends_with(".raw"))
    v = load_raw_volume(path);
  else
    fail("io", "unrecognized volume extension: " + path);
  v.kind = kind;
  return v;
}

}  // namespace ctxseg
