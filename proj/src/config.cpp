#include "ctxseg/config.hpp"

#include "ctxseg/rng.hpp"

#include <cstring>
#include <fstream>

extern char** environ;

using nlohmann::json;

namespace ctxseg {

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "io", "cannot open config file: " + path);
  try {
    json j;
    in >> j;
    return j;
  } catch (const std::exception& e) {
    fail("config", "config parse error in " + path + ": " + e.what());
  }
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  require(out.good(), "io", "cannot write " + path);
  out << j.dump(2) << "\n";
}

void set_json_path(json& j, const std::string& dotted_path, const std::string& value) {
  json* node = &j;
  size_t begin = 0;
  while (true) {
    size_t dot = dotted_path.find('.', begin);
    std::string key = dotted_path.substr(begin, dot == std::string::npos ? dot : dot - begin);
    require(!key.empty(), "config", "bad override path: " + dotted_path);
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(value);
      } catch (...) {
        parsed = value;  // plain string
      }
      (*node)[key] = parsed;
      return;
    }
    node = &(*node)[key];
    begin = dot + 1;
  }
}

void apply_env_overrides(json& j, const std::string& prefix) {
  for (char** env = environ; *env != nullptr; ++env) {
    const char* entry = *env;
    if (std::strncmp(entry, prefix.c_str(), prefix.size()) != 0) continue;
    const char* eq = std::strchr(entry, '=');
    if (!eq) continue;
    std::string key(entry + prefix.size(), eq - entry - prefix.size());
    // double underscore separates path segments
    std::string path;
    for (size_t i = 0; i < key.size(); ++i) {
      if (i + 1 < key.size() && key[i] == '_' && key[i + 1] == '_') {
        path.push_back('.');
        ++i;
      } else {
        path.push_back(key[i]);
      }
    }
    set_json_path(j, path, eq + 1);
  }
}

void apply_set_overrides(json& j, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    size_t eq = s.find('=');
    require(eq != std::string::npos, "config", "--set expects path=value, got: " + s);
    set_json_path(j, s.substr(0, eq), s.substr(eq + 1));
  }
}

json resolve_config(const std::string& path, const std::vector<std::string>& sets) {
  json j = path.empty() ? json::object() : load_json_file(path);
  apply_env_overrides(j);
  apply_set_overrides(j, sets);
  return j;
}

std::string config_hash(const json& j) {
  std::string dump = j.dump();  // nlohmann objects iterate sorted by key
  std::uint64_t h = 0x9ae16a3b2f90404full;
  for (unsigned char c : dump) h = mix64(h ^ c);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace ctxseg
