#pragma once

// Strict JSON field access for configuration objects: unknown keys and
// wrong types are reported as ConfigError with the full key path.

#include <filesystem>
#include <initializer_list>
#include <string>

#include <json.hpp>

#include "pemvc/errors.hpp"

namespace pemvc {

using Json = nlohmann::ordered_json;

class JsonFields {
 public:
  JsonFields(const Json& obj, std::string path, std::initializer_list<const char*> allowed)
      : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_ + ": expected an object");
    for (const auto& [key, _] : obj_.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || key == a;
      if (!ok) throw ConfigError(path_ + ": unknown key '" + key + "'");
    }
  }

  bool has(const char* key) const { return obj_.contains(key); }

  template <typename V>
  void get(const char* key, V& out) const {
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).template get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  template <typename V>
  V require(const char* key) const {
    if (!obj_.contains(key)) throw ConfigError(path_ + ": missing key '" + key + "'");
    V out{};
    get(key, out);
    return out;
  }

  const Json& at(const char* key) const { return obj_.at(key); }
  std::string child(const char* key) const { return path_ + "." + key; }

 private:
  const Json& obj_;
  std::string path_;
};

Json read_json_file(const std::filesystem::path& path);
/// Writes with two-space indentation and a trailing newline.
void write_json_file(const std::filesystem::path& path, const Json& value);

}  // namespace pemvc
