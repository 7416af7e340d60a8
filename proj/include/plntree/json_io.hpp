#pragma once

// JSON reading via nlohmann; writing through a small emitter that formats
// every double with 17 significant digits so serialized artifacts are
// byte-stable and parse back to the exact same value.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace plntree {

using Json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

namespace detail {

inline void emit_json(const Json& j, std::string& out, int indent, int depth) {
  const std::string pad(static_cast<size_t>(indent * depth), ' ');
  const std::string pad_in(static_cast<size_t>(indent * (depth + 1)), ' ');
  switch (j.type()) {
    case Json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += "{\n";
      size_t i = 0;
      for (auto it = j.begin(); it != j.end(); ++it, ++i) {
        out += pad_in;
        out += Json(it.key()).dump();
        out += ": ";
        emit_json(it.value(), out, indent, depth + 1);
        if (i + 1 < j.size()) out += ",";
        out += "\n";
      }
      out += pad + "}";
      break;
    }
    case Json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      bool scalars_only = true;
      for (const auto& e : j)
        if (e.is_structured()) scalars_only = false;
      if (scalars_only) {
        out += "[";
        for (size_t i = 0; i < j.size(); ++i) {
          if (i) out += ", ";
          emit_json(j[i], out, indent, depth + 1);
        }
        out += "]";
      } else {
        out += "[\n";
        for (size_t i = 0; i < j.size(); ++i) {
          out += pad_in;
          emit_json(j[i], out, indent, depth + 1);
          if (i + 1 < j.size()) out += ",";
          out += "\n";
        }
        out += pad + "]";
      }
      break;
    }
    case Json::value_t::number_float:
      out += format_double(j.get<double>());
      break;
    default:
      out += j.dump();
      break;
  }
}

}  // namespace detail

inline std::string dump_json(const Json& j, int indent = 2) {
  std::string out;
  detail::emit_json(j, out, indent, 0);
  out += "\n";
  return out;
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << dump_json(j);
}

inline Json read_json_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path);
  Json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw DataError("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

inline void require_keys(const Json& j, const std::vector<std::string>& allowed,
                         const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": object expected");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : allowed)
      if (it.key() == k) ok = true;
    if (!ok) throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
  }
}

}  // namespace plntree
