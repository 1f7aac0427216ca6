#pragma once

// Sectioned key=value run configuration. Unknown sections or keys are
// rejected with their line number so typos never fall back to defaults.

#include <fstream>
#include <sstream>
#include <string>

#include "pscnet/gcm.hpp"
#include "pscnet/tensor.hpp"

namespace pscnet {

struct RunConfig {
  // [model]
  double width_scale = 1.0;
  GcmGate gcm_gate = GcmGate::kResidual;
  // [loss]
  double sigma = 8.0;
  double bg_margin_ratio = 0.15;
  double lambda = 0.1;
  bool use_background = true;
  // [train]
  int crop_size = 256;
  double lr = 1e-5;
  int epochs = 30;  // no principled default exists; pick a small fixed budget
  uint64_t seed = 0;
  double val_fraction = 0.1;
  // [data]
  int max_shorter_side = 2048;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline double parse_scale(const std::string& v, const std::string& where) {
  try {
    const auto slash = v.find('/');
    if (slash != std::string::npos) {
      const double num = std::stod(trim(v.substr(0, slash)));
      const double den = std::stod(trim(v.substr(slash + 1)));
      require(den != 0.0, where + ": zero denominator");
      return num / den;
    }
    return std::stod(v);
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    throw Error(where + ": cannot parse number " + v);
  }
}

inline double parse_double(const std::string& v, const std::string& where) {
  try {
    size_t used = 0;
    const double x = std::stod(v, &used);
    require(trim(v.substr(used)).empty(), where + ": trailing characters in " + v);
    return x;
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    throw Error(where + ": cannot parse number " + v);
  }
}

inline int parse_int(const std::string& v, const std::string& where) {
  const double x = parse_double(v, where);
  require(x == static_cast<double>(static_cast<long long>(x)), where + ": expected an integer, got " + v);
  return static_cast<int>(x);
}

inline bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(where + ": expected true/false, got " + v);
}

}  // namespace detail

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = "config line " + std::to_string(line_no);
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw Error(where + ": unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "loss" && section != "train" && section != "data")
        throw Error(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(where + ": expected key=value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (section.empty()) throw Error(where + ": key " + key + " appears before any section");

    if (section == "model" && key == "width_scale") {
      cfg.width_scale = detail::parse_scale(val, where);
      detail::require(cfg.width_scale > 0.0, where + ": width_scale must be positive");
    } else if (section == "model" && key == "gcm_gate") {
      if (val == "residual")
        cfg.gcm_gate = GcmGate::kResidual;
      else if (val == "literal")
        cfg.gcm_gate = GcmGate::kLiteral;
      else
        throw Error(where + ": gcm_gate must be residual or literal, got " + val);
    } else if (section == "loss" && key == "sigma") {
      cfg.sigma = detail::parse_double(val, where);
    } else if (section == "loss" && key == "bg_margin_ratio") {
      cfg.bg_margin_ratio = detail::parse_double(val, where);
    } else if (section == "loss" && key == "lambda") {
      cfg.lambda = detail::parse_double(val, where);
    } else if (section == "loss" && key == "use_background") {
      cfg.use_background = detail::parse_bool(val, where);
    } else if (section == "train" && key == "crop_size") {
      cfg.crop_size = detail::parse_int(val, where);
    } else if (section == "train" && key == "lr") {
      cfg.lr = detail::parse_double(val, where);
    } else if (section == "train" && key == "epochs") {
      cfg.epochs = detail::parse_int(val, where);
    } else if (section == "train" && key == "seed") {
      cfg.seed = static_cast<uint64_t>(detail::parse_double(val, where));
    } else if (section == "train" && key == "val_fraction") {
      cfg.val_fraction = detail::parse_double(val, where);
    } else if (section == "data" && key == "max_shorter_side") {
      cfg.max_shorter_side = detail::parse_int(val, where);
    } else {
      throw Error(where + ": unknown key " + key + " in section [" + section + "]");
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace pscnet
