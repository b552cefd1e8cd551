#pragma once

// Experiment configuration and its TOML-style text form.
//
// Grammar (one construct per line):
//   # comment                     ignored, also after a value
//   [section] / [section.sub]     sets the key prefix
//   key = value                   key: [A-Za-z0-9_.-]+, full name "section.key"
//   value: "string" | number | true | false | [value, value, ...] (flat)
// Every key must be known; repeated keys are an error.

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "device.hpp"
#include "errors.hpp"
#include "mitigate.hpp"
#include "nn.hpp"
#include "quant.hpp"
#include "taskgen.hpp"

namespace cimcall {

struct ConfigValue {
  enum class Kind { String, Number, Bool, Array } kind = Kind::String;
  std::string str;
  double num = 0.0;
  bool boolean = false;
  std::vector<ConfigValue> items;

  static ConfigValue of_string(std::string s) {
    ConfigValue v;
    v.kind = Kind::String;
    v.str = std::move(s);
    return v;
  }
  static ConfigValue of_number(double d) {
    ConfigValue v;
    v.kind = Kind::Number;
    v.num = d;
    return v;
  }
  static ConfigValue of_bool(bool b) {
    ConfigValue v;
    v.kind = Kind::Bool;
    v.boolean = b;
    return v;
  }
};

inline std::string format_number(double d) {
  if (std::isfinite(d) && d == std::nearbyint(d) && std::abs(d) < 1e15) {
    char b[32];
    std::snprintf(b, sizeof b, "%.0f", d);
    return b;
  }
  // Shortest form that parses back to the same double.
  char b[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(b, sizeof b, "%.*g", prec, d);
    if (std::strtod(b, nullptr) == d) break;
  }
  return b;
}

inline std::string to_text(const ConfigValue& v) {
  switch (v.kind) {
    case ConfigValue::Kind::String: return "\"" + v.str + "\"";
    case ConfigValue::Kind::Number: return format_number(v.num);
    case ConfigValue::Kind::Bool: return v.boolean ? "true" : "false";
    case ConfigValue::Kind::Array: {
      std::string s = "[";
      for (size_t i = 0; i < v.items.size(); ++i) s += (i ? ", " : "") + to_text(v.items[i]);
      return s + "]";
    }
  }
  return "";
}

using ConfigEntries = std::vector<std::pair<std::string, ConfigValue>>;

namespace detail {
inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

struct ValueParser {
  const std::string& s;
  size_t p = 0;
  int line;

  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError("config line " + std::to_string(line) + ": " + msg);
  }
  void ws() {
    while (p < s.size() && std::isspace(static_cast<unsigned char>(s[p]))) ++p;
  }
  ConfigValue scalar() {
    ws();
    if (p >= s.size()) fail("missing value");
    if (s[p] == '"') {
      const size_t e = s.find('"', p + 1);
      if (e == std::string::npos) fail("unterminated string");
      ConfigValue v = ConfigValue::of_string(s.substr(p + 1, e - p - 1));
      p = e + 1;
      return v;
    }
    size_t e = p;
    while (e < s.size() && s[e] != ',' && s[e] != ']' && s[e] != '#' && !std::isspace(static_cast<unsigned char>(s[e])))
      ++e;
    const std::string tok = s.substr(p, e - p);
    p = e;
    if (tok == "true") return ConfigValue::of_bool(true);
    if (tok == "false") return ConfigValue::of_bool(false);
    std::string clean;
    for (char c : tok)
      if (c != '_') clean.push_back(c);
    char* end = nullptr;
    const double d = std::strtod(clean.c_str(), &end);
    if (clean.empty() || end != clean.c_str() + clean.size()) fail("cannot parse value '" + tok + "'");
    return ConfigValue::of_number(d);
  }
  ConfigValue value() {
    ws();
    if (p < s.size() && s[p] == '[') {
      ++p;
      ConfigValue arr;
      arr.kind = ConfigValue::Kind::Array;
      ws();
      if (p < s.size() && s[p] == ']') {
        ++p;
        return arr;
      }
      while (true) {
        ws();
        if (p < s.size() && s[p] == '[') fail("nested arrays are not supported");
        arr.items.push_back(scalar());
        ws();
        if (p < s.size() && s[p] == ',') {
          ++p;
          continue;
        }
        if (p < s.size() && s[p] == ']') {
          ++p;
          return arr;
        }
        fail("expected ',' or ']' in array");
      }
    }
    return scalar();
  }
  void finish() {
    ws();
    if (p < s.size() && s[p] != '#') fail("trailing characters after value");
  }
};

inline bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-')) return false;
  return true;
}
}  // namespace detail

inline ConfigEntries parse_config_text(const std::string& text) {
  ConfigEntries out;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string raw, prefix;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string t = detail::trim(raw);
    if (t.empty() || t[0] == '#') continue;
    if (t[0] == '[') {
      const size_t e = t.find(']');
      if (e == std::string::npos) throw ConfigError("config line " + std::to_string(line) + ": unterminated section");
      const std::string rest = detail::trim(t.substr(e + 1));
      if (!rest.empty() && rest[0] != '#')
        throw ConfigError("config line " + std::to_string(line) + ": trailing characters after section");
      prefix = detail::trim(t.substr(1, e - 1));
      if (!detail::valid_key(prefix))
        throw ConfigError("config line " + std::to_string(line) + ": bad section name '" + prefix + "'");
      continue;
    }
    const size_t eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line) + ": expected key = value");
    std::string key = detail::trim(t.substr(0, eq));
    if (key.size() >= 2 && key.front() == '"' && key.back() == '"') key = key.substr(1, key.size() - 2);
    if (!detail::valid_key(key)) throw ConfigError("config line " + std::to_string(line) + ": bad key '" + key + "'");
    const std::string full = prefix.empty() ? key : prefix + "." + key;
    const std::string vtext = t.substr(eq + 1);
    detail::ValueParser vp{vtext, 0, line};
    ConfigValue v = vp.value();
    vp.finish();
    if (seen.count(full)) throw ConfigError("config line " + std::to_string(line) + ": duplicate key '" + full + "'");
    seen[full] = line;
    out.emplace_back(full, std::move(v));
  }
  return out;
}

// ---------------------------------------------------------------------------

struct TimingConfig {
  double t_dac = 2e-9;
  double t_settle = 10e-9;
  double t_adc_per_conversion = 1e-9;
  int adcs_per_tile = 8;
  double t_digital_per_output = 0.1e-9;
  double t_sram_mac = 1e-9;  // per digital (masked) weight on the RSA path
  double t_write_pulse = 100e-9;
  double rvw_refresh_period = 1000;  // inferences (frames) between verified refreshes
  double baseline_software_kbps = 1.0;

  void validate() const {
    for (double t : {t_dac, t_settle, t_adc_per_conversion, t_digital_per_output, t_sram_mac, t_write_pulse})
      require(t > 0.0 && std::isfinite(t), "timing: all times must be > 0");
    require(adcs_per_tile >= 1, "timing: adcs_per_tile must be >= 1");
    require(rvw_refresh_period > 0.0, "timing: rvw_refresh_period must be > 0");
    require(baseline_software_kbps > 0.0, "timing: baseline_software_kbps must be > 0");
  }
};

struct AreaConfig {
  double cell_area = 0.01;        // um^2
  double adc_area = 300.0;
  double dac_area = 1.0;
  double driver_area = 50.0;
  double sram_area_per_bit = 0.1;
  double control_overhead_fraction = 0.05;

  void validate() const {
    for (double a : {cell_area, adc_area, dac_area, driver_area, sram_area_per_bit, control_overhead_fraction})
      require(a >= 0.0 && std::isfinite(a), "area: all constants must be >= 0");
  }
};

// Shortcut profiles used by the non-ideality studies.
enum class Scenario { AsConfigured, Ideal, WriteVariation, SynapticWires, SenseAdc, DacDriver, Combined };

inline std::string scenario_name(Scenario s) {
  switch (s) {
    case Scenario::AsConfigured: return "as_configured";
    case Scenario::Ideal: return "ideal";
    case Scenario::WriteVariation: return "WriteVariation";
    case Scenario::SynapticWires: return "SynapticWires";
    case Scenario::SenseAdc: return "SenseAdc";
    case Scenario::DacDriver: return "DacDriver";
    case Scenario::Combined: return "Combined";
  }
  return "?";
}

inline Scenario parse_scenario(const std::string& s) {
  for (Scenario x : {Scenario::AsConfigured, Scenario::Ideal, Scenario::WriteVariation, Scenario::SynapticWires,
                     Scenario::SenseAdc, Scenario::DacDriver, Scenario::Combined})
    if (scenario_name(x) == s) return x;
  throw ConfigError("unknown profile scenario '" + s + "'");
}

// The profile actually used: the scenario keeps the configured magnitudes and
// selects which sources are active.
inline NonIdealityProfile resolve_profile(const NonIdealityProfile& p, Scenario s) {
  NonIdealityProfile r = p;
  switch (s) {
    case Scenario::AsConfigured: break;
    case Scenario::Ideal: r.enabled = kNone, r.write_variation_rate = 0.0; break;
    case Scenario::WriteVariation: r.enabled = kNone; break;
    case Scenario::SynapticWires: r.enabled = kSynapticWires, r.write_variation_rate = 0.0; break;
    case Scenario::SenseAdc: r.enabled = kSenseAdc, r.write_variation_rate = 0.0; break;
    case Scenario::DacDriver: r.enabled = kDacDriver, r.write_variation_rate = 0.0; break;
    case Scenario::Combined: r.enabled = kAllCircuit; break;
  }
  return r;
}

// Grid axes multiply out; zipped axes advance together as one dimension.
struct SweepAxis {
  std::string key;
  std::vector<ConfigValue> values;
  bool zipped = false;
};

struct ExperimentConfig {
  uint64_t seed = 1;
  int runs = 3;
  int eval_reads = 100;
  std::string out_dir = "out";

  TaskConfig task;
  SurrogateShape model;
  TrainConfig train{15, 0.3, 5.0, 1};
  QuantSpec quant = QuantSpec::fixed(8, 8);
  DeviceParams device;
  NonIdealityProfile profile;
  Scenario scenario = Scenario::AsConfigured;
  int array_size = 64;
  MitigationRecipe recipe;  // empty technique list means no mitigation
  TimingConfig timing;
  AreaConfig area;

  std::string sweep_figure;
  std::vector<SweepAxis> sweep;

  HardwareTarget hardware() const {
    HardwareTarget hw;
    hw.array_size = array_size;
    hw.device = device;
    hw.profile = resolve_profile(profile, scenario);
    hw.spec = quant;
    return hw;
  }

  void validate() const {
    require(runs >= 1, "run.runs must be >= 1");
    require(eval_reads >= 1, "run.eval_reads must be >= 1");
    task.validate();
    require(task.n_reads >= 1, "task.n_reads must be >= 1");
    require(model.kernel >= 1 && model.kernel % 2 == 1, "model.kernel must be odd");
    require(model.channels >= 1 && model.hidden >= 1, "model sizes must be >= 1");
    require(train.epochs >= 1 && train.lr > 0.0, "train: epochs >= 1 and lr > 0");
    quant.validate();
    device.validate();
    profile.validate();
    if (!supported_array_size(array_size))
      throw ConfigError("plan.array_size " + std::to_string(array_size) + " unsupported (power of two in [4,1024])");
    if (!recipe.techniques.empty()) recipe.validate();
    timing.validate();
    area.validate();
  }
};

namespace detail {
[[noreturn]] inline void bad_type(const std::string& key, const char* want) {
  throw ConfigError("config key '" + key + "': expected " + want);
}
inline double as_number(const std::string& k, const ConfigValue& v) {
  if (v.kind != ConfigValue::Kind::Number) bad_type(k, "a number");
  return v.num;
}
inline int64_t as_int(const std::string& k, const ConfigValue& v) {
  const double d = as_number(k, v);
  if (d != std::nearbyint(d) || std::abs(d) > 9.0e15) bad_type(k, "an integer");
  return static_cast<int64_t>(d);
}
inline std::string as_string(const std::string& k, const ConfigValue& v) {
  if (v.kind != ConfigValue::Kind::String) bad_type(k, "a string");
  return v.str;
}
inline bool as_bool(const std::string& k, const ConfigValue& v) {
  if (v.kind != ConfigValue::Kind::Bool) bad_type(k, "true or false");
  return v.boolean;
}
inline std::vector<std::string> as_strings(const std::string& k, const ConfigValue& v) {
  std::vector<std::string> out;
  if (v.kind == ConfigValue::Kind::String) {
    if (!v.str.empty() && v.str != "none") {
      std::stringstream ss(v.str);
      std::string t;
      while (std::getline(ss, t, '|'))
        if (!t.empty()) out.push_back(t);
    }
    return out;
  }
  if (v.kind != ConfigValue::Kind::Array) bad_type(k, "an array of strings");
  for (const auto& it : v.items) out.push_back(as_string(k, it));
  return out;
}
inline ConfigValue strings_value(const std::vector<std::string>& s) {
  ConfigValue v;
  v.kind = ConfigValue::Kind::Array;
  for (const auto& x : s) v.items.push_back(ConfigValue::of_string(x));
  return v;
}

struct KeyDef {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&, const ConfigValue&)> set;
  std::function<ConfigValue(const ExperimentConfig&)> get;
};

#define CIMCALL_NUM(KEY, FIELD)                                                                                   \
  KeyDef{KEY, [](ExperimentConfig& c, const std::string& k, const ConfigValue& v) { c.FIELD = as_number(k, v); }, \
         [](const ExperimentConfig& c) { return ConfigValue::of_number(static_cast<double>(c.FIELD)); }}
#define CIMCALL_INT(KEY, FIELD)                                                                                  \
  KeyDef{KEY,                                                                                                    \
         [](ExperimentConfig& c, const std::string& k, const ConfigValue& v) {                                   \
           c.FIELD = static_cast<std::decay_t<decltype(c.FIELD)>>(as_int(k, v));                                 \
         },                                                                                                      \
         [](const ExperimentConfig& c) { return ConfigValue::of_number(static_cast<double>(c.FIELD)); }}

inline std::vector<std::string> mask_names(uint32_t m) { return enabled_names(m); }

inline const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table = {
      CIMCALL_INT("run.seed", seed),
      CIMCALL_INT("run.runs", runs),
      CIMCALL_INT("run.eval_reads", eval_reads),
      KeyDef{"run.out_dir", [](ExperimentConfig& c, const std::string& k, const ConfigValue& v) { c.out_dir = as_string(k, v); },
             [](const ExperimentConfig& c) { return ConfigValue::of_string(c.out_dir); }},
      CIMCALL_INT("task.n_reads", task.n_reads),
      CIMCALL_INT("task.read_length", task.read_length),
      CIMCALL_NUM("task.noise_sigma", task.noise_sigma),
      CIMCALL_INT("task.dwell_min", task.dwell_min),
      CIMCALL_INT("task.dwell_max", task.dwell_max),
      CIMCALL_INT("task.k", task.k),
      CIMCALL_NUM("task.context_weight", task.context_weight),
      CIMCALL_INT("task.table_seed", task.table_seed),
      CIMCALL_INT("model.kernel", model.kernel),
      CIMCALL_INT("model.channels", model.channels),
      CIMCALL_INT("model.hidden", model.hidden),
      CIMCALL_INT("train.epochs", train.epochs),
      CIMCALL_NUM("train.lr", train.lr),
      CIMCALL_NUM("train.clip_norm", train.clip_norm),
      KeyDef{"quant.spec",
             [](ExperimentConfig& c, const std::string& k, const ConfigValue& v) { c.quant = QuantSpec::parse(as_string(k, v)); },
             [](const ExperimentConfig& c) { return ConfigValue::of_string(c.quant.label()); }},
      CIMCALL_NUM("device.g_lrs", device.g_lrs),
      CIMCALL_NUM("device.g_hrs", device.g_hrs),
      CIMCALL_INT("device.levels_per_cell", device.levels_per_cell),
      CIMCALL_NUM("device.nonlinearity_min", device.nonlinearity_min),
      CIMCALL_NUM("device.nonlinearity_max", device.nonlinearity_max),
      KeyDef{"device.curve",
             [](ExperimentConfig& c, const std::string& k, const ConfigValue& v) {
               const std::string s = as_string(k, v);
               if (s == "linear") c.device.curve = StateCurve::Linear;
               else if (s == "nonlinear") c.device.curve = StateCurve::Nonlinear;
               else throw ConfigError("config key '" + k + "': expected \"linear\" or \"nonlinear\"");
             },
             [](const ExperimentConfig& c) {
               return ConfigValue::of_string(c.device.curve == StateCurve::Linear ? "linear" : "nonlinear");
             }},
      CIMCALL_NUM("device.curve_exponent", device.curve_exponent),
      CIMCALL_NUM("profile.write_variation_rate", profile.write_variation_rate),
      CIMCALL_NUM("profile.dac_gain_error", profile.dac_gain_error),
      CIMCALL_NUM("profile.dac_offset", profile.dac_offset),
      CIMCALL_INT("profile.dac_bits", profile.dac_bits),
      CIMCALL_INT("profile.adc_bits", profile.adc_bits),
      CIMCALL_NUM("profile.adc_ref_error", profile.adc_ref_error),
      CIMCALL_NUM("profile.sense_vmin", profile.sense_vmin),
      CIMCALL_NUM("profile.wire_resistance_per_segment", profile.wire_resistance_per_segment),
      KeyDef{"profile.enabled",
             [](ExperimentConfig& c, const std::string& k, const ConfigValue& v) {
               uint32_t m = kNone;
               for (const auto& s : as_strings(k, v)) m |= parse_nonideality(s);
               c.profile.enabled = m;
             },
             [](const ExperimentConfig& c) { return strings_value(mask_names(c.profile.enabled)); }},
      CIMCALL_NUM("profile.dac_full_scale", profile.dac_full_scale),
      CIMCALL_NUM("profile.sense_resistance", profile.sense_resistance),
      KeyDef{"profile.wire_model",
             [](ExperimentConfig& c, const std::string& k, const ConfigValue& v) {
               const std::string s = as_string(k, v);
               if (s == "transfer") c.profile.wire_model = WireModel::Transfer;
               else if (s == "first_order") c.profile.wire_model = WireModel::FirstOrder;
               else throw ConfigError("config key '" + k + "': expected \"transfer\" or \"first_order\"");
             },
             [](const ExperimentConfig& c) {
               return ConfigValue::of_string(c.profile.wire_model == WireModel::Transfer ? "transfer" : "first_order");
             }},
      KeyDef{"profile.variation_mode",
             [](ExperimentConfig& c, const std::string& k, const ConfigValue& v) {
               const std::string s = as_string(k, v);
               if (s == "cycle_to_cycle") c.profile.variation_mode = VariationMode::CycleToCycle;
               else if (s == "device_to_device") c.profile.variation_mode = VariationMode::DeviceToDevice;
               else throw ConfigError("config key '" + k + "': expected \"cycle_to_cycle\" or \"device_to_device\"");
             },
             [](const ExperimentConfig& c) {
               return ConfigValue::of_string(c.profile.variation_mode == VariationMode::CycleToCycle ? "cycle_to_cycle"
                                                                                                   : "device_to_device");
             }},
      KeyDef{"profile.scenario",
             [](ExperimentConfig& c, const std::string& k, const ConfigValue& v) { c.scenario = parse_scenario(as_string(k, v)); },
             [](const ExperimentConfig& c) { return ConfigValue::of_string(scenario_name(c.scenario)); }},
      CIMCALL_INT("plan.array_size", array_size),
      KeyDef{"recipe.techniques",
             [](ExperimentConfig& c, const std::string& k, const ConfigValue& v) {
               c.recipe.techniques.clear();
               for (const auto& s : as_strings(k, v)) {
                 const Technique t = parse_technique(s);
                 if (c.recipe.has(t)) throw ConfigError("config key '" + k + "': duplicate technique '" + s + "'");
                 c.recipe.techniques.push_back(t);
               }
               c.recipe.techniques = c.recipe.canonical();
             },
             [](const ExperimentConfig& c) {
               std::vector<std::string> n;
               for (Technique t : c.recipe.canonical()) n.push_back(technique_name(t));
               return strings_value(n);
             }},
      CIMCALL_INT("recipe.vat_epochs", recipe.vat.train.epochs),
      CIMCALL_NUM("recipe.vat_lr", recipe.vat.train.lr),
      CIMCALL_NUM("recipe.vat_noise_scale", recipe.vat.noise_scale),
      CIMCALL_INT("recipe.kd_epochs", recipe.kd.train.epochs),
      CIMCALL_NUM("recipe.kd_lr", recipe.kd.train.lr),
      CIMCALL_NUM("recipe.kd_temperature", recipe.kd.temperature),
      CIMCALL_NUM("recipe.kd_lambda", recipe.kd.lambda),
      CIMCALL_NUM("recipe.kd_noise_scale", recipe.kd.noise_scale),
      CIMCALL_NUM("recipe.rvw_tolerance", recipe.rvw_tolerance_fraction),
      CIMCALL_INT("recipe.rvw_max_pulses", recipe.rvw_max_pulses),
      CIMCALL_NUM("recipe.rsa_fraction", recipe.rsa.fraction),
      KeyDef{"recipe.rsa_mode",
             [](ExperimentConfig& c, const std::string& k, const ConfigValue& v) {
               const std::string s = as_string(k, v);
               if (s == "ranked") c.recipe.rsa.mode = RsaMode::Ranked;
               else if (s == "random") c.recipe.rsa.mode = RsaMode::Random;
               else throw ConfigError("config key '" + k + "': expected \"ranked\" or \"random\"");
             },
             [](const ExperimentConfig& c) {
               return ConfigValue::of_string(c.recipe.rsa.mode == RsaMode::Ranked ? "ranked" : "random");
             }},
      CIMCALL_INT("recipe.rsa_epochs", recipe.rsa.kd.train.epochs),
      CIMCALL_NUM("recipe.rsa_lr", recipe.rsa.kd.train.lr),
      CIMCALL_NUM("recipe.rsa_temperature", recipe.rsa.kd.temperature),
      CIMCALL_NUM("recipe.rsa_lambda", recipe.rsa.kd.lambda),
      CIMCALL_NUM("timing.t_dac", timing.t_dac),
      CIMCALL_NUM("timing.t_settle", timing.t_settle),
      CIMCALL_NUM("timing.t_adc_per_conversion", timing.t_adc_per_conversion),
      CIMCALL_INT("timing.adcs_per_tile", timing.adcs_per_tile),
      CIMCALL_NUM("timing.t_digital_per_output", timing.t_digital_per_output),
      CIMCALL_NUM("timing.t_sram_mac", timing.t_sram_mac),
      CIMCALL_NUM("timing.t_write_pulse", timing.t_write_pulse),
      CIMCALL_NUM("timing.rvw_refresh_period", timing.rvw_refresh_period),
      CIMCALL_NUM("timing.baseline_software_kbps", timing.baseline_software_kbps),
      CIMCALL_NUM("area.cell_area", area.cell_area),
      CIMCALL_NUM("area.adc_area", area.adc_area),
      CIMCALL_NUM("area.dac_area", area.dac_area),
      CIMCALL_NUM("area.driver_area", area.driver_area),
      CIMCALL_NUM("area.sram_area_per_bit", area.sram_area_per_bit),
      CIMCALL_NUM("area.control_overhead_fraction", area.control_overhead_fraction),
      KeyDef{"sweep.figure",
             [](ExperimentConfig& c, const std::string& k, const ConfigValue& v) { c.sweep_figure = as_string(k, v); },
             [](const ExperimentConfig& c) { return ConfigValue::of_string(c.sweep_figure); }},
  };
  return table;
}
#undef CIMCALL_NUM
#undef CIMCALL_INT

inline const KeyDef* find_key(const std::string& k) {
  for (const auto& d : key_table())
    if (d.key == k) return &d;
  return nullptr;
}
}  // namespace detail

inline constexpr const char* kSweepGridPrefix = "sweep.grid.";
inline constexpr const char* kSweepZipPrefix = "sweep.zip.";

inline bool is_sweepable(const std::string& key) {
  return detail::find_key(key) != nullptr && key.rfind("sweep.", 0) != 0 && key != "run.out_dir";
}

inline void set_config_key(ExperimentConfig& c, const std::string& key, const ConfigValue& v) {
  const detail::KeyDef* d = detail::find_key(key);
  if (!d) throw ConfigError("unknown config key '" + key + "'");
  d->set(c, key, v);
}

inline void apply_entries(ExperimentConfig& c, const ConfigEntries& entries) {
  for (const auto& [key, v] : entries) {
    const bool grid = key.rfind(kSweepGridPrefix, 0) == 0, zip = key.rfind(kSweepZipPrefix, 0) == 0;
    if (grid || zip) {
      const std::string axis = key.substr(std::string(grid ? kSweepGridPrefix : kSweepZipPrefix).size());
      if (!is_sweepable(axis)) throw ConfigError("invalid sweep axis '" + axis + "'");
      if (v.kind != ConfigValue::Kind::Array) throw ConfigError("sweep axis '" + axis + "': expected an array");
      if (v.items.empty()) throw ConfigError("sweep axis '" + axis + "': empty value list");
      for (const auto& ax : c.sweep)
        if (ax.key == axis) throw ConfigError("sweep axis '" + axis + "' given twice");
      for (const auto& ax : c.sweep)
        if (zip && ax.zipped && ax.values.size() != v.items.size())
          throw ConfigError("zipped sweep axis '" + axis + "': length differs from '" + ax.key + "'");
      c.sweep.push_back({axis, v.items, zip});
      continue;
    }
    set_config_key(c, key, v);
  }
}

inline ExperimentConfig config_from_text(const std::string& text, ExperimentConfig base = {}) {
  apply_entries(base, parse_config_text(text));
  base.validate();
  return base;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ExperimentConfig load_config(const std::string& path) { return config_from_text(read_text_file(path)); }

// Every key with its resolved value, in table order.
inline ConfigEntries resolved_entries(const ExperimentConfig& c) {
  ConfigEntries out;
  for (const auto& d : detail::key_table()) out.emplace_back(d.key, d.get(c));
  for (const auto& ax : c.sweep) {
    ConfigValue arr;
    arr.kind = ConfigValue::Kind::Array;
    arr.items = ax.values;
    out.emplace_back((ax.zipped ? kSweepZipPrefix : kSweepGridPrefix) + ax.key, arr);
  }
  return out;
}

// Resolved config as loadable text; parsing it back gives the same config.
inline std::string config_to_text(const ExperimentConfig& c) {
  std::string out, section;
  for (const auto& [key, v] : resolved_entries(c)) {
    const bool grid = key.rfind(kSweepGridPrefix, 0) == 0, zip = key.rfind(kSweepZipPrefix, 0) == 0;
    const std::string sec = grid ? "sweep.grid" : zip ? "sweep.zip" : key.substr(0, key.find('.'));
    const std::string name = key.substr(sec.size() + 1);
    if (sec != section) {
      out += (out.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += name + " = " + to_text(v) + "\n";
  }
  return out;
}

}  // namespace cimcall
