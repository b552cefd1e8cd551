#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace cimcall {

enum class StateCurve { Linear, Nonlinear };

struct DeviceParams {
  double g_lrs = 1.0e-4;  // 10 kOhm
  double g_hrs = 1.0e-6;  // 1 MOhm
  int levels_per_cell = 2;
  double nonlinearity_min = 0.03;
  double nonlinearity_max = 30.0;
  StateCurve curve = StateCurve::Linear;
  // Exponent of the nonlinear state curve; must lie in [nonlinearity_min, nonlinearity_max].
  double curve_exponent = 1.0;

  double window() const { return g_lrs - g_hrs; }

  int bits_per_cell() const {
    int b = 0;
    while ((1 << (b + 1)) <= levels_per_cell) ++b;
    return b;
  }
  bool levels_power_of_two() const {
    return levels_per_cell >= 2 && (levels_per_cell & (levels_per_cell - 1)) == 0;
  }

  void validate() const {
    require(g_hrs > 0.0 && g_lrs > g_hrs, "device: need g_lrs > g_hrs > 0");
    require(levels_per_cell >= 2, "device: levels_per_cell must be >= 2");
    require(nonlinearity_min < nonlinearity_max, "device: nonlinearity_min must be < nonlinearity_max");
    if (curve == StateCurve::Nonlinear)
      require(curve_exponent >= nonlinearity_min && curve_exponent <= nonlinearity_max,
              "device: curve_exponent outside [nonlinearity_min, nonlinearity_max]");
  }
};

enum NonIdeality : uint32_t {
  kNone = 0,
  kSynapticWires = 1u << 0,
  kSenseAdc = 1u << 1,
  kDacDriver = 1u << 2,
  kAllCircuit = kSynapticWires | kSenseAdc | kDacDriver,
};

enum class WireModel { Transfer, FirstOrder };

enum class VariationMode { CycleToCycle, DeviceToDevice };

struct NonIdealityProfile {
  double write_variation_rate = 0.0;
  double dac_gain_error = 0.0;
  double dac_offset = 0.0;  // volts
  int dac_bits = 1;
  int adc_bits = 9;
  double adc_ref_error = 0.0;
  double sense_vmin = 0.040;  // volts
  double wire_resistance_per_segment = 0.0;  // ohms
  uint32_t enabled = kNone;

  double dac_full_scale = 0.2;       // volts
  double sense_resistance = 2500.0;  // ohms, converts column current to sense voltage
  WireModel wire_model = WireModel::Transfer;
  VariationMode variation_mode = VariationMode::CycleToCycle;

  bool has(NonIdeality n) const { return (enabled & n) != 0; }
  bool wires_active() const { return has(kSynapticWires) && wire_resistance_per_segment > 0.0; }

  void validate() const {
    require(write_variation_rate >= 0.0 && write_variation_rate <= 1.0,
            "profile: write_variation_rate must be in [0,1]");
    require(dac_bits >= 1 && dac_bits <= 30, "profile: dac_bits must be in [1,30]");
    require(adc_bits >= 1 && adc_bits <= 30, "profile: adc_bits must be in [1,30]");
    require(wire_resistance_per_segment >= 0.0 && std::isfinite(wire_resistance_per_segment),
            "profile: wire_resistance_per_segment must be finite and >= 0");
    require(sense_vmin >= 0.0, "profile: sense_vmin must be >= 0");
    require(dac_full_scale > 0.0, "profile: dac_full_scale must be > 0");
    require(sense_resistance > 0.0, "profile: sense_resistance must be > 0");
  }
};

inline std::vector<std::string> enabled_names(uint32_t mask) {
  std::vector<std::string> out;
  if (mask & kSynapticWires) out.push_back("SynapticWires");
  if (mask & kSenseAdc) out.push_back("SenseAdc");
  if (mask & kDacDriver) out.push_back("DacDriver");
  return out;
}

inline uint32_t parse_nonideality(const std::string& s) {
  if (s == "SynapticWires") return kSynapticWires;
  if (s == "SenseAdc") return kSenseAdc;
  if (s == "DacDriver") return kDacDriver;
  throw ConfigError("unknown non-ideality '" + s + "'");
}

inline std::vector<double> apply_write_variation(const std::vector<double>& g_target, double rate,
                                                 const DeviceParams& dev, RngStream& rng) {
  require(rate >= 0.0 && rate <= 1.0, "apply_write_variation: rate must be in [0,1]");
  std::vector<double> out(g_target.size());
  for (size_t i = 0; i < g_target.size(); ++i) {
    const double g = g_target[i];
    if (!(g >= dev.g_hrs && g <= dev.g_lrs))
      throw PreconditionError("apply_write_variation: target conductance outside [g_hrs, g_lrs]");
    if (rate == 0.0) {
      out[i] = g;
      continue;
    }
    const double eps = rng.normal(0.0, rate);
    out[i] = std::clamp(g * (1.0 + eps), dev.g_hrs, dev.g_lrs);
  }
  return out;
}

struct DacOutput {
  std::vector<double> volts;
  int64_t clamped = 0;
};

inline double dac_level(double v, const NonIdealityProfile& p, bool* clamped) {
  const double fs = p.dac_full_scale;
  double x = v;
  if (x < 0.0 || x > fs) {
    *clamped = true;
    x = std::clamp(x, 0.0, fs);
  }
  const double steps = std::ldexp(1.0, p.dac_bits) - 1.0;
  double q = std::nearbyint(x / fs * steps) / steps * fs;
  if (p.has(kDacDriver)) q = q * (1.0 + p.dac_gain_error) + p.dac_offset;
  return q;
}

inline DacOutput dac_transfer(const std::vector<double>& v_ideal, const NonIdealityProfile& p) {
  DacOutput out;
  out.volts.resize(v_ideal.size());
  for (size_t i = 0; i < v_ideal.size(); ++i) {
    bool c = false;
    out.volts[i] = dac_level(v_ideal[i], p, &c);
    out.clamped += c ? 1 : 0;
  }
  return out;
}

struct AdcOutput {
  std::vector<int64_t> codes;
  int64_t saturated = 0;
  int64_t dead_zone = 0;
};

inline int64_t adc_code(double i, double full_scale, const NonIdealityProfile& p, bool* sat, bool* dead) {
  const int64_t top = (int64_t{1} << p.adc_bits) - 1;
  if (p.has(kSenseAdc) && i * p.sense_resistance < p.sense_vmin) {
    *dead = i > 0.0;
    return 0;
  }
  const double gain = p.has(kSenseAdc) ? 1.0 + p.adc_ref_error : 1.0;
  const double x = std::nearbyint(i * gain / full_scale * static_cast<double>(top));
  if (x >= static_cast<double>(top)) {
    *sat = x > static_cast<double>(top);
    return top;
  }
  if (x <= 0.0) return 0;
  return static_cast<int64_t>(x);
}

inline AdcOutput adc_transfer(const std::vector<double>& i_analog, double full_scale, const NonIdealityProfile& p) {
  require(full_scale > 0.0, "adc_transfer: full_scale must be > 0");
  AdcOutput out;
  out.codes.resize(i_analog.size());
  for (size_t k = 0; k < i_analog.size(); ++k) {
    bool sat = false, dead = false;
    out.codes[k] = adc_code(i_analog[k], full_scale, p, &sat, &dead);
    out.saturated += sat ? 1 : 0;
    out.dead_zone += dead ? 1 : 0;
  }
  return out;
}

// Conductance of state s out of levels_per_cell states.
inline double state_conductance(int s, const DeviceParams& dev) {
  const double t = static_cast<double>(s) / static_cast<double>(dev.levels_per_cell - 1);
  if (dev.curve == StateCurve::Linear) return dev.g_hrs + t * dev.window();
  const double nu = dev.curve_exponent;
  return dev.g_hrs + dev.window() * (1.0 - std::exp(-nu * t)) / (1.0 - std::exp(-nu));
}

inline double conductance_quantize(double w, const DeviceParams& dev) {
  if (!(w >= 0.0 && w <= 1.0)) throw PreconditionError("conductance_quantize: w outside [0,1]");
  const int s = static_cast<int>(std::nearbyint(w * (dev.levels_per_cell - 1)));
  return state_conductance(s, dev);
}

}  // namespace cimcall
