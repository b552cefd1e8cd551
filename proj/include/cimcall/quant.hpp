#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "errors.hpp"

namespace cimcall {

enum class QuantMode { Float32, Fixed };

struct QuantSpec {
  int weight_bits = 32;
  int activation_bits = 32;
  QuantMode mode = QuantMode::Float32;

  static QuantSpec float32() { return {32, 32, QuantMode::Float32}; }
  static QuantSpec fixed(int w, int a) { return {w, a, QuantMode::Fixed}; }

  bool is_fixed() const { return mode == QuantMode::Fixed; }

  std::string label() const { return std::to_string(weight_bits) + "-" + std::to_string(activation_bits); }

  void validate() const {
    if (mode == QuantMode::Float32) return;
    auto pow2 = [](int b) { return b >= 2 && b <= 16 && (b & (b - 1)) == 0; };
    if (!pow2(weight_bits) || !pow2(activation_bits))
      throw ConfigError("quant: fixed-point bit widths must be powers of two in [2,16], got " + label());
  }

  // "32-32" is the float baseline; any other "X-Y" is fixed point.
  static QuantSpec parse(const std::string& s) {
    const auto dash = s.find('-');
    if (dash == std::string::npos) throw ConfigError("quant: expected X-Y, got '" + s + "'");
    int w = 0, a = 0;
    try {
      w = std::stoi(s.substr(0, dash));
      a = std::stoi(s.substr(dash + 1));
    } catch (const std::exception&) {
      throw ConfigError("quant: expected X-Y, got '" + s + "'");
    }
    QuantSpec q = (w == 32 && a == 32) ? float32() : fixed(w, a);
    q.validate();
    return q;
  }
};

inline int64_t qmax(int bits) { return (int64_t{1} << (bits - 1)) - 1; }

// Symmetric per-tensor scale; an all-zero tensor gets scale 1.
inline double symmetric_scale(double max_abs, int bits) {
  if (!(max_abs > 0.0)) return 1.0;
  return max_abs / static_cast<double>(qmax(bits));
}

inline int64_t quantize_int(double x, double scale, int bits) {
  const double m = static_cast<double>(qmax(bits));
  return static_cast<int64_t>(std::clamp(std::nearbyint(x / scale), -m, m));
}

inline double fake_quant(double x, double scale, int bits) {
  return static_cast<double>(quantize_int(x, scale, bits)) * scale;
}

}  // namespace cimcall
