#pragma once

#include <span>
#include <string>

namespace flairr {

inline constexpr int kDefaultPrecision = 4;
inline constexpr int kMaxPrecision = 10;

// Fixed-point text, rounding half away from zero. Negative zero prints
// without a sign.
std::string format_number(double value, int precision);

// Values joined by ", ".
std::string format_numbers(std::span<const double> values, int precision);

}  // namespace flairr
