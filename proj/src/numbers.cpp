#include "flairr/numbers.hpp"

#include <cmath>
#include <cstdio>

#include "flairr/errors.hpp"

namespace flairr {

std::string format_number(double value, int precision) {
  if (precision < 0 || precision > kMaxPrecision) {
    throw ConfigError("number precision must be in 0.." + std::to_string(kMaxPrecision) +
                      ", got " + std::to_string(precision));
  }
  if (!std::isfinite(value)) throw DataError("cannot format a non-finite value");

  const double scale = std::pow(10.0, precision);
  // std::round rounds half away from zero; printf would round half to even
  // on the binary value.
  double rounded = std::round(value * scale);
  if (!std::isfinite(rounded)) rounded = value * scale;
  if (rounded == 0.0) rounded = 0.0;  // drop the sign of -0

  char buf[64];
  const int n = std::snprintf(buf, sizeof buf, "%.*f", precision, rounded / scale);
  if (n > 0 && static_cast<std::size_t>(n) < sizeof buf) return std::string(buf, static_cast<std::size_t>(n));

  std::string big(static_cast<std::size_t>(n) + 1, '\0');
  std::snprintf(big.data(), big.size(), "%.*f", precision, rounded / scale);
  big.pop_back();
  return big;
}

std::string format_numbers(std::span<const double> values, int precision) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i > 0) out += ", ";
    out += format_number(values[i], precision);
  }
  return out;
}

}  // namespace flairr
