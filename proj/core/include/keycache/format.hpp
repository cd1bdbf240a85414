#pragma once

#include <string>
#include <string_view>

namespace keycache {

/// Shortest round-trip decimal for a double; NaN becomes an empty string
/// (CSV cells) and infinities "inf"/"-inf".
std::string format_number(double v);

/// Quotes a CSV cell if it contains a comma, quote or newline.
std::string csv_escape(std::string_view cell);

}  // namespace keycache
