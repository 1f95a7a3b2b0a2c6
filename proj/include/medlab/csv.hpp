#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace medlab::csv {

// RFC 4180 reader: quoted fields may hold commas, quotes ("") and newlines.
// Throws SchemaError on an unterminated quote.
std::vector<std::vector<std::string>> parse(std::istream& in);

// Quotes a field only when it needs it.
std::string escape(std::string_view field);

// Doubles rendered with 9 significant digits ("%.9g"); the single number
// format used by every report.
std::string format_number(double value);

}  // namespace medlab::csv
