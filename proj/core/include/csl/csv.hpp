#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace csl::csv {

using Row = std::vector<std::string>;

// RFC 4180 quoting: fields with comma, quote, CR or LF are quoted.
std::string escape(std::string_view field);
std::string format_row(const Row& row);

// Parses a whole document. Quoted fields may span lines. A trailing newline
// does not produce an empty row.
std::vector<Row> parse(std::string_view text);

}  // namespace csl::csv
