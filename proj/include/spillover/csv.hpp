#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace spillover {

/// A parsed CSV file: header names plus data rows, each tagged with its 1-based source line.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line_numbers;
    std::string source;

    /// Column index by name; throws InputError naming the source if absent.
    std::size_t column(std::string_view name) const;
    bool has_column(std::string_view name) const;
};

std::vector<std::string> split_csv_line(std::string_view line);
CsvTable parse_csv(std::istream& in, std::string source = "<stream>");
CsvTable read_csv(const std::string& path);

double parse_double(std::string_view text, const CsvTable& table, std::size_t row, std::string_view column);
long long parse_int(std::string_view text, const CsvTable& table, std::size_t row, std::string_view column);

/// Shortest round-trippable decimal form, so written files are stable across runs.
std::string format_double(double value);

}  // namespace spillover
