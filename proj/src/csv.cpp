#include "spillover/csv.hpp"

#include "spillover/errors.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <sstream>

namespace spillover {

namespace {

std::string location(const CsvTable& table, std::size_t row) {
    return table.source + ":" + std::to_string(table.line_numbers.at(row));
}

std::string_view trim(std::string_view text) {
    while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
    while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) {
        text.remove_suffix(1);
    }
    return text;
}

}  // namespace

std::size_t CsvTable::column(std::string_view name) const {
    for (std::size_t k = 0; k < header.size(); ++k) {
        if (header[k] == name) return k;
    }
    throw InputError(source + ": missing required column '" + std::string(name) + "'");
}

bool CsvTable::has_column(std::string_view name) const {
    for (const auto& h : header) {
        if (h == name) return true;
    }
    return false;
}

std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> fields;
    std::string current;
    bool quoted = false;
    for (std::size_t k = 0; k < line.size(); ++k) {
        const char c = line[k];
        if (quoted) {
            if (c == '"') {
                if (k + 1 < line.size() && line[k + 1] == '"') {
                    current.push_back('"');
                    ++k;
                } else {
                    quoted = false;
                }
            } else {
                current.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.emplace_back(trim(current));
            current.clear();
        } else {
            current.push_back(c);
        }
    }
    fields.emplace_back(trim(current));
    return fields;
}

CsvTable parse_csv(std::istream& in, std::string source) {
    CsvTable table;
    table.source = std::move(source);
    std::string line;
    std::size_t line_number = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_number;
        if (line_number == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) {
            line.erase(0, 3);
        }
        if (trim(line).empty()) continue;
        auto fields = split_csv_line(line);
        if (!have_header) {
            table.header = std::move(fields);
            have_header = true;
            continue;
        }
        if (fields.size() != table.header.size()) {
            throw InputError(table.source + ":" + std::to_string(line_number) + ": expected " +
                             std::to_string(table.header.size()) + " fields, found " +
                             std::to_string(fields.size()));
        }
        table.rows.push_back(std::move(fields));
        table.line_numbers.push_back(line_number);
    }
    if (!have_header) throw InputError(table.source + ": empty CSV (no header)");
    return table;
}

CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    return parse_csv(in, path);
}

double parse_double(std::string_view text, const CsvTable& table, std::size_t row,
                    std::string_view column) {
    double value = 0.0;
    const auto* begin = text.data();
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end || text.empty()) {
        throw InputError(location(table, row) + ": column '" + std::string(column) +
                         "' is not a number: '" + std::string(text) + "'");
    }
    return value;
}

long long parse_int(std::string_view text, const CsvTable& table, std::size_t row,
                    std::string_view column) {
    long long value = 0;
    const auto* begin = text.data();
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end || text.empty()) {
        throw InputError(location(table, row) + ": column '" + std::string(column) +
                         "' is not an integer: '" + std::string(text) + "'");
    }
    return value;
}

std::string format_double(double value) {
    if (std::isnan(value)) return "";
    char buffer[64];
    const auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
    return std::string(buffer, ptr);
}

}  // namespace spillover
