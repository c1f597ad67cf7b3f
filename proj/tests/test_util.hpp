#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace test_util {

inline std::filesystem::path scratch_dir() {
    static const auto dir = [] {
        auto d = std::filesystem::temp_directory_path() / ("spillover_tests_" + std::to_string(::getpid()));
        std::filesystem::create_directories(d);
        return d;
    }();
    return dir;
}

inline std::string temp_path(const std::string& name) { return (scratch_dir() / name).string(); }

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

}  // namespace test_util
