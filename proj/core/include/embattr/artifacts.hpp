#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "embattr/aggregation.hpp"

namespace embattr {

// 17 significant digits; round-trips f64 exactly
std::string format_g17(double v);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void add_row(std::vector<std::string> row) { rows.push_back(std::move(row)); }
};

void write_csv(const CsvTable& table, const std::string& path);
// row-major matrix CSV (one row per line, no header)
void write_map_csv(const Map2D& map, const std::string& path);

// P5, maxval 255, half-up rounding; expects values in [0,1]
void write_pgm(const Map2D& normalized_map, const std::string& path);

// key=value lines in given order
void write_manifest(const std::vector<std::pair<std::string, std::string>>& kv,
                    const std::string& path);

std::uint64_t fnv1a_bytes(std::span<const std::uint8_t> bytes);
std::uint64_t fnv1a_file(const std::string& path);

}  // namespace embattr
