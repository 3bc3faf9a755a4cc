#include "embattr/artifacts.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace embattr {

std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_csv(const CsvTable& table, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("csv '" + path + "': cannot open for writing");
    for (std::size_t i = 0; i < table.header.size(); ++i)
        os << (i ? "," : "") << table.header[i];
    os << "\n";
    for (const auto& row : table.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
        os << "\n";
    }
    if (!os) throw std::runtime_error("csv '" + path + "': write failed");
}

void write_map_csv(const Map2D& map, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("csv '" + path + "': cannot open for writing");
    for (int i = 0; i < map.h; ++i) {
        for (int j = 0; j < map.w; ++j) os << (j ? "," : "") << format_g17(map.at(i, j));
        os << "\n";
    }
    if (!os) throw std::runtime_error("csv '" + path + "': write failed");
}

void write_pgm(const Map2D& map, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("pgm '" + path + "': cannot open for writing");
    os << "P5\n" << map.w << " " << map.h << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(map.w));
    for (int i = 0; i < map.h; ++i) {
        for (int j = 0; j < map.w; ++j) {
            const double v = map.at(i, j);
            const double scaled = std::floor(v * 255.0 + 0.5);  // half-up
            row[static_cast<std::size_t>(j)] =
                static_cast<unsigned char>(scaled < 0 ? 0 : (scaled > 255 ? 255 : scaled));
        }
        os.write(reinterpret_cast<const char*>(row.data()), map.w);
    }
    if (!os) throw std::runtime_error("pgm '" + path + "': write failed");
}

void write_manifest(const std::vector<std::pair<std::string, std::string>>& kv,
                    const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("manifest '" + path + "': cannot open for writing");
    for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
    if (!os) throw std::runtime_error("manifest '" + path + "': write failed");
}

std::uint64_t fnv1a_bytes(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("hash '" + path + "': cannot open");
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        const std::streamsize n = is.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<std::uint8_t>(buf[i]);
            h *= 0x100000001b3ull;
        }
        if (!is) break;
    }
    return h;
}

}  // namespace embattr
