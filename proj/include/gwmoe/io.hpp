#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gwmoe/tensor.hpp"

namespace gwmoe::io {

/// Tensor container, little-endian:
///   "GWT1" | u32 rank | u64 dims[rank] | f64 data[prod(dims)]
inline constexpr char kTensorMagic[4] = {'G', 'W', 'T', '1'};

void write_tensor(std::ostream& out, const Tensor& t);
/// Throws FormatError on bad magic, truncated header or truncated data.
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);

/// Writes through a sibling temp file and renames it into place.
void atomic_write(const std::filesystem::path& path, const std::function<void(std::ostream&)>& writer);

/// Shortest round-trip decimal text for a double.
std::string format_double(double v);

/// Flat `key = value` text config. '#' starts a comment; blank lines ignored.
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::istream& in);
    static KeyValueConfig load(const std::filesystem::path& path);

    bool contains(const std::string& key) const { return values_.count(key) != 0; }
    std::optional<std::string> get(const std::string& key) const;
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
    const std::map<std::string, std::string>& values() const { return values_; }

    std::string str(const std::string& key, const std::string& fallback) const;
    double number(const std::string& key, double fallback) const;
    long long integer(const std::string& key, long long fallback) const;
    bool boolean(const std::string& key, bool fallback) const;

    void write(std::ostream& out) const;

private:
    std::map<std::string, std::string> values_;
};

/// Minimal CSV writer; values are written verbatim, numbers via format_double.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);
    ~CsvWriter();
    CsvWriter(const CsvWriter&) = delete;
    CsvWriter& operator=(const CsvWriter&) = delete;

    void row(const std::vector<std::string>& cells);

private:
    std::unique_ptr<std::ofstream> out_;
    std::size_t columns_;
};

/// Splits one CSV line on commas; quoted fields may contain commas.
std::vector<std::string> split_csv_line(const std::string& line);

}  // namespace gwmoe::io
