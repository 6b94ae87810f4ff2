#include "gwmoe/io.hpp"

#include <array>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "gwmoe/errors.hpp"

namespace gwmoe::io {

namespace {

template <typename U>
void write_le(std::ostream& out, U v) {
    std::array<char, sizeof(U)> bytes{};
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(bytes.data(), bytes.size());
}

template <typename U>
U read_le(std::istream& in, const char* what) {
    std::array<unsigned char, sizeof(U)> bytes{};
    in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw FormatError(std::string("truncated tensor container while reading ") + what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
    return v;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_le(out, v); }
std::uint32_t read_u32(std::istream& in) { return read_le<std::uint32_t>(in, "u32"); }
std::uint64_t read_u64(std::istream& in) { return read_le<std::uint64_t>(in, "u64"); }

void write_tensor(std::ostream& out, const Tensor& t) {
    out.write(kTensorMagic, 4);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) write_le<std::uint64_t>(out, d);
    for (double v : t.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        write_le(out, bits);
    }
    if (!out) throw FormatError("failed writing tensor");
}

Tensor read_tensor(std::istream& in) {
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4) throw FormatError("truncated tensor container: missing magic");
    if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic (expected GWT1)");
    const auto rank = read_le<std::uint32_t>(in, "rank");
    if (rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
        d = read_le<std::uint64_t>(in, "dims");
        if (d != 0 && count > (std::uint64_t{1} << 40) / d) throw FormatError("implausible tensor size");
        count *= d;
    }
    std::vector<double> values(count);
    for (auto& v : values) {
        const auto bits = read_le<std::uint64_t>(in, "data");
        std::memcpy(&v, &bits, sizeof v);
    }
    return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    atomic_write(path, [&](std::ostream& out) { write_tensor(out, t); });
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return read_tensor(in);
}

void atomic_write(const std::filesystem::path& path, const std::function<void(std::ostream&)>& writer) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
        writer(out);
        out.flush();
        if (!out) throw FormatError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string format_double(double v) {
    std::array<char, 64> buf{};
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

KeyValueConfig KeyValueConfig::parse(std::istream& in) {
    KeyValueConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
        auto key = trim(line.substr(0, eq));
        if (key.empty()) throw FormatError("config line " + std::to_string(lineno) + ": empty key");
        cfg.values_[key] = trim(line.substr(eq + 1));
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config " + path.string());
    return parse(in);
}

std::optional<std::string> KeyValueConfig::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
}

std::string KeyValueConfig::str(const std::string& key, const std::string& fallback) const {
    return get(key).value_or(fallback);
}

double KeyValueConfig::number(const std::string& key, double fallback) const {
    auto v = get(key);
    if (!v) return fallback;
    try {
        std::size_t used = 0;
        double x = std::stod(*v, &used);
        if (used != v->size()) throw std::invalid_argument(*v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not a number: " + *v);
    }
}

long long KeyValueConfig::integer(const std::string& key, long long fallback) const {
    auto v = get(key);
    if (!v) return fallback;
    long long x = 0;
    auto res = std::from_chars(v->data(), v->data() + v->size(), x);
    if (res.ec != std::errc{} || res.ptr != v->data() + v->size())
        throw ConfigError("config key '" + key + "': not an integer: " + *v);
    return x;
}

bool KeyValueConfig::boolean(const std::string& key, bool fallback) const {
    auto v = get(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
    if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
    throw ConfigError("config key '" + key + "': not a boolean: " + *v);
}

void KeyValueConfig::write(std::ostream& out) const {
    for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
}

CsvWriter::CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
    : columns_(header.size()) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_ = std::make_unique<std::ofstream>(path, std::ios::trunc);
    if (!*out_) throw FormatError("cannot open " + path.string() + " for writing");
    row(header);
}

CsvWriter::~CsvWriter() = default;

void CsvWriter::row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_)
        throw ContractError("csv row has " + std::to_string(cells.size()) + " cells, header has " +
                            std::to_string(columns_));
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) *out_ << ',';
        const auto& c = cells[i];
        if (c.find_first_of(",\"\n") != std::string::npos) {
            *out_ << '"';
            for (char ch : c) {
                if (ch == '"') *out_ << '"';
                *out_ << ch;
            }
            *out_ << '"';
        } else {
            *out_ << c;
        }
    }
    *out_ << '\n';
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            cells.push_back(std::move(cur));
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    cells.push_back(std::move(cur));
    return cells;
}

}  // namespace gwmoe::io
