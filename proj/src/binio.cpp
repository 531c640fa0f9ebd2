#include "cs2k/binio.hpp"

#include "cs2k/errors.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

namespace cs2k::binio {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace {

template <class T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("unexpected end of file");
    return v;
}

// Guards length prefixes against corrupt files.
constexpr std::uint64_t kMaxElements = 1ULL << 32;

} // namespace

void write_header(std::ostream& out, std::string_view magic, std::uint32_t version) {
    char buf[8] = {};
    std::memcpy(buf, magic.data(), std::min<std::size_t>(magic.size(), 8));
    out.write(buf, 8);
    write_u32(out, version);
}

std::uint32_t read_header(std::istream& in, std::string_view magic) {
    char buf[8] = {};
    in.read(buf, 8);
    if (!in) throw FormatError("file too short for header");
    char want[8] = {};
    std::memcpy(want, magic.data(), std::min<std::size_t>(magic.size(), 8));
    if (std::memcmp(buf, want, 8) != 0) {
        throw FormatError("bad magic, expected '" + std::string(magic) + "'");
    }
    return read_u32(in);
}

void write_u32(std::ostream& out, std::uint32_t v) { put(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { put(out, v); }
void write_i32(std::ostream& out, std::int32_t v) { put(out, v); }
void write_f64(std::ostream& out, double v) { put(out, v); }

void write_string(std::ostream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void write_f64s(std::ostream& out, const std::vector<double>& v) {
    write_u64(out, v.size());
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void write_i32s(std::ostream& out, const std::vector<int>& v) {
    write_u64(out, v.size());
    for (int x : v) put<std::int32_t>(out, x);
}

std::uint32_t read_u32(std::istream& in) { return get<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return get<std::uint64_t>(in); }
std::int32_t read_i32(std::istream& in) { return get<std::int32_t>(in); }
double read_f64(std::istream& in) { return get<double>(in); }

std::string read_string(std::istream& in) {
    const auto n = read_u64(in);
    if (n > kMaxElements) throw FormatError("string length out of range");
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) throw FormatError("unexpected end of file");
    return s;
}

std::vector<double> read_f64s(std::istream& in) {
    const auto n = read_u64(in);
    if (n > kMaxElements) throw FormatError("array length out of range");
    std::vector<double> v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw FormatError("unexpected end of file");
    return v;
}

std::vector<int> read_i32s(std::istream& in) {
    const auto n = read_u64(in);
    if (n > kMaxElements) throw FormatError("array length out of range");
    std::vector<int> v(n);
    for (auto& x : v) x = get<std::int32_t>(in);
    return v;
}

} // namespace cs2k::binio
