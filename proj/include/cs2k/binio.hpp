#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace cs2k::binio {

// Little-endian primitives for the versioned file formats documented in
// docs/formats.md. Every file starts with an 8-byte magic and a u32 version.

void write_header(std::ostream& out, std::string_view magic, std::uint32_t version);
/// Returns the version; throws FormatError on a magic mismatch.
std::uint32_t read_header(std::istream& in, std::string_view magic);

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_i32(std::ostream& out, std::int32_t v);
void write_f64(std::ostream& out, double v);
void write_string(std::ostream& out, const std::string& s);
void write_f64s(std::ostream& out, const std::vector<double>& v);
void write_i32s(std::ostream& out, const std::vector<int>& v);

std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
std::int32_t read_i32(std::istream& in);
double read_f64(std::istream& in);
std::string read_string(std::istream& in);
std::vector<double> read_f64s(std::istream& in);
std::vector<int> read_i32s(std::istream& in);

} // namespace cs2k::binio
