#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace cs2k::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Entry point shared by main() and the tests. `args` excludes argv[0].
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Relative output paths land under $CS2K_OUTPUT_ROOT when it is set.
std::filesystem::path output_path(const std::string& given);

/// "1,2,3" -> {1, 2, 3}. Throws ConfigError on junk or duplicates.
std::vector<std::uint64_t> parse_seeds(const std::string& text);

/// One row of aggregate.csv.
struct AggregateRow {
    std::string seed;  // decimal seed or "median"
    int step = 0;
    std::string group;
    std::optional<double> miou;
};

std::vector<AggregateRow> read_aggregate(const std::filesystem::path& path);

} // namespace cs2k::cli
