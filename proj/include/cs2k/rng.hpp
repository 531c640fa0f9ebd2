#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace cs2k {

/// Source of random draws. Everything that consumes randomness takes one of
/// these so tests can substitute scripted draws.
class RandomSource {
public:
    virtual ~RandomSource() = default;
    virtual double normal() = 0;            // N(0, 1)
    virtual double uniform() = 0;           // U[0, 1)
    virtual std::size_t below(std::size_t n) = 0;  // uniform in [0, n)
};

class SeededRandom final : public RandomSource {
public:
    explicit SeededRandom(std::uint64_t seed) : engine_(seed) {}

    double normal() override { return normal_(engine_); }
    double uniform() override { return uniform_(engine_); }
    std::size_t below(std::size_t n) override;

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Independent named streams. Each concern draws from its own stream so that
// switching one mechanism off never shifts the draws seen by another.
enum class Stream : std::uint64_t {
    init = 1,
    shuffle = 2,
    self_aug = 3,
    inter_aug = 4,
    scenario = 5,
};

std::uint64_t splitmix64(std::uint64_t x);

/// Seed for `stream` at `step` (or image index) derived from a base seed.
std::uint64_t derive_seed(std::uint64_t base, Stream stream, std::uint64_t index = 0);

inline SeededRandom make_stream(std::uint64_t base, Stream stream, std::uint64_t index = 0) {
    return SeededRandom(derive_seed(base, stream, index));
}

} // namespace cs2k
