#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace opgrpo {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stream purposes, so that streams keyed by the same numbers never collide.
enum class StreamKind : std::uint64_t {
    init = 1,
    member = 2,
    schedule = 3,
    shuffle = 4,
    buffer_sample = 5,
    regenerate = 6,
    evaluation = 7,
};

// A seeded random stream. Streams are derived from (seed, kind, keys...) so that
// results do not depend on the order in which streams are consumed.
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    RandomStream(std::uint64_t seed, StreamKind kind, std::initializer_list<std::uint64_t> keys)
        : engine_(derive(seed, kind, keys)) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    bool bernoulli(double p) { return uniform() < p; }
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

    std::mt19937_64& engine() { return engine_; }

    static std::uint64_t derive(std::uint64_t seed, StreamKind kind, std::initializer_list<std::uint64_t> keys) {
        std::uint64_t h = splitmix64(seed ^ (static_cast<std::uint64_t>(kind) << 56));
        for (auto k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
        return h;
    }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace opgrpo
