#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace derail {

// Stable 64-bit FNV-1a. Used for cache keys, fingerprints and the synthetic
// backend, so it must not change between releases.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t basis = 0xcbf29ce484222325ULL);

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

// Hash an ordered list of parts; parts are length-prefixed so ("ab","c")
// and ("a","bc") differ.
std::uint64_t hash_parts(std::initializer_list<std::string_view> parts);

// Map a 64-bit hash to a double in [0, 1) using the top 53 bits.
double unit_interval(std::uint64_t h);

std::string hex64(std::uint64_t v);

// Seeded random stream with a portable bounded draw. std::mt19937_64 output is
// fixed by the standard; the distributions are not, so we avoid them.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    double uniform() { return unit_interval(engine_()); }
    // Uniform integer in [0, bound). bound must be > 0.
    std::uint64_t below(std::uint64_t bound);

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

std::string trim(std::string_view s);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

// Calls fn(line_number, line) for each non-blank line; line numbers are 1-based.
void for_each_line(const std::filesystem::path& path,
                   const std::function<void(std::size_t, const std::string&)>& fn);

// Runs fn(i) for i in [0, count) on up to `jobs` threads. The first exception
// thrown (lowest index) is rethrown after all workers finish.
void parallel_for(std::size_t count, unsigned jobs, const std::function<void(std::size_t)>& fn);

// Fixed-point rendering with round-half-away-from-zero on the decimal
// representation, independent of locale.
std::string format_fixed(double value, int decimals);

} // namespace derail
