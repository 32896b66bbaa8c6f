#include "derail/util.hpp"

#include "derail/error.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace derail {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::io: return "io";
    case ErrorKind::schema: return "schema";
    case ErrorKind::precondition: return "precondition";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::backend: return "backend";
    case ErrorKind::conflict: return "conflict";
    case ErrorKind::infeasible: return "infeasible";
    case ErrorKind::config: return "config";
    }
    return "unknown";
}

std::uint64_t fnv1a64(std::string_view data, std::uint64_t basis) {
    std::uint64_t h = basis;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t hash_parts(std::initializer_list<std::string_view> parts) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto part : parts) {
        const std::string len = std::to_string(part.size()) + ":";
        h = fnv1a64(len, h);
        h = fnv1a64(part, h);
    }
    return mix64(h);
}

double unit_interval(std::uint64_t h) {
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t Rng::below(std::uint64_t bound) {
    // Rejection sampling keeps the draw unbiased and portable.
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % bound;
}

std::string trim(std::string_view s) {
    const auto is_space = [](char c) {
        return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
    };
    std::size_t b = 0, e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write " + path.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

void for_each_line(const std::filesystem::path& path,
                   const std::function<void(std::size_t, const std::string&)>& fn) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        fn(lineno, line);
    }
}

void parallel_for(std::size_t count, unsigned jobs, const std::function<void(std::size_t)>& fn) {
    if (jobs <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::size_t err_index = count;
    std::exception_ptr err;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(err_mutex);
                if (i < err_index) {
                    err_index = i;
                    err = std::current_exception();
                }
            }
        }
    };
    const unsigned n = static_cast<unsigned>(std::min<std::size_t>(jobs, count));
    std::vector<std::thread> threads;
    threads.reserve(n);
    for (unsigned t = 0; t < n; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (err) std::rethrow_exception(err);
}

std::string format_fixed(double value, int decimals) {
    // Round on a longer decimal expansion so 0.125 renders as "0.13".
    if (!std::isfinite(value)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals + 6, value);
    std::string s = buf;
    const bool negative = !s.empty() && s[0] == '-';
    if (negative) s.erase(0, 1);
    const auto dot = s.find('.');
    std::string digits = s.substr(0, dot) + s.substr(dot + 1);
    const std::size_t int_len = dot;
    const std::size_t keep = int_len + static_cast<std::size_t>(decimals);
    const bool round_up = digits[keep] >= '5';
    digits.resize(keep);
    if (round_up) {
        std::size_t i = digits.size();
        while (i > 0) {
            --i;
            if (digits[i] == '9') {
                digits[i] = '0';
                if (i == 0) {
                    digits.insert(digits.begin(), '1');
                    break;
                }
            } else {
                ++digits[i];
                break;
            }
        }
    }
    const std::size_t new_int_len = digits.size() - static_cast<std::size_t>(decimals);
    std::string out = digits.substr(0, new_int_len);
    if (decimals > 0) out += "." + digits.substr(new_int_len);
    bool all_zero = true;
    for (char c : out) {
        if (c != '0' && c != '.') all_zero = false;
    }
    if (negative && !all_zero) out.insert(out.begin(), '-');
    return out;
}

} // namespace derail
