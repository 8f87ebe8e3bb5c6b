#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cascade {

using json = nlohmann::json;
using TokenId = std::uint32_t;

// Thrown for malformed or inconsistent configuration. `field` is a dotted path
// into the experiment config (e.g. "knowledge.L_max").
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& what)
        : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

// Thrown when an input file cannot be used (missing, truncated, out-of-range).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Inclusive integer interval [lo, hi].
struct TokenRange {
    TokenId lo = 0;
    TokenId hi = 0;

    std::size_t size() const noexcept { return static_cast<std::size_t>(hi) - lo + 1; }
    bool contains(TokenId t) const noexcept { return t >= lo && t <= hi; }
    bool contains(const TokenRange& o) const noexcept { return o.lo >= lo && o.hi <= hi; }
    bool overlaps(const TokenRange& o) const noexcept { return lo <= o.hi && o.lo <= hi; }
    bool operator==(const TokenRange&) const = default;
};

inline void to_json(json& j, const TokenRange& r) { j = json::array({r.lo, r.hi}); }
inline void from_json(const json& j, TokenRange& r) {
    if (!j.is_array() || j.size() != 2) throw std::invalid_argument("range must be [lo, hi]");
    r.lo = j.at(0).get<TokenId>();
    r.hi = j.at(1).get<TokenId>();
}

// Partition of the token alphabet into format tokens and knowledge tokens.
struct VocabLayout {
    std::size_t vocab_size = 128;
    TokenRange format_range{0, 119};
    TokenRange knowledge_range{120, 127};

    void validate() const {
        if (vocab_size == 0) throw ConfigError("layout.vocab_size", "must be positive");
        if (format_range.lo > format_range.hi)
            throw ConfigError("layout.format_range", "empty range");
        if (knowledge_range.lo > knowledge_range.hi)
            throw ConfigError("layout.knowledge_range", "empty range");
        if (format_range.hi >= vocab_size)
            throw ConfigError("layout.format_range", "exceeds vocab_size");
        if (knowledge_range.hi >= vocab_size)
            throw ConfigError("layout.knowledge_range", "exceeds vocab_size");
        if (format_range.overlaps(knowledge_range))
            throw ConfigError("layout", "format_range and knowledge_range overlap");
    }

    bool operator==(const VocabLayout&) const = default;
};

inline void to_json(json& j, const VocabLayout& l) {
    j = json{{"vocab_size", l.vocab_size},
             {"format_range", l.format_range},
             {"knowledge_range", l.knowledge_range}};
}
inline void from_json(const json& j, VocabLayout& l) {
    l.vocab_size = j.at("vocab_size").get<std::size_t>();
    l.format_range = j.at("format_range").get<TokenRange>();
    l.knowledge_range = j.at("knowledge_range").get<TokenRange>();
}

// ---------------------------------------------------------------------------
// Random numbers
//
// std::mt19937_64 output is fully specified by the standard, but the
// std::*_distribution classes are not, so the draws below are written out to
// keep datasets and checkpoints identical across standard libraries.
// ---------------------------------------------------------------------------

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derives an independent 64-bit seed for a named component of an experiment.
///
/// seed = splitmix64(splitmix64(master ^ fnv1a64(label)) ^ splitmix64(index)).
/// Only integer arithmetic is involved, so the result is the same on every
/// platform.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                                    std::uint64_t index = 0) noexcept {
    return splitmix64(splitmix64(master ^ fnv1a64(label)) ^ splitmix64(index));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // Uniform over [0, n). Rejection sampling keeps it exactly unbiased.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below(0)");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    // Uniform over [lo, hi] inclusive.
    std::uint64_t between(std::uint64_t lo, std::uint64_t hi) { return lo + below(hi - lo + 1); }

    // Uniform over [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Standard normal by Box-Muller; the second variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const auto j = below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Binary and text IO
// ---------------------------------------------------------------------------

namespace io {

inline std::uint32_t to_le(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
    return v;
}

inline std::vector<char> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Writes through a temporary file and renames it into place so readers never
// see a partial file.
inline void write_atomic(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path) {
    auto bytes = read_bytes(path);
    return {bytes.begin(), bytes.end()};
}

inline json read_json(const std::filesystem::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

inline void write_json(const std::filesystem::path& path, const json& j) {
    write_atomic(path, j.dump(2) + "\n");
}

// Raw token files: little-endian u32 words, no header.
inline std::string encode_tokens(std::span<const TokenId> tokens) {
    std::string out(tokens.size() * 4, '\0');
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::uint32_t le = to_le(tokens[i]);
        std::memcpy(out.data() + 4 * i, &le, 4);
    }
    return out;
}

inline void write_tokens(const std::filesystem::path& path, std::span<const TokenId> tokens) {
    write_atomic(path, encode_tokens(tokens));
}

inline std::vector<TokenId> read_tokens(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    if (bytes.size() % 4 != 0)
        throw DataError(path.string() + ": truncated token file (" + std::to_string(bytes.size()) +
                        " bytes is not a multiple of 4)");
    std::vector<TokenId> tokens(bytes.size() / 4);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        std::uint32_t le;
        std::memcpy(&le, bytes.data() + 4 * i, 4);
        tokens[i] = to_le(le);
    }
    return tokens;
}

}  // namespace io

inline bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

inline unsigned log2_exact(std::size_t n) {
    if (!is_power_of_two(n)) throw std::invalid_argument("not a power of two: " + std::to_string(n));
    return static_cast<unsigned>(std::countr_zero(n));
}

}  // namespace cascade
