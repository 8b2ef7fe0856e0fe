#pragma once

// Shared vocabulary types for the knowledge-neuron lab: neuron coordinates,
// architectures, error types, a portable seeded RNG and stable checksums.

#include <cmath>
#include <cstdint>
#include <compare>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace knlab {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration (missing template, bad threshold, unknown flag value).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A call whose documented precondition does not hold.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Non-finite values in training or attribution.
class NumericError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

enum class Architecture { auto_encoding, auto_regressive };

inline std::string_view to_string(Architecture a) {
    return a == Architecture::auto_encoding ? "ae" : "ar";
}

inline Architecture parse_architecture(std::string_view s) {
    if (s == "ae" || s == "auto-encoding" || s == "auto_encoding") return Architecture::auto_encoding;
    if (s == "ar" || s == "auto-regressive" || s == "auto_regressive") return Architecture::auto_regressive;
    throw ConfigError("unknown architecture '" + std::string(s) + "' (expected ae or ar)");
}

/// FFN intermediate unit `unit` of block `layer`.
struct NeuronId {
    int layer = 0;
    int unit = 0;

    friend auto operator<=>(const NeuronId&, const NeuronId&) = default;
};

inline std::string to_string(NeuronId id) {
    return "(" + std::to_string(id.layer) + "," + std::to_string(id.unit) + ")";
}

struct NeuronIdHash {
    std::size_t operator()(NeuronId id) const noexcept {
        return std::hash<std::uint64_t>{}((static_cast<std::uint64_t>(id.layer) << 32) ^
                                          static_cast<std::uint32_t>(id.unit));
    }
};

// splitmix64 finalizer; used to derive independent sub-seeds from one run seed.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
    return mix64(fnv1a64(label, mix64(base)));
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

inline std::string file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for checksum");
    std::ostringstream buf;
    buf << in.rdbuf();
    return hex64(fnv1a64(buf.str()));
}

/// Seeded generator whose derived draws are identical on every platform.
/// std::mt19937_64 is fully specified; the standard distributions are not,
/// so the draws below are built directly on the engine output.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n), rejection-sampled.
    std::size_t index(std::size_t n) {
        if (n == 0) throw PreconditionError("Rng::index on empty range");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return static_cast<std::size_t>(x % n);
    }

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
        spare_ = r * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace knlab
