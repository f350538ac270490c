#pragma once

// Shared basics: the global float width, seeded RNG, 64-bit checksums and
// the error categories the CLI maps to exit codes.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace nute {

#ifdef NUTE_REAL32
using real = float;
inline constexpr const char* kRealName = "float32";
#else
using real = double;
inline constexpr const char* kRealName = "float64";
#endif

// Error categories. The CLI maps each to a distinct exit code.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct shape_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct missing_key_error : io_error {
    using io_error::io_error;
};
struct corrupt_data_error : io_error {
    using io_error::io_error;
};
struct train_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Single RNG type everywhere; seeded explicitly so runs are reproducible.
using Rng = std::mt19937_64;

inline real uniform01(Rng& rng) {
    // Clamped away from the endpoints so log(u) and log(1-u) stay finite.
    constexpr real lo = static_cast<real>(1e-12);
    real u = std::uniform_real_distribution<real>(0.0, 1.0)(rng);
    if (u < lo) u = lo;
    if (u > real(1) - lo) u = real(1) - lo;
    return u;
}

inline real normal(Rng& rng, real mean, real stddev) {
    return std::normal_distribution<real>(mean, stddev)(rng);
}

// FNV-1a, the checksum named in every container header.
inline constexpr const char* kChecksumName = "fnv1a64";

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::vector<real>& v, uint64_t seed = 0xcbf29ce484222325ULL) {
    return fnv1a64(v.data(), v.size() * sizeof(real), seed);
}

// Instance accounting for memory-heavy objects. Embedding one of these as a
// member makes every live instance of the owner count toward live(); peak()
// records the high-water mark since the last reset. Copies count as new
// instances; moves transfer the count (a moved-from shell owns no buffers),
// so handing an object into a container does not inflate the peak.
template <class Tag>
struct LiveCounter {
    LiveCounter() : alive_(true) { bump(); }
    LiveCounter(const LiveCounter& o) : alive_(o.alive_) {
        if (alive_) bump();
    }
    LiveCounter(LiveCounter&& o) noexcept : alive_(o.alive_) { o.alive_ = false; }
    LiveCounter& operator=(const LiveCounter& o) {
        if (this != &o) {
            if (alive_ && !o.alive_) --live();
            if (!alive_ && o.alive_) bump();
            alive_ = o.alive_;
        }
        return *this;
    }
    LiveCounter& operator=(LiveCounter&& o) noexcept {
        if (this != &o) {
            if (alive_) --live();
            alive_ = o.alive_;
            o.alive_ = false;
        }
        return *this;
    }
    ~LiveCounter() {
        if (alive_) --live();
    }

    static int& live() {
        static int n = 0;
        return n;
    }
    static int& peak() {
        static int n = 0;
        return n;
    }
    static void reset_peak() { peak() = live(); }

   private:
    bool alive_ = false;
    static void bump() {
        ++live();
        if (live() > peak()) peak() = live();
    }
};

}  // namespace nute
