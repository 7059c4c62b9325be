#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>

namespace cribwatch {

// Error carries a stable machine-readable code alongside the human message.
// Codes are what the CLI prints as `error_code=...` and what tests match on.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

namespace errc {
inline constexpr const char* parse_error = "parse_error";
inline constexpr const char* validation_error = "validation_error";
inline constexpr const char* empty_directory = "empty_directory";
inline constexpr const char* unsupported_format = "unsupported_format";
inline constexpr const char* box_out_of_bounds = "box_out_of_bounds";
inline constexpr const char* resolution_mismatch = "resolution_mismatch";
inline constexpr const char* backend_failure = "backend_failure";
inline constexpr const char* degenerate_data = "degenerate_data";
inline constexpr const char* non_finite = "non_finite";
inline constexpr const char* config_error = "config_error";
inline constexpr const char* out_of_order_frame = "out_of_order_frame";
inline constexpr const char* buffer_full_critical = "buffer_full_critical";
inline constexpr const char* sink_unavailable = "sink_unavailable";
inline constexpr const char* connect_error = "connect_error";
inline constexpr const char* tls_config_error = "tls_config_error";
inline constexpr const char* source_error = "source_error";
inline constexpr const char* io_error = "io_error";
} // namespace errc

// Monotonic clock, milliseconds since an arbitrary epoch.
inline double mono_ms() {
    using namespace std::chrono;
    return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

// Wall clock as RFC 3339 UTC text, e.g. "2025-03-14T09:26:53.589Z".
std::string wall_rfc3339();

// Sleep until `deadline_ms` on the monotonic clock. Sleeps coarsely, then
// spins the last stretch so pacing bounds hold to well under a millisecond.
void sleep_until_mono(double deadline_ms);

// Burn CPU on the calling thread until `ms` of *thread* CPU time has elapsed.
// Unlike a wall-clock spin this models genuinely CPU-bound work: running N
// of these concurrently on fewer than N cores stretches each call.
void burn_cpu_ms(double ms);

// splitmix64: tiny deterministic generator. Used everywhere randomness must
// be reproducible across platforms (std distributions are not).
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1).
    double next_unit() { return (next() >> 11) * 0x1.0p-53; }

    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        SplitMix64 g(a ^ (b * 0x9e3779b97f4a7c15ULL + 0x165667b19e3779f9ULL));
        return g.next();
    }

private:
    std::uint64_t state_;
};

// Running mean / sample variance (Welford), exact min/max.
// std is the n-1 sample flavor; n == 1 reports std 0.
class StatsAccumulator {
public:
    void add(double x) {
        ++n_;
        if (x < min_) min_ = x;
        if (x > max_) max_ = x;
        double delta = x - mean_;
        mean_ += delta / static_cast<double>(n_);
        m2_ += delta * (x - mean_);
    }

    std::size_t count() const { return n_; }
    double mean() const { return n_ ? mean_ : 0.0; }
    double min() const { return n_ ? min_ : 0.0; }
    double max() const { return n_ ? max_ : 0.0; }
    double std() const {
        if (n_ < 2) return 0.0;
        return std::sqrt(m2_ / static_cast<double>(n_ - 1));
    }

private:
    std::size_t n_ = 0;
    double mean_ = 0.0;
    double m2_ = 0.0;
    double min_ = std::numeric_limits<double>::infinity();
    double max_ = -std::numeric_limits<double>::infinity();
};

// Shortest decimal form that round-trips the double (to_chars), so CSV and
// JSON reports can be parsed back bit-exactly.
std::string fmt_double(double v);

// FNV-1a 64-bit, hex. Digests for idempotency keys and ROI provenance.
std::string fnv1a_hex(const void* data, std::size_t len);

// Samples the process resident set while alive and reports the peak
// increment over the baseline taken at construction. /proc-based, >= 10 Hz.
class MemoryProbe {
public:
    MemoryProbe();
    ~MemoryProbe();
    MemoryProbe(const MemoryProbe&) = delete;
    MemoryProbe& operator=(const MemoryProbe&) = delete;

    void stop();
    double peak_increment_mb() const;
    double baseline_mb() const { return baseline_mb_; }

    // Current VmRSS / VmHWM of this process, in MB. 0 when unreadable.
    static double current_rss_mb();
    static double peak_rss_mb();

private:
    void sample_loop();

    double baseline_mb_ = 0.0;
    std::atomic<double> peak_mb_{0.0};
    std::atomic<bool> running_{true};
    std::thread sampler_;
};

} // namespace cribwatch
