#include "cribwatch/util.hpp"

#include <charconv>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

namespace cribwatch {

std::string wall_rfc3339() {
    using namespace std::chrono;
    auto now = system_clock::now();
    auto secs = time_point_cast<seconds>(now);
    auto ms = duration_cast<milliseconds>(now - secs).count();
    std::time_t t = system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d.%03uZ",
                  tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                  tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<unsigned>(ms % 1000));
    return buf;
}

void sleep_until_mono(double deadline_ms) {
    // Coarse sleep leaves ~1.5 ms, the spin covers scheduler wake-up jitter.
    constexpr double spin_margin_ms = 1.5;
    double remaining = deadline_ms - mono_ms();
    if (remaining > spin_margin_ms) {
        std::this_thread::sleep_for(
            std::chrono::duration<double, std::milli>(remaining - spin_margin_ms));
    }
    while (mono_ms() < deadline_ms) {
        // spin
    }
}

namespace {
double thread_cpu_ms() {
    timespec ts{};
    clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
    return static_cast<double>(ts.tv_sec) * 1000.0 + static_cast<double>(ts.tv_nsec) / 1e6;
}
} // namespace

void burn_cpu_ms(double ms) {
    double start = thread_cpu_ms();
    volatile std::uint64_t sink = 0;
    while (thread_cpu_ms() - start < ms) {
        std::uint64_t acc = 0;
        for (int i = 0; i < 4096; ++i) acc += static_cast<std::uint64_t>(i) * 2654435761ULL;
        sink = acc;
    }
    (void)sink;
}

std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string fnv1a_hex(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {
// Reads a VmRSS/VmHWM line from /proc/self/status, value in kB.
double proc_status_kb(const char* key) {
    std::ifstream in("/proc/self/status");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind(key, 0) == 0) {
            std::istringstream ss(line.substr(std::string(key).size() + 1));
            double kb = 0.0;
            ss >> kb;
            return kb;
        }
    }
    return 0.0;
}
} // namespace

double MemoryProbe::current_rss_mb() { return proc_status_kb("VmRSS") / 1024.0; }
double MemoryProbe::peak_rss_mb() { return proc_status_kb("VmHWM") / 1024.0; }

MemoryProbe::MemoryProbe() {
    baseline_mb_ = current_rss_mb();
    sampler_ = std::thread([this] { sample_loop(); });
}

MemoryProbe::~MemoryProbe() { stop(); }

void MemoryProbe::stop() {
    bool expected = true;
    if (running_.compare_exchange_strong(expected, false) && sampler_.joinable()) {
        sampler_.join();
    }
}

void MemoryProbe::sample_loop() {
    while (running_.load(std::memory_order_relaxed)) {
        double rss = current_rss_mb();
        double prev = peak_mb_.load(std::memory_order_relaxed);
        while (rss > prev && !peak_mb_.compare_exchange_weak(prev, rss)) {
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
}

double MemoryProbe::peak_increment_mb() const {
    double peak = peak_mb_.load(std::memory_order_relaxed);
    return peak > baseline_mb_ ? peak - baseline_mb_ : 0.0;
}

} // namespace cribwatch
