#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cribwatch/net.hpp"
#include "cribwatch/util.hpp"

namespace cribwatch::telemetry {

constexpr int kSchemaVersion = 1;

enum class Kind { state_transition, counter_snapshot, alert, heartbeat };
enum class Priority { routine, critical };

const char* kind_name(Kind k);
const char* priority_name(Priority p);

// A priority-tagged, schema-versioned record. Payload keys are fixed per
// kind; (device_id, t_ms, kind) is the idempotency key receivers dedupe on.
struct TelemetryEvent {
    int schema_version = kSchemaVersion;
    Kind kind = Kind::heartbeat;
    Priority priority = Priority::routine;
    double t_ms = 0.0;         // monotonic/logical time
    std::string wall_time;     // RFC 3339
    std::string device_id;
    nlohmann::json payload;

    nlohmann::json to_json() const;
    // Enforces the per-kind payload schema and the alerts-are-critical rule.
    void validate() const;
};

TelemetryEvent make_state_transition(const std::string& device, double t_ms,
                                     const std::string& label, const std::string& prev_label,
                                     double confidence);
TelemetryEvent make_counter_snapshot(const std::string& device, double t_ms,
                                     const std::map<std::string, double>& cumulative_ms);
TelemetryEvent make_alert(const std::string& device, double t_ms, const std::string& label,
                          double episode_start_ms, double sustained_ms);
TelemetryEvent make_heartbeat(const std::string& device, double t_ms, std::int64_t seq);

// Builds the framed wire message for a batch. Empty event lists produce no
// frame (empty vector).
std::vector<std::uint8_t> build_frame(const std::string& topic,
                                      const std::vector<TelemetryEvent>& events);

// Delivery target. publish() throws Error(sink_unavailable) on failure,
// after which the batcher retains and retries.
class Sink {
public:
    virtual ~Sink() = default;
    virtual std::string kind() const = 0;
    virtual void publish(const std::vector<std::uint8_t>& frame) = 0;
};

// Publishes (topic, events) as one frame; returns false (no-op ack) for an
// empty event list.
bool publish(Sink& sink, const std::string& topic, const std::vector<TelemetryEvent>& events);

// In-memory sink for assertions: keeps every frame in publish order.
class MemorySink final : public Sink {
public:
    std::string kind() const override { return "memory"; }
    void publish(const std::vector<std::uint8_t>& frame) override;

    std::vector<std::string> bodies() const;     // frame bodies, in order
    std::size_t frame_count() const;
    std::size_t event_count() const;             // total events across frames
    void set_available(bool up);                 // outage injection

private:
    mutable std::mutex mu_;
    std::vector<std::string> bodies_;
    std::size_t events_ = 0;
    bool available_ = true;
};

// Appends each frame body as one NDJSON line.
class FileSink final : public Sink {
public:
    explicit FileSink(std::string path);
    std::string kind() const override { return "file"; }
    void publish(const std::vector<std::uint8_t>& frame) override;

private:
    std::mutex mu_;
    std::string path_;
};

// Length-prefixed frames over TCP, TLS >= 1.2 optional. Connects on
// construction (handshake before first publish), reconnects after failures.
class SocketSink final : public Sink {
public:
    SocketSink(std::string host, int port, std::optional<net::TlsClientConfig> tls);
    std::string kind() const override { return "socket"; }
    void publish(const std::vector<std::uint8_t>& frame) override;

private:
    void ensure_connected();

    std::mutex mu_;
    std::string host_;
    int port_;
    std::optional<net::TlsClientConfig> tls_;
    std::unique_ptr<net::Stream> stream_;
};

// Factory per the external config schema:
//   {"kind":"memory"} | {"kind":"file","path":...}
//   | {"kind":"socket","host":...,"port":...,"tls":{"min_version":"1.2",...}}
std::unique_ptr<Sink> connect_sink(const nlohmann::json& config);

struct BatcherConfig {
    double interval_ms = 15000.0;
    int max_batch = 256;
    int buffer_capacity = 10000;
    std::string device_id = "device0";
    int heartbeat_idle_ticks = 4;
    double backoff_initial_ms = 250.0;

    void validate() const;
};

struct Delivery {
    std::string topic;
    std::size_t event_count = 0;
    double delivered_at_ms = 0.0;
    std::vector<double> event_enqueue_ms; // enqueue times, for latency checks
};

// Synchronous batching core driven by an explicit clock: routine events
// aggregate until the interval tick, criticals go out on the next dispatch.
// Overflow drops the oldest routine first and never a critical while any
// routine remains. Not thread-safe; ThreadedBatcher adds the locking and
// the real-time dispatch loop.
class Batcher {
public:
    Batcher(BatcherConfig cfg, Sink& sink, double now_ms);

    // Throws Error(buffer_full_critical) when criticals alone exceed the
    // buffer -- the signal of a sustained sink outage.
    void enqueue(TelemetryEvent event, double now_ms);

    // Critical path + scheduled flush + heartbeat. Call frequently; cheap
    // when nothing is due.
    std::vector<Delivery> dispatch(double now_ms);

    // The scheduled part only (the 15 s tick).
    std::vector<Delivery> flush_tick(double now_ms);

    // Deliver everything pending (clean shutdown).
    std::vector<Delivery> drain(double now_ms);

    std::size_t pending_routine() const { return routine_.size(); }
    std::size_t pending_critical() const { return critical_.size(); }
    std::uint64_t enqueued() const { return enqueued_; }
    std::uint64_t delivered() const { return delivered_; }
    std::uint64_t dropped_routine() const { return dropped_routine_; }
    const BatcherConfig& config() const { return cfg_; }

private:
    struct Queued {
        TelemetryEvent event;
        double enqueued_at_ms;
    };

    bool deliver(const std::string& topic, std::vector<Queued> batch, double now_ms,
                 std::vector<Delivery>& out);
    std::vector<Delivery> dispatch_critical(double now_ms);
    bool in_backoff(double now_ms) const;
    void note_failure(double now_ms);

    BatcherConfig cfg_;
    Sink& sink_;
    std::deque<Queued> routine_;
    std::deque<Queued> critical_;
    double last_flush_ms_;
    int idle_ticks_ = 0;
    int consecutive_failures_ = 0;
    double next_attempt_ms_ = -1.0;
    std::int64_t heartbeat_seq_ = 0;
    std::uint64_t enqueued_ = 0;
    std::uint64_t delivered_ = 0;
    std::uint64_t dropped_routine_ = 0;
};

// Real-time driver: a dispatch thread on the monotonic clock; enqueue wakes
// it so criticals leave within one short cycle.
class ThreadedBatcher {
public:
    ThreadedBatcher(BatcherConfig cfg, Sink& sink);
    ~ThreadedBatcher();

    void enqueue(TelemetryEvent event);
    void stop_and_drain();
    std::vector<Delivery> deliveries() const;
    Batcher& core() { return core_; } // callers must not race the dispatcher

private:
    void loop();

    mutable std::mutex mu_;
    std::condition_variable cv_;
    Batcher core_;
    std::vector<Delivery> deliveries_;
    bool stopping_ = false;
    std::thread thread_;
};

} // namespace cribwatch::telemetry
