#include "cribwatch/telemetry.hpp"

#include <algorithm>
#include <fstream>

using nlohmann::json;

namespace cribwatch::telemetry {

const char* kind_name(Kind k) {
    switch (k) {
    case Kind::state_transition: return "state_transition";
    case Kind::counter_snapshot: return "counter_snapshot";
    case Kind::alert: return "alert";
    case Kind::heartbeat: return "heartbeat";
    }
    return "unknown";
}

const char* priority_name(Priority p) {
    return p == Priority::critical ? "critical" : "routine";
}

namespace {

// Fixed payload schema per kind.
const std::vector<std::string>& payload_keys(Kind k) {
    static const std::vector<std::string> state{"label", "prev_label", "confidence"};
    static const std::vector<std::string> counter{"cumulative_ms"};
    static const std::vector<std::string> alert{"label", "episode_start_ms", "sustained_ms"};
    static const std::vector<std::string> heartbeat{"seq"};
    switch (k) {
    case Kind::state_transition: return state;
    case Kind::counter_snapshot: return counter;
    case Kind::alert: return alert;
    case Kind::heartbeat: return heartbeat;
    }
    return heartbeat;
}

} // namespace

void TelemetryEvent::validate() const {
    if (schema_version != kSchemaVersion) {
        throw Error(errc::validation_error, "unsupported telemetry schema version");
    }
    if (kind == Kind::alert && priority != Priority::critical) {
        throw Error(errc::validation_error, "alert events must be critical");
    }
    const auto& keys = payload_keys(kind);
    if (!payload.is_object() || payload.size() != keys.size()) {
        throw Error(errc::validation_error,
                    std::string("payload keys for ") + kind_name(kind) + " do not match schema");
    }
    for (const auto& k : keys) {
        if (!payload.contains(k)) {
            throw Error(errc::validation_error,
                        std::string("payload for ") + kind_name(kind) + " missing key " + k);
        }
    }
}

json TelemetryEvent::to_json() const {
    return json{{"schema_version", schema_version}, {"kind", kind_name(kind)},
                {"priority", priority_name(priority)}, {"t_ms", t_ms},
                {"wall_time", wall_time},             {"device_id", device_id},
                {"payload", payload}};
}

TelemetryEvent make_state_transition(const std::string& device, double t_ms,
                                     const std::string& label, const std::string& prev_label,
                                     double confidence) {
    TelemetryEvent e;
    e.kind = Kind::state_transition;
    e.priority = Priority::routine;
    e.t_ms = t_ms;
    e.wall_time = wall_rfc3339();
    e.device_id = device;
    e.payload = {{"label", label}, {"prev_label", prev_label}, {"confidence", confidence}};
    return e;
}

TelemetryEvent make_counter_snapshot(const std::string& device, double t_ms,
                                     const std::map<std::string, double>& cumulative_ms) {
    TelemetryEvent e;
    e.kind = Kind::counter_snapshot;
    e.priority = Priority::routine;
    e.t_ms = t_ms;
    e.wall_time = wall_rfc3339();
    e.device_id = device;
    e.payload = {{"cumulative_ms", cumulative_ms}};
    return e;
}

TelemetryEvent make_alert(const std::string& device, double t_ms, const std::string& label,
                          double episode_start_ms, double sustained_ms) {
    TelemetryEvent e;
    e.kind = Kind::alert;
    e.priority = Priority::critical;
    e.t_ms = t_ms;
    e.wall_time = wall_rfc3339();
    e.device_id = device;
    e.payload = {{"label", label}, {"episode_start_ms", episode_start_ms},
                 {"sustained_ms", sustained_ms}};
    return e;
}

TelemetryEvent make_heartbeat(const std::string& device, double t_ms, std::int64_t seq) {
    TelemetryEvent e;
    e.kind = Kind::heartbeat;
    e.priority = Priority::routine;
    e.t_ms = t_ms;
    e.wall_time = wall_rfc3339();
    e.device_id = device;
    e.payload = {{"seq", seq}};
    return e;
}

std::vector<std::uint8_t> build_frame(const std::string& topic,
                                      const std::vector<TelemetryEvent>& events) {
    if (events.empty()) return {};
    json body = {{"topic", topic}, {"events", json::array()}};
    for (const auto& e : events) body["events"].push_back(e.to_json());
    return net::length_prefix_frame(body.dump());
}

bool publish(Sink& sink, const std::string& topic, const std::vector<TelemetryEvent>& events) {
    auto frame = build_frame(topic, events);
    if (frame.empty()) return false; // nothing to send, trivially acked
    sink.publish(frame);
    return true;
}

void MemorySink::publish(const std::vector<std::uint8_t>& frame) {
    std::lock_guard lock(mu_);
    if (!available_) throw Error(errc::sink_unavailable, "memory sink marked unavailable");
    std::string body(frame.begin() + 4, frame.end());
    json j = json::parse(body, nullptr, false);
    if (!j.is_discarded() && j.contains("events")) events_ += j["events"].size();
    bodies_.push_back(std::move(body));
}

std::vector<std::string> MemorySink::bodies() const {
    std::lock_guard lock(mu_);
    return bodies_;
}

std::size_t MemorySink::frame_count() const {
    std::lock_guard lock(mu_);
    return bodies_.size();
}

std::size_t MemorySink::event_count() const {
    std::lock_guard lock(mu_);
    return events_;
}

void MemorySink::set_available(bool up) {
    std::lock_guard lock(mu_);
    available_ = up;
}

FileSink::FileSink(std::string path) : path_(std::move(path)) {
    std::ofstream out(path_, std::ios::app);
    if (!out) throw Error(errc::io_error, "cannot open telemetry log " + path_);
}

void FileSink::publish(const std::vector<std::uint8_t>& frame) {
    std::lock_guard lock(mu_);
    std::ofstream out(path_, std::ios::app);
    if (!out) throw Error(errc::sink_unavailable, "cannot append to " + path_);
    out.write(reinterpret_cast<const char*>(frame.data()) + 4,
              static_cast<std::streamsize>(frame.size() - 4));
    out << "\n";
    if (!out) throw Error(errc::sink_unavailable, "short write to " + path_);
}

SocketSink::SocketSink(std::string host, int port, std::optional<net::TlsClientConfig> tls)
    : host_(std::move(host)), port_(port), tls_(std::move(tls)) {
    ensure_connected(); // handshake before the first publish
}

void SocketSink::ensure_connected() {
    if (!stream_) stream_ = net::connect_tcp(host_, port_, tls_);
}

void SocketSink::publish(const std::vector<std::uint8_t>& frame) {
    std::lock_guard lock(mu_);
    try {
        ensure_connected();
        net::send_frame_acked(*stream_, frame);
    } catch (const Error& e) {
        stream_.reset(); // reconnect on the next attempt
        throw Error(errc::sink_unavailable, e.what());
    }
}

std::unique_ptr<Sink> connect_sink(const json& config) {
    std::string kind;
    try {
        kind = config.at("kind").get<std::string>();
        if (kind == "memory") return std::make_unique<MemorySink>();
        if (kind == "file") return std::make_unique<FileSink>(config.at("path").get<std::string>());
        if (kind == "socket") {
            std::optional<net::TlsClientConfig> tls;
            if (config.contains("tls") && !config["tls"].is_null()) {
                net::TlsClientConfig t;
                auto ver = config["tls"].value("min_version", std::string("1.2"));
                if (ver == "1.2") t.min_version_minor = 2;
                else if (ver == "1.3") t.min_version_minor = 3;
                else if (ver.rfind("1.", 0) == 0) {
                    throw Error(errc::tls_config_error, "minimum TLS version must be >= 1.2");
                } else {
                    throw Error(errc::tls_config_error, "unrecognized TLS version " + ver);
                }
                tls = t;
            }
            return std::make_unique<SocketSink>(config.at("host").get<std::string>(),
                                                config.at("port").get<int>(), tls);
        }
    } catch (const json::exception& e) {
        throw Error(errc::config_error, std::string("sink config: ") + e.what());
    }
    throw Error(errc::config_error, "unknown sink kind: " + kind);
}

void BatcherConfig::validate() const {
    if (interval_ms <= 0.0) throw Error(errc::config_error, "batcher interval_ms must be > 0");
    if (max_batch < 1) throw Error(errc::config_error, "batcher max_batch must be >= 1");
    if (buffer_capacity < 1) throw Error(errc::config_error, "batcher buffer_capacity must be >= 1");
}

Batcher::Batcher(BatcherConfig cfg, Sink& sink, double now_ms)
    : cfg_(std::move(cfg)), sink_(sink), last_flush_ms_(now_ms) {
    cfg_.validate();
}

void Batcher::enqueue(TelemetryEvent event, double now_ms) {
    event.validate();
    ++enqueued_;

    auto total = routine_.size() + critical_.size();
    if (total >= static_cast<std::size_t>(cfg_.buffer_capacity)) {
        if (!routine_.empty()) {
            routine_.pop_front();
            ++dropped_routine_;
        } else if (event.priority == Priority::critical) {
            throw Error(errc::buffer_full_critical,
                        "telemetry buffer full of critical events; sink outage sustained");
        } else {
            ++dropped_routine_; // the new routine is the only droppable event
            return;
        }
    }

    if (event.priority == Priority::critical) {
        critical_.push_back({std::move(event), now_ms});
    } else {
        routine_.push_back({std::move(event), now_ms});
    }
}

bool Batcher::in_backoff(double now_ms) const {
    return next_attempt_ms_ >= 0.0 && now_ms < next_attempt_ms_;
}

void Batcher::note_failure(double now_ms) {
    ++consecutive_failures_;
    double backoff = cfg_.backoff_initial_ms * std::pow(2.0, consecutive_failures_ - 1);
    next_attempt_ms_ = now_ms + std::min(backoff, cfg_.interval_ms);
}

bool Batcher::deliver(const std::string& topic, std::vector<Queued> batch, double now_ms,
                      std::vector<Delivery>& out) {
    std::vector<TelemetryEvent> events;
    events.reserve(batch.size());
    Delivery d;
    d.topic = topic;
    d.delivered_at_ms = now_ms;
    for (auto& q : batch) {
        d.event_enqueue_ms.push_back(q.enqueued_at_ms);
        events.push_back(std::move(q.event));
    }
    d.event_count = events.size();
    try {
        publish(sink_, topic, events);
    } catch (const Error&) {
        note_failure(now_ms);
        return false;
    }
    consecutive_failures_ = 0;
    next_attempt_ms_ = -1.0;
    delivered_ += events.size();
    out.push_back(std::move(d));
    return true;
}

std::vector<Delivery> Batcher::dispatch_critical(double now_ms) {
    std::vector<Delivery> out;
    while (!critical_.empty() && !in_backoff(now_ms)) {
        std::vector<Queued> one;
        one.push_back(critical_.front());
        std::string topic = "nicu/" + cfg_.device_id + "/" + kind_name(one[0].event.kind);
        if (!deliver(topic, std::move(one), now_ms, out)) break;
        critical_.pop_front();
    }
    return out;
}

std::vector<Delivery> Batcher::flush_tick(double now_ms) {
    std::vector<Delivery> out;
    if (in_backoff(now_ms)) return out;

    bool retrying = consecutive_failures_ > 0 && !routine_.empty();
    bool due = now_ms - last_flush_ms_ >= cfg_.interval_ms;
    if (!due && !retrying) return out;

    if (routine_.empty()) {
        if (!due) return out;
        // Idle tick: every 4th one sends a heartbeat so outage detection has
        // something to observe.
        last_flush_ms_ = now_ms;
        ++idle_ticks_;
        if (idle_ticks_ % cfg_.heartbeat_idle_ticks == 0) {
            std::vector<Queued> one;
            one.push_back({make_heartbeat(cfg_.device_id, now_ms, heartbeat_seq_++), now_ms});
            deliver("nicu/" + cfg_.device_id + "/heartbeat", std::move(one), now_ms, out);
        }
        return out;
    }

    idle_ticks_ = 0;
    std::vector<Queued> batch;
    auto n = std::min<std::size_t>(routine_.size(), static_cast<std::size_t>(cfg_.max_batch));
    for (std::size_t i = 0; i < n; ++i) batch.push_back(routine_[i]);
    if (deliver("nicu/" + cfg_.device_id + "/batch", std::move(batch), now_ms, out)) {
        routine_.erase(routine_.begin(), routine_.begin() + static_cast<long>(n));
        last_flush_ms_ = now_ms;
    }
    return out;
}

std::vector<Delivery> Batcher::dispatch(double now_ms) {
    auto out = dispatch_critical(now_ms);
    auto flushed = flush_tick(now_ms);
    out.insert(out.end(), std::make_move_iterator(flushed.begin()),
               std::make_move_iterator(flushed.end()));
    return out;
}

std::vector<Delivery> Batcher::drain(double now_ms) {
    std::vector<Delivery> out = dispatch_critical(now_ms);
    while (!routine_.empty()) {
        std::vector<Queued> batch;
        auto n = std::min<std::size_t>(routine_.size(), static_cast<std::size_t>(cfg_.max_batch));
        for (std::size_t i = 0; i < n; ++i) batch.push_back(routine_[i]);
        if (!deliver("nicu/" + cfg_.device_id + "/batch", std::move(batch), now_ms, out)) break;
        routine_.erase(routine_.begin(), routine_.begin() + static_cast<long>(n));
        last_flush_ms_ = now_ms;
    }
    return out;
}

ThreadedBatcher::ThreadedBatcher(BatcherConfig cfg, Sink& sink)
    : core_(std::move(cfg), sink, mono_ms()) {
    thread_ = std::thread([this] { loop(); });
}

ThreadedBatcher::~ThreadedBatcher() { stop_and_drain(); }

void ThreadedBatcher::enqueue(TelemetryEvent event) {
    {
        std::lock_guard lock(mu_);
        core_.enqueue(std::move(event), mono_ms());
    }
    cv_.notify_one();
}

void ThreadedBatcher::loop() {
    std::unique_lock lock(mu_);
    while (!stopping_) {
        cv_.wait_for(lock, std::chrono::milliseconds(10));
        auto out = core_.dispatch(mono_ms());
        deliveries_.insert(deliveries_.end(), std::make_move_iterator(out.begin()),
                           std::make_move_iterator(out.end()));
    }
}

void ThreadedBatcher::stop_and_drain() {
    {
        std::lock_guard lock(mu_);
        if (stopping_) return;
        stopping_ = true;
    }
    cv_.notify_one();
    if (thread_.joinable()) thread_.join();
    auto out = core_.drain(mono_ms());
    std::lock_guard lock(mu_);
    deliveries_.insert(deliveries_.end(), std::make_move_iterator(out.begin()),
                       std::make_move_iterator(out.end()));
}

std::vector<Delivery> ThreadedBatcher::deliveries() const {
    std::lock_guard lock(mu_);
    return deliveries_;
}

} // namespace cribwatch::telemetry
