#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace cribwatch::net {

// Publish-protocol framing: 4-byte big-endian body length, then a UTF-8
// JSON body {"topic": ..., "events": [...]}.
std::vector<std::uint8_t> length_prefix_frame(const std::string& body);
constexpr std::uint8_t kAck = 0x06;
constexpr std::uint32_t kMaxFrameBytes = 64u << 20;

struct TlsClientConfig {
    int min_version_minor = 2; // TLS 1.x; anything below 2 is rejected
};

struct TlsServerConfig {
    std::string cert_path;
    std::string key_path;
    int min_version_minor = 2;
};

// Writes a fresh self-signed EC cert/key pair (PEM). Test/broker plumbing.
void make_self_signed_cert(const std::string& cert_path, const std::string& key_path);

// Blocking stream over plain TCP or TLS. Throws Error(connect_error) /
// Error(tls_config_error) / Error(sink_unavailable) as appropriate.
class Stream {
public:
    virtual ~Stream() = default;
    virtual void write_all(const void* data, std::size_t len) = 0;
    // False on orderly EOF at a frame boundary; throws mid-read.
    virtual bool read_exact(void* data, std::size_t len) = 0;
};

std::unique_ptr<Stream> connect_tcp(const std::string& host, int port,
                                    const std::optional<TlsClientConfig>& tls);

// Writes one frame and waits for the single ack byte.
void send_frame_acked(Stream& stream, const std::vector<std::uint8_t>& frame);

// Reads one length-prefixed frame body; nullopt on orderly EOF.
std::optional<std::string> read_frame(Stream& stream);

// Accept-log-ack test double for the cloud backend. Accepts connections,
// appends each received frame body as one NDJSON line, acks with 0x06.
// `fail_every` > 0 drops every Nth connection before reading (outage
// injection).
class MockBroker {
public:
    MockBroker(int port, std::string log_path, int fail_every = 0,
               std::optional<TlsServerConfig> tls = std::nullopt);
    ~MockBroker();

    void start(); // throws Error(connect_error) when the port cannot be bound
    void stop();  // flushes the log
    int port() const { return port_; }
    std::uint64_t frames_received() const { return frames_received_.load(); }
    std::uint64_t connections_accepted() const { return connections_.load(); }

private:
    void accept_loop();
    void serve(int fd);

    int port_;
    std::string log_path_;
    int fail_every_;
    std::optional<TlsServerConfig> tls_;
    int listen_fd_ = -1;
    std::atomic<bool> running_{false};
    std::atomic<std::uint64_t> frames_received_{0};
    std::atomic<std::uint64_t> connections_{0};
    std::thread accept_thread_;
    std::vector<std::thread> workers_;
    std::mutex log_mu_;
    std::mutex clients_mu_;
    std::vector<int> client_fds_;
    void* tls_ctx_ = nullptr; // SSL_CTX
};

} // namespace cribwatch::net
