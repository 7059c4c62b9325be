#include "cribwatch/net.hpp"

#include <cstring>
#include <fstream>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <openssl/err.h>
#include <openssl/evp.h>
#include <openssl/pem.h>
#include <openssl/ssl.h>
#include <openssl/x509.h>

#include "cribwatch/util.hpp"

namespace cribwatch::net {

std::vector<std::uint8_t> length_prefix_frame(const std::string& body) {
    std::vector<std::uint8_t> frame(4 + body.size());
    auto len = static_cast<std::uint32_t>(body.size());
    frame[0] = static_cast<std::uint8_t>((len >> 24) & 0xff);
    frame[1] = static_cast<std::uint8_t>((len >> 16) & 0xff);
    frame[2] = static_cast<std::uint8_t>((len >> 8) & 0xff);
    frame[3] = static_cast<std::uint8_t>(len & 0xff);
    std::memcpy(frame.data() + 4, body.data(), body.size());
    return frame;
}

namespace {

std::string ssl_error_text() {
    char buf[256];
    unsigned long e = ERR_get_error();
    ERR_error_string_n(e, buf, sizeof(buf));
    return buf;
}

void check_min_version(int minor, const char* what) {
    // Policy: TLS 1.2 is the floor; configuring anything weaker is an error.
    if (minor < 2) {
        throw Error(errc::tls_config_error,
                    std::string(what) + ": minimum TLS version must be >= 1.2");
    }
}

class PlainStream final : public Stream {
public:
    explicit PlainStream(int fd) : fd_(fd) {}
    ~PlainStream() override {
        if (fd_ >= 0) close(fd_);
    }

    void write_all(const void* data, std::size_t len) override {
        const char* p = static_cast<const char*>(data);
        std::size_t off = 0;
        while (off < len) {
            ssize_t n = ::send(fd_, p + off, len - off, MSG_NOSIGNAL);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw Error(errc::sink_unavailable, std::string("send: ") + strerror(errno));
            }
            off += static_cast<std::size_t>(n);
        }
    }

    bool read_exact(void* data, std::size_t len) override {
        char* p = static_cast<char*>(data);
        std::size_t off = 0;
        while (off < len) {
            ssize_t n = ::recv(fd_, p + off, len - off, 0);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw Error(errc::sink_unavailable, std::string("recv: ") + strerror(errno));
            }
            if (n == 0) {
                if (off == 0) return false;
                throw Error(errc::sink_unavailable, "peer closed mid-message");
            }
            off += static_cast<std::size_t>(n);
        }
        return true;
    }

private:
    int fd_;
};

struct SslDeleter {
    void operator()(SSL* s) const { SSL_free(s); }
};
struct SslCtxDeleter {
    void operator()(SSL_CTX* c) const { SSL_CTX_free(c); }
};

class TlsStream final : public Stream {
public:
    TlsStream(int fd, SSL* ssl) : fd_(fd), ssl_(ssl) {}
    ~TlsStream() override {
        if (ssl_) {
            SSL_shutdown(ssl_.get());
        }
        if (fd_ >= 0) close(fd_);
    }

    void write_all(const void* data, std::size_t len) override {
        const char* p = static_cast<const char*>(data);
        std::size_t off = 0;
        while (off < len) {
            int n = SSL_write(ssl_.get(), p + off, static_cast<int>(len - off));
            if (n <= 0) {
                throw Error(errc::sink_unavailable, "SSL_write: " + ssl_error_text());
            }
            off += static_cast<std::size_t>(n);
        }
    }

    bool read_exact(void* data, std::size_t len) override {
        char* p = static_cast<char*>(data);
        std::size_t off = 0;
        while (off < len) {
            int n = SSL_read(ssl_.get(), p + off, static_cast<int>(len - off));
            if (n <= 0) {
                int err = SSL_get_error(ssl_.get(), n);
                if (err == SSL_ERROR_ZERO_RETURN && off == 0) return false;
                throw Error(errc::sink_unavailable, "SSL_read: " + ssl_error_text());
            }
            off += static_cast<std::size_t>(n);
        }
        return true;
    }

private:
    int fd_;
    std::unique_ptr<SSL, SslDeleter> ssl_;
};

int tls_version_constant(int minor) {
    switch (minor) {
    case 2: return TLS1_2_VERSION;
    case 3: return TLS1_3_VERSION;
    default: throw Error(errc::tls_config_error, "unsupported TLS minor version");
    }
}

int connect_fd(const std::string& host, int port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    std::string port_str = std::to_string(port);
    int rc = getaddrinfo(host.c_str(), port_str.c_str(), &hints, &res);
    if (rc != 0) {
        throw Error(errc::connect_error, host + ": " + gai_strerror(rc));
    }
    int fd = -1;
    for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
        fd = socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) continue;
        if (connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
        close(fd);
        fd = -1;
    }
    freeaddrinfo(res);
    if (fd < 0) {
        throw Error(errc::connect_error, "cannot connect to " + host + ":" + port_str);
    }
    int one = 1;
    setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return fd;
}

} // namespace

std::unique_ptr<Stream> connect_tcp(const std::string& host, int port,
                                    const std::optional<TlsClientConfig>& tls) {
    if (tls) check_min_version(tls->min_version_minor, "client");

    int fd = connect_fd(host, port);
    if (!tls) return std::make_unique<PlainStream>(fd);

    std::unique_ptr<SSL_CTX, SslCtxDeleter> ctx(SSL_CTX_new(TLS_client_method()));
    if (!ctx) {
        close(fd);
        throw Error(errc::tls_config_error, "SSL_CTX_new: " + ssl_error_text());
    }
    SSL_CTX_set_min_proto_version(ctx.get(), tls_version_constant(tls->min_version_minor));
    // The broker presents a self-signed certificate; transport encryption is
    // the requirement here, not PKI validation.
    SSL_CTX_set_verify(ctx.get(), SSL_VERIFY_NONE, nullptr);

    SSL* ssl = SSL_new(ctx.get());
    if (!ssl) {
        close(fd);
        throw Error(errc::tls_config_error, "SSL_new: " + ssl_error_text());
    }
    SSL_set_fd(ssl, fd);
    if (SSL_connect(ssl) != 1) {
        std::string err = ssl_error_text();
        SSL_free(ssl);
        close(fd);
        throw Error(errc::connect_error, "TLS handshake failed: " + err);
    }
    return std::make_unique<TlsStream>(fd, ssl);
}

void send_frame_acked(Stream& stream, const std::vector<std::uint8_t>& frame) {
    stream.write_all(frame.data(), frame.size());
    std::uint8_t ack = 0;
    if (!stream.read_exact(&ack, 1) || ack != kAck) {
        throw Error(errc::sink_unavailable, "broker did not acknowledge the frame");
    }
}

std::optional<std::string> read_frame(Stream& stream) {
    std::uint8_t hdr[4];
    if (!stream.read_exact(hdr, 4)) return std::nullopt;
    std::uint32_t len = (static_cast<std::uint32_t>(hdr[0]) << 24) |
                        (static_cast<std::uint32_t>(hdr[1]) << 16) |
                        (static_cast<std::uint32_t>(hdr[2]) << 8) | hdr[3];
    if (len > kMaxFrameBytes) {
        throw Error(errc::sink_unavailable, "frame length " + std::to_string(len) + " exceeds cap");
    }
    std::string body(len, '\0');
    if (len > 0 && !stream.read_exact(body.data(), len)) {
        throw Error(errc::sink_unavailable, "peer closed mid-frame");
    }
    return body;
}

void make_self_signed_cert(const std::string& cert_path, const std::string& key_path) {
    std::unique_ptr<EVP_PKEY, decltype(&EVP_PKEY_free)> pkey(
        EVP_PKEY_Q_keygen(nullptr, nullptr, "EC", "P-256"), EVP_PKEY_free);
    if (!pkey) throw Error(errc::tls_config_error, "key generation failed");

    std::unique_ptr<X509, decltype(&X509_free)> cert(X509_new(), X509_free);
    ASN1_INTEGER_set(X509_get_serialNumber(cert.get()), 1);
    X509_gmtime_adj(X509_getm_notBefore(cert.get()), 0);
    X509_gmtime_adj(X509_getm_notAfter(cert.get()), 60L * 60 * 24 * 365 * 20);
    X509_set_pubkey(cert.get(), pkey.get());
    X509_NAME* name = X509_get_subject_name(cert.get());
    X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_ASC,
                               reinterpret_cast<const unsigned char*>("cribwatch-broker"), -1, -1, 0);
    X509_set_issuer_name(cert.get(), name);
    if (X509_sign(cert.get(), pkey.get(), EVP_sha256()) == 0) {
        throw Error(errc::tls_config_error, "certificate signing failed");
    }

    FILE* kf = fopen(key_path.c_str(), "w");
    if (!kf || PEM_write_PrivateKey(kf, pkey.get(), nullptr, nullptr, 0, nullptr, nullptr) != 1) {
        if (kf) fclose(kf);
        throw Error(errc::io_error, "cannot write " + key_path);
    }
    fclose(kf);
    FILE* cf = fopen(cert_path.c_str(), "w");
    if (!cf || PEM_write_X509(cf, cert.get()) != 1) {
        if (cf) fclose(cf);
        throw Error(errc::io_error, "cannot write " + cert_path);
    }
    fclose(cf);
}

MockBroker::MockBroker(int port, std::string log_path, int fail_every,
                       std::optional<TlsServerConfig> tls)
    : port_(port), log_path_(std::move(log_path)), fail_every_(fail_every), tls_(std::move(tls)) {}

MockBroker::~MockBroker() { stop(); }

void MockBroker::start() {
    if (tls_) {
        check_min_version(tls_->min_version_minor, "broker");
        auto* ctx = SSL_CTX_new(TLS_server_method());
        if (!ctx) throw Error(errc::tls_config_error, "SSL_CTX_new: " + ssl_error_text());
        SSL_CTX_set_min_proto_version(ctx, tls_version_constant(tls_->min_version_minor));
        if (SSL_CTX_use_certificate_file(ctx, tls_->cert_path.c_str(), SSL_FILETYPE_PEM) != 1 ||
            SSL_CTX_use_PrivateKey_file(ctx, tls_->key_path.c_str(), SSL_FILETYPE_PEM) != 1) {
            SSL_CTX_free(ctx);
            throw Error(errc::tls_config_error, "cannot load cert/key: " + ssl_error_text());
        }
        tls_ctx_ = ctx;
    }

    listen_fd_ = socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw Error(errc::connect_error, "socket() failed");
    int one = 1;
    setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<std::uint16_t>(port_));
    if (bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        close(listen_fd_);
        listen_fd_ = -1;
        throw Error(errc::connect_error,
                    "cannot bind port " + std::to_string(port_) + ": " + strerror(errno));
    }
    if (port_ == 0) {
        socklen_t len = sizeof(addr);
        getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
    }
    listen(listen_fd_, 16);
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
}

void MockBroker::stop() {
    if (!running_.exchange(false)) return;
    if (listen_fd_ >= 0) {
        shutdown(listen_fd_, SHUT_RDWR);
        close(listen_fd_);
        listen_fd_ = -1;
    }
    if (accept_thread_.joinable()) accept_thread_.join();
    {
        // Unblock serve threads stuck on idle connections.
        std::lock_guard lock(clients_mu_);
        for (int fd : client_fds_) shutdown(fd, SHUT_RDWR);
    }
    for (auto& w : workers_) {
        if (w.joinable()) w.join();
    }
    workers_.clear();
    if (tls_ctx_) {
        SSL_CTX_free(static_cast<SSL_CTX*>(tls_ctx_));
        tls_ctx_ = nullptr;
    }
}

void MockBroker::accept_loop() {
    while (running_) {
        int fd = accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) {
            if (!running_) break;
            continue;
        }
        std::uint64_t n = ++connections_;
        if (fail_every_ > 0 && n % static_cast<std::uint64_t>(fail_every_) == 0) {
            close(fd); // injected outage: refuse service on this connection
            continue;
        }
        workers_.emplace_back([this, fd] { serve(fd); });
    }
}

void MockBroker::serve(int fd) {
    {
        std::lock_guard lock(clients_mu_);
        client_fds_.push_back(fd);
    }
    std::unique_ptr<Stream> stream;
    try {
        if (tls_ctx_) {
            SSL* ssl = SSL_new(static_cast<SSL_CTX*>(tls_ctx_));
            SSL_set_fd(ssl, fd);
            if (SSL_accept(ssl) != 1) {
                SSL_free(ssl);
                close(fd);
                return;
            }
            stream = std::make_unique<TlsStream>(fd, ssl);
        } else {
            stream = std::make_unique<PlainStream>(fd);
        }

        for (;;) {
            auto body = read_frame(*stream);
            if (!body) break;
            {
                std::lock_guard lock(log_mu_);
                std::ofstream out(log_path_, std::ios::app);
                out << *body << "\n";
                out.flush();
            }
            ++frames_received_;
            std::uint8_t ack = kAck;
            stream->write_all(&ack, 1);
        }
    } catch (const std::exception&) {
        // Connection-level failures just end this session; the client retries.
    }
    std::lock_guard lock(clients_mu_);
    std::erase(client_fds_, fd);
}

} // namespace cribwatch::net
