#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "coldfuse/errors.hpp"
#include "coldfuse/model.hpp"
#include "coldfuse/param_vector.hpp"
#include "coldfuse/protocol.hpp"

namespace coldfuse {

// --- wire format ------------------------------------------------------------
// Frame: "CFHB" | version 0x01 | msg_type | u32 LE payload_len | payload.
// Payloads (all integers little-endian):
//   FETCH_BASE:   u32 id_len | contributor_id
//   BASE:         u64 iteration | ParameterVector bytes
//   SUBMIT:       u32 json_len | contribution header JSON | ParameterVector bytes
//   ACK:          empty
//   AWAIT_FUSION: u64 iteration being awaited
//   FUSED:        u64 new iteration | ParameterVector bytes
//   ERROR:        u32 code | message

enum class MsgType : std::uint8_t {
    FetchBase = 1,
    Base = 2,
    Submit = 3,
    Ack = 4,
    AwaitFusion = 5,
    Fused = 6,
    Error = 7,
};

enum class WireError : std::uint32_t {
    Stale = 1,
    Duplicate = 2,
    Shape = 3,
    Protocol = 4,
    Malformed = 5,
    Timeout = 6,
    Cohort = 7,
};

struct WireMessage {
    MsgType type{};
    std::vector<std::uint8_t> payload;
};

constexpr char kHubMagic[4] = {'C', 'F', 'H', 'B'};
constexpr std::uint8_t kHubVersion = 0x01;

struct HubConfig {
    std::string bind_address = "127.0.0.1";
    std::uint16_t port = 0;  // 0 = pick an ephemeral port
    std::size_t cohort_size = 1;
    std::int64_t deadline_ms = 60000;
    std::size_t max_payload = 256u << 20;
};

namespace wire {

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

// Full frame bytes for a message.
inline std::vector<std::uint8_t> encode(const WireMessage& m) {
    std::vector<std::uint8_t> out;
    out.reserve(10 + m.payload.size());
    out.insert(out.end(), kHubMagic, kHubMagic + 4);
    out.push_back(kHubVersion);
    out.push_back(static_cast<std::uint8_t>(m.type));
    put_u32(out, static_cast<std::uint32_t>(m.payload.size()));
    out.insert(out.end(), m.payload.begin(), m.payload.end());
    return out;
}

// --- blocking socket I/O ---

inline bool read_exact(int fd, void* buf, std::size_t len) {
    auto* p = static_cast<std::uint8_t*>(buf);
    while (len > 0) {
        const ssize_t n = ::recv(fd, p, len, 0);
        if (n < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        if (n == 0) return false;
        p += n;
        len -= static_cast<std::size_t>(n);
    }
    return true;
}

inline bool write_all(int fd, const void* buf, std::size_t len) {
    const auto* p = static_cast<const std::uint8_t*>(buf);
    while (len > 0) {
        const ssize_t n = ::send(fd, p, len, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        p += n;
        len -= static_cast<std::size_t>(n);
    }
    return true;
}

inline bool send_msg(int fd, const WireMessage& m) {
    const auto bytes = encode(m);
    return write_all(fd, bytes.data(), bytes.size());
}

// Reads one frame. Returns false on clean close / transport failure; throws
// TransportError on malformed frames (bad magic/version/length).
inline bool recv_msg(int fd, WireMessage& m, std::size_t max_payload) {
    std::uint8_t header[10];
    if (!read_exact(fd, header, sizeof header)) return false;
    if (std::memcmp(header, kHubMagic, 4) != 0)
        throw TransportError("bad frame magic");
    if (header[4] != kHubVersion)
        throw TransportError("unsupported wire version");
    const std::uint8_t t = header[5];
    if (t < 1 || t > 7) throw TransportError("unknown message type");
    const std::uint32_t len = get_u32(header + 6);
    if (len > max_payload) throw TransportError("frame exceeds payload limit");
    m.type = static_cast<MsgType>(t);
    m.payload.resize(len);
    if (len > 0 && !read_exact(fd, m.payload.data(), len))
        throw TransportError("truncated frame payload");
    return true;
}

inline WireMessage make_error(WireError code, const std::string& text) {
    WireMessage m;
    m.type = MsgType::Error;
    put_u32(m.payload, static_cast<std::uint32_t>(code));
    m.payload.insert(m.payload.end(), text.begin(), text.end());
    return m;
}

struct Socket {
    int fd = -1;
    Socket() = default;
    explicit Socket(int f) : fd(f) {}
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;
    Socket(Socket&& o) noexcept : fd(o.fd) { o.fd = -1; }
    ~Socket() {
        if (fd >= 0) ::close(fd);
    }
};

inline void set_recv_timeout(int fd, std::int64_t ms) {
    timeval tv{};
    tv.tv_sec = ms / 1000;
    tv.tv_usec = (ms % 1000) * 1000;
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
}

}  // namespace wire

// --- server -------------------------------------------------------------

// Networked repository. Holds the base model, forms a cohort from the first
// cohort_size distinct contributors to fetch, fuses when every cohort member
// has submitted, and never trains. All state mutations run under one mutex
// (single writer); AWAIT_FUSION waits sit on a condition variable and do not
// hold the writer lock.
class HubServer {
public:
    HubServer(RepositoryState initial, HubConfig cfg)
        : state_(std::move(initial)), cfg_(cfg) {}

    ~HubServer() { stop(); }

    // Binds, listens, and starts the accept loop. Returns the bound port.
    std::uint16_t start() {
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listen_fd_ < 0) throw TransportError("socket() failed");
        const int one = 1;
        ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(cfg_.port);
        if (::inet_pton(AF_INET, cfg_.bind_address.c_str(), &addr.sin_addr) != 1)
            throw TransportError("invalid bind address " + cfg_.bind_address);
        if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0)
            throw TransportError("bind failed on " + cfg_.bind_address + ":" +
                                 std::to_string(cfg_.port));
        if (::listen(listen_fd_, 64) < 0) throw TransportError("listen failed");
        socklen_t alen = sizeof addr;
        ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &alen);
        port_ = ntohs(addr.sin_port);
        running_ = true;
        accept_thread_ = std::thread([this] { accept_loop(); });
        return port_;
    }

    std::uint16_t port() const { return port_; }

    void stop() {
        bool was_running = running_.exchange(false);
        if (listen_fd_ >= 0) {
            ::shutdown(listen_fd_, SHUT_RDWR);
            ::close(listen_fd_);
            listen_fd_ = -1;
        }
        fused_cv_.notify_all();
        if (was_running && accept_thread_.joinable()) accept_thread_.join();
        std::vector<std::thread> workers;
        {
            std::lock_guard<std::mutex> lk(workers_mu_);
            workers.swap(workers_);
        }
        for (auto& t : workers)
            if (t.joinable()) t.join();
    }

    // Runs until stop() is called from another thread (used by the CLI).
    void wait() {
        if (accept_thread_.joinable()) accept_thread_.join();
    }

    RepositoryState snapshot() {
        std::lock_guard<std::mutex> lk(mu_);
        return state_;
    }

private:
    void accept_loop() {
        while (running_) {
            sockaddr_in peer{};
            socklen_t plen = sizeof peer;
            const int fd =
                ::accept(listen_fd_, reinterpret_cast<sockaddr*>(&peer), &plen);
            if (fd < 0) {
                if (!running_) break;
                if (errno == EINTR) continue;
                break;
            }
            std::lock_guard<std::mutex> lk(workers_mu_);
            workers_.emplace_back([this, fd] {
                wire::Socket sock(fd);
                handle_connection(sock.fd);
            });
        }
    }

    // One request/reply exchange per connection.
    void handle_connection(int fd) {
        wire::set_recv_timeout(fd, cfg_.deadline_ms + 120000);
        WireMessage req;
        try {
            if (!wire::recv_msg(fd, req, cfg_.max_payload)) return;
        } catch (const TransportError& e) {
            // Malformed frame: reply ERROR if the socket still works, then
            // drop the connection. State is untouched.
            wire::send_msg(fd, wire::make_error(WireError::Malformed, e.what()));
            return;
        }
        WireMessage reply;
        try {
            switch (req.type) {
                case MsgType::FetchBase:
                    reply = on_fetch(req);
                    break;
                case MsgType::Submit:
                    reply = on_submit(req);
                    break;
                case MsgType::AwaitFusion:
                    reply = on_await(req);
                    break;
                default:
                    reply = wire::make_error(WireError::Malformed,
                                             "unexpected message type");
            }
        } catch (const StaleError& e) {
            reply = wire::make_error(WireError::Stale, e.what());
        } catch (const DuplicateError& e) {
            reply = wire::make_error(WireError::Duplicate, e.what());
        } catch (const ShapeError& e) {
            reply = wire::make_error(WireError::Shape, e.what());
        } catch (const CohortError& e) {
            reply = wire::make_error(WireError::Cohort, e.what());
        } catch (const Error& e) {
            reply = wire::make_error(WireError::Protocol, e.what());
        }
        wire::send_msg(fd, reply);
    }

    // Lazily aborts an expired iteration. Caller holds mu_.
    void expire_if_due() {
        if (state_.expected_cohort.empty() || fuse_deadline_.time_since_epoch().count() == 0)
            return;
        if (std::chrono::steady_clock::now() >= fuse_deadline_) {
            abort_iteration(state_);
            pending_fetchers_.clear();
            fuse_deadline_ = {};
            aborted_generation_ += 1;
            fused_cv_.notify_all();
        }
    }

    WireMessage on_fetch(const WireMessage& req) {
        if (req.payload.size() < 4)
            throw TransportError("short FETCH_BASE payload");
        const std::uint32_t idlen = wire::get_u32(req.payload.data());
        if (req.payload.size() != 4u + idlen)
            throw TransportError("FETCH_BASE length mismatch");
        const std::string id(req.payload.begin() + 4, req.payload.end());

        std::lock_guard<std::mutex> lk(mu_);
        expire_if_due();
        // First cohort_size distinct fetchers of an iteration form its cohort.
        // An empty contributor id is an observer read: it returns the base
        // without enrolling in cohort formation.
        if (!id.empty() && state_.expected_cohort.empty()) {
            if (std::find(pending_fetchers_.begin(), pending_fetchers_.end(),
                          id) == pending_fetchers_.end())
                pending_fetchers_.push_back(id);
            if (pending_fetchers_.size() == cfg_.cohort_size) {
                begin_iteration(state_, pending_fetchers_);
                pending_fetchers_.clear();
                fuse_deadline_ = std::chrono::steady_clock::now() +
                                 std::chrono::milliseconds(cfg_.deadline_ms);
                // Wake submissions parked while the cohort was forming.
                fused_cv_.notify_all();
            }
        }
        WireMessage reply;
        reply.type = MsgType::Base;
        wire::put_u64(reply.payload, state_.iteration);
        const auto pv = serialize(state_.base);
        reply.payload.insert(reply.payload.end(), pv.begin(), pv.end());
        return reply;
    }

    WireMessage on_submit(const WireMessage& req) {
        if (req.payload.size() < 4) throw TransportError("short SUBMIT payload");
        const std::uint32_t jlen = wire::get_u32(req.payload.data());
        if (req.payload.size() < 4u + jlen)
            throw TransportError("SUBMIT length mismatch");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(req.payload.begin() + 4,
                                      req.payload.begin() + 4 + jlen);
        } catch (const nlohmann::json::exception& e) {
            throw TransportError(std::string("bad SUBMIT header: ") + e.what());
        }
        Contribution c;
        try {
            c.contributor_id = j.at("contributor_id").get<std::string>();
            c.iteration = j.at("iteration").get<std::size_t>();
            c.task_id = j.at("task_id").get<std::string>();
            c.train_examples_seen = j.at("train_examples_seen").get<std::size_t>();
            c.wall_time_ms = j.at("wall_time_ms").get<std::int64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw TransportError(std::string("bad SUBMIT header: ") + e.what());
        }
        const std::vector<std::uint8_t> body_bytes(req.payload.begin() + 4 + jlen,
                                                   req.payload.end());
        c.body = deserialize(body_bytes);

        std::unique_lock<std::mutex> lk(mu_);
        expire_if_due();
        // A fast contributor may finish training before the rest of the
        // cohort has fetched. If it is one of the pending fetchers, park the
        // submission until the cohort forms (bounded by the deadline).
        const auto park_deadline = std::chrono::steady_clock::now() +
                                   std::chrono::milliseconds(cfg_.deadline_ms);
        while (running_ && state_.expected_cohort.empty() &&
               std::find(pending_fetchers_.begin(), pending_fetchers_.end(),
                         c.contributor_id) != pending_fetchers_.end()) {
            if (fused_cv_.wait_until(lk, park_deadline) == std::cv_status::timeout)
                throw ProtocolError("cohort never formed before the deadline");
        }
        submit(state_, std::move(c));  // false = idempotent resubmission
        if (ready_to_fuse(state_)) {
            fuse_and_advance(state_);
            fuse_deadline_ = {};
            fused_cv_.notify_all();
        }
        WireMessage reply;
        reply.type = MsgType::Ack;
        return reply;
    }

    WireMessage on_await(const WireMessage& req) {
        if (req.payload.size() != 8)
            throw TransportError("AWAIT_FUSION payload must be 8 bytes");
        const std::uint64_t awaited = wire::get_u64(req.payload.data());

        std::unique_lock<std::mutex> lk(mu_);
        const std::uint64_t abort_gen = aborted_generation_;
        while (running_ && state_.iteration <= awaited &&
               aborted_generation_ == abort_gen) {
            if (!state_.expected_cohort.empty() &&
                fuse_deadline_.time_since_epoch().count() != 0) {
                if (fused_cv_.wait_until(lk, fuse_deadline_) ==
                    std::cv_status::timeout)
                    expire_if_due();
            } else {
                fused_cv_.wait_for(lk, std::chrono::milliseconds(200));
                expire_if_due();
            }
        }
        if (state_.iteration <= awaited)
            return wire::make_error(WireError::Timeout,
                                    "iteration " + std::to_string(awaited) +
                                        " was aborted before fusing");
        WireMessage reply;
        reply.type = MsgType::Fused;
        wire::put_u64(reply.payload, state_.iteration);
        const auto pv = serialize(state_.base);
        reply.payload.insert(reply.payload.end(), pv.begin(), pv.end());
        return reply;
    }

    RepositoryState state_;
    HubConfig cfg_;
    std::vector<std::string> pending_fetchers_;
    std::chrono::steady_clock::time_point fuse_deadline_{};
    std::uint64_t aborted_generation_ = 0;
    std::mutex mu_;
    std::condition_variable fused_cv_;
    std::mutex workers_mu_;
    std::vector<std::thread> workers_;
    std::thread accept_thread_;
    std::atomic<bool> running_{false};
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
};

// --- client -------------------------------------------------------------

struct HubAddress {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;
};

// "host:port"; host may be empty to mean loopback.
inline HubAddress parse_hub_address(const std::string& s) {
    const std::size_t colon = s.rfind(':');
    if (colon == std::string::npos)
        throw ConfigError("hub address must be host:port, got '" + s + "'");
    HubAddress a;
    if (colon > 0) a.host = s.substr(0, colon);
    if (a.host == "localhost") a.host = "127.0.0.1";
    const std::string port = s.substr(colon + 1);
    try {
        const int p = std::stoi(port);
        if (p < 1 || p > 65535) throw std::out_of_range("port");
        a.port = static_cast<std::uint16_t>(p);
    } catch (const std::exception&) {
        throw ConfigError("invalid hub port '" + port + "'");
    }
    return a;
}

namespace detail {

inline wire::Socket hub_connect(const HubAddress& addr, std::int64_t timeout_ms) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw TransportError("socket() failed");
    wire::Socket sock(fd);
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(addr.port);
    if (::inet_pton(AF_INET, addr.host.c_str(), &sa.sin_addr) != 1)
        throw TransportError("invalid hub host " + addr.host);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) < 0)
        throw TransportError("cannot connect to hub at " + addr.host + ":" +
                             std::to_string(addr.port));
    wire::set_recv_timeout(fd, timeout_ms);
    return sock;
}

// One request/reply round trip on a fresh connection. Throws on transport
// failure; converts ERROR frames into typed errors.
inline WireMessage hub_request(const HubAddress& addr, const WireMessage& req,
                               std::int64_t timeout_ms,
                               std::size_t max_payload = 256u << 20) {
    wire::Socket sock = hub_connect(addr, timeout_ms);
    if (!wire::send_msg(sock.fd, req))
        throw TransportError("failed to send request to hub");
    WireMessage reply;
    if (!wire::recv_msg(sock.fd, reply, max_payload))
        throw TransportError("hub closed the connection mid-reply");
    if (reply.type == MsgType::Error) {
        if (reply.payload.size() < 4)
            throw TransportError("malformed ERROR frame from hub");
        const auto code = static_cast<WireError>(wire::get_u32(reply.payload.data()));
        const std::string text(reply.payload.begin() + 4, reply.payload.end());
        switch (code) {
            case WireError::Stale: throw StaleError(text);
            case WireError::Duplicate: throw DuplicateError(text);
            case WireError::Shape: throw ShapeError(text);
            case WireError::Cohort: throw CohortError(text);
            case WireError::Timeout: throw ProtocolError("hub deadline: " + text);
            case WireError::Protocol: throw ProtocolError(text);
            case WireError::Malformed:
            default: throw TransportError("hub rejected frame: " + text);
        }
    }
    return reply;
}

}  // namespace detail

struct FetchedBase {
    std::size_t iteration = 0;
    ParameterVector base;
};

inline FetchedBase hub_fetch_base(const HubAddress& addr,
                                  const std::string& contributor_id,
                                  std::int64_t timeout_ms = 30000) {
    WireMessage req;
    req.type = MsgType::FetchBase;
    wire::put_u32(req.payload, static_cast<std::uint32_t>(contributor_id.size()));
    req.payload.insert(req.payload.end(), contributor_id.begin(),
                       contributor_id.end());
    const WireMessage reply = detail::hub_request(addr, req, timeout_ms);
    if (reply.type != MsgType::Base || reply.payload.size() < 8)
        throw TransportError("unexpected reply to FETCH_BASE");
    FetchedBase out;
    out.iteration = wire::get_u64(reply.payload.data());
    out.base = deserialize(std::vector<std::uint8_t>(reply.payload.begin() + 8,
                                                     reply.payload.end()));
    return out;
}

// Submits a contribution; transient transport failures are retried, which is
// safe because resubmitting identical bytes is idempotent on the hub.
inline void hub_submit(const HubAddress& addr, const Contribution& c,
                       int retries = 3, std::int64_t timeout_ms = 30000) {
    WireMessage req;
    req.type = MsgType::Submit;
    const nlohmann::json header = {{"contributor_id", c.contributor_id},
                                   {"iteration", c.iteration},
                                   {"task_id", c.task_id},
                                   {"train_examples_seen", c.train_examples_seen},
                                   {"wall_time_ms", c.wall_time_ms}};
    const std::string hs = header.dump();
    wire::put_u32(req.payload, static_cast<std::uint32_t>(hs.size()));
    req.payload.insert(req.payload.end(), hs.begin(), hs.end());
    const auto body = serialize(c.body);
    req.payload.insert(req.payload.end(), body.begin(), body.end());

    for (int attempt = 0;; ++attempt) {
        try {
            const WireMessage reply = detail::hub_request(addr, req, timeout_ms);
            if (reply.type != MsgType::Ack)
                throw TransportError("unexpected reply to SUBMIT");
            return;
        } catch (const TransportError&) {
            if (attempt >= retries) throw;
            std::this_thread::sleep_for(std::chrono::milliseconds(50 * (attempt + 1)));
        }
    }
}

inline FetchedBase hub_await_fusion(const HubAddress& addr, std::size_t iteration,
                                    std::int64_t timeout_ms = 300000) {
    WireMessage req;
    req.type = MsgType::AwaitFusion;
    wire::put_u64(req.payload, iteration);
    const WireMessage reply = detail::hub_request(addr, req, timeout_ms);
    if (reply.type != MsgType::Fused || reply.payload.size() < 8)
        throw TransportError("unexpected reply to AWAIT_FUSION");
    FetchedBase out;
    out.iteration = wire::get_u64(reply.payload.data());
    out.base = deserialize(std::vector<std::uint8_t>(reply.payload.begin() + 8,
                                                     reply.payload.end()));
    return out;
}

// Full contributor round: fetch the base, finetune locally with a fresh head
// for the task, submit the body, block until the cohort fuses, and return
// the new base.
inline ParameterVector contribute(const HubAddress& addr,
                                  const std::string& contributor_id,
                                  const ModelArch& arch, const TaskDataset& task,
                                  const TrainConfig& cfg) {
    const FetchedBase fetched = hub_fetch_base(addr, contributor_id);
    if (fetched.base.manifest() != arch.body_manifest())
        throw ShapeError("hub base does not match the local architecture");
    const ModelArch a = arch.with_head(task.n_classes);
    const Model start{a, fetched.base, zero_head(a)};
    const auto t0 = std::chrono::steady_clock::now();
    FinetuneResult ft = finetune_stats(start, task, cfg);
    const auto t1 = std::chrono::steady_clock::now();

    Contribution c;
    c.contributor_id = contributor_id;
    c.iteration = fetched.iteration;
    c.task_id = task.task_id;
    c.body = std::move(ft.model.body);
    c.train_examples_seen = ft.examples_seen;
    c.wall_time_ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
    hub_submit(addr, c);
    return hub_await_fusion(addr, fetched.iteration).base;
}

}  // namespace coldfuse
