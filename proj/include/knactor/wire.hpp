#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "knactor/channel.hpp"
#include "knactor/errors.hpp"
#include "knactor/value.hpp"

namespace knactor {

// Framing: 4-byte big-endian payload length, then that many bytes of JSON.
// One frame carries one request, response, or server push.

namespace wiredetail {

constexpr uint32_t kMaxFrame = 64u << 20;

inline bool write_all(int fd, const void* data, size_t len) {
  const char* p = static_cast<const char*>(data);
  while (len > 0) {
    ssize_t n = ::send(fd, p, len, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    if (n == 0) return false;
    p += n;
    len -= static_cast<size_t>(n);
  }
  return true;
}

inline bool read_exact(int fd, void* data, size_t len) {
  char* p = static_cast<char*>(data);
  while (len > 0) {
    ssize_t n = ::recv(fd, p, len, 0);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    if (n == 0) return false;
    p += n;
    len -= static_cast<size_t>(n);
  }
  return true;
}

inline bool send_frame(int fd, const Value& v) {
  std::string payload = v.dump();
  if (payload.size() > kMaxFrame) return false;
  uint32_t len = htonl(static_cast<uint32_t>(payload.size()));
  char header[4];
  std::memcpy(header, &len, 4);
  std::string buf;
  buf.reserve(payload.size() + 4);
  buf.append(header, 4);
  buf += payload;
  return write_all(fd, buf.data(), buf.size());
}

inline bool recv_frame(int fd, Value& out) {
  char header[4];
  if (!read_exact(fd, header, 4)) return false;
  uint32_t len;
  std::memcpy(&len, header, 4);
  len = ntohl(len);
  if (len > kMaxFrame) return false;
  std::string payload(len, '\0');
  if (len > 0 && !read_exact(fd, payload.data(), len)) return false;
  out = Value::parse(payload, nullptr, false);
  return !out.is_discarded();
}

struct Endpoint {
  bool unix_socket = false;
  std::string host;  // or path
  uint16_t port = 0;
};

// "tcp:host:port" or "unix:/path"; "host:port" is accepted as tcp.
inline Endpoint parse_endpoint(const std::string& s) {
  Endpoint e;
  std::string rest = s;
  if (rest.rfind("unix:", 0) == 0) {
    e.unix_socket = true;
    e.host = rest.substr(5);
    if (e.host.empty()) throw DxError(ErrorCode::Transport, "empty unix socket path");
    return e;
  }
  if (rest.rfind("tcp:", 0) == 0) rest = rest.substr(4);
  auto colon = rest.rfind(':');
  if (colon == std::string::npos) throw DxError(ErrorCode::Transport, "bad endpoint '" + s + "'");
  e.host = rest.substr(0, colon);
  int port = std::stoi(rest.substr(colon + 1));
  if (port < 0 || port > 65535) throw DxError(ErrorCode::Transport, "bad port in '" + s + "'");
  e.port = static_cast<uint16_t>(port);
  if (e.host.empty()) e.host = "127.0.0.1";
  return e;
}

inline int connect_to(const Endpoint& e) {
  if (!e.unix_socket && e.port == 0) throw DxError(ErrorCode::Transport, "cannot connect to port 0");
  int fd;
  if (e.unix_socket) {
    fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (fd < 0) throw DxError(ErrorCode::Transport, "socket failed");
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    std::strncpy(addr.sun_path, e.host.c_str(), sizeof(addr.sun_path) - 1);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      ::close(fd);
      throw DxError(ErrorCode::Transport, "cannot connect to " + e.host);
    }
    return fd;
  }
  fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw DxError(ErrorCode::Transport, "socket failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(e.port);
  if (::inet_pton(AF_INET, e.host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw DxError(ErrorCode::Transport, "bad address '" + e.host + "'");
  }
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(fd);
    throw DxError(ErrorCode::Transport, "cannot connect to " + e.host + ":" + std::to_string(e.port));
  }
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return fd;
}

}  // namespace wiredetail

struct Envelope {
  uint64_t id = 0;
  std::string verb;
  std::string store;
  std::string key;
  std::string role;
  Value body;
};

inline Value envelope_to_json(const Envelope& e) {
  Value v = Value{{"id", e.id}, {"verb", e.verb}, {"role", e.role}};
  if (!e.store.empty()) v["store"] = e.store;
  if (!e.key.empty()) v["key"] = e.key;
  if (!e.body.is_null()) v["body"] = e.body;
  return v;
}

inline Envelope envelope_from_json(const Value& v) {
  Envelope e;
  e.id = v.at("id").get<uint64_t>();
  e.verb = v.at("verb").get<std::string>();
  if (v.contains("store")) e.store = v.at("store").get<std::string>();
  if (v.contains("key")) e.key = v.at("key").get<std::string>();
  if (v.contains("role")) e.role = v.at("role").get<std::string>();
  if (v.contains("body")) e.body = v.at("body");
  return e;
}

// --- Server ---------------------------------------------------------------------

// One accepted connection. Replies and pushes funnel through an outbox so
// the socket sees exactly one writer.
class WireSession : public std::enable_shared_from_this<WireSession> {
 public:
  explicit WireSession(int fd) : fd_(fd) {}

  ~WireSession() { close(); }

  void reply(uint64_t id, Value body) {
    outbox_.push(Value{{"id", id}, {"ok", true}, {"body", std::move(body)}});
  }

  void reply_error(uint64_t id, ErrorCode code, const std::string& message) {
    outbox_.push(Value{{"id", id},
                       {"ok", false},
                       {"error", Value{{"code", std::string(to_string(code))}, {"message", message}}}});
  }

  // Server-initiated frame belonging to an established stream.
  void push(uint64_t id, Value body) { outbox_.push(Value{{"id", id}, {"push", true}, {"body", std::move(body)}}); }

  void push_done(uint64_t id) { outbox_.push(Value{{"id", id}, {"push", true}, {"done", true}}); }

  // Cleanup to run when the stream is cancelled or the connection dies.
  void on_cancel(uint64_t id, std::function<void()> fn) {
    std::lock_guard lk(mu_);
    cleanups_[id] = std::move(fn);
  }

  void cancel(uint64_t id) {
    std::function<void()> fn;
    {
      std::lock_guard lk(mu_);
      auto it = cleanups_.find(id);
      if (it == cleanups_.end()) return;
      fn = std::move(it->second);
      cleanups_.erase(it);
    }
    if (fn) fn();
  }

  bool open() const { return !closed_.load(); }

  void close() {
    bool was = closed_.exchange(true);
    if (was) return;
    std::map<uint64_t, std::function<void()>> cleanups;
    {
      std::lock_guard lk(mu_);
      cleanups.swap(cleanups_);
    }
    for (auto& [id, fn] : cleanups) {
      if (fn) fn();
    }
    outbox_.close();
    ::shutdown(fd_, SHUT_RDWR);
  }

 private:
  friend class WireServer;

  int fd_;
  Channel<Value> outbox_;
  std::atomic<bool> closed_{false};
  std::mutex mu_;
  std::map<uint64_t, std::function<void()>> cleanups_;
};

using WireHandler = std::function<void(const std::shared_ptr<WireSession>&, const Envelope&)>;

class WireServer {
 public:
  // endpoint: "tcp:host:port" (port 0 picks a free one) or "unix:/path".
  WireServer(const std::string& endpoint, WireHandler handler) : handler_(std::move(handler)) {
    using namespace wiredetail;
    Endpoint e = parse_endpoint(endpoint);
    unix_path_ = e.unix_socket ? e.host : "";
    if (e.unix_socket) {
      ::unlink(e.host.c_str());
      listen_fd_ = ::socket(AF_UNIX, SOCK_STREAM, 0);
      if (listen_fd_ < 0) throw DxError(ErrorCode::Transport, "socket failed");
      sockaddr_un addr{};
      addr.sun_family = AF_UNIX;
      std::strncpy(addr.sun_path, e.host.c_str(), sizeof(addr.sun_path) - 1);
      if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
          ::listen(listen_fd_, 64) != 0) {
        ::close(listen_fd_);
        throw DxError(ErrorCode::Transport, "cannot listen on " + e.host);
      }
    } else {
      listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
      if (listen_fd_ < 0) throw DxError(ErrorCode::Transport, "socket failed");
      int one = 1;
      ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
      sockaddr_in addr{};
      addr.sin_family = AF_INET;
      addr.sin_port = htons(e.port);
      if (::inet_pton(AF_INET, e.host.c_str(), &addr.sin_addr) != 1)
        throw DxError(ErrorCode::Transport, "bad address '" + e.host + "'");
      if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
          ::listen(listen_fd_, 64) != 0) {
        ::close(listen_fd_);
        throw DxError(ErrorCode::Transport, "cannot listen on " + endpoint);
      }
      sockaddr_in bound{};
      socklen_t len = sizeof bound;
      ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
      port_ = ntohs(bound.sin_port);
    }
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  ~WireServer() { stop(); }

  WireServer(const WireServer&) = delete;
  WireServer& operator=(const WireServer&) = delete;

  uint16_t port() const { return port_; }

  // Adopts a worker (stream pump) so shutdown joins it.
  void track(std::thread t) {
    std::lock_guard lk(mu_);
    workers_.push_back(std::move(t));
  }

  void stop() {
    bool was = stopping_.exchange(true);
    if (!was) {
      ::shutdown(listen_fd_, SHUT_RDWR);
      ::close(listen_fd_);
      if (!unix_path_.empty()) ::unlink(unix_path_.c_str());
    }
    if (accept_thread_.joinable()) accept_thread_.join();
    std::vector<std::shared_ptr<WireSession>> sessions;
    {
      std::lock_guard lk(mu_);
      sessions = sessions_;
    }
    for (auto& s : sessions) s->close();
    std::vector<std::thread> workers;
    {
      std::lock_guard lk(mu_);
      workers.swap(workers_);
      for (auto& t : session_threads_) workers.push_back(std::move(t));
      session_threads_.clear();
    }
    for (auto& t : workers) {
      if (t.joinable()) t.join();
    }
  }

 private:
  void accept_loop() {
    while (!stopping_.load()) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        break;
      }
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      auto session = std::make_shared<WireSession>(fd);
      std::lock_guard lk(mu_);
      sessions_.push_back(session);
      session_threads_.emplace_back([this, session] { read_loop(session); });
      session_threads_.emplace_back([session] { write_loop(session); });
    }
  }

  static void write_loop(const std::shared_ptr<WireSession>& session) {
    while (true) {
      auto frame = session->outbox_.pop();
      if (!frame) break;
      if (!wiredetail::send_frame(session->fd_, *frame)) break;
    }
    session->close();
  }

  void read_loop(const std::shared_ptr<WireSession>& session) {
    Value frame;
    while (wiredetail::recv_frame(session->fd_, frame)) {
      Envelope env;
      try {
        env = envelope_from_json(frame);
      } catch (const std::exception& e) {
        session->reply_error(0, ErrorCode::InvalidRequest, std::string("bad envelope: ") + e.what());
        continue;
      }
      if (env.verb == "cancel") {
        uint64_t target = env.body.is_object() && env.body.contains("target") ? env.body["target"].get<uint64_t>() : 0;
        session->cancel(target);
        session->reply(env.id, Value{{"cancelled", target}});
        continue;
      }
      try {
        handler_(session, env);
      } catch (const DxError& e) {
        session->reply_error(env.id, e.code(), e.message());
      } catch (const std::exception& e) {
        session->reply_error(env.id, ErrorCode::Internal, e.what());
      }
    }
    session->close();
    ::close(session->fd_);
  }

  WireHandler handler_;
  int listen_fd_ = -1;
  uint16_t port_ = 0;
  std::string unix_path_;
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_;
  std::mutex mu_;
  std::vector<std::shared_ptr<WireSession>> sessions_;
  std::vector<std::thread> session_threads_;
  std::vector<std::thread> workers_;
};

// --- Client ---------------------------------------------------------------------

// Multiplexing client: many in-flight requests and server-push streams share
// one connection; a reader thread routes frames by request id.
class WireClient {
 public:
  struct Stream {
    uint64_t id = 0;
    std::shared_ptr<Channel<Value>> frames;
  };

  explicit WireClient(const std::string& endpoint) {
    fd_ = wiredetail::connect_to(wiredetail::parse_endpoint(endpoint));
    reader_ = std::thread([this] { read_loop(); });
  }

  ~WireClient() { close(); }

  WireClient(const WireClient&) = delete;
  WireClient& operator=(const WireClient&) = delete;

  void close() {
    bool was = closed_.exchange(true);
    if (!was) ::shutdown(fd_, SHUT_RDWR);
    if (reader_.joinable()) reader_.join();
    ::close(fd_);
    fd_ = -1;
  }

  bool alive() const { return !closed_.load(); }

  // Unary request; throws DxError carrying the server's error code.
  Value request(const std::string& verb, const std::string& store, const std::string& key, Value body,
                const std::string& role, std::chrono::milliseconds timeout = std::chrono::seconds(30)) {
    Envelope env;
    env.id = next_id_.fetch_add(1);
    env.verb = verb;
    env.store = store;
    env.key = key;
    env.role = role;
    env.body = std::move(body);
    auto ch = std::make_shared<Channel<Value>>();
    {
      std::lock_guard lk(mu_);
      if (closed_.load()) throw DxError(ErrorCode::Transport, "connection closed");
      pending_[env.id] = ch;
    }
    if (!wiredetail::send_frame(fd_, envelope_to_json(env))) {
      std::lock_guard lk(mu_);
      pending_.erase(env.id);
      throw DxError(ErrorCode::Transport, "send failed");
    }
    auto frame = ch->pop_for(timeout);
    {
      std::lock_guard lk(mu_);
      pending_.erase(env.id);
    }
    if (!frame) {
      if (closed_.load()) throw DxError(ErrorCode::Transport, "connection lost");
      throw DxError(ErrorCode::Transport, "request timed out");
    }
    return unwrap(*frame);
  }

  // Streaming request: the server acknowledges, then pushes frames until
  // done/cancel. Returned channel closes when the stream ends.
  Stream stream(const std::string& verb, const std::string& store, const std::string& key, Value body,
                const std::string& role, std::chrono::milliseconds timeout = std::chrono::seconds(30)) {
    Envelope env;
    env.id = next_id_.fetch_add(1);
    env.verb = verb;
    env.store = store;
    env.key = key;
    env.role = role;
    env.body = std::move(body);
    auto ack = std::make_shared<Channel<Value>>();
    auto frames = std::make_shared<Channel<Value>>();
    {
      std::lock_guard lk(mu_);
      if (closed_.load()) throw DxError(ErrorCode::Transport, "connection closed");
      pending_[env.id] = ack;
      streams_[env.id] = frames;
    }
    auto unregister = [&] {
      std::lock_guard lk(mu_);
      pending_.erase(env.id);
      streams_.erase(env.id);
    };
    if (!wiredetail::send_frame(fd_, envelope_to_json(env))) {
      unregister();
      throw DxError(ErrorCode::Transport, "send failed");
    }
    auto frame = ack->pop_for(timeout);
    {
      std::lock_guard lk(mu_);
      pending_.erase(env.id);
    }
    if (!frame) {
      unregister();
      throw DxError(ErrorCode::Transport, closed_.load() ? "connection lost" : "request timed out");
    }
    try {
      unwrap(*frame);  // throws on error responses
    } catch (...) {
      unregister();
      throw;
    }
    return Stream{env.id, frames};
  }

  void cancel(uint64_t stream_id) {
    {
      std::lock_guard lk(mu_);
      auto it = streams_.find(stream_id);
      if (it == streams_.end()) return;
    }
    try {
      request("cancel", "", "", Value{{"target", stream_id}}, "");
    } catch (const DxError&) {
      // connection already gone; the reader loop cleaned up
    }
    std::lock_guard lk(mu_);
    auto it = streams_.find(stream_id);
    if (it != streams_.end()) {
      it->second->close();
      streams_.erase(it);
    }
  }

 private:
  static Value unwrap(const Value& frame) {
    if (frame.value("ok", false)) return frame.contains("body") ? frame["body"] : Value::object();
    std::string code = "internal";
    std::string message = "unknown error";
    if (frame.contains("error")) {
      code = frame["error"].value("code", "internal");
      message = frame["error"].value("message", message);
    }
    throw DxError(error_code_from_string(code), message);
  }

  void read_loop() {
    Value frame;
    while (wiredetail::recv_frame(fd_, frame)) {
      uint64_t id = frame.value("id", 0ull);
      if (frame.value("push", false)) {
        std::shared_ptr<Channel<Value>> ch;
        bool done = frame.value("done", false);
        {
          std::lock_guard lk(mu_);
          auto it = streams_.find(id);
          if (it != streams_.end()) {
            ch = it->second;
            if (done) streams_.erase(it);
          }
        }
        if (ch) {
          if (done) {
            ch->close();
          } else if (frame.contains("body")) {
            ch->push(frame["body"]);
          }
        }
        continue;
      }
      std::shared_ptr<Channel<Value>> ch;
      {
        std::lock_guard lk(mu_);
        auto it = pending_.find(id);
        if (it != pending_.end()) ch = it->second;
      }
      if (ch) ch->push(frame);
    }
    closed_.store(true);
    std::lock_guard lk(mu_);
    for (auto& [id, ch] : pending_) ch->close();
    for (auto& [id, ch] : streams_) ch->close();
    pending_.clear();
    streams_.clear();
  }

  int fd_ = -1;
  std::atomic<bool> closed_{false};
  std::atomic<uint64_t> next_id_{1};
  std::thread reader_;
  std::mutex mu_;
  std::map<uint64_t, std::shared_ptr<Channel<Value>>> pending_;
  std::map<uint64_t, std::shared_ptr<Channel<Value>>> streams_;
};

}  // namespace knactor
