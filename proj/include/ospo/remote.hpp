#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "ospo/backend.hpp"
#include "ospo/errors.hpp"

namespace ospo {

namespace detail {

inline std::string base64_encode(std::string_view in) {
  static const char* table = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  while (i + 2 < in.size()) {
    unsigned v = (static_cast<unsigned char>(in[i]) << 16) |
                 (static_cast<unsigned char>(in[i + 1]) << 8) | static_cast<unsigned char>(in[i + 2]);
    out += table[(v >> 18) & 63];
    out += table[(v >> 12) & 63];
    out += table[(v >> 6) & 63];
    out += table[v & 63];
    i += 3;
  }
  if (i + 1 == in.size()) {
    unsigned v = static_cast<unsigned char>(in[i]) << 16;
    out += table[(v >> 18) & 63];
    out += table[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == in.size()) {
    unsigned v = (static_cast<unsigned char>(in[i]) << 16) |
                 (static_cast<unsigned char>(in[i + 1]) << 8);
    out += table[(v >> 18) & 63];
    out += table[(v >> 12) & 63];
    out += table[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

inline std::string base64_decode(std::string_view in) {
  auto value_of = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::string out;
  int buffer = 0, bits = 0;
  for (char c : in) {
    if (c == '=' || c == '\n' || c == '\r') continue;
    int v = value_of(c);
    if (v < 0) throw RemoteRejected("invalid base64 payload");
    buffer = (buffer << 6) | v;
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out += static_cast<char>((buffer >> bits) & 0xff);
    }
  }
  return out;
}

/// Bounded in-flight counter shared by all requests of one client.
class InflightGate {
 public:
  explicit InflightGate(std::size_t cap) : cap_(cap) {}

  void acquire() {
    std::unique_lock<std::mutex> lock(mutex_);
    cv_.wait(lock, [&] { return active_ < cap_; });
    ++active_;
  }

  void release() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      --active_;
    }
    cv_.notify_one();
  }

 private:
  std::size_t cap_;
  std::size_t active_ = 0;
  std::mutex mutex_;
  std::condition_variable cv_;
};

}  // namespace detail

struct RemoteConfig {
  std::string base_url;             // e.g. "http://127.0.0.1:8080"
  std::string auth_env;             // env var holding the bearer token
  double timeout_seconds = 120.0;
  int max_attempts = 4;
  std::size_t max_in_flight = 8;
  std::chrono::milliseconds backoff_base{100};
};

inline void to_json(nlohmann::json& j, const RemoteConfig& c) {
  j = {{"base_url", c.base_url},
       {"auth_env", c.auth_env},
       {"timeout_seconds", c.timeout_seconds},
       {"max_attempts", c.max_attempts},
       {"max_in_flight", c.max_in_flight},
       {"backoff_ms", c.backoff_base.count()}};
}

inline void from_json(const nlohmann::json& j, RemoteConfig& c) {
  c.base_url = j.value("base_url", std::string());
  c.auth_env = j.value("auth_env", std::string());
  c.timeout_seconds = j.value("timeout_seconds", 120.0);
  c.max_attempts = j.value("max_attempts", 4);
  c.max_in_flight = j.value("max_in_flight", std::size_t{8});
  c.backoff_base = std::chrono::milliseconds(j.value("backoff_ms", std::int64_t{100}));
}

/// HTTP inference client. Retryable failures (connection errors, 429, 5xx)
/// back off exponentially up to the attempt budget; anything else surfaces
/// immediately as RemoteRejected. Safe for concurrent use; an in-flight gate
/// caps simultaneous requests.
class RemoteBackend : public Backend {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  explicit RemoteBackend(RemoteConfig config, Sleeper sleeper = default_sleeper())
      : config_(std::move(config)),
        gate_(config_.max_in_flight),
        sleeper_(std::move(sleeper)) {
    if (config_.base_url.empty()) throw ConfigError("remote backend requires base_url");
    if (config_.max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
  }

  ImageArtifact generate_image(const StructuredPrompt& dense, const DecodeParams& decode,
                               const CorruptionParams&) override {
    nlohmann::json body = {{"prompt", dense.surface},
                           {"guidance_weight", decode.guidance_weight},
                           {"temperature", decode.temperature},
                           {"seed", decode.seed}};
    nlohmann::json reply = post_json("/v1/images", body);
    ImageArtifact artifact;
    artifact.decode = decode;
    artifact.image_bytes = detail::base64_decode(reply.at("image_b64").get<std::string>());
    if (reply.contains("token_ids")) {
      artifact.token_ids = reply.at("token_ids").get<std::vector<int>>();
    }
    return artifact;
  }

  ProbeResult vqa_probe(const ImageArtifact& image, const std::string& question) override {
    nlohmann::json body = {{"question", question}};
    if (!image.image_bytes.empty()) {
      body["image_b64"] = detail::base64_encode(image.image_bytes);
    } else {
      body["image_id"] = image.id;
    }
    nlohmann::json reply = post_json("/v1/vqa", body);
    // Scoring consumes the two raw answer probabilities; no renormalization.
    return ProbeResult{reply.at("p_yes").get<double>(), reply.at("p_no").get<double>()};
  }

  std::string text_complete(const std::vector<Message>& messages, std::uint64_t seed) override {
    if (messages.empty()) throw ConfigError("text_complete requires at least one message");
    nlohmann::json msgs = nlohmann::json::array();
    for (const auto& m : messages) msgs.push_back({{"role", m.role}, {"text", m.text}});
    nlohmann::json reply = post_json("/v1/text", {{"messages", msgs}, {"seed", seed}});
    return reply.at("text").get<std::string>();
  }

  static Sleeper default_sleeper() {
    return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  }

 private:
  nlohmann::json post_json(const std::string& path, const nlohmann::json& body) {
    gate_.acquire();
    struct Release {
      detail::InflightGate& gate;
      ~Release() { gate.release(); }
    } release{gate_};

    httplib::Client client(config_.base_url);
    const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    if (!config_.auth_env.empty()) {
      if (const char* token = std::getenv(config_.auth_env.c_str())) {
        client.set_default_headers({{"Authorization", std::string("Bearer ") + token}});
      }
    }

    std::string payload = body.dump();
    std::string last_failure;
    for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
      httplib::Result res = client.Post(path, payload, "application/json");
      if (res) {
        if (res->status >= 200 && res->status < 300) {
          try {
            return nlohmann::json::parse(res->body);
          } catch (const nlohmann::json::exception& e) {
            throw RemoteRejected(std::string("malformed response body: ") + e.what());
          }
        }
        if (res->status == 429 || res->status >= 500) {
          last_failure = "HTTP " + std::to_string(res->status);
        } else {
          throw RemoteRejected(path + " returned HTTP " + std::to_string(res->status) + ": " +
                               res->body);
        }
      } else {
        if (res.error() == httplib::Error::ConnectionTimeout ||
            res.error() == httplib::Error::Read || res.error() == httplib::Error::Write) {
          last_failure = "timeout/transport: " + httplib::to_string(res.error());
        } else {
          last_failure = httplib::to_string(res.error());
        }
      }
      if (attempt < config_.max_attempts) {
        sleeper_(config_.backoff_base * (1 << (attempt - 1)));
      }
    }
    if (last_failure.rfind("timeout", 0) == 0) {
      throw TimeoutError(path + ": " + last_failure + " after " +
                         std::to_string(config_.max_attempts) + " attempts");
    }
    throw BackendUnavailable(path + ": " + last_failure + " after " +
                             std::to_string(config_.max_attempts) + " attempts");
  }

  RemoteConfig config_;
  detail::InflightGate gate_;
  Sleeper sleeper_;
};

}  // namespace ospo
