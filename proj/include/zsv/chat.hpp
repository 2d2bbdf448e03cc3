#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "zsv/image_io.hpp"
#include "zsv/io.hpp"
#include "zsv/transport.hpp"

namespace zsv {

struct ChatMessage {
  std::string role;
  std::string text;
  std::vector<EncodedImage> images;  // appended after the text part
};

// OpenAI-compatible chat-completions request.
struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  std::optional<int> max_tokens;
  std::string detail = "low";

  nlohmann::json to_json() const {
    nlohmann::json msgs = nlohmann::json::array();
    for (const auto& m : messages) {
      if (m.images.empty()) {
        msgs.push_back({{"role", m.role}, {"content", m.text}});
        continue;
      }
      nlohmann::json parts = nlohmann::json::array();
      parts.push_back({{"type", "text"}, {"text", m.text}});
      for (const auto& img : m.images)
        parts.push_back({{"type", "image_url"},
                         {"image_url",
                          {{"url", "data:" + img.mime + ";base64," + base64_encode(img.bytes)}, {"detail", detail}}}});
      msgs.push_back({{"role", m.role}, {"content", parts}});
    }
    nlohmann::json j{{"model", model}, {"messages", msgs}, {"temperature", temperature}};
    if (max_tokens) j["max_tokens"] = *max_tokens;
    return j;
  }

  // The user-visible text of all messages, joined.
  std::string prompt_text() const {
    std::string out;
    for (const auto& m : messages) {
      if (!out.empty()) out += "\n\n";
      out += m.text;
    }
    return out;
  }
};

struct TokenUsage {
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
};

struct ChatReply {
  std::string text;
  TokenUsage usage;
  std::string request_id;
  bool api_refusal = false;  // the API's own refusal field was set
};

inline ChatReply parse_chat_reply(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(std::string("malformed chat response: ") + e.what());
  }
  ChatReply r;
  if (j.contains("id") && j["id"].is_string()) r.request_id = j["id"].get<std::string>();
  if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty())
    throw TransportError("chat response has no choices");
  const auto& msg = j["choices"][0].value("message", nlohmann::json::object());
  if (msg.contains("content") && msg["content"].is_string()) r.text = msg["content"].get<std::string>();
  if (msg.contains("refusal") && msg["refusal"].is_string()) {
    r.api_refusal = true;
    if (r.text.empty()) r.text = msg["refusal"].get<std::string>();
  }
  if (j.contains("usage") && j["usage"].is_object()) {
    r.usage.prompt_tokens = j["usage"].value("prompt_tokens", std::uint64_t{0});
    r.usage.completion_tokens = j["usage"].value("completion_tokens", std::uint64_t{0});
  }
  return r;
}

// Chat client for text-only calls (description generation).
class ChatClient {
 public:
  ChatClient(HttpTransport& transport, TransportPolicy policy, Clock& clock, RateLimiter* limiter = nullptr,
             std::string api_key = {}, std::string path = "/v1/chat/completions")
      : transport_(transport),
        policy_(policy),
        clock_(clock),
        limiter_(limiter),
        api_key_(std::move(api_key)),
        path_(std::move(path)) {}

  ChatReply complete(const ChatRequest& req) {
    Headers headers;
    if (!api_key_.empty()) headers["Authorization"] = "Bearer " + api_key_;
    auto res = send_with_retry(transport_, path_, req.to_json().dump(), headers, policy_, clock_, limiter_);
    return parse_chat_reply(res.body);
  }

 private:
  HttpTransport& transport_;
  TransportPolicy policy_;
  Clock& clock_;
  RateLimiter* limiter_;
  std::string api_key_;
  std::string path_;
};

}  // namespace zsv
