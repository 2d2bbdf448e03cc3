#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <deque>
#include <fstream>
#include <functional>
#include <mutex>
#include <random>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "zsv/hash.hpp"

namespace zsv::testing {

// Local stand-ins for the chat-completions and embedding services. Replies
// are deterministic functions of the request content.
class MockServices {
 public:
  struct Options {
    std::size_t embedding_dimension = 16;
    std::size_t reply_dimension = 0;  // 0: same as embedding_dimension
    std::string api_key;              // when set, requests must carry it
    std::string key_log_path;         // append answered vision request keys here
    bool refuse_all_vision = false;
  };

  MockServices() : MockServices(Options{}) {}
  explicit MockServices(Options opt) : opt_(std::move(opt)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) { chat(req, res); });
    server_.Post("/v1/embeddings", [this](const httplib::Request& req, httplib::Response& res) { embed(req, res); });
    port_ = server_.bind_to_any_port("127.0.0.1");
    if (port_ <= 0) throw std::runtime_error("mock services could not bind a port");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~MockServices() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  MockServices(const MockServices&) = delete;
  MockServices& operator=(const MockServices&) = delete;

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  // Statuses returned (in order) before any real answer on each endpoint.
  void script_chat_statuses(std::vector<int> statuses) {
    std::lock_guard lk(mu_);
    chat_script_.assign(statuses.begin(), statuses.end());
  }
  void script_embedding_statuses(std::vector<int> statuses) {
    std::lock_guard lk(mu_);
    embed_script_.assign(statuses.begin(), statuses.end());
  }

  // Overrides the text of vision replies.
  void set_vision_responder(std::function<std::string(const std::string& prompt, const std::string& key)> f) {
    std::lock_guard lk(mu_);
    vision_responder_ = std::move(f);
  }
  void set_description_responder(std::function<std::string(const std::string& category, std::size_t k)> f) {
    std::lock_guard lk(mu_);
    description_responder_ = std::move(f);
  }

  std::size_t chat_requests() const { return chat_requests_; }
  std::size_t vision_requests() const { return vision_requests_; }
  std::size_t description_requests() const { return description_requests_; }
  std::size_t embedding_requests() const { return embedding_requests_; }
  std::vector<std::string> answered_vision_keys() const {
    std::lock_guard lk(mu_);
    return vision_keys_;
  }

  // Deterministic pseudo-embedding for a piece of content.
  static std::vector<double> vector_for(std::string_view content, std::size_t dim) {
    std::mt19937_64 rng(fnv1a64(content));
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(dim);
    for (auto& x : v) x = 3.0 * n(rng);
    return v;
  }

  // Categories ranked by a content hash of the first image and the name.
  static std::vector<std::string> rank_categories(const std::vector<std::string>& cats, const std::string& image) {
    std::vector<std::pair<std::uint64_t, std::string>> scored;
    for (const auto& c : cats) scored.emplace_back(fnv1a64(c, fnv1a64(image)), c);
    std::sort(scored.begin(), scored.end());
    std::vector<std::string> out;
    for (std::size_t i = 0; i < std::min<std::size_t>(5, scored.size()); ++i) out.push_back(scored[i].second);
    return out;
  }

  static std::vector<std::string> categories_in_prompt(const std::string& prompt) {
    auto start = prompt.find("The category list is: [");
    if (start == std::string::npos) return {};
    start += std::string_view("The category list is: ").size();
    auto end = prompt.find("].\n", start);
    if (end == std::string::npos) return {};
    auto j = nlohmann::json::parse(prompt.substr(start, end - start + 1), nullptr, false);
    std::vector<std::string> out;
    if (j.is_array())
      for (const auto& e : j)
        if (e.is_string()) out.push_back(e.get<std::string>());
    return out;
  }

  static std::string key_in_prompt(const std::string& prompt) {
    static const std::regex re(R"re(sample ID "([0-9a-f]+)")re");
    std::smatch m;
    return std::regex_search(prompt, m, re) ? m[1].str() : std::string();
  }

  // Default vision reply; the format rotates with the sample key so parsers
  // see several styles.
  static std::string default_vision_reply(const std::string& prompt, const std::string& image) {
    auto cats = categories_in_prompt(prompt);
    auto key = key_in_prompt(prompt);
    auto top = rank_categories(cats, image);
    switch (fnv1a64(key) % 4) {
      case 0: {
        nlohmann::json j;
        j[key] = top;
        return j.dump();
      }
      case 1: {
        std::string s = "Here are the top 5 predictions:\n";
        for (std::size_t i = 0; i < top.size(); ++i) s += std::to_string(i + 1) + ". " + top[i] + "\n";
        return s;
      }
      case 2: {
        nlohmann::json j;
        j[key] = top;
        return "```json\n" + j.dump(2) + "\n```";
      }
      default: {
        std::string s = "Top 5: ";
        for (std::size_t i = 0; i < top.size(); ++i) s += (i ? ", " : "") + top[i];
        return s;
      }
    }
  }

  static std::string default_description_reply(const std::string& category, std::size_t k) {
    std::string s = "Sure! Here are " + std::to_string(k) + " sentences describing " + category + ":\n\n";
    for (std::size_t i = 0; i < k; ++i)
      s += std::to_string(i + 1) + ". A " + category + " shows visual trait number " + std::to_string(i + 1) + ".\n";
    return s;
  }

 private:
  bool authorized(const httplib::Request& req, httplib::Response& res) {
    if (opt_.api_key.empty()) return true;
    if (req.get_header_value("Authorization") == "Bearer " + opt_.api_key) return true;
    res.status = 401;
    res.set_content(R"({"error":"unauthorized"})", "application/json");
    return false;
  }

  static bool pop_script(std::deque<int>& script, httplib::Response& res) {
    if (script.empty()) return false;
    res.status = script.front();
    script.pop_front();
    res.set_content(R"({"error":"scripted failure"})", "application/json");
    return true;
  }

  void chat(const httplib::Request& req, httplib::Response& res) {
    ++chat_requests_;
    if (!authorized(req, res)) return;
    std::unique_lock lk(mu_);
    if (pop_script(chat_script_, res)) return;
    lk.unlock();

    auto body = nlohmann::json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.contains("messages")) {
      res.status = 400;
      return;
    }
    std::string prompt, first_image;
    for (const auto& m : body["messages"]) {
      if (m["content"].is_string()) {
        prompt += m["content"].get<std::string>() + "\n";
        continue;
      }
      for (const auto& part : m["content"]) {
        if (part.value("type", "") == "text") prompt += part.value("text", "") + "\n";
        if (part.value("type", "") == "image_url" && first_image.empty())
          first_image = part["image_url"].value("url", "");
      }
    }

    std::string text;
    if (!first_image.empty()) {
      ++vision_requests_;
      const auto key = req.get_header_value("X-Request-Key");
      lk.lock();
      auto responder = vision_responder_;
      lk.unlock();
      if (opt_.refuse_all_vision)
        text = "I'm sorry, but I can't help with that. Your input image may contain content that is not allowed by our "
               "safety system.";
      else
        text = responder ? responder(prompt, key) : default_vision_reply(prompt, first_image);
      lk.lock();
      vision_keys_.push_back(key);
      if (!opt_.key_log_path.empty()) {
        std::ofstream log(opt_.key_log_path, std::ios::app);
        log << key << '\n';
      }
      lk.unlock();
    } else {
      ++description_requests_;
      static const std::regex re(R"re(Generate (\d+) different sentences? describing what a "([^"]+)")re");
      std::smatch m;
      std::string category = "thing";
      std::size_t k = 1;
      if (std::regex_search(prompt, m, re)) {
        k = std::stoul(m[1].str());
        category = m[2].str();
      }
      lk.lock();
      auto responder = description_responder_;
      lk.unlock();
      text = responder ? responder(category, k) : default_description_reply(category, k);
    }
    nlohmann::json reply{
        {"id", "mock-" + to_hex16(fnv1a64(req.body))},
        {"object", "chat.completion"},
        {"model", body.value("model", "mock")},
        {"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", text}}}, {"finish_reason", "stop"}}}},
        {"usage",
         {{"prompt_tokens", prompt.size() / 4 + (first_image.empty() ? 0 : 85)}, {"completion_tokens", text.size() / 4}}}};
    res.set_content(reply.dump(), "application/json");
  }

  void embed(const httplib::Request& req, httplib::Response& res) {
    ++embedding_requests_;
    if (!authorized(req, res)) return;
    {
      std::lock_guard lk(mu_);
      if (pop_script(embed_script_, res)) return;
    }
    auto body = nlohmann::json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.contains("input") || !body["input"].is_array()) {
      res.status = 400;
      return;
    }
    const std::size_t dim = opt_.reply_dimension ? opt_.reply_dimension : opt_.embedding_dimension;
    nlohmann::json data = nlohmann::json::array();
    for (const auto& in : body["input"]) {
      std::string content = in.value("type", "") == "image" ? "image:" + in.value("data", "") : "text:" + in.value("text", "");
      data.push_back({{"embedding", vector_for(content, dim)}});
    }
    res.set_content(nlohmann::json{{"data", data}, {"model", body.value("model", "mock")}}.dump(), "application/json");
  }

  Options opt_;
  httplib::Server server_;
  int port_ = -1;
  std::thread thread_;
  mutable std::mutex mu_;
  std::deque<int> chat_script_, embed_script_;
  std::function<std::string(const std::string&, const std::string&)> vision_responder_;
  std::function<std::string(const std::string&, std::size_t)> description_responder_;
  std::vector<std::string> vision_keys_;
  std::atomic<std::size_t> chat_requests_{0}, vision_requests_{0}, description_requests_{0}, embedding_requests_{0};
};

}  // namespace zsv::testing
