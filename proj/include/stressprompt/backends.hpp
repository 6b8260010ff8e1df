#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include <httplib.h>
// <resolv.h> defines _res, which collides with Eigen parameter names.
#ifdef _res
#undef _res
#endif

#include "stressprompt/common.hpp"
#include "stressprompt/model_adapter.hpp"

namespace stressprompt {

inline constexpr const char* kEndpointEnv = "STRESSPROMPT_ENDPOINT";
inline constexpr const char* kApiKeyEnv = "STRESSPROMPT_API_KEY";

/// Generation-only adapter for an OpenAI-compatible chat completions server.
/// The server applies its own chat template, so `ChatPrompt::template_id` is
/// not used here.
class HttpChatAdapter final : public ModelAdapter {
 public:
  /// `endpoint` is scheme://host[:port]; requests go to
  /// `<endpoint>/v1/chat/completions`.
  HttpChatAdapter(std::string model, std::string endpoint, std::string api_key = {})
      : model_(std::move(model)), endpoint_(std::move(endpoint)), api_key_(std::move(api_key)) {
    if (model_.empty()) throw Error(ErrorKind::Config, "http backend needs a model name");
    if (endpoint_.empty()) throw Error(ErrorKind::Adapter, "backend unavailable: no endpoint configured");
    while (!endpoint_.empty() && endpoint_.back() == '/') endpoint_.pop_back();
  }

  static std::unique_ptr<HttpChatAdapter> from_env(const std::string& model) {
    const char* endpoint = std::getenv(kEndpointEnv);
    if (!endpoint || !*endpoint) {
      throw Error(ErrorKind::Adapter, std::string("backend unavailable: ") + kEndpointEnv + " is not set");
    }
    const char* key = std::getenv(kApiKeyEnv);
    return std::make_unique<HttpChatAdapter>(model, endpoint, key ? key : "");
  }

  std::string model_id() const override { return "http:" + model_; }
  Capabilities capabilities() const override { return {true, false}; }

  std::string generate(const ChatPrompt& prompt, const GenerationConfig& config) override {
    config.validate();
    if (prompt.system.empty() || prompt.user.empty()) {
      throw Error(ErrorKind::Validation, "chat prompt needs non-empty system and user text");
    }
    const json body{{"model", model_},
                    {"messages",
                     json::array({json{{"role", "system"}, {"content", prompt.system}},
                                  json{{"role", "user"}, {"content", prompt.user}}})},
                    {"temperature", config.temperature},
                    {"max_tokens", config.max_tokens},
                    {"seed", config.seed}};

    httplib::Client client(endpoint_);
    client.set_connection_timeout(10);
    client.set_read_timeout(300);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    auto res = client.Post("/v1/chat/completions", headers, body.dump(), "application/json");
    if (!res) {
      throw Error(ErrorKind::Adapter,
                  "backend unavailable: " + endpoint_ + " (" + httplib::to_string(res.error()) + ")");
    }
    json reply;
    try {
      reply = json::parse(res->body);
    } catch (const nlohmann::json::parse_error&) {
      throw Error(ErrorKind::Adapter, "backend returned non-JSON body (HTTP " + std::to_string(res->status) + ")");
    }
    if (res->status != 200) {
      std::string code, message;
      if (reply.contains("error") && reply["error"].is_object()) {
        const auto& e = reply["error"];
        if (e.contains("code") && e["code"].is_string()) code = e["code"].get<std::string>();
        if (e.contains("message") && e["message"].is_string()) message = e["message"].get<std::string>();
      }
      if (code == "context_length_exceeded" || message.find("context length") != std::string::npos) {
        throw Error(ErrorKind::Length, "prompt exceeds the backend context window: " + message);
      }
      throw Error(ErrorKind::Adapter, "backend error HTTP " + std::to_string(res->status) + ": " + message);
    }
    try {
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorKind::Adapter, "backend reply has no choices[0].message.content");
    }
  }

  HiddenStateCapture forward_capture(const ChatPrompt&, CaptureMode) override {
    throw Error(ErrorKind::Capability, model_id() + " does not export activations");
  }

 private:
  std::string model_;
  std::string endpoint_;
  std::string api_key_;
};

/// Builds an adapter from a model id:
///   toy             seeded toy model with default configuration
///   toy:<file>      toy model configured by a JSON file
///   http:<model>    chat completions server named by STRESSPROMPT_ENDPOINT
inline std::unique_ptr<ModelAdapter> make_adapter(const std::string& model_id, const TemplateLibrary& templates = {}) {
  if (model_id == "toy") return std::make_unique<ToyModel>(ToyModelConfig::defaults(), templates);
  if (model_id.rfind("toy:", 0) == 0) {
    const std::filesystem::path path = model_id.substr(4);
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open toy model config " + path.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::Parse, path.string() + ": " + e.what());
    }
    return std::make_unique<ToyModel>(ToyModelConfig::from_json(j), templates);
  }
  if (model_id.rfind("http:", 0) == 0) return HttpChatAdapter::from_env(model_id.substr(5));
  throw Error(ErrorKind::Adapter, "backend unavailable: unknown model id '" + model_id + "'");
}

}  // namespace stressprompt
