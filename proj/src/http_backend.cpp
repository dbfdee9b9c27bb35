#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "httplib.h"
#include "json.hpp"
#include "mcbias/model_backend.hpp"

namespace mcbias {

using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(std::string_view key, std::string_view v) {
  try {
    return std::stoul(std::string(v));
  } catch (const std::exception&) {
    throw std::invalid_argument(fmt::format("config '{}': expected integer, got '{}'", key, v));
  }
}

double parse_double(std::string_view key, std::string_view v) {
  try {
    return std::stod(std::string(v));
  } catch (const std::exception&) {
    throw std::invalid_argument(fmt::format("config '{}': expected number, got '{}'", key, v));
  }
}

std::string mime_for(const std::string& path) {
  auto ext = std::filesystem::path(path).extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".png") return "image/png";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  return "image/jpeg";
}

}  // namespace

void apply_config_entry(BackendConfig& c, std::string_view key,
                        std::string_view value) {
  if (key == "endpoint") c.endpoint = value;
  else if (key == "model") c.model = value;
  else if (key == "api_key_env") c.api_key_env = value;
  else if (key == "timeout_s") c.timeout_s = parse_double(key, value);
  else if (key == "max_inflight") c.max_inflight = parse_size(key, value);
  else if (key == "max_retries") c.max_retries = parse_size(key, value);
  else if (key == "backoff_initial_s") c.backoff_initial_s = parse_double(key, value);
  else if (key == "backoff_max_s") c.backoff_max_s = parse_double(key, value);
  else if (key == "top_logprobs") c.top_logprobs = static_cast<int>(parse_size(key, value));
  else throw std::invalid_argument(fmt::format("unknown config key '{}'", key));
}

BackendConfig load_backend_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open config {}", path.string()));
  BackendConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view sv = line;
    if (auto hash = sv.find('#'); hash != std::string_view::npos) sv = sv.substr(0, hash);
    sv = trim(sv);
    if (sv.empty()) continue;
    const auto eq = sv.find('=');
    if (eq == std::string_view::npos)
      throw std::invalid_argument(
          fmt::format("{}:{}: expected 'key = value'", path.string(), line_no));
    apply_config_entry(cfg, trim(sv.substr(0, eq)), trim(sv.substr(eq + 1)));
  }
  return cfg;
}

void InflightLimiter::acquire() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [this] { return available_ > 0; });
  --available_;
}

void InflightLimiter::release() {
  {
    std::lock_guard lock(mu_);
    ++available_;
  }
  cv_.notify_one();
}

std::string image_data_uri(const std::string& image_ref) {
  if (image_ref.rfind("http://", 0) == 0 || image_ref.rfind("https://", 0) == 0 ||
      image_ref.rfind("data:", 0) == 0)
    return image_ref;
  std::ifstream in(image_ref, std::ios::binary);
  if (!in)
    throw BackendError(ErrorClass::Protocol, fmt::format("cannot read image {}", image_ref));
  std::ostringstream ss;
  ss << in.rdbuf();
  return "data:" + mime_for(image_ref) + ";base64," + httplib::detail::base64_encode(ss.str());
}

// ---------------------------------------------------------------------------

HttpBackend::HttpBackend(BackendConfig config)
    : config_(std::move(config)), limiter_(config_.max_inflight) {
  // Split "http://host:port/prefix" into the client origin and a path prefix.
  const auto& ep = config_.endpoint;
  const auto scheme_end = ep.find("://");
  const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  const auto path_start = ep.find('/', host_start);
  scheme_host_port_ = ep.substr(0, path_start);
  base_path_ = path_start == std::string::npos ? "" : ep.substr(path_start);
  while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
  if (base_path_.empty()) base_path_ = "/v1";
}

Capabilities HttpBackend::capabilities() const { return Capabilities{true, true}; }

std::string HttpBackend::chat_request_body(std::string_view prompt,
                                           const std::optional<std::string>& image_ref,
                                           int max_new_tokens) const {
  json content = json::array();
  if (image_ref)
    content.push_back({{"type", "image_url"},
                       {"image_url", {{"url", image_data_uri(*image_ref)}}}});
  content.push_back({{"type", "text"}, {"text", std::string(prompt)}});
  json body = {
      {"model", config_.model},
      {"messages", json::array({{{"role", "user"}, {"content", content}}})},
      {"max_tokens", max_new_tokens},
      {"temperature", 0},
      {"top_p", 1},
      {"n", 1},
      {"logprobs", true},
      {"top_logprobs", config_.top_logprobs},
  };
  return body.dump();
}

std::string HttpBackend::echo_request_body(std::string_view text) const {
  json body = {
      {"model", config_.model},  {"prompt", std::string(text)},
      {"max_tokens", 0},         {"echo", true},
      {"logprobs", 1},           {"temperature", 0},
  };
  return body.dump();
}

std::string HttpBackend::post(const std::string& path, const std::string& body) const {
  InflightLimiter::Guard guard(limiter_);
  std::string key;
  if (const char* env = std::getenv(config_.api_key_env.c_str())) key = env;

  double backoff = config_.backoff_initial_s;
  std::string last_error;
  for (std::size_t attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
      backoff = std::min(backoff * 2.0, config_.backoff_max_s);
    }
    httplib::Client cli(scheme_host_port_);
    const auto secs = static_cast<time_t>(config_.timeout_s);
    const auto usecs = static_cast<time_t>((config_.timeout_s - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!key.empty()) headers.emplace("Authorization", "Bearer " + key);

    auto res = cli.Post(base_path_ + path, headers, body, "application/json");
    if (!res) {
      last_error = fmt::format("request to {}{} failed: {}", scheme_host_port_,
                               base_path_ + path, httplib::to_string(res.error()));
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = fmt::format("HTTP {} from {}", res->status, path);
      continue;
    }
    if (res->status >= 400)
      throw BackendError(ErrorClass::Refusal,
                         fmt::format("HTTP {} from {}: {}", res->status, path, res->body));
    return res->body;
  }
  throw BackendError(ErrorClass::Transport, last_error);
}

Generation HttpBackend::generate(std::string_view prompt,
                                 const std::optional<std::string>& image_ref,
                                 int max_new_tokens) const {
  if (max_new_tokens < 1)
    throw std::invalid_argument("max_new_tokens must be at least 1");
  const auto body = post("/chat/completions", chat_request_body(prompt, image_ref, max_new_tokens));
  try {
    const auto j = json::parse(body);
    const auto& choice = j.at("choices").at(0);
    Generation g;
    const auto& content = choice.at("message").at("content");
    g.text = content.is_null() ? std::string{} : content.get<std::string>();
    if (auto lp = choice.find("logprobs");
        lp != choice.end() && lp->is_object() && lp->contains("content") &&
        !(*lp)["content"].is_null()) {
      std::vector<TokenLogprob> toks;
      for (const auto& t : (*lp)["content"]) {
        TokenLogprob tl;
        tl.token = t.at("token").get<std::string>();
        tl.logprob = t.at("logprob").get<double>();
        if (auto top = t.find("top_logprobs"); top != t.end() && top->is_array())
          for (const auto& alt : *top)
            tl.top.emplace_back(alt.at("token").get<std::string>(),
                                alt.at("logprob").get<double>());
        toks.push_back(std::move(tl));
      }
      g.token_logprobs = std::move(toks);
    }
    return g;
  } catch (const json::exception& e) {
    throw BackendError(ErrorClass::Protocol,
                       fmt::format("malformed chat completion response: {}", e.what()));
  }
}

namespace {

struct EchoTokens {
  std::vector<std::string> tokens;
  std::vector<std::optional<double>> logprobs;
  std::vector<long long> offsets;
};

EchoTokens parse_echo(const std::string& body) {
  try {
    const auto j = json::parse(body);
    const auto& lp = j.at("choices").at(0).at("logprobs");
    EchoTokens out;
    out.tokens = lp.at("tokens").get<std::vector<std::string>>();
    for (const auto& v : lp.at("token_logprobs"))
      out.logprobs.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    out.offsets = lp.at("text_offset").get<std::vector<long long>>();
    if (out.tokens.size() != out.logprobs.size() || out.tokens.size() != out.offsets.size())
      throw BackendError(ErrorClass::Protocol, "echo logprob arrays differ in length");
    return out;
  } catch (const json::exception& e) {
    throw BackendError(ErrorClass::Protocol,
                       fmt::format("malformed completion response: {}", e.what()));
  }
}

}  // namespace

std::vector<double> HttpBackend::score_continuation(
    std::string_view prompt, const std::optional<std::string>& /*image_ref*/,
    std::string_view continuation) const {
  // The completions endpoint is text-only; the cloze prompt carries no image.
  if (continuation.empty())
    throw std::invalid_argument("continuation must not be empty");
  std::string full(prompt);
  if (!full.empty() && !std::isspace(static_cast<unsigned char>(full.back())) &&
      !std::isspace(static_cast<unsigned char>(continuation.front())))
    full += ' ';
  full += continuation;
  const auto echo = parse_echo(post("/completions", echo_request_body(full)));
  std::vector<double> out;
  const auto boundary = static_cast<long long>(prompt.size());
  for (std::size_t i = 0; i < echo.tokens.size(); ++i) {
    if (echo.offsets[i] < boundary) continue;
    if (!echo.logprobs[i])
      throw BackendError(ErrorClass::Protocol, "continuation token without log-probability");
    out.push_back(*echo.logprobs[i]);
  }
  if (out.empty())
    throw BackendError(ErrorClass::Protocol, "no continuation tokens in echo response");
  return out;
}

std::size_t HttpBackend::tokenizer_probe(std::string_view text) const {
  const auto echo = parse_echo(post("/completions", echo_request_body(text)));
  std::size_t n = echo.tokens.size();
  // A leading special token (e.g. BOS) carries no log-probability and is not
  // part of the text.
  if (n > 0 && !echo.logprobs[0] &&
      std::string_view(text).substr(0, echo.tokens[0].size()) != echo.tokens[0])
    --n;
  return n;
}

}  // namespace mcbias
