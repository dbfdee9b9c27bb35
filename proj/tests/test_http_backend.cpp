#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "mcbias/model_backend.hpp"
#include "support.hpp"

using namespace mcbias;
using nlohmann::json;

namespace {

// In-process stand-in for an OpenAI-compatible server.
class FakeServer {
 public:
  FakeServer() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++chat_calls;
      {
        std::lock_guard lock(mu_);
        last_body = req.body;
        last_auth = req.get_header_value("Authorization");
      }
      const int now = ++inflight;
      int seen = max_inflight.load();
      while (now > seen && !max_inflight.compare_exchange_weak(seen, now)) {}
      std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms.load()));
      --inflight;
      if (fail_first.load() > 0) {
        --fail_first;
        res.status = 503;
        return;
      }
      if (refuse.load()) {
        res.status = 400;
        res.set_content(R"({"error":"bad request"})", "application/json");
        return;
      }
      const json reply = {
          {"choices",
           {{{"message", {{"role", "assistant"}, {"content", "B"}}},
             {"logprobs",
              {{"content",
                {{{"token", "B"},
                  {"logprob", -0.1},
                  {"top_logprobs",
                   {{{"token", "B"}, {"logprob", -0.1}}, {{"token", "A"}, {"logprob", -2.5}}}}}}}}}}}}};
      res.set_content(reply.dump(), "application/json");
    });
    server_.Post("/v1/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const auto body = json::parse(req.body);
      const auto text = body.at("prompt").get<std::string>();
      // BOS plus one token per whitespace-separated word (with its leading space).
      json tokens = json::array({"<s>"});
      json lps = json::array({nullptr});
      json offsets = json::array({0});
      std::size_t pos = 0;
      while (pos < text.size()) {
        auto next = text.find(' ', pos + 1);
        if (next == std::string::npos) next = text.size();
        tokens.push_back(text.substr(pos, next - pos));
        lps.push_back(-0.5 - 0.1 * static_cast<double>(tokens.size()));
        offsets.push_back(pos);
        pos = next;
      }
      const json reply = {{"choices",
                           {{{"text", text},
                             {"logprobs",
                              {{"tokens", tokens},
                               {"token_logprobs", lps},
                               {"text_offset", offsets}}}}}}};
      res.set_content(reply.dump(), "application/json");
    });
    port = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  BackendConfig config() const {
    BackendConfig c;
    c.endpoint = fmt::format("http://127.0.0.1:{}/v1", port);
    c.model = "test-model";
    c.api_key_env = "MCBIAS_TEST_KEY";
    c.backoff_initial_s = 0.01;
    c.backoff_max_s = 0.02;
    c.timeout_s = 5;
    return c;
  }

  int port = 0;
  std::atomic<int> chat_calls{0};
  std::atomic<int> inflight{0};
  std::atomic<int> max_inflight{0};
  std::atomic<int> delay_ms{0};
  std::atomic<int> fail_first{0};
  std::atomic<bool> refuse{false};
  std::mutex mu_;
  std::string last_body;
  std::string last_auth;

 private:
  httplib::Server server_;
  std::thread thread_;
};

}  // namespace

TEST_CASE("config file parsing") {
  testing::TempDir dir;
  testing::spit(dir / "b.conf",
                "# comment\nendpoint = http://h:9/v1\nmax_inflight = 7\n\ntimeout_s=2.5\n");
  const auto c = load_backend_config(dir / "b.conf");
  CHECK(c.endpoint == "http://h:9/v1");
  CHECK(c.max_inflight == 7);
  CHECK(c.timeout_s == 2.5);
  testing::spit(dir / "bad.conf", "colour = blue\n");
  CHECK_THROWS(load_backend_config(dir / "bad.conf"));
}

TEST_CASE("chat request body is deterministic") {
  BackendConfig c;
  c.model = "m";
  HttpBackend b(c);
  const auto j = json::parse(b.chat_request_body("Q?", std::string("https://x/img.png"), 3));
  CHECK(j["model"] == "m");
  CHECK(j["temperature"] == 0);
  CHECK(j["max_tokens"] == 3);
  CHECK(j["logprobs"] == true);
  CHECK(j["messages"][0]["content"][0]["image_url"]["url"] == "https://x/img.png");
  CHECK(j["messages"][0]["content"][1]["text"] == "Q?");
}

TEST_CASE("local images become data URIs") {
  testing::TempDir dir;
  testing::spit(dir / "p.png", "abc");
  CHECK(image_data_uri((dir / "p.png").string()) == "data:image/png;base64,YWJj");
  CHECK_THROWS_AS(image_data_uri((dir / "none.png").string()), BackendError);
}

TEST_CASE("generate over the wire") {
  FakeServer server;
  ::setenv("MCBIAS_TEST_KEY", "sekret", 1);
  HttpBackend b(server.config());
  const auto g = b.generate("Which?", std::nullopt, 2);
  CHECK(g.text == "B");
  REQUIRE(g.token_logprobs);
  CHECK(g.token_logprobs->front().top.size() == 2);
  CHECK(g.token_logprobs->front().top[1].first == "A");
  CHECK(server.last_auth == "Bearer sekret");
  CHECK(json::parse(server.last_body)["max_tokens"] == 2);
  ::unsetenv("MCBIAS_TEST_KEY");
}

TEST_CASE("transient errors are retried, client errors are refusals") {
  FakeServer server;
  auto cfg = server.config();
  cfg.max_retries = 3;
  HttpBackend b(cfg);
  server.fail_first = 2;
  CHECK(b.generate("x", std::nullopt, 1).text == "B");
  CHECK(server.chat_calls == 3);

  server.fail_first = 10;
  try {
    b.generate("x", std::nullopt, 1);
    FAIL("expected transport error");
  } catch (const BackendError& e) {
    CHECK(e.kind() == ErrorClass::Transport);
  }
  server.fail_first = 0;
  server.refuse = true;
  try {
    b.generate("x", std::nullopt, 1);
    FAIL("expected refusal");
  } catch (const BackendError& e) {
    CHECK(e.kind() == ErrorClass::Refusal);
    CHECK(!e.retryable());
  }
}

TEST_CASE("unreachable endpoint is a transport error") {
  BackendConfig c;
  c.endpoint = "http://127.0.0.1:1/v1";
  c.max_retries = 1;
  c.backoff_initial_s = 0.01;
  c.timeout_s = 1;
  HttpBackend b(c);
  CHECK_THROWS_AS(b.generate("x", std::nullopt, 1), BackendError);
}

TEST_CASE("in-flight requests are bounded") {
  FakeServer server;
  server.delay_ms = 60;
  auto cfg = server.config();
  cfg.max_inflight = 2;
  HttpBackend b(cfg);
  std::vector<std::thread> threads;
  for (int i = 0; i < 6; ++i) threads.emplace_back([&] { b.generate("x", std::nullopt, 1); });
  for (auto& t : threads) t.join();
  CHECK(server.max_inflight.load() <= 2);
  CHECK(server.max_inflight.load() >= 1);
}

TEST_CASE("echo scoring and tokenizer probe") {
  FakeServer server;
  HttpBackend b(server.config());
  // "What is it?" + " a red bus": words after the prompt are the continuation.
  const auto lps = b.score_continuation("What is it?", std::nullopt, " a red bus");
  CHECK(lps.size() == 3);
  // A word boundary is inserted when neither side has one.
  CHECK(b.score_continuation("What is it?", std::nullopt, "a red bus") == lps);
  CHECK(b.tokenizer_probe("IV") == 1);
  CHECK(b.tokenizer_probe("one two") == 2);
}
