#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "dsp/errors.hpp"
#include "dsp/llm.hpp"

using namespace dsp;
using namespace dsp::llm;
namespace fs = std::filesystem;
using Strings = std::vector<std::string>;

namespace {

PromptTemplate fixture_template(bool with_stimulus) {
  PromptTemplate t;
  t.instruction = "Summarize the article.";
  t.input_header = "Article:";
  t.stimulus_header = "Keywords:";
  t.output_header = "Summary:";
  t.include_stimulus = with_stimulus;
  t.demonstrations.push_back({"The cat sat on the mat. It purred.", "cat; mat.", "A cat sat on a mat."});
  return t;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Strings lines_of(const std::string& s) {
  Strings out;
  std::stringstream ss(s);
  for (std::string line; std::getline(ss, line);) out.push_back(line);
  return out;
}

// Local chat-completions stub. Each request pops the next status from
// `statuses` (200 once they run out).
class StubServer {
 public:
  explicit StubServer(std::vector<int> statuses, std::string retry_after = "") : statuses_(std::move(statuses)) {
    server_.Post("/v1/chat/completions", [this, retry_after](const httplib::Request& req, httplib::Response& res) {
      last_body_ = req.body;
      last_auth_ = req.get_header_value("Authorization");
      const int status = next_ < statuses_.size() ? statuses_[next_++] : 200;
      ++requests_;
      res.status = status;
      if (status == 200) {
        res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"first"}},)"
                        R"({"message":{"role":"assistant","content":"second"}}]})",
                        "application/json");
      } else {
        if (!retry_after.empty()) res.set_header("Retry-After", retry_after);
        res.set_content("{}", "application/json");
      }
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  std::size_t requests() const { return requests_; }
  const std::string& last_body() const { return last_body_; }
  const std::string& last_auth() const { return last_auth_; }

 private:
  httplib::Server server_;
  std::thread thread_;
  std::vector<int> statuses_;
  std::size_t next_ = 0;
  std::size_t requests_ = 0;
  std::string last_body_, last_auth_;
  int port_ = 0;
};

BackendSpec http_spec(const StubServer& s) {
  setenv("DSP_TEST_KEY", "sk-test", 1);
  BackendSpec spec;
  spec.kind = BackendKind::kHttp;
  spec.endpoint = s.endpoint();
  spec.model = "stub-model";
  spec.auth_env = "DSP_TEST_KEY";
  spec.timeout_seconds = 5.0;
  spec.max_retries = 3;
  return spec;
}

GenParams two_choices() {
  GenParams p;
  p.n = 2;
  return p;
}

class CountingBackend : public Backend {
 public:
  std::vector<std::string> generate(const std::string& prompt, const GenParams& params) override {
    ++calls;
    return Strings(params.n, "out:" + prompt + "\nline two");
  }
  std::string kind() const override { return "counting"; }
  std::string model() const override { return "m"; }
  std::size_t calls = 0;
};

}  // namespace

TEST_SUITE("llm") {
  TEST_CASE("prompt matches the golden fixture") {
    const auto prompt = build_prompt(fixture_template(true), "Rain fell on the town. Roads flooded.",
                                     std::string("rain; roads."));
    CHECK(prompt == read_file(fs::path(DSP_FIXTURE_DIR) / "prompt_summarization_1demo.txt"));
  }

  TEST_CASE("toggling include_stimulus changes only the stimulus lines") {
    for (const auto task : {corpus::Task::kSummarization, corpus::Task::kDialogue, corpus::Task::kReasoning}) {
      auto with = builtin_template(task, true), without = with;
      without.include_stimulus = false;
      std::vector<corpus::Instance> demos(2);
      for (std::size_t i = 0; i < demos.size(); ++i) {
        demos[i].id = std::to_string(i);
        demos[i].input_text = "input " + std::to_string(i);
        demos[i].reference_output = "output " + std::to_string(i);
        demos[i].pseudo_stimulus = "hint " + std::to_string(i);
      }
      add_demonstrations(with, demos);
      add_demonstrations(without, demos);
      const auto a = lines_of(build_prompt(with, "query text", std::string("query hint")));
      const auto b = lines_of(build_prompt(without, "query text", std::nullopt));
      // Removing every stimulus-header line from the DSP prompt gives the standard one.
      Strings stripped;
      for (const auto& l : a) {
        if (l.rfind(with.stimulus_header, 0) != 0) stripped.push_back(l);
      }
      CHECK(stripped == b);
      CHECK(a.size() == b.size() + 3);
    }
  }

  TEST_CASE("zero-shot prompt and flag mismatches") {
    auto t = fixture_template(false);
    t.demonstrations.clear();
    CHECK(build_prompt(t, "X.", std::nullopt) == "Summarize the article.\n\nArticle: X.\nSummary:");
    CHECK_THROWS_AS(build_prompt(t, "X.", std::string("k.")), ValidationError);
    CHECK_THROWS_AS(build_prompt(fixture_template(true), "X.", std::nullopt), ValidationError);

    auto needs = builtin_template(corpus::Task::kSummarization, true);
    corpus::Instance bare;
    bare.input_text = "a";
    bare.reference_output = "b";
    CHECK_THROWS_AS(add_demonstrations(needs, std::vector<corpus::Instance>{bare}), ValidationError);
  }

  TEST_CASE("query block round trip") {
    const auto t = fixture_template(true);
    const auto q = parse_prompt_query(t, build_prompt(t, "Line one.\nLine two.", std::string("a; b.")));
    CHECK(q.input == "Line one.\nLine two.");
    CHECK(q.stimulus == std::optional<std::string>("a; b."));
    const auto s = fixture_template(false);
    const auto q2 = parse_prompt_query(s, build_prompt(s, "Only input.", std::nullopt));
    CHECK(q2.input == "Only input.");
    CHECK_FALSE(q2.stimulus.has_value());
  }

  TEST_CASE("sentence splitting") {
    CHECK(split_sentences("One. Two!  Three? Four") == Strings{"One.", "Two!", "Three?", "Four"});
    CHECK(split_sentences("Pi is 3.14 exactly. Yes.") == Strings{"Pi is 3.14 exactly.", "Yes."});
    CHECK(split_sentences("   ").empty());
  }

  TEST_CASE("mock summarizer rules") {
    const std::string article = "Alpha opens. Beta follows. Gamma has kiwi and lime. Delta ends.";
    MockRuleSet rules;
    CHECK(mock_generate_one(rules, article, std::nullopt) == "Alpha opens. Beta follows.");
    CHECK(mock_generate_one(rules, article, std::string("")) == "Alpha opens. Beta follows.");
    CHECK(mock_generate_one(rules, article, std::string("kiwi; lime.")) == "Alpha opens. Gamma has kiwi and lime.");
    CHECK(mock_generate_one(rules, article, std::string("delta; gamma.")) == "Gamma has kiwi and lime. Delta ends.");
    rules.sentences_to_select = 1;
    CHECK(mock_generate_one(rules, article, std::string("beta.")) == "Beta follows.");
  }

  TEST_CASE("mock summarizer noise is a pure function") {
    MockRuleSet rules;
    rules.noise_rate = 0.5;
    rules.noise_seed = 9;
    const std::string article = "A one. B two. C three. D four. E five.";
    std::size_t changed = 0;
    for (std::size_t i = 0; i < 40; ++i) {
      const auto a = mock_generate_one(rules, article, std::string("c; d."), i);
      CHECK(a == mock_generate_one(rules, article, std::string("c; d."), i));
      changed += a != "C three. D four." ? 1 : 0;
    }
    CHECK(changed > 0);
    CHECK(changed < 40);
  }

  TEST_CASE("mock dialogue and reasoning rules") {
    MockRuleSet d;
    d.task = corpus::Task::kDialogue;
    const auto food = mock_generate_one(d, "User: hi", std::string("[restaurant] [request] food"));
    CHECK(food.find("What food would you like?") != std::string::npos);
    const auto offer = mock_generate_one(d, "x", std::string("[hotel] [inform] choice [recommend] name area"));
    CHECK(offer.find("[value_choice]") != std::string::npos);
    CHECK(offer.find("[value_name]") != std::string::npos);
    CHECK(offer.find("[value_area]") != std::string::npos);

    MockRuleSet r;
    r.task = corpus::Task::kReasoning;
    const std::string q = "Ana has 3 apples and finds 4 more. How many?";
    const auto good = mock_generate_one(r, q, std::string("Let's think step by step."));
    CHECK(good.find("The answer is 7.") != std::string::npos);
    CHECK(mock_generate_one(r, q, std::string("First,")) == "The answer is 8.");
    CHECK(mock_generate_one(r, q, std::nullopt) == "The answer is 8.");
  }

  TEST_CASE("mock backend reads the query block") {
    auto t = builtin_template(corpus::Task::kSummarization, true);
    MockBackend mock(MockRuleSet{}, t);
    GenParams p;
    p.n = 3;
    const auto out = mock.generate(build_prompt(t, "A one. B two. C three.", std::string("c.")), p);
    CHECK(out == Strings(3, "A one. C three."));
  }

  TEST_CASE("http backend returns choices in order") {
    StubServer server({});
    HttpBackend backend(http_spec(server), [](double) {});
    CHECK(backend.generate("hello", two_choices()) == Strings{"first", "second"});
    CHECK(server.last_auth() == "Bearer sk-test");
    const auto body = nlohmann::json::parse(server.last_body());
    CHECK(body["model"] == "stub-model");
    CHECK(body["messages"][0]["role"] == "user");
    CHECK(body["messages"][0]["content"] == "hello");
    CHECK(body["n"] == 2);
    CHECK(body["temperature"] == 0.7);
    CHECK(body["top_p"] == 1.0);
    CHECK(backend.attempts() == 1);
  }

  TEST_CASE("http backend backs off on 429") {
    StubServer server({429, 429});
    std::vector<double> waits;
    HttpBackend backend(http_spec(server), [&](double s) { waits.push_back(s); }, 1);
    CHECK(backend.generate("hello", two_choices()) == Strings{"first", "second"});
    CHECK(server.requests() == 3);
    CHECK(backend.attempts() == 3);
    REQUIRE(waits.size() == 2);
    CHECK(waits[0] >= 1.0);
    CHECK(waits[0] <= 1.1);
    CHECK(waits[1] >= 2.0);
    CHECK(waits[1] <= 2.2);
    CHECK(waits[0] + waits[1] >= 3.0);
  }

  TEST_CASE("http backend honors a longer retry-after") {
    StubServer server({503}, "7");
    std::vector<double> waits;
    HttpBackend backend(http_spec(server), [&](double s) { waits.push_back(s); });
    backend.generate("hello", two_choices());
    REQUIRE(waits.size() == 1);
    CHECK(waits[0] == 7.0);
  }

  TEST_CASE("http backend failure classes") {
    SUBCASE("401 is a credential error without retries") {
      StubServer server({401});
      std::size_t sleeps = 0;
      HttpBackend backend(http_spec(server), [&](double) { ++sleeps; });
      CHECK_THROWS_AS(backend.generate("x", two_choices()), CredentialError);
      CHECK(server.requests() == 1);
      CHECK(sleeps == 0);
    }
    SUBCASE("other 4xx are not retried") {
      StubServer server({400});
      HttpBackend backend(http_spec(server), [](double) {});
      CHECK_THROWS_AS(backend.generate("x", two_choices()), BackendUnavailableError);
      CHECK(server.requests() == 1);
    }
    SUBCASE("retries run out") {
      StubServer server({500, 500, 500, 500, 500});
      HttpBackend backend(http_spec(server), [](double) {});
      CHECK_THROWS_AS(backend.generate("x", two_choices()), BackendUnavailableError);
      CHECK(server.requests() == 4);
    }
    SUBCASE("wrong choice count is a protocol error") {
      StubServer server({});
      HttpBackend backend(http_spec(server), [](double) {});
      GenParams one;
      CHECK_THROWS_AS(backend.generate("x", one), ProtocolError);
    }
    SUBCASE("missing key") {
      StubServer server({});
      auto spec = http_spec(server);
      spec.auth_env = "DSP_TEST_KEY_UNSET";
      unsetenv("DSP_TEST_KEY_UNSET");
      HttpBackend backend(spec, [](double) {});
      CHECK_THROWS_AS(backend.generate("x", two_choices()), CredentialError);
      CHECK(server.requests() == 0);
    }
  }

  TEST_CASE("response cache") {
    const auto dir = fs::temp_directory_path() / "dsp_cache_test";
    fs::remove_all(dir);
    auto inner = std::make_shared<CountingBackend>();
    CachedBackend cache(inner, dir);
    GenParams p;
    p.n = 2;
    const auto first = cache.generate("prompt \xc3\xa9", p);
    const auto second = cache.generate("prompt \xc3\xa9", p);
    CHECK(first == second);
    CHECK(second == Strings(2, "out:prompt \xc3\xa9\nline two"));
    CHECK(inner->calls == 1);
    CHECK(cache.hits() == 1);
    CHECK(cache.misses() == 1);

    GenParams hot = p;
    hot.temperature = 1.0;
    CHECK(cache.key("prompt", p) != cache.key("prompt", hot));
    cache.generate("prompt \xc3\xa9", hot);
    CHECK(inner->calls == 2);

    // A fresh cache object over the same directory still hits.
    CachedBackend reopened(inner, dir);
    CHECK(reopened.generate("prompt \xc3\xa9", p) == first);
    CHECK(inner->calls == 2);

    // Corrupt entries are misses and get rewritten.
    for (const auto& e : fs::directory_iterator(dir)) std::ofstream(e.path(), std::ios::trunc) << "{broken";
    CachedBackend healed(inner, dir);
    CHECK(healed.generate("prompt \xc3\xa9", p) == first);
    CHECK(inner->calls == 3);
    CHECK(healed.misses() == 1);
    CHECK(healed.generate("prompt \xc3\xa9", p) == first);
    CHECK(inner->calls == 3);
    fs::remove_all(dir);
  }

  TEST_CASE("backend spec validation") {
    BackendSpec http;
    http.kind = BackendKind::kHttp;
    CHECK_THROWS_AS(http.validate(), ConfigError);
    http.endpoint = "http://localhost:1/v1/chat/completions";
    http.model = "m";
    CHECK_NOTHROW(http.validate());
    BackendSpec mock;
    mock.rule_set = "summarization";
    CHECK_NOTHROW(mock.validate());
    mock.rule_set = "poetry";
    CHECK_THROWS_AS(mock.validate(), ConfigError);
  }
}
