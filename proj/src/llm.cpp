#include "dsp/llm.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <regex>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "dsp/errors.hpp"
#include "dsp/hashing.hpp"
#include "dsp/rng.hpp"
#include "dsp/textkit.hpp"

namespace dsp::llm {

// ---------------------------------------------------------------- templates

PromptTemplate builtin_template(corpus::Task task, bool include_stimulus) {
  PromptTemplate t;
  t.include_stimulus = include_stimulus;
  switch (task) {
    case corpus::Task::kSummarization:
      t.instruction = include_stimulus
                          ? "Summarize the article in 2-3 sentences based on the hint keywords."
                          : "Summarize the article in 2-3 sentences.";
      t.input_header = "Article:";
      t.stimulus_header = "Keywords:";
      t.output_header = "Summary:";
      break;
    case corpus::Task::kDialogue:
      t.instruction = include_stimulus
                          ? "Generate the next system response for the dialogue, following the dialogue acts. "
                            "[inform] gives slot values, [request] asks for slots, [recommend] and [select] "
                            "propose entities, [nooffer] and [nobook] report failures, [offerbook] and "
                            "[offerbooked] handle bookings, [reqmore], [greet], [welcome] and [bye] are general."
                          : "Generate the next system response for the dialogue.";
      t.input_header = "Context:";
      t.stimulus_header = "Dialogue acts:";
      t.output_header = "Response:";
      break;
    case corpus::Task::kReasoning:
      t.instruction = "Answer the question.";
      t.input_header = "Question:";
      t.stimulus_header = "Hint:";
      t.output_header = "Answer:";
      break;
  }
  return t;
}

void add_demonstrations(PromptTemplate& tmpl, std::span<const corpus::Instance> demos) {
  for (const auto& d : demos) {
    if (tmpl.include_stimulus && !d.pseudo_stimulus) {
      throw ValidationError("demonstration '" + d.id + "' has no pseudo_stimulus");
    }
    tmpl.demonstrations.push_back(
        {d.input_text, tmpl.include_stimulus ? d.pseudo_stimulus : std::nullopt, d.reference_output});
  }
}

std::string build_prompt(const PromptTemplate& tmpl, std::string_view input_text,
                         const std::optional<std::string>& stimulus) {
  if (stimulus.has_value() != tmpl.include_stimulus) {
    throw ValidationError(tmpl.include_stimulus ? "stimulus template requires a stimulus"
                                                : "standard template does not take a stimulus");
  }
  std::string out;
  if (!tmpl.instruction.empty()) out += tmpl.instruction + "\n\n";
  for (const auto& d : tmpl.demonstrations) {
    out += tmpl.input_header + " " + d.input + "\n";
    if (tmpl.include_stimulus) out += tmpl.stimulus_header + " " + d.stimulus.value_or("") + "\n";
    out += tmpl.output_header + " " + d.output + "\n\n";
  }
  out += tmpl.input_header + " " + std::string(input_text) + "\n";
  if (tmpl.include_stimulus) out += tmpl.stimulus_header + " " + *stimulus + "\n";
  out += tmpl.output_header;
  return out;
}

PromptQuery parse_prompt_query(const PromptTemplate& tmpl, std::string_view prompt) {
  const std::string in_mark = tmpl.input_header + " ";
  std::size_t start = prompt.rfind("\n" + in_mark);
  if (start == std::string_view::npos) {
    if (prompt.substr(0, in_mark.size()) != in_mark) throw ProtocolError("prompt has no query input block");
    start = 0;
  } else {
    start += 1;
  }
  start += in_mark.size();
  const std::string out_mark = "\n" + tmpl.output_header;
  std::size_t end = prompt.rfind(out_mark);
  if (end == std::string_view::npos || end < start) throw ProtocolError("prompt has no trailing output header");
  PromptQuery q;
  const std::string st_mark = "\n" + tmpl.stimulus_header + " ";
  const std::size_t st = prompt.rfind(st_mark, end);
  if (st != std::string_view::npos && st >= start) {
    q.input = std::string(prompt.substr(start, st - start));
    const std::size_t body = st + st_mark.size();
    q.stimulus = std::string(prompt.substr(body, end - body));
  } else {
    q.input = std::string(prompt.substr(start, end - start));
  }
  return q;
}

nlohmann::json GenParams::canonical_json() const {
  nlohmann::json j = {{"temperature", temperature}, {"top_p", top_p}, {"n", n}, {"max_tokens", max_tokens}};
  j["stop"] = stop ? nlohmann::json(*stop) : nlohmann::json(nullptr);
  return j;
}

void BackendSpec::validate() const {
  if (kind == BackendKind::kHttp) {
    if (endpoint.empty() || model.empty()) throw ConfigError("http backend requires endpoint and model");
    if (auth_env.empty()) throw ConfigError("http backend requires an auth environment variable name");
  } else {
    if (rule_set.empty()) throw ConfigError("mock backend requires a rule_set");
    corpus::parse_task(rule_set);
  }
  if (!(timeout_seconds > 0.0)) throw ConfigError("backend timeout must be positive");
}

// ---------------------------------------------------------------- http

namespace {

struct Url {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

Url parse_url(const std::string& endpoint) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(endpoint, m, re)) throw ConfigError("malformed endpoint URL '" + endpoint + "'");
  return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

double parse_retry_after(const httplib::Result& res) {
  if (!res || !res->has_header("Retry-After")) return 0.0;
  try {
    return std::max(0.0, std::stod(res->get_header_value("Retry-After")));
  } catch (const std::exception&) {
    return 0.0;  // HTTP-date form is not supported
  }
}

}  // namespace

HttpBackend::HttpBackend(BackendSpec spec, Sleeper sleeper, std::uint64_t jitter_seed)
    : spec_(std::move(spec)), sleeper_(std::move(sleeper)), jitter_state_(mix_seed(jitter_seed)) {
  spec_.kind = BackendKind::kHttp;
  spec_.validate();
  if (!sleeper_) {
    sleeper_ = [](double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); };
  }
}

nlohmann::json HttpBackend::request_body(const std::string& prompt, const GenParams& params) const {
  nlohmann::json body = {{"model", spec_.model},
                         {"temperature", params.temperature},
                         {"top_p", params.top_p},
                         {"n", params.n},
                         {"max_tokens", params.max_tokens}};
  if (spec_.completions_api) {
    body["prompt"] = prompt;
  } else {
    body["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", prompt}}});
  }
  if (params.stop) body["stop"] = *params.stop;
  return body;
}

std::vector<std::string> HttpBackend::generate(const std::string& prompt, const GenParams& params) {
  if (params.n == 0) throw ConfigError("GenParams.n must be at least 1");
  const char* key = std::getenv(spec_.auth_env.c_str());
  if (key == nullptr || *key == '\0') {
    throw CredentialError("environment variable " + spec_.auth_env + " is not set");
  }
  const Url url = parse_url(spec_.endpoint);
  httplib::Client client(url.origin);
  const auto secs = std::chrono::duration<double>(spec_.timeout_seconds);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
  client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
  const httplib::Headers headers = {{"Authorization", std::string("Bearer ") + key}};
  const std::string body = request_body(prompt, params).dump();

  std::string last_failure;
  for (std::size_t attempt = 0; attempt <= spec_.max_retries; ++attempt) {
    ++attempts_;
    auto res = client.Post(url.path, headers, body, "application/json");
    if (res && res->status >= 200 && res->status < 300) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("response is not JSON: ") + e.what());
      }
      if (!j.contains("choices") || !j["choices"].is_array()) throw ProtocolError("response has no choices array");
      std::vector<std::string> out;
      for (const auto& c : j["choices"]) {
        const nlohmann::json* field = nullptr;
        if (spec_.completions_api) {
          if (c.contains("text")) field = &c["text"];
        } else if (c.contains("message") && c["message"].is_object() && c["message"].contains("content")) {
          field = &c["message"]["content"];
        }
        if (field == nullptr || !field->is_string()) throw ProtocolError("choice without text content");
        out.push_back(field->get<std::string>());
      }
      if (out.size() != params.n) {
        throw ProtocolError("expected " + std::to_string(params.n) + " choices, got " + std::to_string(out.size()));
      }
      return out;
    }
    if (res && (res->status == 401 || res->status == 403)) {
      throw CredentialError("backend rejected credentials (HTTP " + std::to_string(res->status) + ")");
    }
    const bool transient = !res || res->status == 429 || res->status >= 500;
    if (!transient) {
      throw BackendUnavailableError("backend returned HTTP " + std::to_string(res->status));
    }
    last_failure = res ? "HTTP " + std::to_string(res->status) : httplib::to_string(res.error());
    if (attempt == spec_.max_retries) break;
    const double base = std::ldexp(1.0, static_cast<int>(attempt));
    jitter_state_ = mix_seed(jitter_state_ + 0x9E3779B97F4A7C15ULL);
    const double jitter = 0.1 * base * static_cast<double>(jitter_state_ >> 11) * 0x1.0p-53;
    const double delay = std::max(base + jitter, parse_retry_after(res));
    spdlog::warn("backend request failed ({}), retrying in {:.2f}s", last_failure, delay);
    sleeper_(delay);
  }
  throw BackendUnavailableError("backend unavailable after " + std::to_string(spec_.max_retries + 1) +
                                " attempts: " + last_failure);
}

// ---------------------------------------------------------------- mock

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  auto push = [&out](std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    if (!s.empty()) out.emplace_back(s);
  };
  std::size_t start = 0;
  for (std::size_t i = 0; i + 1 < text.size(); ++i) {
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') && std::isspace(static_cast<unsigned char>(text[i + 1]))) {
      push(text.substr(start, i + 1 - start));
      start = i + 1;
    }
  }
  push(text.substr(start));
  return out;
}

namespace {

std::string mock_summary(const MockRuleSet& rules, std::string_view input, const std::optional<std::string>& stimulus,
                         std::size_t sample_index) {
  const auto sentences = split_sentences(input);
  std::vector<std::vector<std::string>> keyword_tokens;
  if (stimulus) {
    for (const auto& kw : corpus::parse_keyword_stimulus(*stimulus)) {
      auto toks = textkit::tokenize_words(kw);
      if (!toks.empty()) keyword_tokens.push_back(std::move(toks));
    }
  }
  std::vector<std::size_t> score(sentences.size(), 0);
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const auto toks = textkit::tokenize_words(sentences[s]);
    for (const auto& kw : keyword_tokens) {
      const bool all = std::all_of(kw.begin(), kw.end(), [&toks](const std::string& t) {
        return std::find(toks.begin(), toks.end(), t) != toks.end();
      });
      if (all) ++score[s];
    }
  }
  std::vector<std::size_t> order(sentences.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&score](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  const std::size_t k = std::min(rules.sentences_to_select, order.size());
  std::vector<std::size_t> picked(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  if (rules.noise_rate > 0.0 && k > 0 && k < sentences.size()) {
    const std::string h = sha256_hex(std::string(input) + '\x1f' + stimulus.value_or(""));
    Rng rng(derive_seed(rules.noise_seed, std::stoull(h.substr(0, 16), nullptr, 16), sample_index));
    if (rng.uniform01() < rules.noise_rate) {
      std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
      picked[rng.below(k)] = rest[rng.below(rest.size())];
    }
  }
  std::sort(picked.begin(), picked.end());
  std::string out;
  for (std::size_t i : picked) {
    if (!out.empty()) out.push_back(' ');
    out += sentences[i];
  }
  return out;
}

std::string slot_phrase(const std::string& slot) {
  if (slot == "pricerange") return "price range";
  if (slot == "leave") return "departure time";
  if (slot == "arrive") return "arrival time";
  return slot;
}

std::string act_fragment(const corpus::DialogueAct& a) {
  std::string out;
  const std::string& dom = a.domain;
  if (a.act == "inform") {
    for (const auto& s : a.slots) {
      if (s == "choice") {
        out += "There are [value_choice] " + dom + " options. ";
      } else if (s == "name") {
        out += "[value_name] is a good choice. ";
      } else {
        out += "The " + slot_phrase(s) + " is [value_" + s + "]. ";
      }
    }
    if (a.slots.empty()) out += "Here is the information about the " + dom + ". ";
  } else if (a.act == "request") {
    for (const auto& s : a.slots) out += "What " + slot_phrase(s) + " would you like? ";
    if (a.slots.empty()) out += "What are you looking for? ";
  } else if (a.act == "recommend") {
    out += "I recommend [value_name]. ";
    for (const auto& s : a.slots) {
      if (s != "name") out += "Its " + slot_phrase(s) + " is [value_" + s + "]. ";
    }
  } else if (a.act == "select") {
    out += "Would you prefer ";
    for (std::size_t i = 0; i < a.slots.size(); ++i) {
      if (i) out += " or ";
      out += "[value_" + a.slots[i] + "]";
    }
    out += a.slots.empty() ? "one of these? " : "? ";
  } else if (a.act == "nooffer") {
    out += "There is no " + dom + " matching your request. ";
  } else if (a.act == "offerbook") {
    out += "Would you like me to book the " + dom + "? ";
  } else if (a.act == "offerbooked") {
    out += "I have booked the " + dom + ", the reference number is [value_reference]. ";
  } else if (a.act == "nobook") {
    out += "I am sorry, the booking was unsuccessful. ";
  } else if (a.act == "reqmore") {
    out += "Is there anything else I can help with? ";
  } else if (a.act == "greet") {
    out += "Hello, how can I help you? ";
  } else if (a.act == "welcome") {
    out += "You are welcome. ";
  } else if (a.act == "bye") {
    out += "Goodbye. ";
  }
  return out;
}

std::string mock_dialogue(const std::optional<std::string>& stimulus) {
  if (!stimulus || stimulus->empty()) return "How can I help you?";
  const auto parsed = corpus::parse_dialogue_acts(*stimulus);
  std::string out;
  for (const auto& a : parsed.acts) out += act_fragment(a);
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out.empty() ? "How can I help you?" : out;
}

std::string mock_reasoning(std::string_view question, const std::optional<std::string>& stimulus) {
  static const std::regex int_re("[0-9]+");
  const std::string q(question);
  std::vector<long long> nums;
  for (auto it = std::sregex_iterator(q.begin(), q.end(), int_re); it != std::sregex_iterator(); ++it) {
    nums.push_back(std::stoll(it->str()));
  }
  long long sum = 0;
  for (long long v : nums) sum += v;
  bool step = false;
  if (stimulus) {
    const auto toks = textkit::tokenize_words(*stimulus);
    step = std::find(toks.begin(), toks.end(), "step") != toks.end();
  }
  if (!step) return "The answer is " + std::to_string(sum + 1) + ".";
  std::string chain = "Let's work through it step by step. ";
  if (!nums.empty()) {
    chain += "We add ";
    for (std::size_t i = 0; i < nums.size(); ++i) {
      if (i) chain += " + ";
      chain += std::to_string(nums[i]);
    }
    chain += " = " + std::to_string(sum) + ". ";
  }
  return chain + "The answer is " + std::to_string(sum) + ".";
}

}  // namespace

std::string mock_generate_one(const MockRuleSet& rules, std::string_view input_text,
                              const std::optional<std::string>& stimulus, std::size_t sample_index) {
  switch (rules.task) {
    case corpus::Task::kSummarization:
      return mock_summary(rules, input_text, stimulus, sample_index);
    case corpus::Task::kDialogue:
      return mock_dialogue(stimulus);
    case corpus::Task::kReasoning:
      return mock_reasoning(input_text, stimulus);
  }
  return {};
}

MockBackend::MockBackend(MockRuleSet rules, PromptTemplate tmpl) : rules_(rules), tmpl_(std::move(tmpl)) {}

std::string MockBackend::model() const { return "mock-" + std::string(corpus::to_string(rules_.task)); }

std::vector<std::string> MockBackend::generate(const std::string& prompt, const GenParams& params) {
  if (params.n == 0) throw ConfigError("GenParams.n must be at least 1");
  const PromptQuery q = parse_prompt_query(tmpl_, prompt);
  std::vector<std::string> out;
  out.reserve(params.n);
  for (std::size_t i = 0; i < params.n; ++i) out.push_back(mock_generate_one(rules_, q.input, q.stimulus, i));
  return out;
}

// ---------------------------------------------------------------- cache

CachedBackend::CachedBackend(std::shared_ptr<Backend> inner, std::filesystem::path dir)
    : inner_(std::move(inner)), dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::string CachedBackend::key(const std::string& prompt, const GenParams& params) const {
  const nlohmann::json k = {{"kind", inner_->kind()},
                            {"model", inner_->model()},
                            {"prompt", prompt},
                            {"params", params.canonical_json()},
                            {"n", params.n}};
  return sha256_hex(k.dump());
}

std::vector<std::string> CachedBackend::generate(const std::string& prompt, const GenParams& params) {
  const std::string k = key(prompt, params);
  const std::filesystem::path file = dir_ / (k + ".json");
  if (std::filesystem::exists(file)) {
    try {
      std::ifstream is(file);
      const auto j = nlohmann::json::parse(is);
      auto outs = j.at("outputs").get<std::vector<std::string>>();
      if (outs.size() != params.n) throw std::runtime_error("stored output count differs from n");
      ++hits_;
      return outs;
    } catch (const std::exception& e) {
      spdlog::warn("corrupt cache entry {} ({}); regenerating", file.string(), e.what());
    }
  }
  ++misses_;
  auto outs = inner_->generate(prompt, params);
  if (outs.size() != params.n) throw ProtocolError("backend returned the wrong number of outputs");
  const nlohmann::json entry = {{"kind", inner_->kind()}, {"model", inner_->model()},
                                {"prompt", prompt},       {"params", params.canonical_json()},
                                {"outputs", outs}};
  const std::filesystem::path tmp = file.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    os << entry.dump() << '\n';
  }
  std::filesystem::rename(tmp, file);
  return outs;
}

std::shared_ptr<Backend> make_backend(const BackendSpec& spec, corpus::Task task, const PromptTemplate& tmpl) {
  std::shared_ptr<Backend> backend;
  if (spec.kind == BackendKind::kHttp) {
    backend = std::make_shared<HttpBackend>(spec);
  } else {
    MockRuleSet rules;
    rules.task = spec.rule_set.empty() ? task : corpus::parse_task(spec.rule_set);
    rules.sentences_to_select = spec.sentences_to_select;
    rules.noise_seed = spec.seed;
    rules.noise_rate = spec.noise_rate;
    backend = std::make_shared<MockBackend>(rules, tmpl);
  }
  if (!spec.cache_path.empty()) backend = std::make_shared<CachedBackend>(backend, spec.cache_path);
  return backend;
}

}  // namespace dsp::llm
