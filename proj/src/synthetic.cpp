#include "dsp/synthetic.hpp"

#include <algorithm>
#include <functional>

#include <fmt/format.h>

#include "dsp/rng.hpp"

namespace dsp::synthetic {

const std::vector<std::string>& keywords() {
  static const std::vector<std::string> kWords = {"amber",  "basil",  "cedar",  "dahlia",  "ember", "fjord",
                                                  "garnet", "harbor", "indigo", "juniper", "kelp",  "lotus"};
  return kWords;
}

bool is_salient(const std::string& keyword) {
  const auto& k = keywords();
  const auto it = std::find(k.begin(), k.begin() + 6, keyword);
  return it != k.begin() + 6;
}

namespace {

template <class T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.below(v.size())];
}

}  // namespace

corpus::Dataset summarization_corpus(std::size_t articles, std::uint64_t seed) {
  static const std::vector<std::string> verbs = {"watched", "painted", "carried", "found", "repaired", "visited"};
  static const std::vector<std::string> nouns = {"lantern", "bridge", "wagon", "garden", "ladder", "market"};
  static const std::vector<std::string> places = {"near the river", "in the valley", "at dawn",
                                                  "after the storm", "by the mill",  "on the hill"};
  const auto& kw = keywords();
  std::vector<std::string> salient(kw.begin(), kw.begin() + 6), plain(kw.begin() + 6, kw.end());
  Rng rng(seed);
  corpus::Dataset out;
  for (std::size_t a = 0; a < articles; ++a) {
    rng.shuffle(std::span<std::string>(salient));
    rng.shuffle(std::span<std::string>(plain));
    std::vector<std::string> words = {salient[0], salient[1], plain[0], plain[1], plain[2]};
    rng.shuffle(std::span<std::string>(words));
    const std::string& distractor = plain[rng.below(3)];
    std::vector<std::string> sentences;
    for (const auto& w : words) {
      sentences.push_back(fmt::format("The {} {} the {} {}.", w, pick(rng, verbs), pick(rng, nouns), pick(rng, places)));
    }
    corpus::Instance inst;
    inst.id = fmt::format("syn-{:04d}", a);
    inst.task = corpus::Task::kSummarization;
    std::vector<std::string> summary, stimulus;
    for (std::size_t s = 0; s < sentences.size(); ++s) {
      if (!inst.input_text.empty()) inst.input_text += ' ';
      inst.input_text += sentences[s];
      if (is_salient(words[s])) summary.push_back(sentences[s]);
      if (is_salient(words[s]) || words[s] == distractor) stimulus.push_back(words[s]);
    }
    inst.reference_output = summary[0] + " " + summary[1];
    inst.pseudo_stimulus = corpus::render_keyword_stimulus(stimulus);
    out.instances.push_back(std::move(inst));
  }
  return out;
}

std::vector<std::string> enumerate_stimuli(std::size_t max_len) {
  const auto& kw = keywords();
  std::vector<std::string> out = {""};
  std::vector<std::size_t> idx;
  // Depth-first over increasing index tuples.
  const std::function<void(std::size_t)> rec = [&](std::size_t start) {
    if (idx.size() == max_len) return;
    for (std::size_t i = start; i < kw.size(); ++i) {
      idx.push_back(i);
      std::vector<std::string> words;
      for (std::size_t j : idx) words.push_back(kw[j]);
      out.push_back(corpus::render_keyword_stimulus(words));
      rec(i + 1);
      idx.pop_back();
    }
  };
  rec(0);
  return out;
}

corpus::Dataset dialogue_corpus(std::size_t dialogues, std::uint64_t seed) {
  struct DomainText {
    std::string domain, kind, request_slot, detail_slot, ask;
  };
  static const std::vector<DomainText> domains = {
      {"restaurant", "restaurant", "food", "phone", "What type of food do you want?"},
      {"hotel", "hotel", "area", "postcode", "Which area would you like to stay in?"},
      {"attraction", "attraction", "area", "address", "Which part of town do you prefer?"},
      {"train", "train", "leave", "id", "When would you like to leave?"},
  };
  static const std::vector<std::string> towns = {"north", "south", "centre", "east", "west"};
  static const std::vector<std::string> prices = {"cheap", "moderately priced", "expensive"};
  Rng rng(seed);
  corpus::Dataset out;
  auto acts_json = [](const std::vector<corpus::DialogueAct>& acts) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& a : acts) arr.push_back({{"domain", a.domain}, {"act", a.act}, {"slots", a.slots}});
    return arr;
  };
  for (std::size_t d = 0; d < dialogues; ++d) {
    const auto& dom = pick(rng, domains);
    const std::string id = fmt::format("dlg-{:04d}", d);
    const bool book = dom.domain != "attraction" && rng.uniform01() < 0.5;
    nlohmann::json goal_domain = {{"requestables", {dom.detail_slot}}};
    if (book) goal_domain["requestables"].push_back("reference");
    const nlohmann::json goal = {{dom.domain, goal_domain}};

    struct Turn {
      std::string user, system;
      std::vector<corpus::DialogueAct> acts;
    };
    std::vector<Turn> turns;
    turns.push_back({fmt::format("I need a {} {} in the {}.", pick(rng, prices), dom.kind, pick(rng, towns)),
                     "We have [value_choice] " + dom.kind + " options. " + dom.ask,
                     {{dom.domain, "inform", {"choice"}}, {dom.domain, "request", {dom.request_slot}}}});
    const std::string detail = dom.detail_slot == "id" ? "train id" : dom.detail_slot;
    if (dom.domain == "train") {
      turns.push_back({fmt::format("After {}:00 please, and what is the {}?", 8 + rng.below(10), detail),
                       "[value_id] leaves at [value_leave]. Its id is [value_id].",
                       {{dom.domain, "inform", {"leave", "id"}}}});
    } else {
      turns.push_back({fmt::format("Anything is fine. Can I have the {}?", detail),
                       "How about [value_name]? The " + detail + " is [value_" + dom.detail_slot + "].",
                       {{dom.domain, "recommend", {"name", dom.detail_slot}}}});
    }
    if (book) {
      turns.push_back({fmt::format("Please book it for {} people.", 1 + rng.below(6)),
                       "Done, your reference number is [value_reference].",
                       {{dom.domain, "offerbooked", {"reference"}}}});
    }
    std::string context;
    for (std::size_t t = 0; t < turns.size(); ++t) {
      context += (context.empty() ? "" : " ") + std::string("User: ") + turns[t].user;
      corpus::Instance inst;
      inst.id = fmt::format("{}-t{}", id, t);
      inst.task = corpus::Task::kDialogue;
      inst.input_text = context;
      inst.reference_output = turns[t].system;
      inst.annotations = {{"dialogue_id", id}, {"turn", t}, {"dialogue_acts", acts_json(turns[t].acts)}, {"goal", goal}};
      out.instances.push_back(std::move(inst));
      context += " System: " + turns[t].system;
    }
  }
  return out;
}

corpus::Dataset reasoning_corpus(std::size_t questions, std::uint64_t seed) {
  static const std::vector<std::string> names = {"Ana", "Ben", "Chloe", "Dev", "Ema", "Farid"};
  static const std::vector<std::string> items = {"apples", "stamps", "marbles", "books", "shells", "coins"};
  Rng rng(seed);
  corpus::Dataset out;
  for (std::size_t q = 0; q < questions; ++q) {
    const auto& who = pick(rng, names);
    const auto& what = pick(rng, items);
    const long long a = 2 + static_cast<long long>(rng.below(40));
    const long long b = 2 + static_cast<long long>(rng.below(40));
    const long long c = 1 + static_cast<long long>(rng.below(20));
    corpus::Instance inst;
    inst.id = fmt::format("math-{:04d}", q);
    inst.task = corpus::Task::kReasoning;
    inst.input_text = fmt::format("{} has {} {}. A friend gives {} {} more, and later {} finds {} more. How many {} "
                                  "does {} have now?",
                                  who, a, what, who, b, who, c, what, who);
    const long long sum = a + b + c;
    inst.reference_output = fmt::format("{} + {} + {} = {}. The answer is {}.", a, b, c, sum, sum);
    inst.annotations = {{"gold_answer", std::to_string(sum)}};
    out.instances.push_back(std::move(inst));
  }
  return out;
}

}  // namespace dsp::synthetic
