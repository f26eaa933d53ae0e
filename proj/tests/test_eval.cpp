#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "dsp/errors.hpp"
#include "dsp/eval.hpp"
#include "dsp/llm.hpp"
#include "dsp/rng.hpp"
#include "dsp/selfcheck.hpp"

using namespace dsp;
using namespace dsp::eval;
using Strings = std::vector<std::string>;

namespace {

DialogueRecord dialogue(std::string id, Strings responses) {
  DialogueRecord d;
  d.id = std::move(id);
  d.oracle_responses = responses;
  d.responses = std::move(responses);
  d.goal.domains["restaurant"] = DomainGoal{{"phone"}, true};
  return d;
}

std::string random_text(Rng& rng, std::size_t max_len) {
  static const Strings words = {"a", "b", "c", "d", "e", "f"};
  std::string out;
  const std::size_t n = rng.below(max_len + 1);
  for (std::size_t i = 0; i < n; ++i) out += (i ? " " : "") + words[rng.below(words.size())];
  return out;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("ROUGE-N fixtures") {
    const auto id = rouge_n("the cat sat", "the cat sat", 1);
    CHECK(id.f1 == doctest::Approx(1.0));
    const auto r1 = rouge_n("the cat sat", "the cat", 1);
    CHECK(r1.precision == doctest::Approx(2.0 / 3));
    CHECK(r1.recall == doctest::Approx(1.0));
    CHECK(r1.f1 == doctest::Approx(0.8));
    const auto r2 = rouge_n("the cat sat", "the cat", 2);
    CHECK(r2.precision == doctest::Approx(0.5));
    CHECK(r2.f1 == doctest::Approx(2.0 / 3));
    const auto empty = rouge_n("", "x", 1);
    CHECK(empty.precision == 0.0);
    CHECK(empty.recall == 0.0);
    CHECK(empty.f1 == 0.0);
    // Clipping: repeated candidate tokens count at most as often as in the reference.
    CHECK(rouge_n("the the the", "the cat", 1).precision == doctest::Approx(1.0 / 3));
    CHECK_THROWS_AS(rouge_n("a", "a", 3), ConfigError);
  }

  TEST_CASE("ROUGE-L fixtures") {
    const auto l = rouge_l("a b c d", "a c d");
    CHECK(l.precision == doctest::Approx(0.75));
    CHECK(l.recall == doctest::Approx(1.0));
    CHECK(l.f1 == doctest::Approx(2 * 0.75 / 1.75));
    CHECK(rouge_l("x y", "x y").f1 == doctest::Approx(1.0));
    CHECK(rouge_l("x y", "p q").f1 == 0.0);
  }

  TEST_CASE("ROUGE-Avg") {
    CHECK(rouge_avg("same words here", "same words here") == doctest::Approx(1.0));
    CHECK(rouge_avg("x y", "p q") == 0.0);
    CHECK(rouge_avg("the cat sat", "the cat") == doctest::Approx((0.8 + 2.0 / 3 + 0.8) / 3));
  }

  TEST_CASE("ROUGE swaps precision and recall under argument swap") {
    Rng rng(4);
    for (int i = 0; i < 300; ++i) {
      const auto a = random_text(rng, 8), b = random_text(rng, 8);
      for (std::size_t n : {1, 2}) {
        CHECK(rouge_n(a, b, n).precision == doctest::Approx(rouge_n(b, a, n).recall));
      }
      CHECK(rouge_l(a, b).precision == doctest::Approx(rouge_l(b, a).recall));
    }
  }

  TEST_CASE("appending a reference token never lowers ROUGE-1 recall") {
    Rng rng(8);
    for (int i = 0; i < 300; ++i) {
      const auto cand = random_text(rng, 6), ref = random_text(rng, 6);
      if (ref.empty()) continue;
      const auto toks = textkit::tokenize_words(ref);
      const auto longer = cand + " " + toks[rng.below(toks.size())];
      CHECK(rouge_n(longer, ref, 1).recall >= rouge_n(cand, ref, 1).recall);
    }
  }

  TEST_CASE("corpus BLEU") {
    const Strings same = {"a b c d e", "f g h i j k"};
    CHECK(bleu_corpus(same, same) == doctest::Approx(1.0));
    CHECK(bleu_corpus(Strings{"a b c d e"}, Strings{"a b c d f"}) ==
          doctest::Approx(std::pow(0.8 * 0.75 * (2.0 / 3) * 0.5, 0.25)));
    CHECK(bleu_corpus(Strings{"a b c d e f g h"}, Strings{"a b c d e f g h i j k l m n o p"}) ==
          doctest::Approx(std::exp(-1.0)));
    CHECK(bleu_corpus(Strings{"a b c"}, Strings{"a b d"}) == 0.0);
    CHECK_THROWS_AS(bleu_corpus(Strings{"a"}, Strings{}), ValidationError);
  }

  TEST_CASE("smoothed sentence BLEU") {
    CHECK(sentence_bleu_smoothed("the cat is here", "the cat is here") == doctest::Approx(1.0));
    // Precisions 5/6, 3/5, 1/4 and a zero 4-gram order replaced by 1/(2*3).
    const double hand = std::pow((5.0 / 6) * (3.0 / 5) * (1.0 / 4) * (1.0 / 6), 0.25);
    CHECK(sentence_bleu_smoothed("the cat sat on the mat", "the cat is on the mat") ==
          doctest::Approx(hand).epsilon(1e-6));
    CHECK(sentence_bleu_smoothed("a x y z w", "a b c d e") > 0.0);
  }

  TEST_CASE("simplified METEOR") {
    CHECK(meteor_simplified("a b c d", "a b c d") == doctest::Approx(1.0 - 0.5 / 64));
    CHECK(meteor_simplified("a b", "c d") == 0.0);
    // the/sat/on exact, dogs~dog by stem: 4 aligned tokens in one chunk.
    const double f = 10 * 0.8 * 0.8 / (0.8 + 9 * 0.8);
    CHECK(meteor_simplified("the dogs sat on grass", "the dog sat on rugs") ==
          doctest::Approx(f * (1 - 0.5 * std::pow(0.25, 3))).epsilon(1e-6));
    // Two chunks: "a b" and "d".
    const double f2 = 10.0 * 0.75 * 0.75 / (0.75 + 9 * 0.75);
    CHECK(meteor_simplified("a b x d", "a b d y") == doctest::Approx(f2 * (1 - 0.5 * std::pow(2.0 / 3, 3))));
  }

  TEST_CASE("metric fuzz oracles") {
    const auto r = selfcheck::check_metric_oracles(300);
    INFO(r.detail);
    CHECK(r.passed);
  }

  TEST_CASE("MultiWOZ-style evaluation") {
    CHECK(combined_score(90, 80, 10) == doctest::Approx(95.0));
    const std::vector<DialogueRecord> two = {
        dialogue("d1", {"[value_name] is nice.", "The phone is [value_phone]."}),
        dialogue("d2", {"[value_name] is nice.", "Anything else?"}),
    };
    const auto rep = multiwoz_eval(two);
    CHECK(rep.at("inform") == doctest::Approx(100.0));
    CHECK(rep.at("success") == doctest::Approx(50.0));
    CHECK(rep.at("bleu") == doctest::Approx(100.0));
    CHECK(rep.at("combined") == doctest::Approx(175.0));
    CHECK(rep.sample_count == 2);

    DialogueRecord vacuous;
    vacuous.id = "v";
    vacuous.responses = {"hello"};
    vacuous.oracle_responses = {"hello"};
    const auto v = multiwoz_eval(std::vector<DialogueRecord>{vacuous});
    CHECK(v.at("inform") == 100.0);
    CHECK(v.at("success") == 100.0);

    DialogueRecord no_offer = dialogue("d3", {"The phone is [value_phone]."});
    const auto n = multiwoz_eval(std::vector<DialogueRecord>{no_offer});
    CHECK(n.at("inform") == 0.0);
    CHECK(n.at("success") == 0.0);
  }

  TEST_CASE("dialogue grouping and goals") {
    std::vector<corpus::Instance> turns(3);
    turns[0].id = "x-t0";
    turns[0].annotations = {{"dialogue_id", "x"}, {"goal", {{"hotel", {{"requestables", {"area"}}}}}}};
    turns[0].reference_output = "r0";
    turns[1].id = "y-t0";
    turns[1].annotations = {{"dialogue_id", "y"}};
    turns[1].reference_output = "r1";
    turns[2].id = "x-t1";
    turns[2].annotations = turns[0].annotations;
    turns[2].reference_output = "r2";
    const Strings outs = {"o0", "o1", "o2"};
    const auto groups = group_dialogues(turns, outs);
    REQUIRE(groups.size() == 2);
    CHECK(groups[0].id == "x");
    CHECK(groups[0].responses == Strings{"o0", "o2"});
    CHECK(groups[0].oracle_responses == Strings{"r0", "r2"});
    CHECK(groups[0].goal.domains.at("hotel").requestables == Strings{"area"});
    CHECK(groups[0].goal.domains.at("hotel").requires_offer);
    CHECK(groups[1].goal.domains.empty());
  }

  TEST_CASE("answer extraction") {
    CHECK(extract_answer("so the answer is 42.") == "42");
    CHECK(extract_answer("3 + 4 = 7. The answer is 1,234.0") == "1234");
    CHECK(extract_answer("I cannot solve this.") == "");
    const Strings opts = {"1", "2", "3", "4", "5"};
    CHECK(extract_answer("The answer is (C).", opts) == "C");
    CHECK(extract_answer("A or B? I pick B", opts) == "B");
    CHECK(extract_answer("No letter here", opts) == "");
    CHECK(normalize_answer(" 12.0 ") == "12");
  }

  TEST_CASE("reward functions") {
    corpus::Instance sum;
    sum.task = corpus::Task::kSummarization;
    sum.reference_output = "The mill stood by the river.";
    const auto rouge = reward_fn(corpus::Task::kSummarization, "rouge_avg_x10");
    CHECK(rouge("", sum.reference_output, sum) == doctest::Approx(10.0));

    corpus::Instance q;
    q.task = corpus::Task::kReasoning;
    q.input_text = "Ana has 3 apples and finds 4 more. How many?";
    q.annotations = {{"gold_answer", "7"}};
    const auto acc = reward_fn(corpus::Task::kReasoning, "accuracy01");
    llm::MockRuleSet rules;
    rules.task = corpus::Task::kReasoning;
    CHECK(acc("", llm::mock_generate_one(rules, q.input_text, std::string("Let's think step by step.")), q) == 1.0);
    CHECK(acc("", llm::mock_generate_one(rules, q.input_text, std::nullopt), q) == 0.0);

    corpus::Instance d;
    d.task = corpus::Task::kDialogue;
    d.reference_output = "a b c d e f g h i j";
    const auto bleu = reward_fn(corpus::Task::kDialogue, "sacrebleu_sentence");
    const double disjoint = bleu("", "k l m n o p q r s t", d);
    CHECK(disjoint > 0.0);
    CHECK(disjoint < 0.05);
    CHECK(disjoint == doctest::Approx(std::pow(1.0 / (20 * 36 * 64 * 112), 0.25)));

    CHECK_THROWS_AS(reward_fn(corpus::Task::kSummarization, "bertscore"), ConfigError);
  }

  TEST_CASE("task evaluation and report formats") {
    std::vector<corpus::Instance> qs(2);
    qs[0].annotations = {{"gold_answer", "5"}};
    qs[1].annotations = {{"gold_answer", "6"}};
    for (auto& x : qs) x.task = corpus::Task::kReasoning;
    const auto rep = evaluate_outputs(corpus::Task::kReasoning, qs, Strings{"The answer is 5.", "It is 7."});
    CHECK(rep.at("accuracy") == doctest::Approx(50.0));
    CHECK(rep.sample_count == 2);

    MetricReport a, b;
    a.scores = {{"accuracy", 25.0}};
    b.scores = {{"accuracy", 75.0}};
    a.sample_count = b.sample_count = 4;
    CHECK(metric_csv(a).rfind("metric,value\naccuracy,", 0) == 0);
    CHECK(metric_csv(a).find("sample_count,4\n") != std::string::npos);
    const Strings metrics = {"accuracy"};
    const auto csv = comparison_csv({{"standard", a}, {"dsp", b}}, metrics);
    CHECK(csv.rfind("metric,standard,dsp,delta\naccuracy,", 0) == 0);
    CHECK(csv.find("accuracy,25.000000,75.000000,50.000000\n") != std::string::npos);
    const auto md = comparison_markdown({{"standard", a}, {"dsp", b}}, metrics);
    CHECK(md.find("| Arm | Accuracy |") == 0);
    CHECK(md.find("| dsp |") != std::string::npos);
  }
}
