#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dsp/errors.hpp"
#include "dsp/rng.hpp"
#include "dsp/textkit.hpp"

using namespace dsp;
using namespace dsp::textkit;
using Words = std::vector<std::string>;

TEST_SUITE("textkit") {
  TEST_CASE("tokenize_words fixtures") {
    CHECK(tokenize_words("").empty());
    CHECK(tokenize_words("The cat sat.") == Words{"the", "cat", "sat", "."});
    CHECK(tokenize_words("Let's think step by step.") == Words{"let", "'s", "think", "step", "by", "step", "."});
    CHECK(tokenize_words("It cost 108.6 dollars") == Words{"it", "cost", "108.6", "dollars"});
  }

  TEST_CASE("tokenize_words offsets point at the source text") {
    const std::string text = "Hello,  World!";
    const auto toks = tokenize_with_offsets(text);
    REQUIRE(toks.size() == 4);
    CHECK(toks[2].text == "world");
    CHECK(text.substr(toks[2].offset, 5) == "World");
  }

  TEST_CASE("tokenize_words is idempotent on joined and detokenized output") {
    Rng rng(11);
    const std::string alphabet = "ab c.,;'!?()[]0123456789 xyz s t";
    for (int trial = 0; trial < 300; ++trial) {
      std::string text;
      const auto len = rng.below(40);
      for (std::uint64_t i = 0; i < len; ++i) text.push_back(alphabet[rng.below(alphabet.size())]);
      const auto once = tokenize_words(text);
      CHECK(tokenize_words(join_tokens(once)) == once);
      CHECK(tokenize_words(detokenize(once)) == once);
    }
  }

  TEST_CASE("detokenize attaches brackets and closing punctuation") {
    CHECK(detokenize(Words{"[", "train", "]", "[", "inform", "]", "leave"}) == "[train] [inform] leave");
    CHECK(detokenize(Words{"a", ";", "b", "."}) == "a; b.");
  }

  TEST_CASE("stem fixtures and idempotence") {
    CHECK(stem("running") == "runn");
    CHECK(stem("cat") == "cat");
    CHECK(stem("cats") == "cat");
    for (const char* w : {"walked", "singings", "reds", "is", "boxes", "stressed"}) CHECK(stem(stem(w)) == stem(w));
  }

  TEST_CASE("vocabulary construction") {
    SUBCASE("frequency order") {
      const std::vector<Words> corpus = {{"a", "b", "a"}};
      const auto v = build_vocab(corpus, 10);
      CHECK(v.size() == 7);
      CHECK(v.id("a") < v.id("b"));
    }
    SUBCASE("lexicographic tie-break on truncation, OOV maps to UNK") {
      const std::vector<Words> corpus = {{"a"}, {"b"}};
      const auto v = build_vocab(corpus, 6);
      CHECK(v.contains("a"));
      CHECK_FALSE(v.contains("b"));
      CHECK(v.encode(Words{"c"}) == std::vector<TokenId>{special::kUnk});
    }
    SUBCASE("specials are fixed and never collide with corpus tokens") {
      const std::vector<Words> corpus = {{"<s>", ";", "x", "x"}};
      const auto v = build_vocab(corpus, 100);
      for (TokenId i = 0; i < special::kCount; ++i) CHECK(v.token(i) == special::kStrings[i]);
      CHECK(v.size() == special::kCount + 1);
    }
    SUBCASE("ids and tokens are mutual inverses") {
      const std::vector<Words> corpus = {tokenize_words("the quick brown fox jumps over the lazy dog")};
      const auto v = build_vocab(corpus, 100);
      for (TokenId i = 0; i < static_cast<TokenId>(v.size()); ++i) CHECK(v.id(v.token(i)) == i);
    }
    CHECK_THROWS_AS(build_vocab(std::vector<Words>{}, 5), ConfigError);
  }

  TEST_CASE("decode_text drops control tokens and renders SEP") {
    const std::vector<Words> corpus = {{"amber", "basil"}};
    const auto v = build_vocab(corpus, 100);
    const std::vector<TokenId> ids = {special::kBos, v.id("amber"), special::kSep, v.id("basil"), special::kEos};
    CHECK(v.decode_text(ids) == "amber; basil");
  }

  TEST_CASE("vocabulary file round trip keeps ids and hash") {
    const std::vector<Words> corpus = {{"x", "y", "z", "y"}};
    const auto v = build_vocab(corpus, 100);
    const auto path = std::filesystem::temp_directory_path() / "dsp_vocab_test.txt";
    v.save(path);
    const auto w = Vocab::load(path);
    CHECK(w.tokens() == v.tokens());
    CHECK(w.hash() == v.hash());
    std::filesystem::remove(path);
  }

  TEST_CASE("textrank fixtures") {
    const std::unordered_set<std::string> none;
    SUBCASE("two co-occurring words score equally") {
      const auto kw = textrank_keywords("alpha beta", {}, none);
      REQUIRE(kw.size() == 2);
      CHECK(kw[0].score == doctest::Approx(kw[1].score).epsilon(1e-12));
    }
    SUBCASE("star graph hub ranks first and matches the power-iteration oracle") {
      // Window 2 links only neighbours, and every spoke sits between two hubs.
      TextRankParams p;
      p.window = 2;
      p.tol = 1e-12;
      p.max_iters = 1000;
      const auto kw = textrank_keywords("hub s1 hub s2 hub s3 hub s4 hub s5", p, none);
      REQUIRE(!kw.empty());
      CHECK(kw[0].surface == "hub");
      // Oracle: hub degree 5, spokes degree 1. Fixed point of
      // h = 0.15 + 0.85 * 5 s, s = 0.15 + 0.85 * h / 5.
      const double d = 0.85;
      const double h = (1 - d + d * 5 * (1 - d)) / (1 - d * d);
      CHECK(kw[0].score == doctest::Approx(h).epsilon(1e-6));
    }
    SUBCASE("only stopwords") { CHECK(textrank_keywords("the of and a an the").empty()); }
  }

  TEST_CASE("pagerank conserves total mass and converges") {
    const std::vector<std::vector<std::size_t>> adj = {{1, 2}, {0, 2}, {0, 1, 3}, {2}};
    const auto r = pagerank(adj, 0.85, 200, 1e-12);
    double total = 0.0;
    for (double s : r.scores) total += s;
    CHECK(total == doctest::Approx(4.0).epsilon(1e-9));
    CHECK(r.iterations < 200);
    CHECK(r.change_trace.back() < 1e-9);
  }

  TEST_CASE("stopword loading") {
    const auto path = std::filesystem::temp_directory_path() / "dsp_stop.txt";
    {
      std::ofstream out(path);
      out << "  the \n\nof\n";
    }
    const auto sw = load_stopwords(path);
    CHECK(sw.size() == 2);
    CHECK(sw.count("the") == 1);
    CHECK(default_stopwords().count("the") == 1);
    std::filesystem::remove(path);
  }
}
