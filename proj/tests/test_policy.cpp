#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <vector>

#include "dsp/autodiff.hpp"
#include "dsp/decoding.hpp"
#include "dsp/errors.hpp"
#include "dsp/policy.hpp"
#include "dsp/selfcheck.hpp"
#include "dsp/train.hpp"

using namespace dsp;
using namespace dsp::policy;
using Ids = std::vector<TokenId>;

namespace {

Vocab toy_vocab(std::size_t size) {
  std::vector<std::string> toks = {"<pad>", "<s>", "</s>", "<unk>", ";"};
  for (std::size_t i = toks.size(); i < size; ++i) toks.push_back("w" + std::to_string(i));
  return Vocab::from_tokens(toks);
}

double total(const decoding::Distribution& p) { return std::accumulate(p.begin(), p.end(), 0.0); }

// Width-2, three-token network whose forward pass reduces to a few scalar
// formulas: constant gates (z = r = 1/2), identity candidate weights, zero
// attention scores (uniform weights) and comb = tanh(s + ctx).
PolicyParams hand_model() {
  auto p = PolicyParams::allocate({3, 2, 2});
  p.at(p.idx.embedding) << 0.3, -0.2, 1.0, 0.0, 0.0, 1.0;
  p.at(p.idx.enc_Wn) = Matrix::Identity(2, 2);
  p.at(p.idx.dec_Wn) = Matrix::Identity(2, 2);
  p.at(p.idx.comb_W) << 1, 0, 1, 0, 0, 1, 0, 1;
  p.at(p.idx.out_W) << 1.0, -1.0, 0.5, 2.0, -1.5, 0.25;
  p.at(p.idx.out_b) << 0.1, -0.2, 0.0;
  return p;
}

std::vector<double> softmax3(double a, double b, double c) {
  const double m = std::max({a, b, c});
  const double ea = std::exp(a - m), eb = std::exp(b - m), ec = std::exp(c - m);
  const double s = ea + eb + ec;
  return {ea / s, eb / s, ec / s};
}

std::vector<double> hand_logits(double c0, double c1) {
  return softmax3(1.0 * c0 - 1.0 * c1 + 0.1, 0.5 * c0 + 2.0 * c1 - 0.2, -1.5 * c0 + 0.25 * c1);
}

// Table-driven StepModel: the state is the prefix, distributions are looked
// up by prefix and default to "EOS with certainty".
struct TableModel {
  using State = Ids;
  std::size_t V;
  std::map<Ids, decoding::Distribution> table;

  std::size_t vocab_size() const { return V; }
  State initial_state() const { return {}; }
  decoding::Distribution next_distribution(const State& s) const {
    if (auto it = table.find(s); it != table.end()) return it->second;
    decoding::Distribution p(V, 0.0);
    p[special::kEos] = 1.0;
    return p;
  }
  State advance(const State& s, TokenId t) const {
    auto n = s;
    n.push_back(t);
    return n;
  }
  double value(const State&) const { return 0.0; }
};

// Greedy picks token 3 (0.6) and then faces ten tokens at 0.1; token 4
// (0.4) is followed by EOS at 0.9.
TableModel greedy_trap() {
  TableModel m{12, {}};
  decoding::Distribution first(12, 0.0);
  first[3] = 0.6;
  first[4] = 0.4;
  m.table[{}] = first;
  m.table[{3}] = decoding::Distribution(12, 0.0);
  for (std::size_t v = 0; v < 10; ++v) m.table[{3}][v] = 0.1;
  decoding::Distribution after_b(12, 0.1 / 11);
  after_b[special::kEos] = 0.9;
  m.table[{4}] = after_b;
  return m;
}

}  // namespace

TEST_SUITE("policy") {
  TEST_CASE("init_params") {
    const auto a = init_params(20, 8, 8, 5), b = init_params(20, 8, 8, 5), c = init_params(20, 8, 8, 6);
    bool same = true, differs = false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
      same = same && a.at(i) == b.at(i);
      differs = differs || a.at(i) != c.at(i);
    }
    CHECK(same);
    CHECK(differs);
    const Ids input = {5, 6, 7};
    CHECK(state_value(a, input, Ids{}) == 0.0);
    CHECK(state_value(a, input, Ids{8, 9}) == 0.0);
    CHECK_THROWS_AS(init_params(20, 4, 8, 0), ConfigError);
    CHECK_THROWS_AS(init_params(20, 8, 7, 0), ConfigError);
    CHECK_THROWS_AS(init_params(3, 8, 8, 0), ConfigError);

    // Non-embedding weights respect the 1/sqrt(h) bound.
    const double bound = 1.0 / std::sqrt(8.0);
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
      if (i == a.idx.embedding) continue;
      CHECK(a.at(i).cwiseAbs().maxCoeff() <= bound);
    }
  }

  TEST_CASE("next_token_distribution is a deterministic probability vector") {
    const auto p = init_params(30, 8, 16, 1);
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
      Ids input(1 + rng.below(6)), prefix(rng.below(4));
      for (auto& t : input) t = static_cast<TokenId>(rng.below(30));
      for (auto& t : prefix) t = static_cast<TokenId>(rng.below(30));
      const auto d = next_token_distribution(p, input, prefix);
      REQUIRE(d.size() == 30);
      CHECK(total(d) == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(*std::min_element(d.begin(), d.end()) >= 0.0);
      CHECK(d == next_token_distribution(p, input, prefix));
      CHECK(std::isfinite(state_value(p, input, prefix)));
    }
    CHECK_THROWS_AS(next_token_distribution(p, Ids{30}, Ids{}), ValidationError);
    CHECK_THROWS_AS(next_token_distribution(p, Ids{5}, Ids{-1}), ValidationError);
  }

  TEST_CASE("hand-computed forward pass on a width-2 network") {
    const auto p = hand_model();
    const double t1 = std::tanh(1.0);
    // Encoder reads only EOS: h = n/2 = (0, t1/2). Decoder consumes BOS.
    const double ctx0 = 0.0, ctx1 = t1 / 2;
    const double s0 = t1 / 2, s1 = t1 / 4;
    const auto step1 = hand_logits(std::tanh(s0 + ctx0), std::tanh(s1 + ctx1));
    const auto d1 = next_token_distribution(p, Ids{}, Ids{});
    for (int v = 0; v < 3; ++v) CHECK(d1[v] == doctest::Approx(step1[v]).epsilon(1e-12));

    // Feeding token 0 (embedding (0.3, -0.2)).
    const double u0 = 0.5 * std::tanh(0.3) + 0.5 * s0, u1 = 0.5 * std::tanh(-0.2) + 0.5 * s1;
    const auto step2 = hand_logits(std::tanh(u0 + ctx0), std::tanh(u1 + ctx1));
    const auto d2 = next_token_distribution(p, Ids{}, Ids{0});
    for (int v = 0; v < 3; ++v) CHECK(d2[v] == doctest::Approx(step2[v]).epsilon(1e-12));

    const auto lp = sequence_logprob(p, Ids{}, Ids{0, 2});
    REQUIRE(lp.per_token.size() == 2);
    CHECK(lp.per_token[0] == doctest::Approx(std::log(step1[0])).epsilon(1e-12));
    CHECK(lp.per_token[1] == doctest::Approx(std::log(step2[2])).epsilon(1e-12));
    CHECK(lp.total == doctest::Approx(std::log(step1[0]) + std::log(step2[2])).epsilon(1e-12));

    // Value head w = (1, 1), b = 0.5 reads the decoder state.
    auto pv = p;
    pv.at(pv.idx.value_w) << 1.0, 1.0;
    pv.at(pv.idx.value_b) << 0.5;
    CHECK(state_value(pv, Ids{}, Ids{}) == doctest::Approx(s0 + s1 + 0.5).epsilon(1e-12));
  }

  TEST_CASE("uniform logits give log(1/V) per token") {
    auto p = PolicyParams::allocate({8, 8, 8});
    const auto lp = sequence_logprob(p, Ids{5, 6}, Ids{5, 7, 2});
    CHECK(lp.total == doctest::Approx(3.0 * std::log(1.0 / 8.0)).epsilon(1e-12));
  }

  TEST_CASE("sampled logprobs agree with sequence_logprob when nothing is truncated") {
    const auto vocab = toy_vocab(12);
    const auto p = init_params(vocab, 8, 8, 3);
    decoding::DecodeParams dp;
    dp.temperature = 1.0;
    dp.top_p = 1.0;
    dp.max_new_tokens = 10;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Ids input = {5, 6, 7};
      const auto s = sample_stimulus(p, vocab, input, dp, seed);
      REQUIRE(s.ids.size() == s.logprobs.size());
      REQUIRE(s.ids.size() == s.values.size());
      CHECK(s.text == vocab.decode_text(s.ids));
      const auto lp = sequence_logprob(p, input, s.ids);
      for (std::size_t t = 0; t < s.ids.size(); ++t) CHECK(lp.per_token[t] == doctest::Approx(s.logprobs[t]).epsilon(1e-9));
      const auto again = sample_stimulus(p, vocab, input, dp, seed);
      CHECK(again.ids == s.ids);
      CHECK(again.logprobs == s.logprobs);
    }
  }

  TEST_CASE("sampling modes") {
    const auto vocab = toy_vocab(12);
    const auto p = init_params(vocab, 8, 8, 4);
    const Ids input = {6, 7};
    decoding::DecodeParams greedy;
    greedy.mode = decoding::Mode::kGreedy;
    greedy.max_new_tokens = 6;
    decoding::DecodeParams top1 = greedy;
    top1.mode = decoding::Mode::kSample;
    top1.top_k = 1;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      CHECK(sample_stimulus(p, vocab, input, top1, seed).ids == sample_stimulus(p, vocab, input, greedy, 0).ids);
    }
    decoding::DecodeParams longer = top1;
    longer.top_k.reset();
    longer.temperature = 1.0;
    longer.min_len = 4;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto s = sample_stimulus(p, vocab, input, longer, seed);
      for (std::size_t t = 0; t < std::min<std::size_t>(4, s.ids.size()); ++t) CHECK(s.ids[t] != special::kEos);
    }
  }

  TEST_CASE("beam decoding") {
    const auto vocab = toy_vocab(10);
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      const auto p = selfcheck::toy_policy(10, seed, 1.5);
      const Ids input = {5, 8};
      decoding::DecodeParams greedy;
      greedy.mode = decoding::Mode::kGreedy;
      greedy.max_new_tokens = 5;
      const auto b1 = beam_decode(p, vocab, input, 1, 5);
      CHECK(b1.ids == sample_stimulus(p, vocab, input, greedy, 0).ids);
      CHECK(beam_decode(p, vocab, input, 3, 5).ids == beam_decode(p, vocab, input, 3, 5).ids);
    }
  }

  TEST_CASE("checkpoint round trip") {
    const auto vocab = toy_vocab(16);
    const auto p = init_params(vocab, 8, 8, 21);
    const auto path = std::filesystem::temp_directory_path() / "dsp_ckpt.bin";
    CheckpointMeta meta;
    meta.step = 7;
    meta.stage = "sft";
    meta.config_hash = "abc";
    meta.metrics = {{"loss", 0.5}};
    save_checkpoint(path, p, vocab, meta);
    const auto loaded = load_checkpoint(path, vocab);
    CHECK(loaded.meta.step == 7);
    CHECK(loaded.meta.stage == "sft");
    CHECK(loaded.meta.metrics == meta.metrics);
    REQUIRE(loaded.params.tensors.size() == p.tensors.size());
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
      // float32 on disk.
      CHECK((loaded.params.at(i) - p.at(i)).cwiseAbs().maxCoeff() < 1e-6);
    }
    CHECK_THROWS_AS(load_checkpoint(path, toy_vocab(17)), ValidationError);

    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size / 2);
    CHECK_THROWS_AS(load_checkpoint(path, vocab), ValidationError);
    std::ofstream(path, std::ios::binary) << "garbage";
    CHECK_THROWS_AS(load_checkpoint(path, vocab), ValidationError);
  }
}

TEST_SUITE("autodiff") {
  TEST_CASE("half square") {
    ad::ParameterSet ps;
    ps.add("w", Matrix::Constant(1, 1, 3.0));
    ad::Tape tape(&ps);
    const auto w = tape.param(0);
    const auto loss = tape.scale(tape.mul(w, w), 0.5);
    CHECK(tape.scalar_value(loss) == 4.5);
    auto g = ps.zeros_like();
    tape.backward(loss, g);
    CHECK(g.value(0)(0, 0) == doctest::Approx(3.0));
  }

  TEST_CASE("softmax cross-entropy with uniform logits") {
    ad::ParameterSet ps;
    ps.add("logits", Matrix::Zero(4, 1));
    ad::Tape tape(&ps);
    const auto nll = tape.scale(tape.log_softmax_pick(tape.param(0), 0), -1.0);
    CHECK(tape.scalar_value(nll) == doctest::Approx(std::log(4.0)));
    auto g = ps.zeros_like();
    tape.backward(nll, g);
    CHECK(g.value(0)(0, 0) == doctest::Approx(0.25 - 1.0));
    for (int i = 1; i < 4; ++i) CHECK(g.value(0)(i, 0) == doctest::Approx(0.25));
  }

  TEST_CASE("shape mismatches are rejected at construction") {
    ad::Tape tape;
    const auto a = tape.constant(Matrix::Zero(2, 3));
    const auto b = tape.constant(Matrix::Zero(2, 3));
    CHECK_THROWS_AS(tape.matmul(a, b), std::invalid_argument);
    CHECK_THROWS_AS(tape.add(a, tape.constant(Matrix::Zero(3, 2))), std::invalid_argument);
  }

  TEST_CASE("policy loss gradients match finite differences on every block") {
    auto toy = selfcheck::toy_policy(6, 11);
    const std::vector<train::SftExample> batch = {{"a", {5, 3}, {4, 5, 2}}, {"b", {3}, {5, 2}}};
    const auto loss = [&](ad::ParameterSet* g) { return train::sft_loss(toy, batch, g); };
    auto analytic = toy.tensors.zeros_like();
    loss(&analytic);
    for (std::size_t i = 0; i < toy.tensors.size(); ++i) {
      // One block at a time: perturb only tensor i.
      ad::Matrix& w = toy.tensors.value(i);
      double worst = 0.0;
      for (Eigen::Index k = 0; k < w.size(); ++k) {
        const double orig = w.data()[k];
        w.data()[k] = orig + 1e-5;
        const double up = loss(nullptr);
        w.data()[k] = orig - 1e-5;
        const double down = loss(nullptr);
        w.data()[k] = orig;
        const double n = (up - down) / 2e-5, a = analytic.value(i).data()[k];
        worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}));
      }
      INFO(toy.tensors.name(i));
      CHECK(worst < 1e-4);
    }
  }

  TEST_CASE("SFT and PPO gradient oracle") {
    const auto r = selfcheck::check_gradients();
    INFO(r.detail);
    CHECK(r.passed);
  }
}

TEST_SUITE("decoding") {
  TEST_CASE("nucleus and top-k supports") {
    const decoding::Distribution p = {0.5, 0.3, 0.15, 0.05};
    CHECK(decoding::nucleus_support(p, 0.9) == Ids{0, 1, 2});
    CHECK(decoding::nucleus_support(p, 1.0) == Ids{0, 1, 2, 3});
    CHECK(decoding::nucleus_support(p, 0.5) == Ids{0});
    CHECK(decoding::top_k_support(p, 2) == Ids{0, 1});
    CHECK(decoding::top_k_support(decoding::Distribution{0.25, 0.25, 0.25, 0.25}, 2) == Ids{0, 1});

    decoding::DecodeParams dp;
    dp.temperature = 1.0;
    dp.top_p = 0.9;
    const auto q = decoding::sampling_distribution(p, dp);
    CHECK(q[0] == doctest::Approx(0.5 / 0.95));
    CHECK(q[1] == doctest::Approx(0.3 / 0.95));
    CHECK(q[2] == doctest::Approx(0.15 / 0.95));
    CHECK(q[3] == 0.0);

    dp.top_p = 1.0;
    const auto same = decoding::sampling_distribution(p, dp);
    for (int i = 0; i < 4; ++i) CHECK(same[i] == doctest::Approx(p[i]).epsilon(1e-12));
  }

  TEST_CASE("temperature sharpens and flattens") {
    const decoding::Distribution p = {0.5, 0.3, 0.2};
    auto cold = p, hot = p;
    decoding::apply_temperature(cold, 0.5);
    decoding::apply_temperature(hot, 2.0);
    CHECK(cold[0] == doctest::Approx(0.25 / (0.25 + 0.09 + 0.04)));
    CHECK(hot[0] < p[0]);
    CHECK(total(hot) == doctest::Approx(1.0));
  }

  TEST_CASE("min_len blocks EOS") {
    decoding::Distribution p = {0.0, 0.0, 0.5, 0.5};
    decoding::block_eos(p);
    CHECK(p == decoding::Distribution{0.0, 0.0, 0.0, 1.0});
    decoding::Distribution eos_only = {0.0, 0.0, 1.0};
    CHECK_THROWS_AS(decoding::block_eos(eos_only), std::logic_error);
  }

  TEST_CASE("decode parameters validation") {
    decoding::DecodeParams dp;
    dp.temperature = 0.0;
    CHECK_THROWS_AS(dp.validate(), ConfigError);
    dp = {};
    dp.top_p = 0.0;
    CHECK_THROWS_AS(dp.validate(), ConfigError);
    dp = {};
    dp.min_len = 10;
    dp.max_new_tokens = 5;
    CHECK_THROWS_AS(dp.validate(), ConfigError);
  }

  TEST_CASE("beam search escapes the greedy trap") {
    const auto m = greedy_trap();
    const auto g = decoding::greedy(m, 2);
    CHECK(g.ids.front() == 3);
    const auto b = decoding::beam_search(m, 2, 2);
    CHECK(b.ids == Ids{4, special::kEos});
    CHECK(b.finished);
    CHECK(decoding::length_normalized_score(b) == doctest::Approx(std::log(0.36) / 2));
    CHECK(decoding::beam_search(m, 1, 2).ids == g.ids);
  }

  TEST_CASE("wider beams never lower the returned score on fixed toy models") {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      const auto p = selfcheck::toy_policy(8, 100 + seed, 1.5);
      const PolicyModel model(p, Ids{5, 6, 7});
      double prev = -INFINITY;
      for (std::size_t beam = 1; beam <= 4; ++beam) {
        const double s = decoding::length_normalized_score(decoding::beam_search(model, beam, 6));
        CHECK(s >= prev - 1e-12);
        prev = s;
      }
    }
  }

  TEST_CASE("sample logprobs are under the truncated distribution") {
    const auto p = selfcheck::toy_policy(10, 42, 1.5);
    const PolicyModel model(p, Ids{5, 6});
    decoding::DecodeParams dp;
    dp.temperature = 0.7;
    dp.top_k = 4;
    dp.top_p = 0.8;
    dp.max_new_tokens = 6;
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      const auto s = decoding::sample(model, dp, rng);
      auto state = model.initial_state();
      for (std::size_t t = 0; t < s.ids.size(); ++t) {
        const auto q = decoding::sampling_distribution(model.next_distribution(state), dp);
        CHECK(std::exp(s.logprobs[t]) == doctest::Approx(q[static_cast<std::size_t>(s.ids[t])]).epsilon(1e-9));
        state = model.advance(state, s.ids[t]);
      }
    }
  }
}
