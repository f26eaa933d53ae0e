#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "dsp/errors.hpp"
#include "dsp/policy.hpp"
#include "dsp/rng.hpp"
#include "dsp/selfcheck.hpp"
#include "dsp/train.hpp"

using namespace dsp;
using namespace dsp::train;
using Ids = std::vector<TokenId>;
using Strings = std::vector<std::string>;

namespace {

textkit::Vocab toy_vocab(std::size_t size) {
  Strings toks = {"<pad>", "<s>", "</s>", "<unk>", ";"};
  for (std::size_t i = toks.size(); i < size; ++i) toks.push_back("w" + std::to_string(i));
  return textkit::Vocab::from_tokens(toks);
}

Trajectory traj_with(std::vector<double> logp_pi, std::vector<double> logp_ref) {
  Trajectory t;
  t.instance_id = "t";
  t.stimulus_ids.assign(logp_pi.size(), 5);
  t.logp_pi = std::move(logp_pi);
  t.logp_ref = std::move(logp_ref);
  t.values.assign(t.logp_pi.size(), 0.0);
  return t;
}

// One-token trajectory with a given old logprob, advantage and return.
Trajectory ppo_token(double old_logp, double advantage, double ret = 0.0) {
  Trajectory t = traj_with({old_logp}, {old_logp});
  t.advantages = {advantage};
  t.returns = {ret};
  return t;
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("AdamW first step and decoupled decay") {
    ad::ParameterSet ps;
    ps.add("w", ad::Matrix::Constant(1, 1, 1.0));
    auto g = ps.zeros_like();
    g.value(0)(0, 0) = 0.5;
    AdamW plain(ps, 0.0);
    auto a = ps;
    plain.step(a, g, 0.1);
    CHECK(a.value(0)(0, 0) == doctest::Approx(0.9).epsilon(1e-6));
    AdamW decayed(ps, 0.01);
    auto b = ps;
    decayed.step(b, g, 0.1);
    CHECK(b.value(0)(0, 0) == doctest::Approx(0.9 - 0.1 * 0.01).epsilon(1e-6));
    CHECK(decayed.steps() == 1);
  }

  TEST_CASE("gradient clipping and learning-rate schedules") {
    ad::ParameterSet g;
    g.add("a", ad::Matrix::Constant(1, 1, 3.0));
    g.add("b", ad::Matrix::Constant(1, 1, 4.0));
    CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(5.0));
    CHECK(g.value(0)(0, 0) == doctest::Approx(0.6));
    CHECK(g.value(1)(0, 0) == doctest::Approx(0.8));
    CHECK(clip_grad_norm(g, 0.0) == doctest::Approx(1.0));
    CHECK(scheduled_lr(1.0, LrSchedule::kConstant, 7, 10) == 1.0);
    CHECK(scheduled_lr(1.0, LrSchedule::kLinear, 0, 10) == 1.0);
    CHECK(scheduled_lr(1.0, LrSchedule::kLinear, 5, 10) == doctest::Approx(0.5));
    CHECK(parse_lr_schedule("linear") == LrSchedule::kLinear);
    CHECK_THROWS_AS(parse_lr_schedule("cosine"), ConfigError);
  }

  TEST_CASE("SFT loss on a uniform-logit model is log|V| per token") {
    const auto p = policy::PolicyParams::allocate({16, 8, 8});
    const std::vector<SftExample> batch = {{"a", {5, 6}, {7, 8, 2}}, {"b", {9}, {2}}};
    CHECK(sft_loss(p, batch, nullptr) == doctest::Approx(std::log(16.0)));
  }

  TEST_CASE("SFT memorizes a single pair") {
    const auto vocab = toy_vocab(12);
    const auto start = policy::init_params(vocab, 8, 16, 1);
    const std::vector<SftExample> one = {{"x", {5, 6, 7}, {8, 4, 9, 2}}};
    SFTConfig cfg;
    cfg.epochs = 150;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 1;
    cfg.lr_schedule = LrSchedule::kConstant;
    std::size_t callbacks = 0;
    const auto res = sft_train(start, one, cfg, 3, [&](std::size_t, double) { ++callbacks; });
    CHECK(callbacks == 150);
    CHECK(res.epoch_loss.size() == 150);
    CHECK(res.epoch_loss.back() < res.epoch_loss.front());
    CHECK(res.params.all_finite());
    const policy::PolicyModel model(res.params, one[0].input);
    CHECK(decoding::greedy(model, 8).ids == one[0].target);
  }

  TEST_CASE("SFT aborts on a non-finite loss") {
    const auto vocab = toy_vocab(12);
    auto start = policy::init_params(vocab, 8, 8, 1);
    start.at(start.idx.out_b)(0, 0) = NAN;
    const std::vector<SftExample> one = {{"bad-batch", {5}, {6, 2}}};
    SFTConfig cfg;
    cfg.epochs = 1;
    try {
      sft_train(start, one, cfg, 0);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("bad-batch") != std::string::npos);
    }
  }

  TEST_CASE("make_sft_examples") {
    const auto vocab = textkit::Vocab::from_tokens({"<pad>", "<s>", "</s>", "<unk>", ";", "extract", "the", "keywords",
                                                    ":", "river", "mill", "."});
    corpus::Dataset d;
    corpus::Instance x;
    x.id = "a";
    x.input_text = "river mill";
    x.pseudo_stimulus = "river; mill.";
    d.instances.push_back(x);
    const auto ex = make_sft_examples(d, vocab);
    REQUIRE(ex.size() == 1);
    CHECK(ex[0].target == Ids{9, 4, 10, 11, 2});
    CHECK(make_sft_examples(d, vocab, 2)[0].input.size() == 2);
    d.instances[0].pseudo_stimulus = "";
    CHECK_THROWS_AS(make_sft_examples(d, vocab), ValidationError);
  }

  TEST_CASE("step-wise keyword rewards") {
    const Strings toks = {"a", ";", "b", ";", "c", ".", "</s>"};
    const auto r = stepwise_keyword_rewards(toks, "A x c");
    REQUIRE(r.size() == 3);
    CHECK(r[0].reward == 1.0);
    CHECK(r[1].reward == -0.2);
    CHECK(r[2].reward == 1.0);
    CHECK(r[0].position == 1);
    CHECK(r[1].position == 3);
    CHECK(r[2].position == 6);
    CHECK(stepwise_keyword_rewards(Strings{}, "a b").empty());
    CHECK(stepwise_keyword_rewards(Strings{"</s>"}, "a b").empty());
    for (const auto& s : stepwise_keyword_rewards(toks, "a b c")) CHECK(s.reward == 1.0);
  }

  TEST_CASE("reward assembly") {
    const auto t = traj_with({0.1, -0.3}, {0.0, 0.0});
    const auto r = assemble_rewards(t, 0.5, 0.005, {}, 10.0);
    REQUIRE(r.size() == 2);
    CHECK(r[0] == doctest::Approx(-0.0005));
    CHECK(r[1] == doctest::Approx(0.0015 + 5.0));

    const auto zero_beta = assemble_rewards(traj_with({-1, -2, -3}, {-3, -2, -1}), 0.7, 0.0, {}, 1.0);
    CHECK(zero_beta == std::vector<double>{0.0, 0.0, 0.7});

    const auto same = assemble_rewards(traj_with({-1, -2}, {-1, -2}), 0.0, 0.3, {}, 1.0);
    CHECK(same == std::vector<double>{0.0, 0.0});

    const std::vector<StepReward> steps = {{0, 1.0}, {1, -0.2}};
    const auto with_steps = assemble_rewards(traj_with({0, 0}, {0, 0}), 2.0, 0.1, steps, 1.0);
    CHECK(with_steps[0] == doctest::Approx(1.0));
    CHECK(with_steps[1] == doctest::Approx(1.8));
  }

  TEST_CASE("generalized advantage estimation") {
    const auto one = compute_gae(std::vector<double>{1.0}, std::vector<double>{0.0}, 0.99, 0.95);
    CHECK(one.advantages == std::vector<double>{1.0});
    CHECK(one.returns == std::vector<double>{1.0});

    const auto two = compute_gae(std::vector<double>{0.0, 1.0}, std::vector<double>{0.5, 0.5}, 1.0, 1.0);
    CHECK(two.advantages[0] == doctest::Approx(0.5));
    CHECK(two.advantages[1] == doctest::Approx(0.5));
    CHECK(two.returns[0] == doctest::Approx(1.0));
    CHECK(two.returns[1] == doctest::Approx(1.0));

    // lambda = 0 leaves the one-step TD residuals.
    const std::vector<double> r = {0.3, -0.1, 0.7}, v = {0.2, 0.4, -0.5};
    const auto td = compute_gae(r, v, 0.9, 0.0);
    CHECK(td.advantages[0] == doctest::Approx(0.3 + 0.9 * 0.4 - 0.2));
    CHECK(td.advantages[1] == doctest::Approx(-0.1 + 0.9 * -0.5 - 0.4));
    CHECK(td.advantages[2] == doctest::Approx(0.7 + 0.5));

    const auto oracle = selfcheck::check_gae_oracle(100);
    INFO(oracle.detail);
    CHECK(oracle.passed);
  }

  TEST_CASE("advantage standardization") {
    std::vector<Trajectory> batch(2);
    batch[0].advantages = {1.0, 2.0};
    batch[1].advantages = {3.0};
    standardize_advantages(batch);
    const double m = batch[0].advantages[0] + batch[0].advantages[1] + batch[1].advantages[0];
    CHECK(m == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(batch[1].advantages[0] == doctest::Approx(std::sqrt(1.5)).epsilon(1e-6));
  }

  TEST_CASE("PPO clipped loss") {
    RLConfig cfg;
    cfg.clip_ratio = 0.2;
    cfg.vf_coef = 0.5;
    cfg.ent_coef = 0.0;

    SUBCASE("ratio one gives minus the mean advantage") {
      const std::vector<Trajectory> b = {ppo_token(-1.0, 0.4), ppo_token(-2.0, -1.0)};
      const auto l = ppo_loss(b, {{-1.0}, {-2.0}}, {{0.0}, {0.0}}, 0.0, cfg);
      CHECK(l.policy_loss == doctest::Approx(0.3));
    }
    SUBCASE("positive advantage clips at 1 + eps") {
      const std::vector<Trajectory> b = {ppo_token(std::log(0.25), 1.0)};
      const auto l = ppo_loss(b, {{std::log(0.5)}}, {{0.0}}, 0.0, cfg);
      CHECK(l.policy_loss == doctest::Approx(-1.2));
    }
    SUBCASE("negative advantage takes the pessimistic branch") {
      const std::vector<Trajectory> b = {ppo_token(std::log(0.5), -1.0)};
      const auto l = ppo_loss(b, {{std::log(0.25)}}, {{0.0}}, 0.0, cfg);
      CHECK(l.policy_loss == doctest::Approx(0.8));
    }
    SUBCASE("value and entropy terms") {
      cfg.ent_coef = 0.1;
      const std::vector<Trajectory> b = {ppo_token(-1.0, 0.0, 1.0), ppo_token(-1.0, 0.0, -1.0)};
      const auto l = ppo_loss(b, {{-1.0}, {-1.0}}, {{0.0}, {1.0}}, 2.0, cfg);
      CHECK(l.value_loss == doctest::Approx((1.0 + 4.0) / 2));
      CHECK(l.total == doctest::Approx(0.0 + 0.5 * 2.5 - 0.1 * 2.0));
    }
    SUBCASE("non-finite ratio names the trajectory") {
      std::vector<Trajectory> b = {ppo_token(-1.0, 1.0)};
      b[0].instance_id = "episode-17";
      try {
        ppo_loss(b, {{NAN}}, {{0.0}}, 0.0, cfg);
        FAIL("expected NumericError");
      } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("episode-17") != std::string::npos);
      }
    }
  }

  TEST_CASE("per-token PPO contribution is bounded by |A| max(rho, 1 + eps)") {
    RLConfig cfg;
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
      const double old_lp = std::log(rng.uniform(0.01, 1.0));
      const double new_lp = std::log(rng.uniform(0.01, 1.0));
      const double adv = rng.uniform(-3.0, 3.0);
      const std::vector<Trajectory> b = {ppo_token(old_lp, adv)};
      const double contrib = -ppo_loss(b, {{new_lp}}, {{0.0}}, 0.0, cfg).policy_loss;
      const double rho = std::exp(new_lp - old_lp);
      CHECK(std::abs(contrib) <= std::abs(adv) * std::max(rho, 1.0 + cfg.clip_ratio) + 1e-12);
    }
  }

  TEST_CASE("NLPO masking") {
    const decoding::Distribution p = {0.5, 0.3, 0.15, 0.05};
    const auto m = nlpo_masked_distribution(p, p, 0.9);
    CHECK(m.support == Ids{0, 1, 2});
    CHECK(m.probs[0] == doctest::Approx(0.5 / 0.95));
    CHECK(m.probs[3] == 0.0);
    const auto all = nlpo_masked_distribution(p, p, 1.0);
    for (int i = 0; i < 4; ++i) CHECK(all.probs[i] == doctest::Approx(p[i]));

    decoding::Distribution masking(10, 0.05 / 9), live(10, 0.01 / 9);
    masking[7] = 0.95;
    live[7] = 0.0;
    live[2] = 0.99;
    const auto fallback = nlpo_masked_distribution(masking, live, 0.9);
    CHECK(fallback.support == Ids{7});
    CHECK(fallback.probs[7] == 1.0);

    const auto check = selfcheck::check_nlpo_masking();
    INFO(check.detail);
    CHECK(check.passed);
  }

  TEST_CASE("adaptive KL coefficient") {
    CHECK(adapt_kl(0.005, 0.5, 0.1, 0.5) == 0.005);
    CHECK(adapt_kl(0.005, 0.5, 0.1, 1.0) == doctest::Approx(0.0051));
    CHECK(adapt_kl(0.005, 0.5, 0.1, 0.0) == doctest::Approx(0.005 * 0.98));
    AdaptiveKL kl(0.005, 0.5, 0.1);
    kl.update(1.0);
    CHECK(kl.beta() == doctest::Approx(0.0051));
    double prev = 0.0;
    for (double observed = 0.0; observed < 2.0; observed += 0.01) {
      const double b = adapt_kl(0.01, 0.5, 0.1, observed);
      CHECK(b >= prev);
      CHECK(b > 0.0);
      prev = b;
    }
  }

  TEST_CASE("rollouts with a deterministic scorer") {
    const auto vocab = toy_vocab(10);
    const auto p = policy::init_params(vocab, 8, 8, 2);
    MaskingPolicy mask{p, 0.9, 0};
    RLConfig cfg;
    cfg.max_new_tokens = 4;
    cfg.n_llm_samples = 1;
    RolloutContext ctx;
    ctx.live = &p;
    ctx.reference = &p;
    ctx.masking = &mask;
    ctx.vocab = &vocab;
    ctx.scorer = [](const RlInstance&, std::span<const TokenId> ids, const std::string&) {
      return static_cast<double>(ids.size());
    };
    const std::vector<RlInstance> batch = {{nullptr, {5, 6}}, {nullptr, {5, 6}}, {nullptr, {7}}};
    const auto a = collect_rollouts(ctx, batch, cfg, 0.0, 11);
    const auto b = collect_rollouts(ctx, batch, cfg, 0.0, 11);
    REQUIRE(a.size() == 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].stimulus_ids == b[i].stimulus_ids);
      CHECK(a[i].r_llm == static_cast<double>(a[i].length()));
      CHECK(a[i].logp_pi.size() == a[i].length());
      CHECK(a[i].advantages.size() == a[i].length());
      CHECK(a[i].rewards.back() == doctest::Approx(a[i].r_llm));
    }

    ctx.scorer = [](const RlInstance&, std::span<const TokenId>, const std::string&) -> double {
      throw BackendUnavailableError("down");
    };
    CHECK_THROWS_AS(collect_rollouts(ctx, batch, cfg, 0.0, 11), BackendUnavailableError);
  }

  TEST_CASE("rl_train loop arithmetic and KL adaptation") {
    const auto vocab = toy_vocab(10);
    const auto sft = policy::init_params(vocab, 8, 8, 4);
    const std::vector<RlInstance> data = {{nullptr, {5, 6}}, {nullptr, {7, 8}}};
    const EpisodeScorer scorer = [](const RlInstance&, std::span<const TokenId> ids, const std::string&) {
      return ids.size() > 2 ? 1.0 : 0.0;
    };
    RLConfig cfg;
    cfg.total_steps = 4;
    cfg.steps_per_update = 4;
    cfg.batch_size = 2;
    cfg.epochs_per_update = 1;
    cfg.learning_rate = 1e-2;
    cfg.max_new_tokens = 4;
    const auto once = rl_train(sft, data, vocab, scorer, {}, cfg, 0);
    CHECK(once.curve.size() == 1);
    CHECK(once.params.all_finite());

    // KL above a tiny target every update: beta strictly increases.
    cfg.total_steps = 12;
    cfg.kl_target = 1e-3;
    cfg.beta0 = 0.01;
    std::size_t seen = 0;
    const auto res = rl_train(sft, data, vocab, scorer, {}, cfg, 0, {}, [&](const RlCurveRecord&) { ++seen; });
    REQUIRE(res.curve.size() == 3);
    CHECK(seen == 3);
    for (const auto& rec : res.curve) CHECK(rec.mean_kl > cfg.kl_target);
    CHECK(res.curve[1].beta > res.curve[0].beta);
    CHECK(res.curve[2].beta > res.curve[1].beta);

    // Same seed, same run.
    const auto again = rl_train(sft, data, vocab, scorer, {}, cfg, 0);
    for (std::size_t i = 0; i < 3; ++i) CHECK(again.curve[i].to_json() == res.curve[i].to_json());
  }

  TEST_CASE("configuration validation") {
    RLConfig rl;
    rl.clip_ratio = 1.0;
    CHECK_THROWS_AS(rl.validate(), ConfigError);
    rl = {};
    rl.top_mask_p = 0.0;
    CHECK_THROWS_AS(rl.validate(), ConfigError);
    rl = {};
    rl.gamma = 0.0;
    CHECK_THROWS_AS(rl.validate(), ConfigError);
    rl = {};
    CHECK(rl.updates() == 10);
    SFTConfig sft;
    sft.epochs = 0;
    CHECK_THROWS_AS(sft.validate(), ConfigError);
  }
}
