#include "dsp/selfcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dsp/decoding.hpp"
#include "dsp/eval.hpp"
#include "dsp/llm.hpp"
#include "dsp/pipeline.hpp"
#include "dsp/synthetic.hpp"
#include "dsp/train.hpp"

namespace dsp::selfcheck {

GradCheckResult gradient_check(ad::ParameterSet& params, const std::function<double(ad::ParameterSet*)>& loss,
                               double step) {
  ad::ParameterSet analytic = params.zeros_like();
  loss(&analytic);
  GradCheckResult out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Matrix& w = params.value(i);
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        const double orig = w(r, c);
        w(r, c) = orig + step;
        const double up = loss(nullptr);
        w(r, c) = orig - step;
        const double down = loss(nullptr);
        w(r, c) = orig;
        const double numeric = (up - down) / (2.0 * step);
        const double a = analytic.value(i)(r, c);
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
        if (rel > out.max_rel_error || std::isnan(rel)) {
          out.max_rel_error = std::isnan(rel) ? INFINITY : rel;
          out.worst_tensor = params.name(i);
        }
        ++out.checked;
      }
    }
  }
  return out;
}

std::vector<double> gae_bruteforce(std::span<const double> rewards, std::span<const double> values, double gamma,
                                   double lambda) {
  const std::size_t L = rewards.size();
  std::vector<double> adv(L, 0.0);
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t k = t; k < L; ++k) {
      const double next = k + 1 < L ? values[k + 1] : 0.0;
      const double delta = rewards[k] + gamma * next - values[k];
      adv[t] += std::pow(gamma * lambda, static_cast<double>(k - t)) * delta;
    }
  }
  return adv;
}

policy::PolicyParams toy_policy(std::size_t vocab, std::uint64_t seed, double scale) {
  auto p = policy::PolicyParams::allocate({vocab, 2, 2});
  Rng rng(seed);
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    auto& m = p.tensors.value(i);
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.uniform(-scale, scale);
    }
  }
  return p;
}

std::vector<corpus::DialogueAct> random_acts(Rng& rng) {
  const auto& domains = corpus::ontology_domains();
  const auto& acts = corpus::ontology_acts();
  const auto& slots = corpus::ontology_slots();
  std::vector<corpus::DialogueAct> out;
  const std::size_t n = 1 + rng.below(4);
  while (out.size() < n) {
    corpus::DialogueAct a;
    a.domain = domains[rng.below(domains.size())];
    a.act = acts[rng.below(acts.size())];
    if (!corpus::act_allowed_in_domain(a.domain, a.act)) continue;
    const std::size_t k = rng.below(4);
    for (std::size_t s = 0; s < k; ++s) a.slots.push_back(slots[rng.below(slots.size())]);
    out.push_back(std::move(a));
  }
  return out;
}

namespace {

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

/// Collects failed expectations with their description.
class Expect {
 public:
  void near(const std::string& what, double got, double want, double tol) {
    ++count_;
    if (!(std::abs(got - want) <= tol)) failures_.push_back(fmt::format("{}: got {:.12g}, want {:.12g}", what, got, want));
  }
  void truth(const std::string& what, bool ok) {
    ++count_;
    if (!ok) failures_.push_back(what);
  }
  CheckResult finish(std::string name, const Timer& timer) const {
    CheckResult r;
    r.name = std::move(name);
    r.passed = failures_.empty();
    r.seconds = timer.seconds();
    if (failures_.empty()) {
      r.detail = fmt::format("{} assertions", count_);
    } else {
      r.detail = fmt::format("{} of {} assertions failed; first: {}", failures_.size(), count_, failures_.front());
    }
    return r;
  }

 private:
  std::vector<std::string> failures_;
  std::size_t count_ = 0;
};

train::Trajectory traj_with(std::vector<double> old_logp, std::vector<double> adv) {
  train::Trajectory t;
  t.instance_id = "fixture";
  t.stimulus_ids.assign(old_logp.size(), 5);
  t.logp_pi = std::move(old_logp);
  t.logp_ref = t.logp_pi;
  t.advantages = std::move(adv);
  t.returns.assign(t.length(), 0.0);
  t.values.assign(t.length(), 0.0);
  return t;
}

}  // namespace

CheckResult check_formula_fidelity() {
  Timer timer;
  Expect ex;
  constexpr double tol = 1e-9;

  ex.near("adapt_kl at target", train::adapt_kl(0.005, 0.5, 0.1, 0.5), 0.005, tol);
  ex.near("adapt_kl clipped up", train::adapt_kl(0.005, 0.5, 0.1, 1.0), 0.00510, tol);
  ex.near("adapt_kl clipped down", train::adapt_kl(0.005, 0.5, 0.1, 0.0), 0.005 * (1.0 - 0.2 * 0.1), tol);
  {
    train::AdaptiveKL kl(0.005, 0.5, 0.1);
    double prev = kl.beta();
    bool increasing = true;
    for (int i = 0; i < 3; ++i) {
      const double next = kl.update(0.9);
      increasing = increasing && next > prev;
      prev = next;
    }
    ex.truth("beta strictly increases while KL stays above target", increasing);
  }

  train::RLConfig cfg;
  cfg.clip_ratio = 0.2;
  cfg.vf_coef = 0.0;
  cfg.ent_coef = 0.0;
  {
    std::vector<train::Trajectory> b = {traj_with({-1.0, -2.0, -0.5}, {0.3, -1.2, 2.0})};
    const auto l = train::ppo_loss(b, {b[0].logp_pi}, {b[0].values}, 0.0, cfg);
    ex.near("ppo rho=1 gives -mean(A)", l.policy_loss, -(0.3 - 1.2 + 2.0) / 3.0, tol);
  }
  {
    std::vector<train::Trajectory> b = {traj_with({0.0}, {1.0})};
    const auto l = train::ppo_loss(b, {{std::log(2.0)}}, {{0.0}}, 0.0, cfg);
    ex.near("ppo rho=2, A=1 clipped to 1.2", l.policy_loss, -1.2, tol);
  }
  {
    std::vector<train::Trajectory> b = {traj_with({0.0}, {-1.0})};
    const auto l = train::ppo_loss(b, {{std::log(0.5)}}, {{0.0}}, 0.0, cfg);
    ex.near("ppo rho=0.5, A=-1 contributes +0.8", l.policy_loss, 0.8, tol);
  }
  {
    train::RLConfig c2 = cfg;
    c2.vf_coef = 0.5;
    c2.ent_coef = 0.1;
    std::vector<train::Trajectory> b = {traj_with({0.0, 0.0}, {1.0, 1.0})};
    b[0].returns = {1.0, 2.0};
    const auto l = train::ppo_loss(b, {{0.0, 0.0}}, {{0.0, 0.0}}, 0.7, c2);
    ex.near("ppo total combines terms", l.total, -1.0 + 0.5 * 2.5 - 0.1 * 0.7, tol);
  }

  {
    train::Trajectory t = traj_with({-0.2, -0.4, -0.1}, {0, 0, 0});
    t.logp_ref = {-1.0, -0.1, -3.0};
    const auto r = train::assemble_rewards(t, 0.5, 0.0, {}, 10.0);
    ex.truth("beta=0 rewards are zero before the terminal", r[0] == 0.0 && r[1] == 0.0);
    ex.near("beta=0 terminal reward", r[2], 5.0, tol);
  }
  {
    train::Trajectory t = traj_with({-0.2, -0.4}, {0, 0});
    const auto r = train::assemble_rewards(t, 0.0, 0.3, {}, 10.0);
    ex.truth("pi == p_POL gives zero KL penalty", r[0] == 0.0 && r[1] == 0.0);
  }
  {
    train::Trajectory t = traj_with({0.1, -0.3}, {0, 0});
    t.logp_ref = {0.0, 0.0};
    const auto r = train::assemble_rewards(t, 0.5, 0.005, {}, 10.0);
    ex.near("assemble_rewards step 0", r[0], -0.0005, tol);
    ex.near("assemble_rewards step 1", r[1], 0.0015 + 5.0, tol);
  }

  ex.near("combined score", eval::combined_score(90.0, 80.0, 10.0), 95.0, tol);

  {
    const std::vector<std::string> toks = {"a", ";", "b", ";", "c", ".", "</s>"};
    const auto r = train::stepwise_keyword_rewards(toks, "a x c y");
    ex.truth("stepwise reward count", r.size() == 3);
    if (r.size() == 3) {
      ex.near("stepwise a", r[0].reward, 1.0, tol);
      ex.near("stepwise b", r[1].reward, -0.2, tol);
      ex.near("stepwise c", r[2].reward, 1.0, tol);
      ex.truth("stepwise positions at separators and EOS",
               r[0].position == 1 && r[1].position == 3 && r[2].position == 6);
    }
    ex.truth("empty stimulus gives no step rewards", train::stepwise_keyword_rewards({}, "a b").empty());
    const auto all = train::stepwise_keyword_rewards(toks, "c b a");
    ex.truth("all keywords present", all.size() == 3 && std::all_of(all.begin(), all.end(), [](const auto& s) {
                                       return s.reward == 1.0;
                                     }));
  }

  {
    const std::vector<std::string> two = {"Keyword1", "Keyword2"};
    ex.truth("render two keywords", corpus::render_keyword_stimulus(two) == "Keyword1; Keyword2.");
    ex.truth("render empty", corpus::render_keyword_stimulus({}).empty());
    const std::vector<std::string> one = {"a"};
    ex.truth("render single", corpus::render_keyword_stimulus(one) == "a.");
    ex.truth("parse inverts render", corpus::parse_keyword_stimulus("Keyword1; Keyword2.") == two);
  }
  return ex.finish("formula fidelity", timer);
}

CheckResult check_gae_oracle(std::size_t cases) {
  Timer timer;
  Expect ex;
  Rng rng(2024);
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t L = 1 + rng.below(16);
    std::vector<double> r(L), v(L);
    for (std::size_t i = 0; i < L; ++i) {
      r[i] = rng.uniform(-2.0, 2.0);
      v[i] = rng.uniform(-2.0, 2.0);
    }
    const double gamma = rng.uniform(0.5, 1.0);
    const double lambda = rng.uniform(0.0, 1.0);
    const auto fast = train::compute_gae(r, v, gamma, lambda);
    const auto slow = gae_bruteforce(r, v, gamma, lambda);
    double worst = 0.0, worst_ret = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
      worst = std::max(worst, std::abs(fast.advantages[i] - slow[i]));
      worst_ret = std::max(worst_ret, std::abs(fast.returns[i] - (slow[i] + v[i])));
    }
    ex.near(fmt::format("case {} advantages", c), worst, 0.0, 1e-9);
    ex.near(fmt::format("case {} returns", c), worst_ret, 0.0, 1e-9);
  }
  {
    const std::vector<double> r = {0.0, 1.0}, v = {0.5, 0.5};
    const auto g = train::compute_gae(r, v, 1.0, 1.0);
    ex.near("two-step A0", g.advantages[0], 0.5, 1e-12);
    ex.near("two-step A1", g.advantages[1], 0.5, 1e-12);
    ex.near("two-step R0", g.returns[0], 1.0, 1e-12);
    ex.near("two-step R1", g.returns[1], 1.0, 1e-12);
  }
  return ex.finish("GAE oracle", timer);
}

CheckResult check_gradients() {
  Timer timer;
  Expect ex;
  constexpr std::size_t V = 6;
  auto toy = toy_policy(V, 11);

  const std::vector<train::SftExample> batch = {{"s0", {5, 3}, {4, 5, 2}}, {"s1", {3}, {5, 2}}};
  const auto sft = gradient_check(toy.tensors, [&](ad::ParameterSet* g) { return train::sft_loss(toy, batch, g); });
  ex.truth(fmt::format("SFT loss gradient rel err {:.3g} ({})", sft.max_rel_error, sft.worst_tensor),
           sft.max_rel_error < 1e-4);

  // Rollouts under a nearby snapshot so importance ratios differ from 1.
  textkit::Vocab vocab = textkit::Vocab::from_tokens({"<pad>", "<s>", "</s>", "<unk>", ";", "w"});
  auto snapshot = toy_policy(V, 12);
  for (std::size_t i = 0; i < snapshot.tensors.size(); ++i) {
    snapshot.tensors.value(i) = toy.tensors.value(i) + 0.1 * snapshot.tensors.value(i);
  }
  train::MaskingPolicy mask{snapshot, 0.9, 0};
  train::RLConfig cfg;
  cfg.max_new_tokens = 4;
  cfg.temperature = 1.0;
  cfg.vf_coef = 0.5;
  cfg.ent_coef = 0.05;
  cfg.beta0 = 0.01;
  train::RolloutContext ctx;
  ctx.live = &snapshot;
  ctx.reference = &snapshot;
  ctx.masking = &mask;
  ctx.vocab = &vocab;
  ctx.scorer = [](const train::RlInstance&, std::span<const TokenId> ids, const std::string&) {
    return static_cast<double>(ids.size()) * 0.3;
  };
  std::vector<train::RlInstance> insts = {{nullptr, {5, 3}}, {nullptr, {3, 5, 5}}};
  auto trajs = train::collect_rollouts(ctx, insts, cfg, cfg.beta0, 7);
  train::standardize_advantages(trajs);
  const auto ppo = gradient_check(toy.tensors, [&](ad::ParameterSet* g) {
    ad::Tape tape(&toy.tensors);
    const auto graph = train::ppo_objective(tape, toy, trajs, cfg);
    if (g != nullptr) tape.backward(graph.total, *g);
    return graph.values.total;
  });
  ex.truth(fmt::format("PPO loss gradient rel err {:.3g} ({})", ppo.max_rel_error, ppo.worst_tensor),
           ppo.max_rel_error < 1e-4);

  // Separate critic: each tape owns one parameter set.
  auto critic = toy_policy(V, 13);
  const auto split_policy = gradient_check(toy.tensors, [&](ad::ParameterSet* g) {
    ad::Tape tape(&toy.tensors), ctape(&critic.tensors);
    const auto graph = train::ppo_objective(tape, toy, ctape, critic, trajs, cfg);
    if (g != nullptr) tape.backward(graph.total, *g);
    return graph.values.total;
  });
  const auto split_critic = gradient_check(critic.tensors, [&](ad::ParameterSet* g) {
    ad::Tape tape(&toy.tensors), ctape(&critic.tensors);
    const auto graph = train::ppo_objective(tape, toy, ctape, critic, trajs, cfg);
    if (g != nullptr) ctape.backward(graph.critic_total, *g);
    return graph.values.total;
  });
  ex.truth(fmt::format("split PPO policy gradient rel err {:.3g} ({})", split_policy.max_rel_error,
                       split_policy.worst_tensor),
           split_policy.max_rel_error < 1e-4);
  ex.truth(fmt::format("split PPO critic gradient rel err {:.3g} ({})", split_critic.max_rel_error,
                       split_critic.worst_tensor),
           split_critic.max_rel_error < 1e-4);
  return ex.finish("gradient correctness", timer);
}

CheckResult check_metric_oracles(std::size_t fuzz_pairs) {
  Timer timer;
  Expect ex;
  constexpr double tol = 1e-6;
  {
    const auto r = eval::rouge_n("the cat sat", "the cat", 1);
    ex.near("rouge1 P", r.precision, 2.0 / 3.0, tol);
    ex.near("rouge1 R", r.recall, 1.0, tol);
    ex.near("rouge1 F", r.f1, 0.8, tol);
    const auto r2 = eval::rouge_n("the cat sat", "the cat", 2);
    ex.near("rouge2 F", r2.f1, 2.0 * 0.5 * 1.0 / 1.5, tol);
  }
  {
    const auto r = eval::rouge_l("a b c d", "a c d");
    ex.near("rougeL P", r.precision, 0.75, tol);
    ex.near("rougeL R", r.recall, 1.0, tol);
    ex.near("rougeL F", r.f1, 2.0 * 0.75 / 1.75, tol);
  }
  ex.near("rouge_avg", eval::rouge_avg("the cat sat", "the cat"), (0.8 + 2.0 / 3.0 + 0.8) / 3.0, tol);
  ex.near("rouge_avg identical", eval::rouge_avg("a b c", "a b c"), 1.0, tol);
  ex.near("rouge_avg disjoint", eval::rouge_avg("a b c", "x y z"), 0.0, tol);
  {
    const std::vector<std::string> c = {"a b c d e"}, r = {"a b c d f"};
    ex.near("bleu corpus", eval::bleu_corpus(c, r), std::pow(0.8 * 0.75 * (2.0 / 3.0) * 0.5, 0.25), tol);
    const std::vector<std::string> c2 = {"a b c d e"}, r2 = {"a b c d e f g h i j"};
    ex.near("bleu brevity", eval::bleu_corpus(c2, r2), std::exp(-1.0), tol);
  }
  ex.near("sentence bleu smoothed", eval::sentence_bleu_smoothed("the cat sat on the mat", "the cat is on the mat"),
          std::pow((5.0 / 6.0) * (3.0 / 5.0) * (1.0 / 4.0) * (1.0 / 6.0), 0.25), tol);
  ex.truth("sentence bleu unigram-only overlap positive", eval::sentence_bleu_smoothed("a x b y", "b z a w") > 0.0);
  {
    const double s = eval::sentence_bleu_smoothed("q r s t u v w x y z", "a b c d e f g h i j");
    ex.near("sentence bleu disjoint floor", s, std::pow(1.0 / (20.0 * 36.0 * 64.0 * 112.0), 0.25), tol);
    ex.truth("sentence bleu disjoint below 0.05", s > 0.0 && s < 0.05);
  }
  ex.near("meteor identical", eval::meteor_simplified("a b c d", "a b c d"), 1.0 - 0.5 / 64.0, tol);
  ex.near("meteor disjoint", eval::meteor_simplified("a b", "c d"), 0.0, tol);
  {
    const double P = 4.0 / 5.0, R = 4.0 / 6.0;
    const double fmean = 10.0 * P * R / (R + 9.0 * P);
    ex.near("meteor stem match",
            eval::meteor_simplified("the dog jumped over it", "the dog jumps over a fence"),
            fmean * (1.0 - 0.5 * std::pow(1.0 / 4.0, 3)), tol);
  }

  Rng rng(99);
  const std::vector<std::string> words = {"a", "b", "c", "the", "cat", "cats", "sat", "runs", "running", ".", ","};
  auto random_text = [&]() {
    std::string s;
    const std::size_t n = rng.below(12);
    for (std::size_t i = 0; i < n; ++i) s += words[rng.below(words.size())] + " ";
    return s;
  };
  bool in_range = true;
  bool symmetric = true;
  for (std::size_t i = 0; i < fuzz_pairs; ++i) {
    const std::string a = random_text(), b = random_text();
    const double vals[] = {eval::rouge_n(a, b, 1).f1,      eval::rouge_n(a, b, 2).f1,
                           eval::rouge_l(a, b).f1,          eval::rouge_avg(a, b),
                           eval::sentence_bleu_smoothed(a, b), eval::meteor_simplified(a, b),
                           eval::bleu_corpus(std::vector<std::string>{a}, std::vector<std::string>{b})};
    for (double v : vals) in_range = in_range && std::isfinite(v) && v >= 0.0 && v <= 1.0 + 1e-12;
    symmetric = symmetric && eval::rouge_n(a, b, 1).precision == eval::rouge_n(b, a, 1).recall;
  }
  ex.truth("fuzzed metrics stay in [0, 1]", in_range);
  ex.truth("rouge precision/recall swap under argument swap", symmetric);
  return ex.finish("metric oracles", timer);
}

CheckResult check_nlpo_masking() {
  Timer timer;
  Expect ex;
  {
    const decoding::Distribution p = {0.5, 0.3, 0.15, 0.05};
    const auto m = train::nlpo_masked_distribution(p, p, 0.9);
    ex.truth("nucleus support {0,1,2}", m.support == std::vector<TokenId>{0, 1, 2});
    ex.near("renormalized 0", m.probs[0], 0.5 / 0.95, 1e-12);
    ex.near("renormalized 2", m.probs[2], 0.15 / 0.95, 1e-12);
    ex.near("masked out 3", m.probs[3], 0.0, 0.0);
    const auto all = train::nlpo_masked_distribution(p, p, 1.0);
    ex.truth("p = 1 is a no-op", all.probs == p);
  }
  {
    decoding::Distribution mask(8, 0.05 / 7.0), live(8, 0.01 / 7.0);
    mask[7] = 0.95;
    mask[2] = 0.0;
    live[2] = 0.99;
    live[7] = 0.0;
    const auto m = train::nlpo_masked_distribution(mask, live, 0.9);
    ex.truth("fallback point mass on masking top-1", m.support == std::vector<TokenId>{7} && m.probs[7] == 1.0);
  }
  Rng rng(5);
  bool exact = true, normalized = true;
  for (int i = 0; i < 500; ++i) {
    const std::size_t n = 2 + rng.below(30);
    decoding::Distribution a(n), b(n);
    for (std::size_t k = 0; k < n; ++k) {
      a[k] = std::exp(rng.uniform(-4.0, 4.0));
      b[k] = std::exp(rng.uniform(-4.0, 4.0));
    }
    decoding::renormalize(a);
    decoding::renormalize(b);
    const double p = rng.uniform(0.05, 1.0);
    const auto m = train::nlpo_masked_distribution(a, b, p);
    const auto nucleus = decoding::nucleus_support(a, p);
    std::vector<TokenId> nonzero;
    double sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      sum += m.probs[k];
      if (m.probs[k] > 0.0) nonzero.push_back(static_cast<TokenId>(k));
    }
    exact = exact && m.support == nucleus && nonzero == nucleus;
    normalized = normalized && std::abs(sum - 1.0) <= 1e-6;
  }
  ex.truth("support equals masking nucleus on random distributions", exact);
  ex.truth("masked distributions sum to 1", normalized);

  // Staleness trace of a short bandit run with mask_sync_iters = 3.
  textkit::Vocab vocab = textkit::Vocab::from_tokens({"<pad>", "<s>", "</s>", "<unk>", ";", "a", "b", "c"});
  const auto start = toy_policy(vocab.size(), 3);
  train::RLConfig cfg;
  cfg.steps_per_update = 4;
  cfg.total_steps = 28;
  cfg.batch_size = 4;
  cfg.epochs_per_update = 1;
  cfg.learning_rate = 1e-2;
  cfg.mask_sync_iters = 3;
  cfg.max_new_tokens = 1;
  cfg.beta0 = 0.0;
  const std::vector<train::RlInstance> insts = {{nullptr, {5}}};
  const auto scorer = [](const train::RlInstance&, std::span<const TokenId> ids, const std::string&) {
    return ids.front() == 3 ? 1.0 : 0.0;
  };
  const auto res = train::rl_train(start, insts, vocab, scorer, {}, cfg, 1);
  std::vector<std::size_t> trace;
  for (const auto& r : res.curve) trace.push_back(r.mask_staleness);
  ex.truth("staleness trace 0,1,2,0,1,2,0", trace == std::vector<std::size_t>{0, 1, 2, 0, 1, 2, 0});
  ex.truth("mask refreshed after updates 2 and 5", res.mask_sync_updates == std::vector<std::size_t>{2, 5});
  return ex.finish("NLPO masking", timer);
}

CheckResult check_dialogue_roundtrip(std::size_t cases) {
  Timer timer;
  Expect ex;
  using corpus::DialogueAct;
  const std::vector<DialogueAct> hotel = {{"hotel", "inform", {"choice", "type"}}, {"hotel", "request", {"area"}}};
  ex.truth("hotel example", corpus::verbalize_dialogue_acts(hotel) == "[hotel] [inform] choice type [request] area");
  const std::vector<DialogueAct> rest = {{"restaurant", "inform", {"choice"}}, {"restaurant", "request", {"food"}}};
  ex.truth("restaurant example",
           corpus::verbalize_dialogue_acts(rest) == "[restaurant] [inform] choice [request] food");
  ex.truth("hotel example parses back", corpus::parse_dialogue_acts("[hotel] [inform] choice type [request] area").acts == hotel);
  Rng rng(17);
  std::size_t ok = 0;
  std::string first_bad;
  for (std::size_t i = 0; i < cases; ++i) {
    const auto acts = random_acts(rng);
    const std::string text = corpus::verbalize_dialogue_acts(acts);
    const auto back = corpus::parse_dialogue_acts(text);
    if (back.acts == acts && back.warnings.empty()) {
      ++ok;
    } else if (first_bad.empty()) {
      first_bad = text;
    }
  }
  ex.truth(fmt::format("{}/{} random act lists round-trip (first failure: '{}')", ok, cases, first_bad), ok == cases);
  return ex.finish("dialogue round-trip", timer);
}

// ---------------------------------------------------------------- slow checks

namespace {

textkit::Vocab vocab_for(const corpus::Dataset& data) {
  std::vector<std::vector<std::string>> toks;
  for (const auto& x : data.instances) {
    if (x.pseudo_stimulus) toks.push_back(textkit::tokenize_words(*x.pseudo_stimulus));
    toks.push_back(textkit::tokenize_words(corpus::sft_input_text(x.task, x)));
  }
  return textkit::build_vocab(toks, 4096);
}

/// Both sequences end with EOS when decoding finished.
bool matches_target(const std::vector<TokenId>& decoded, const std::vector<TokenId>& target_with_eos) {
  return decoded == target_with_eos;
}

}  // namespace

SftConvergence run_sft_convergence(std::uint64_t seed) {
  const auto data = synthetic::summarization_corpus(32, derive_seed(seed, 32));
  const auto vocab = vocab_for(data);
  const auto examples = train::make_sft_examples(data, vocab);
  train::SFTConfig cfg;
  cfg.epochs = 200;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 4;
  cfg.lr_schedule = train::LrSchedule::kConstant;
  const auto res = train::sft_train(policy::init_params(vocab, 32, 64, derive_seed(seed, 1)), examples, cfg, seed);
  SftConvergence out;
  out.final_loss = res.epoch_loss.back();
  out.epochs = res.epoch_loss.size();
  out.total = examples.size();
  decoding::DecodeParams greedy;
  greedy.mode = decoding::Mode::kGreedy;
  greedy.max_new_tokens = 16;
  for (const auto& ex : examples) {
    const auto s = policy::sample_stimulus(res.params, vocab, ex.input, greedy, 0);
    if (matches_target(s.ids, ex.target)) ++out.exact;
  }
  return out;
}

CheckResult check_sft_convergence() {
  Timer timer;
  Expect ex;
  const auto r = run_sft_convergence(0);
  ex.truth(fmt::format("final NLL {:.4f} after {} epochs (< 0.05)", r.final_loss, r.epochs), r.final_loss < 0.05);
  ex.truth(fmt::format("greedy exact {}/{} (>= 30)", r.exact, r.total), r.exact >= 30);
  auto res = ex.finish("SFT convergence", timer);
  res.detail = fmt::format("NLL {:.4f}, exact {}/{}; {}", r.final_loss, r.exact, r.total, res.detail);
  return res;
}

std::optional<std::size_t> run_bandit(std::uint64_t seed, std::size_t max_updates) {
  const textkit::Vocab vocab = textkit::Vocab::from_tokens({"<pad>", "<s>", "</s>", "<unk>", ";", "a", "b", "c"});
  const auto start = policy::init_params(vocab, 8, 8, derive_seed(seed, 8));
  train::RLConfig cfg;
  cfg.steps_per_update = 16;
  cfg.batch_size = 16;
  cfg.total_steps = cfg.steps_per_update * max_updates;
  cfg.epochs_per_update = 2;
  cfg.learning_rate = 1e-2;
  cfg.beta0 = 0.0;
  cfg.max_new_tokens = 1;
  cfg.temperature = 1.0;
  cfg.top_mask_p = 1.0;
  const std::vector<train::RlInstance> insts = {{nullptr, {5}}};
  const auto scorer = [](const train::RlInstance&, std::span<const TokenId> ids, const std::string&) {
    return !ids.empty() && ids.front() == 3 ? 1.0 : 0.0;
  };
  // Greedy choice is checked after every update through the validation hook.
  std::optional<std::size_t> first;
  std::size_t update = 0;
  const train::ValidationFn greedy_hits = [&](const policy::PolicyParams& p) {
    const auto dist = policy::next_token_distribution(p, insts[0].input_ids, {});
    const double hit = decoding::argmax(dist) == 3 ? 1.0 : 0.0;
    if (hit > 0.0 && !first) first = update;
    ++update;
    return hit;
  };
  train::rl_train(start, insts, vocab, scorer, {}, cfg, seed, greedy_hits);
  return first;
}

CheckResult check_bandit() {
  Timer timer;
  Expect ex;
  std::string detail;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto first = run_bandit(seed);
    detail += fmt::format("seed {}: {}; ", seed, first ? fmt::format("update {}", *first) : "never");
    ex.truth(fmt::format("seed {} selects token 3 within 200 updates", seed), first.has_value());
  }
  auto res = ex.finish("RL bandit", timer);
  res.detail = detail + res.detail;
  return res;
}

EndToEndReport run_end_to_end(const EndToEndOptions& options) {
  auto data = synthetic::summarization_corpus(options.articles, derive_seed(options.seed, 200));
  corpus::Dataset train_set, held_out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    (i < data.size() - options.held_out ? train_set : held_out).instances.push_back(data.instances[i]);
  }
  const auto vocab = vocab_for(train_set);

  llm::BackendSpec spec;
  spec.rule_set = "summarization";
  const auto with_tmpl = llm::builtin_template(corpus::Task::kSummarization, true);
  const auto without_tmpl = llm::builtin_template(corpus::Task::kSummarization, false);
  const auto with = llm::make_backend(spec, corpus::Task::kSummarization, with_tmpl);
  const auto without = llm::make_backend(spec, corpus::Task::kSummarization, without_tmpl);
  const auto reward = eval::reward_fn(corpus::Task::kSummarization, "rouge_avg_x10");
  const llm::GenParams gen;
  auto score = [&](const corpus::Instance& inst, const std::optional<std::string>& stimulus) {
    const auto& tmpl = stimulus ? with_tmpl : without_tmpl;
    const auto& backend = stimulus ? with : without;
    const auto out = backend->generate(llm::build_prompt(tmpl, inst.input_text, stimulus), gen).front();
    return reward(inst.input_text, out, inst);
  };

  EndToEndReport rep;
  rep.held_out = held_out.size();
  const auto candidates = synthetic::enumerate_stimuli(3);
  for (const auto& inst : held_out.instances) {
    rep.no_stimulus += score(inst, std::nullopt);
    double best = 0.0;
    for (const auto& c : candidates) best = std::max(best, score(inst, c));
    rep.optimum += best;
  }

  const auto examples = train::make_sft_examples(train_set, vocab);
  train::SFTConfig sft_cfg;
  sft_cfg.epochs = options.sft_epochs;
  sft_cfg.learning_rate = 3e-3;
  sft_cfg.batch_size = 4;
  sft_cfg.lr_schedule = train::LrSchedule::kConstant;
  const auto sft = train::sft_train(policy::init_params(vocab, 32, 64, derive_seed(options.seed, 2)), examples,
                                    sft_cfg, options.seed, [&](std::size_t e, double loss) {
                                      if (options.verbose) spdlog::info("sft epoch {} loss {:.4f}", e, loss);
                                    });

  decoding::DecodeParams greedy;
  greedy.mode = decoding::Mode::kGreedy;
  greedy.max_new_tokens = options.max_new_tokens;
  auto policy_score = [&](const policy::PolicyParams& params, const corpus::Dataset& split) {
    double total = 0.0;
    for (const auto& inst : split.instances) {
      const auto ids = vocab.encode_text(corpus::sft_input_text(inst.task, inst));
      total += score(inst, policy::sample_stimulus(params, vocab, ids, greedy, 0).text);
    }
    return total;
  };
  rep.sft = policy_score(sft.params, held_out);

  std::vector<train::RlInstance> insts;
  for (const auto& inst : train_set.instances) {
    insts.push_back({&inst, vocab.encode_text(corpus::sft_input_text(inst.task, inst))});
  }
  train::RLConfig rl;
  rl.steps_per_update = 32;
  rl.total_steps = rl.steps_per_update * options.rl_updates;
  rl.batch_size = 8;
  rl.epochs_per_update = 2;
  rl.learning_rate = options.rl_learning_rate;
  rl.vf_coef = options.vf_coef;
  rl.top_mask_p = options.top_mask_p;
  rl.beta0 = options.beta0;
  rl.temperature = options.rl_temperature;
  rl.max_new_tokens = options.max_new_tokens;
  rl.n_llm_samples = 1;
  const train::EpisodeScorer scorer = [&](const train::RlInstance& ri, std::span<const TokenId>,
                                          const std::string& text) { return score(*ri.instance, text); };
  const auto res = train::rl_train(sft.params, insts, vocab, scorer, {}, rl, options.seed, {},
                                   [&](const train::RlCurveRecord& r) {
                                     if (options.verbose) spdlog::info("rl {}", r.to_json().dump());
                                   });
  rep.rl = policy_score(res.params, held_out);
  rep.rl_train = policy_score(res.params, train_set) / static_cast<double>(train_set.size());
  rep.curve = res.curve;

  const double n = static_cast<double>(std::max<std::size_t>(1, held_out.size()));
  rep.no_stimulus /= n;
  rep.optimum /= n;
  rep.sft /= n;
  rep.rl /= n;
  return rep;
}

bool reward_non_degrading(std::span<const train::RlCurveRecord> curve) {
  const std::size_t q = curve.size() / 4;
  if (q == 0) return true;
  auto mean = [&](std::size_t from) {
    double sum = 0.0;
    for (std::size_t i = from; i < from + q; ++i) sum += curve[i].mean_r_llm;
    return sum / static_cast<double>(q);
  };
  return mean(curve.size() - q) >= mean(0);
}

CheckResult check_end_to_end_gain() {
  Timer timer;
  Expect ex;
  const auto r = run_end_to_end({});
  ex.truth("RL >= SFT", r.rl >= r.sft);
  ex.truth("SFT >= no stimulus", r.sft >= r.no_stimulus);
  ex.truth("RL reaches 90% of the brute-force optimum", r.rl >= 0.9 * r.optimum);
  ex.truth("training reward does not degrade", reward_non_degrading(r.curve));
  auto res = ex.finish("end-to-end DSP gain", timer);
  res.detail = fmt::format("mean R_LLM on {} held-out: none {:.3f}, SFT {:.3f}, RL {:.3f}, optimum {:.3f}; {}",
                           r.held_out, r.no_stimulus, r.sft, r.rl, r.optimum, res.detail);
  return res;
}

CheckResult check_determinism(const std::filesystem::path& work_dir) {
  namespace fs = std::filesystem;
  Timer timer;
  Expect ex;
  fs::remove_all(work_dir);
  fs::create_directories(work_dir / "data");
  const auto data = synthetic::summarization_corpus(60, 99);
  corpus::Dataset train_set, valid, test;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto inst = data.instances[i];
    inst.pseudo_stimulus.reset();
    (i < 40 ? train_set : i < 48 ? valid : test).instances.push_back(std::move(inst));
  }
  corpus::save_jsonl(work_dir / "data" / "train.jsonl", train_set);
  corpus::save_jsonl(work_dir / "data" / "valid.jsonl", valid);
  corpus::save_jsonl(work_dir / "data" / "test.jsonl", test);

  auto read = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  std::vector<std::string> names = {"curves.jsonl", "reports/metrics_standard.csv", "reports/metrics_dsp.csv",
                                    "reports/comparison.csv", "reports/curve.csv"};
  std::vector<std::vector<std::string>> contents;
  for (const char* run : {"run_a", "run_b"}) {
    const std::string yaml = fmt::format(R"(task: summarization
seed: 5
run_dir: {}
data.train: data/train.jsonl
data.valid: data/valid.jsonl
data.test: data/test.jsonl
data.num_demonstrations: 1
backend.kind: mock
backend.noise_rate: 0.2
policy.embed_dim: 16
policy.hidden_dim: 32
sft.epochs: 5
sft.learning_rate: 0.005
rl.total_steps: 48
rl.steps_per_update: 16
rl.epochs_per_update: 1
rl.learning_rate: 0.001
rl.max_new_tokens: 12
rl.n_llm_samples: 2
rl.validation_size: 4
)",
                                         run);
    const auto cfg = pipeline::parse_config(yaml, work_dir);
    std::ostringstream sink;
    pipeline::run_all(cfg, {}, sink);
    std::vector<std::string> files;
    for (const auto& n : names) files.push_back(read(cfg.run_dir / n));
    contents.push_back(std::move(files));
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    ex.truth(names[i] + " is non-empty", !contents[0][i].empty());
    ex.truth(names[i] + " is byte-identical across runs", contents[0][i] == contents[1][i]);
  }
  return ex.finish("determinism", timer);
}

std::vector<CheckResult> run_quick_checks() {
  return {check_formula_fidelity(), check_gae_oracle(),        check_gradients(),
          check_metric_oracles(),   check_nlpo_masking(),      check_dialogue_roundtrip()};
}

std::vector<CheckResult> run_slow_checks(const std::filesystem::path& work_dir) {
  return {check_sft_convergence(), check_bandit(), check_end_to_end_gain(), check_determinism(work_dir)};
}

}  // namespace dsp::selfcheck
