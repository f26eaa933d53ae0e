#include "dsp/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include <spdlog/spdlog.h>

#include "dsp/errors.hpp"
#include "dsp/rng.hpp"

namespace dsp::train {

LrSchedule parse_lr_schedule(std::string_view name) {
  if (name == "constant") return LrSchedule::kConstant;
  if (name == "linear") return LrSchedule::kLinear;
  throw ConfigError("unknown lr_schedule '" + std::string(name) + "'");
}

std::string_view to_string(LrSchedule s) { return s == LrSchedule::kConstant ? "constant" : "linear"; }

// ---------------------------------------------------------------- optimizer

AdamW::AdamW(const ad::ParameterSet& like, double weight_decay, double beta1, double beta2, double eps)
    : m_(like.zeros_like()), v_(like.zeros_like()), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2),
      eps_(eps) {}

void AdamW::step(ad::ParameterSet& params, const ad::ParameterSet& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.value(i);
    const auto& g = grads.value(i);
    auto& m = m_.value(i);
    auto& v = v_.value(i);
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
    const auto update = (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    p.array() -= lr * (update + weight_decay_ * p.array());
  }
}

double clip_grad_norm(ad::ParameterSet& grads, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) sq += grads.value(i).squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (std::size_t i = 0; i < grads.size(); ++i) grads.value(i) *= f;
  }
  return norm;
}

double scheduled_lr(double base, LrSchedule schedule, std::size_t step, std::size_t total) {
  if (schedule == LrSchedule::kConstant || total == 0) return base;
  return base * (1.0 - static_cast<double>(step) / static_cast<double>(total));
}

// ---------------------------------------------------------------- SFT

void SFTConfig::validate() const {
  if (epochs < 1) throw ConfigError("sft.epochs must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("sft.learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("sft.batch_size must be at least 1");
  if (weight_decay < 0.0) throw ConfigError("sft.weight_decay must be non-negative");
}

std::vector<SftExample> make_sft_examples(const corpus::Dataset& data, const textkit::Vocab& vocab,
                                          std::size_t max_input_tokens) {
  std::vector<SftExample> out;
  out.reserve(data.size());
  for (const auto& inst : data.instances) {
    if (!inst.pseudo_stimulus || inst.pseudo_stimulus->empty()) {
      throw ValidationError("instance '" + inst.id + "' has no pseudo_stimulus for supervised training");
    }
    SftExample ex;
    ex.id = inst.id;
    ex.input = vocab.encode_text(corpus::sft_input_text(inst.task, inst));
    if (ex.input.size() > max_input_tokens) ex.input.resize(max_input_tokens);
    ex.target = vocab.encode_text(*inst.pseudo_stimulus);
    ex.target.push_back(special::kEos);
    out.push_back(std::move(ex));
  }
  return out;
}

double sft_loss(const PolicyParams& params, std::span<const SftExample> batch, ad::ParameterSet* grads) {
  ad::Tape tape(&params.tensors);
  std::vector<ad::Var> terms;
  for (const auto& ex : batch) {
    const auto fw = policy::teacher_forced(tape, params, ex.input, ex.target);
    for (std::size_t t = 0; t < ex.target.size(); ++t) {
      terms.push_back(tape.log_softmax_pick(fw.logits[t], ex.target[t]));
    }
  }
  if (terms.empty()) return 0.0;
  const ad::Var loss = tape.scale(tape.sum(terms), -1.0 / static_cast<double>(terms.size()));
  const double value = tape.scalar_value(loss);
  if (grads != nullptr && std::isfinite(value)) tape.backward(loss, *grads);
  return value;
}

SftResult sft_train(PolicyParams params, std::span<const SftExample> data, const SFTConfig& config,
                    std::uint64_t seed, const SftEpochCallback& on_epoch) {
  config.validate();
  if (data.empty()) throw ValidationError("supervised training set is empty");
  SftResult result{std::move(params), {}};
  auto& p = result.params;
  AdamW opt(p.tensors, config.weight_decay);
  ad::ParameterSet grads = p.tensors.zeros_like();
  Rng rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batches = (data.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = batches * config.epochs;
  std::vector<SftExample> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double weighted = 0.0;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      batch.clear();
      std::size_t batch_tokens = 0;
      for (std::size_t i = b * config.batch_size; i < std::min(data.size(), (b + 1) * config.batch_size); ++i) {
        batch.push_back(data[order[i]]);
        batch_tokens += data[order[i]].target.size();
      }
      grads.set_zero();
      const double loss = sft_loss(p, batch, &grads);
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite SFT loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                           " (first instance '" + batch.front().id + "')");
      }
      clip_grad_norm(grads, config.max_grad_norm);
      opt.step(p.tensors, grads, scheduled_lr(config.learning_rate, config.lr_schedule, opt.steps(), total_steps));
      weighted += loss * static_cast<double>(batch_tokens);
      tokens += batch_tokens;
    }
    if (!p.all_finite()) throw NumericError("non-finite parameters after SFT epoch " + std::to_string(epoch));
    const double epoch_loss = weighted / static_cast<double>(tokens);
    result.epoch_loss.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss);
  }
  return result;
}

// ---------------------------------------------------------------- RL pieces

void RLConfig::validate() const {
  if (steps_per_update < 1) throw ConfigError("rl.steps_per_update must be at least 1");
  if (total_steps < steps_per_update) throw ConfigError("rl.total_steps must be at least rl.steps_per_update");
  if (batch_size < 1) throw ConfigError("rl.batch_size must be at least 1");
  if (epochs_per_update < 1) throw ConfigError("rl.epochs_per_update must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("rl.learning_rate must be positive");
  if (!(clip_ratio > 0.0 && clip_ratio < 1.0)) throw ConfigError("rl.clip_ratio must lie in (0, 1)");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("rl.gamma must lie in (0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("rl.gae_lambda must lie in [0, 1]");
  if (!(top_mask_p > 0.0 && top_mask_p <= 1.0)) throw ConfigError("rl.top_mask_p must lie in (0, 1]");
  if (!(kl_target > 0.0)) throw ConfigError("rl.kl_target must be positive");
  if (beta0 < 0.0) throw ConfigError("rl.beta0 must be non-negative");
  if (!(k_beta >= 0.0 && k_beta < 5.0)) throw ConfigError("rl.k_beta must lie in [0, 5)");
  if (mask_sync_iters < 1) throw ConfigError("rl.mask_sync_iters must be at least 1");
  if (n_llm_samples < 1) throw ConfigError("rl.n_llm_samples must be at least 1");
  if (rollouts_top_k < 1) throw ConfigError("rl.rollouts_top_k must be at least 1");
  if (!(temperature > 0.0)) throw ConfigError("rl.temperature must be positive");
  if (max_new_tokens < 1 || min_len > max_new_tokens) throw ConfigError("rl.min_len/max_new_tokens out of range");
}

std::size_t RLConfig::updates() const { return total_steps / steps_per_update; }

AdaptiveKL::AdaptiveKL(double beta0, double kl_target, double k_beta)
    : beta_(beta0), kl_target_(kl_target), k_beta_(k_beta) {
  if (!(kl_target > 0.0)) throw ConfigError("kl_target must be positive");
}

double adapt_kl(double beta, double kl_target, double k_beta, double observed_kl) {
  const double e = std::clamp((observed_kl - kl_target) / kl_target, -0.2, 0.2);
  return beta * (1.0 + k_beta * e);
}

double AdaptiveKL::update(double observed_kl) {
  beta_ = adapt_kl(beta_, kl_target_, k_beta_, observed_kl);
  return beta_;
}

void MaskingPolicy::sync(const PolicyParams& live) {
  params = live;
  staleness = 0;
}

MaskedDistribution nlpo_masked_distribution(const decoding::Distribution& masking_dist,
                                            const decoding::Distribution& live_dist, double top_mask_p) {
  if (masking_dist.size() != live_dist.size()) throw std::invalid_argument("distribution sizes differ");
  MaskedDistribution out;
  out.support = decoding::nucleus_support(masking_dist, top_mask_p);
  double mass = 0.0;
  for (TokenId id : out.support) mass += live_dist[static_cast<std::size_t>(id)];
  if (!(mass > 0.0)) {
    const TokenId top = decoding::argmax(masking_dist);
    out.support = {top};
    out.probs.assign(live_dist.size(), 0.0);
    out.probs[static_cast<std::size_t>(top)] = 1.0;
    return out;
  }
  out.probs.assign(live_dist.size(), 0.0);
  for (TokenId id : out.support) out.probs[static_cast<std::size_t>(id)] = live_dist[static_cast<std::size_t>(id)] / mass;
  return out;
}

std::vector<StepReward> stepwise_keyword_rewards(std::span<const std::string> stimulus_tokens,
                                                 std::string_view reference_summary) {
  const auto ref_tokens = textkit::tokenize_words(reference_summary);
  const std::unordered_set<std::string> ref(ref_tokens.begin(), ref_tokens.end());
  std::vector<StepReward> out;
  std::vector<std::string> piece;
  auto close = [&](std::size_t pos) {
    while (!piece.empty() && piece.back() == ".") piece.pop_back();
    if (piece.empty()) return;
    bool present = true;
    for (const auto& tok : piece) {
      for (const auto& sub : textkit::tokenize_words(tok)) {
        if (!ref.contains(sub)) present = false;
      }
    }
    out.push_back({pos, present ? 1.0 : -0.2});
    piece.clear();
  };
  const std::string_view sep = special::kStrings[special::kSep];
  const std::string_view eos = special::kStrings[special::kEos];
  for (std::size_t i = 0; i < stimulus_tokens.size(); ++i) {
    const auto& t = stimulus_tokens[i];
    if (t == sep) {
      close(i);
    } else if (t == eos) {
      close(i);
      piece.clear();
      return out;
    } else if (t != special::kStrings[special::kPad] && t != special::kStrings[special::kBos]) {
      piece.push_back(t);
    }
  }
  if (!stimulus_tokens.empty()) close(stimulus_tokens.size() - 1);
  return out;
}

std::vector<double> assemble_rewards(const Trajectory& traj, double r_llm, double beta,
                                     std::span<const StepReward> stepwise, double reward_scale) {
  const std::size_t L = traj.length();
  if (traj.logp_pi.size() != L || traj.logp_ref.size() != L) {
    throw std::invalid_argument("trajectory logprob tracks do not match its length");
  }
  std::vector<double> r(L, 0.0);
  for (std::size_t t = 0; t < L; ++t) r[t] = -beta * (traj.logp_pi[t] - traj.logp_ref[t]);
  for (const auto& s : stepwise) {
    if (s.position >= L) throw std::invalid_argument("step reward position beyond trajectory");
    r[s.position] += s.reward;
  }
  if (L > 0) r[L - 1] += reward_scale * r_llm;
  return r;
}

Gae compute_gae(std::span<const double> rewards, std::span<const double> values, double gamma, double lambda) {
  if (rewards.size() != values.size()) throw std::invalid_argument("rewards and values differ in length");
  const std::size_t L = rewards.size();
  Gae g;
  g.advantages.assign(L, 0.0);
  g.returns.assign(L, 0.0);
  double running = 0.0;
  for (std::size_t k = L; k-- > 0;) {
    const double next_v = k + 1 < L ? values[k + 1] : 0.0;
    const double delta = rewards[k] + gamma * next_v - values[k];
    running = delta + gamma * lambda * running;
    g.advantages[k] = running;
    g.returns[k] = running + values[k];
  }
  return g;
}

void standardize_advantages(std::span<Trajectory> batch, double eps) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& t : batch) {
    for (double a : t.advantages) {
      sum += a;
      ++n;
    }
  }
  if (n == 0) return;
  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (const auto& t : batch) {
    for (double a : t.advantages) var += (a - mean) * (a - mean);
  }
  const double sd = std::sqrt(var / static_cast<double>(n));
  for (auto& t : batch) {
    for (double& a : t.advantages) a = (a - mean) / (sd + eps);
  }
}

PpoLoss ppo_loss(std::span<const Trajectory> batch, const std::vector<std::vector<double>>& new_logp,
                 const std::vector<std::vector<double>>& new_values, double mean_entropy, const RLConfig& config) {
  if (new_logp.size() != batch.size() || new_values.size() != batch.size()) {
    throw std::invalid_argument("ppo_loss inputs do not match the batch");
  }
  const double eps = config.clip_ratio;
  double pl = 0.0, vl = 0.0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& tr = batch[b];
    for (std::size_t t = 0; t < tr.length(); ++t) {
      const double rho = std::exp(new_logp[b][t] - tr.logp_pi[t]);
      if (!std::isfinite(rho)) throw NumericError("non-finite importance ratio in trajectory '" + tr.instance_id + "'");
      const double a = tr.advantages[t];
      pl += -std::min(rho * a, std::clamp(rho, 1.0 - eps, 1.0 + eps) * a);
      const double d = new_values[b][t] - tr.returns[t];
      vl += d * d;
      ++n;
    }
  }
  PpoLoss out;
  if (n == 0) return out;
  out.policy_loss = pl / static_cast<double>(n);
  out.value_loss = vl / static_cast<double>(n);
  out.entropy = mean_entropy;
  out.total = out.policy_loss + config.vf_coef * out.value_loss - config.ent_coef * out.entropy;
  return out;
}

namespace {

void check_trajectory(const Trajectory& tr) {
  if (tr.advantages.size() != tr.length() || tr.returns.size() != tr.length() || tr.supports.size() != tr.length()) {
    throw std::invalid_argument("trajectory '" + tr.instance_id + "' is missing advantages, returns or supports");
  }
}

struct PolicyTerms {
  std::vector<ad::Var> surr, ent;
};

void add_policy_terms(ad::Tape& tape, const std::vector<ad::Var>& logits, const Trajectory& tr, const RLConfig& config,
                      PolicyTerms& terms) {
  for (std::size_t t = 0; t < tr.length(); ++t) {
    const ad::Var lp = tape.log_softmax_pick(logits[t], tr.stimulus_ids[t], tr.supports[t]);
    const double rho = std::exp(tape.scalar_value(lp) - tr.logp_pi[t]);
    if (!std::isfinite(rho)) throw NumericError("non-finite importance ratio in trajectory '" + tr.instance_id + "'");
    terms.surr.push_back(tape.ppo_clip_surrogate(lp, tr.logp_pi[t], tr.advantages[t], config.clip_ratio));
    terms.ent.push_back(tape.entropy(logits[t], tr.supports[t]));
  }
}

void add_value_terms(ad::Tape& tape, const std::vector<ad::Var>& values, const Trajectory& tr,
                     std::vector<ad::Var>& verr) {
  for (std::size_t t = 0; t < tr.length(); ++t) verr.push_back(tape.squared_error(values[t], tr.returns[t]));
}

}  // namespace

PpoGraph ppo_objective(ad::Tape& tape, const PolicyParams& params, std::span<const Trajectory> batch,
                       const RLConfig& config) {
  PolicyTerms terms;
  std::vector<ad::Var> verr;
  for (const auto& tr : batch) {
    check_trajectory(tr);
    const auto fw = policy::teacher_forced(tape, params, tr.input_ids, tr.stimulus_ids);
    add_policy_terms(tape, fw.logits, tr, config, terms);
    add_value_terms(tape, fw.values, tr, verr);
  }
  if (terms.surr.empty()) throw std::invalid_argument("PPO batch has no tokens");
  const double inv = 1.0 / static_cast<double>(terms.surr.size());
  const ad::Var pl = tape.scale(tape.sum(terms.surr), inv);
  const ad::Var vl = tape.scale(tape.sum(verr), inv);
  const ad::Var h = tape.scale(tape.sum(terms.ent), inv);
  const ad::Var parts[] = {pl, tape.scale(vl, config.vf_coef), tape.scale(h, -config.ent_coef)};
  PpoGraph g;
  g.total = tape.sum(parts);
  g.values.policy_loss = tape.scalar_value(pl);
  g.values.value_loss = tape.scalar_value(vl);
  g.values.entropy = tape.scalar_value(h);
  g.values.total = tape.scalar_value(g.total);
  return g;
}

SplitPpoGraph ppo_objective(ad::Tape& policy_tape, const PolicyParams& policy, ad::Tape& critic_tape,
                            const PolicyParams& critic, std::span<const Trajectory> batch, const RLConfig& config) {
  PolicyTerms terms;
  std::vector<ad::Var> verr;
  for (const auto& tr : batch) {
    check_trajectory(tr);
    const auto fw = policy::teacher_forced(policy_tape, policy, tr.input_ids, tr.stimulus_ids);
    add_policy_terms(policy_tape, fw.logits, tr, config, terms);
    const auto cw = policy::teacher_forced(critic_tape, critic, tr.input_ids, tr.stimulus_ids);
    add_value_terms(critic_tape, cw.values, tr, verr);
  }
  if (terms.surr.empty()) throw std::invalid_argument("PPO batch has no tokens");
  const double inv = 1.0 / static_cast<double>(terms.surr.size());
  const ad::Var pl = policy_tape.scale(policy_tape.sum(terms.surr), inv);
  const ad::Var h = policy_tape.scale(policy_tape.sum(terms.ent), inv);
  const ad::Var vl = critic_tape.scale(critic_tape.sum(verr), inv);
  const ad::Var parts[] = {pl, policy_tape.scale(h, -config.ent_coef)};
  SplitPpoGraph g;
  g.total = policy_tape.sum(parts);
  g.critic_total = critic_tape.scale(vl, config.vf_coef);
  g.values.policy_loss = policy_tape.scalar_value(pl);
  g.values.value_loss = critic_tape.scalar_value(vl);
  g.values.entropy = policy_tape.scalar_value(h);
  g.values.total = policy_tape.scalar_value(g.total) + critic_tape.scalar_value(g.critic_total);
  return g;
}

// ---------------------------------------------------------------- rollouts

void finalize_trajectory(Trajectory& traj, double beta, std::span<const StepReward> stepwise,
                         const RLConfig& config) {
  traj.kl = 0.0;
  for (std::size_t t = 0; t < traj.length(); ++t) traj.kl += traj.logp_pi[t] - traj.logp_ref[t];
  traj.rewards = assemble_rewards(traj, traj.r_llm, beta, stepwise, config.reward_scale);
  auto gae = compute_gae(traj.rewards, traj.values, config.gamma, config.gae_lambda);
  traj.advantages = std::move(gae.advantages);
  traj.returns = std::move(gae.returns);
}

namespace {

Trajectory sample_episode(const RolloutContext& ctx, const RlInstance& inst, const RLConfig& config,
                          std::uint64_t seed) {
  const policy::PolicyModel live(*ctx.live, inst.input_ids);
  const policy::PolicyModel mask(ctx.masking->params, inst.input_ids);
  const policy::PolicyModel ref(*ctx.reference, inst.input_ids);
  std::optional<policy::PolicyModel> critic;
  std::optional<policy::PolicyModel::State> sc;
  if (ctx.critic != nullptr) {
    critic.emplace(*ctx.critic, inst.input_ids);
    sc = critic->initial_state();
  }
  auto sl = live.initial_state();
  auto sm = mask.initial_state();
  auto sr = ref.initial_state();
  Rng rng(seed);
  decoding::DecodeParams sampling;
  sampling.temperature = config.temperature;
  sampling.top_k = config.rollouts_top_k;

  Trajectory tr;
  tr.instance_id = inst.instance != nullptr ? inst.instance->id : std::string{};
  tr.input_ids = inst.input_ids;
  for (std::size_t t = 0; t < config.max_new_tokens; ++t) {
    auto p = live.next_distribution(sl);
    auto m = mask.next_distribution(sm);
    const bool blocked = t < config.min_len;
    if (blocked) {
      decoding::block_eos(p);
      decoding::block_eos(m);
    }
    auto md = nlpo_masked_distribution(m, p, config.top_mask_p);
    if (blocked) {
      auto& s = md.support;
      s.erase(std::remove(s.begin(), s.end(), special::kEos), s.end());
    }
    const auto q = decoding::sampling_distribution(md.probs, sampling);
    const TokenId tok = decoding::draw(q, rng);
    const auto r = ref.next_distribution(sr);
    tr.stimulus_ids.push_back(tok);
    tr.supports.push_back(std::move(md.support));
    tr.logp_pi.push_back(std::log(md.probs[static_cast<std::size_t>(tok)]));
    tr.logp_ref.push_back(std::log(r[static_cast<std::size_t>(tok)]));
    tr.values.push_back(critic ? critic->value(*sc) : live.value(sl));
    if (tok == special::kEos) break;
    sl = live.advance(sl, tok);
    if (critic) sc = critic->advance(*sc, tok);
    sm = mask.advance(sm, tok);
    sr = ref.advance(sr, tok);
  }
  tr.stimulus_text = ctx.vocab->decode_text(tr.stimulus_ids);
  return tr;
}

}  // namespace

std::vector<Trajectory> collect_rollouts(const RolloutContext& ctx, std::span<const RlInstance> batch,
                                         const RLConfig& config, double beta, std::uint64_t seed) {
  std::vector<Trajectory> out;
  std::size_t dropped = 0;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    Trajectory tr = sample_episode(ctx, batch[k], config, derive_seed(seed, k));
    tr.instance_index = k;
    try {
      tr.r_llm = ctx.scorer(batch[k], tr.stimulus_ids, tr.stimulus_text);
    } catch (const BackendError& e) {
      if (dynamic_cast<const CredentialError*>(&e) != nullptr) throw;
      ++dropped;
      spdlog::warn("dropping episode for '{}': {}", tr.instance_id, e.what());
      if (static_cast<double>(dropped) > 0.2 * static_cast<double>(batch.size())) {
        throw BackendUnavailableError("more than 20% of episodes dropped in a rollout batch");
      }
      continue;
    }
    std::vector<StepReward> steps;
    if (ctx.step_rewards) steps = ctx.step_rewards(batch[k], tr.stimulus_ids);
    finalize_trajectory(tr, beta, steps, config);
    out.push_back(std::move(tr));
  }
  return out;
}

nlohmann::json RlCurveRecord::to_json() const {
  return nlohmann::json{{"update_idx", update_idx},
                        {"episodes", episodes},
                        {"mean_reward", mean_reward},
                        {"mean_R_llm", mean_r_llm},
                        {"mean_kl", mean_kl},
                        {"beta", beta},
                        {"policy_loss", policy_loss},
                        {"value_loss", value_loss},
                        {"entropy", entropy},
                        {"validation_score", validation_score},
                        {"mask_staleness", mask_staleness}};
}

RlResult rl_train(const PolicyParams& sft, std::span<const RlInstance> train_set, const textkit::Vocab& vocab,
                  const EpisodeScorer& scorer, const StepRewardFn& step_rewards, const RLConfig& config,
                  std::uint64_t seed, const ValidationFn& validate, const UpdateCallback& on_update) {
  config.validate();
  if (train_set.empty()) throw ValidationError("RL training set is empty");
  if (!sft.all_finite()) throw NumericError("initial policy has non-finite parameters");
  const PolicyParams reference = sft;
  RlResult result{sft, {}, {}};
  PolicyParams& live = result.params;
  MaskingPolicy masking{sft, config.top_mask_p, 0};
  AdamW opt(live.tensors, config.weight_decay);
  AdaptiveKL kl(config.beta0, config.kl_target, config.k_beta);
  ad::ParameterSet grads = live.tensors.zeros_like();
  // The critic starts as a copy of the policy with its own optimizer.
  std::optional<PolicyParams> critic;
  std::optional<AdamW> critic_opt;
  ad::ParameterSet critic_grads;
  if (config.separate_critic) {
    critic.emplace(sft);
    critic_opt.emplace(critic->tensors, config.weight_decay);
    critic_grads = critic->tensors.zeros_like();
  }

  RolloutContext ctx{&live, &reference, &masking, critic ? &*critic : nullptr, &vocab, scorer, step_rewards};
  Rng order_rng(derive_seed(seed, 0x5eed));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  order_rng.shuffle(std::span<std::size_t>(order));
  std::size_t cursor = 0;

  for (std::size_t u = 0; u < config.updates(); ++u) {
    std::vector<RlInstance> batch;
    for (std::size_t e = 0; e < config.steps_per_update; ++e) {
      if (cursor == order.size()) {
        order_rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      batch.push_back(train_set[order[cursor++]]);
    }
    RlCurveRecord rec;
    rec.update_idx = u;
    rec.beta = kl.beta();
    rec.mask_staleness = masking.staleness;
    auto trajs = collect_rollouts(ctx, batch, config, kl.beta(), derive_seed(seed, 1, u));
    rec.episodes = trajs.size();
    for (const auto& t : trajs) {
      rec.mean_reward += std::accumulate(t.rewards.begin(), t.rewards.end(), 0.0);
      rec.mean_r_llm += t.r_llm;
      rec.mean_kl += t.kl;
    }
    const double n = static_cast<double>(std::max<std::size_t>(1, trajs.size()));
    rec.mean_reward /= n;
    rec.mean_r_llm /= n;
    rec.mean_kl /= n;
    standardize_advantages(trajs);

    std::vector<std::size_t> idx(trajs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::size_t minibatches = 0;
    for (std::size_t epoch = 0; epoch < config.epochs_per_update; ++epoch) {
      order_rng.shuffle(std::span<std::size_t>(idx));
      for (std::size_t start = 0; start < idx.size(); start += config.batch_size) {
        std::vector<Trajectory> mb;
        for (std::size_t i = start; i < std::min(idx.size(), start + config.batch_size); ++i) mb.push_back(trajs[idx[i]]);
        PpoLoss values;
        if (critic) {
          ad::Tape tape(&live.tensors);
          ad::Tape critic_tape(&critic->tensors);
          const SplitPpoGraph g = ppo_objective(tape, live, critic_tape, *critic, mb, config);
          values = g.values;
          if (std::isfinite(values.total)) {
            grads.set_zero();
            tape.backward(g.total, grads);
            critic_grads.set_zero();
            critic_tape.backward(g.critic_total, critic_grads);
          }
        } else {
          ad::Tape tape(&live.tensors);
          const PpoGraph g = ppo_objective(tape, live, mb, config);
          values = g.values;
          if (std::isfinite(values.total)) {
            grads.set_zero();
            tape.backward(g.total, grads);
          }
        }
        if (!std::isfinite(values.total)) {
          RlCurveRecord bad = rec;
          bad.policy_loss = values.policy_loss;
          bad.value_loss = values.value_loss;
          bad.entropy = values.entropy;
          throw NumericError("non-finite PPO loss: " + bad.to_json().dump());
        }
        clip_grad_norm(grads, config.max_grad_norm);
        opt.step(live.tensors, grads, config.learning_rate);
        if (critic) {
          clip_grad_norm(critic_grads, config.max_grad_norm);
          critic_opt->step(critic->tensors, critic_grads, config.learning_rate);
        }
        rec.policy_loss += values.policy_loss;
        rec.value_loss += values.value_loss;
        rec.entropy += values.entropy;
        ++minibatches;
      }
    }
    if (minibatches > 0) {
      rec.policy_loss /= static_cast<double>(minibatches);
      rec.value_loss /= static_cast<double>(minibatches);
      rec.entropy /= static_cast<double>(minibatches);
    }
    if (!live.all_finite()) throw NumericError("non-finite parameters after update: " + rec.to_json().dump());
    kl.update(rec.mean_kl);
    if (++masking.staleness >= config.mask_sync_iters) {
      masking.sync(live);
      result.mask_sync_updates.push_back(u);
    }
    if (validate) rec.validation_score = validate(live);
    result.curve.push_back(rec);
    if (on_update) on_update(rec);
  }
  return result;
}

}  // namespace dsp::train
