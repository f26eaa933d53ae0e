#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsp/autodiff.hpp"
#include "dsp/corpus.hpp"
#include "dsp/decoding.hpp"
#include "dsp/policy.hpp"

namespace dsp::train {

using policy::PolicyParams;

enum class LrSchedule { kConstant, kLinear };
LrSchedule parse_lr_schedule(std::string_view name);
std::string_view to_string(LrSchedule s);

/// Decoupled weight decay Adam.
class AdamW {
 public:
  AdamW(const ad::ParameterSet& like, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  /// One update with learning rate `lr`; gradients must be congruent.
  void step(ad::ParameterSet& params, const ad::ParameterSet& grads, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  ad::ParameterSet m_, v_;
  double weight_decay_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Rescales grads in place so their global L2 norm is at most max_norm
/// (no-op for max_norm <= 0). Returns the norm before clipping.
double clip_grad_norm(ad::ParameterSet& grads, double max_norm);

/// lr for optimizer step `step` (0-based) out of `total`.
double scheduled_lr(double base, LrSchedule schedule, std::size_t step, std::size_t total);

// ---------------------------------------------------------------- SFT

struct SFTConfig {
  std::size_t epochs = 5;
  double learning_rate = 2e-5;
  std::size_t batch_size = 8;
  double weight_decay = 0.01;
  LrSchedule lr_schedule = LrSchedule::kLinear;
  double max_grad_norm = 0.0;  // 0 disables clipping

  void validate() const;
};

struct SftExample {
  std::string id;
  std::vector<TokenId> input;
  std::vector<TokenId> target;  // ends with EOS
};

/// Encodes sft_input_text(x) and the pseudo-stimulus; throws ValidationError
/// for instances without a non-empty pseudo_stimulus. Inputs longer than
/// max_input_tokens keep their first tokens.
std::vector<SftExample> make_sft_examples(const corpus::Dataset& data, const textkit::Vocab& vocab,
                                          std::size_t max_input_tokens = 512);

/// Mean token NLL of the batch; adds its gradient to `grads` when given.
double sft_loss(const PolicyParams& params, std::span<const SftExample> batch, ad::ParameterSet* grads);

struct SftResult {
  PolicyParams params;
  std::vector<double> epoch_loss;  // token-weighted mean over each epoch
};

using SftEpochCallback = std::function<void(std::size_t epoch, double loss)>;

/// Throws NumericError naming the offending batch when the loss is not finite.
SftResult sft_train(PolicyParams params, std::span<const SftExample> data, const SFTConfig& config,
                    std::uint64_t seed, const SftEpochCallback& on_epoch = {});

// ---------------------------------------------------------------- RL types

struct RLConfig {
  std::size_t total_steps = 51200;
  std::size_t steps_per_update = 5120;
  std::size_t batch_size = 8;
  std::size_t epochs_per_update = 5;
  double learning_rate = 2e-6;
  double clip_ratio = 0.2;
  double vf_coef = 0.5;
  double ent_coef = 0.0;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double kl_target = 0.5;
  double beta0 = 0.005;
  double k_beta = 0.1;
  double top_mask_p = 0.9;
  std::size_t rollouts_top_k = 100;
  std::size_t mask_sync_iters = 20;
  std::size_t n_llm_samples = 4;
  double reward_scale = 1.0;
  double temperature = 0.7;
  std::size_t min_len = 0;
  std::size_t max_new_tokens = 80;
  bool stepwise_reward = false;
  double weight_decay = 0.0;
  double max_grad_norm = 0.0;
  bool separate_critic = true;  // value estimates from a copy of the policy instead of the shared trunk

  void validate() const;
  std::size_t updates() const;
};

class AdaptiveKL {
 public:
  AdaptiveKL(double beta0, double kl_target, double k_beta);

  /// e = clip((observed - target) / target, -0.2, 0.2); beta *= 1 + k_beta * e.
  double update(double observed_kl);
  double beta() const noexcept { return beta_; }
  double kl_target() const noexcept { return kl_target_; }
  double k_beta() const noexcept { return k_beta_; }

 private:
  double beta_, kl_target_, k_beta_;
};

/// Stateless form of AdaptiveKL::update.
double adapt_kl(double beta, double kl_target, double k_beta, double observed_kl);

struct Trajectory {
  std::string instance_id;
  std::size_t instance_index = 0;
  std::vector<TokenId> input_ids;
  std::vector<TokenId> stimulus_ids;
  std::vector<std::vector<TokenId>> supports;  // masking nucleus per step, ascending ids
  std::vector<double> logp_pi;   // under the masked live policy at rollout time
  std::vector<double> logp_ref;  // under the frozen reference, full distribution
  std::vector<double> values;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<double> returns;
  double r_llm = 0.0;
  double kl = 0.0;  // sum of logp_pi - logp_ref
  std::string stimulus_text;

  std::size_t length() const noexcept { return stimulus_ids.size(); }
};

/// Frozen policy snapshot whose nucleus restricts the live policy's actions.
struct MaskingPolicy {
  PolicyParams params;
  double top_mask_p = 0.9;
  std::size_t staleness = 0;  // updates since the last sync

  void sync(const PolicyParams& live);
};

struct MaskedDistribution {
  decoding::Distribution probs;
  std::vector<TokenId> support;  // ascending
};

/// Live distribution restricted to the top_mask_p nucleus of the masking
/// distribution and renormalized; a point mass on the masking argmax when the
/// live policy has no mass there.
MaskedDistribution nlpo_masked_distribution(const decoding::Distribution& masking_dist,
                                            const decoding::Distribution& live_dist, double top_mask_p);

struct StepReward {
  std::size_t position;
  double reward;
};

/// +1 for each keyword found among the reference's tokens, -0.2 otherwise,
/// placed on the keyword's closing ";" (or EOS / last token for the final one).
/// `stimulus_tokens` are token strings as produced by Vocab::decode.
std::vector<StepReward> stepwise_keyword_rewards(std::span<const std::string> stimulus_tokens,
                                                 std::string_view reference_summary);

/// -beta * (logp_pi - logp_ref) per token, plus step rewards at their
/// positions, plus reward_scale * r_llm on the last token.
std::vector<double> assemble_rewards(const Trajectory& traj, double r_llm, double beta,
                                     std::span<const StepReward> stepwise, double reward_scale);

struct Gae {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// Terminal episode (bootstrap value 0).
Gae compute_gae(std::span<const double> rewards, std::span<const double> values, double gamma, double lambda);

/// Standardizes advantages over every token of the batch (eps 1e-8).
void standardize_advantages(std::span<Trajectory> batch, double eps = 1e-8);

struct PpoLoss {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double total = 0.0;
};

/// Scalar PPO objective from already-computed per-token quantities
/// (means over all tokens of the batch). Throws NumericError naming the
/// trajectory when a ratio is not finite.
PpoLoss ppo_loss(std::span<const Trajectory> batch, const std::vector<std::vector<double>>& new_logp,
                 const std::vector<std::vector<double>>& new_values, double mean_entropy, const RLConfig& config);

/// Builds the same objective on a tape (masked log-probabilities and entropy
/// over each step's stored support) and returns its scalar node.
struct PpoGraph {
  ad::Var total;
  PpoLoss values;
};
PpoGraph ppo_objective(ad::Tape& tape, const PolicyParams& params, std::span<const Trajectory> batch,
                       const RLConfig& config);

/// Separate-critic form: `total` on policy_tape holds the policy and entropy
/// terms, `critic_total` on critic_tape the weighted value loss. values.total
/// still reports the full objective.
struct SplitPpoGraph {
  ad::Var total;
  ad::Var critic_total;
  PpoLoss values;
};
SplitPpoGraph ppo_objective(ad::Tape& policy_tape, const PolicyParams& policy, ad::Tape& critic_tape,
                            const PolicyParams& critic, std::span<const Trajectory> batch, const RLConfig& config);

// ---------------------------------------------------------------- rollouts

struct RlInstance {
  const corpus::Instance* instance = nullptr;
  std::vector<TokenId> input_ids;
};

/// Computes R_LLM for a sampled stimulus (e.g. prompt + backend + reward).
/// May throw BackendError; the episode is then dropped.
using EpisodeScorer =
    std::function<double(const RlInstance& inst, std::span<const TokenId> stimulus_ids, const std::string& text)>;

/// Token-level step rewards for an episode (empty when unused).
using StepRewardFn =
    std::function<std::vector<StepReward>(const RlInstance& inst, std::span<const TokenId> stimulus_ids)>;

struct RolloutContext {
  const PolicyParams* live = nullptr;
  const PolicyParams* reference = nullptr;
  const MaskingPolicy* masking = nullptr;
  const PolicyParams* critic = nullptr;  // null: the live policy's own value head
  const textkit::Vocab* vocab = nullptr;
  EpisodeScorer scorer;
  StepRewardFn step_rewards;
};

/// Samples one masked stimulus per instance (seeded by derive_seed(seed, k)),
/// scores it, and fills rewards and GAE (advantages not yet standardized).
/// Throws BackendUnavailableError when more than 20% of episodes are dropped.
std::vector<Trajectory> collect_rollouts(const RolloutContext& ctx, std::span<const RlInstance> batch,
                                         const RLConfig& config, double beta, std::uint64_t seed);

/// Fills rewards/advantages/returns of a trajectory whose logprobs and values are set.
void finalize_trajectory(Trajectory& traj, double beta, std::span<const StepReward> stepwise,
                         const RLConfig& config);

struct RlCurveRecord {
  std::size_t update_idx = 0;
  std::size_t episodes = 0;
  double mean_reward = 0.0;  // mean summed shaped reward per episode
  double mean_r_llm = 0.0;
  double mean_kl = 0.0;
  double beta = 0.0;  // coefficient used for this update's rewards
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double validation_score = 0.0;
  std::size_t mask_staleness = 0;  // staleness of the masking snapshot used for the rollouts

  nlohmann::json to_json() const;
};

struct RlResult {
  PolicyParams params;
  std::vector<RlCurveRecord> curve;
  std::vector<std::size_t> mask_sync_updates;  // update indices after which the mask was refreshed
};

using ValidationFn = std::function<double(const PolicyParams&)>;
using UpdateCallback = std::function<void(const RlCurveRecord&)>;

/// NLPO training: the reference policy is a deep copy of `sft` taken before
/// the first update. Throws NumericError with the full record on a non-finite loss.
RlResult rl_train(const PolicyParams& sft, std::span<const RlInstance> train_set, const textkit::Vocab& vocab,
                  const EpisodeScorer& scorer, const StepRewardFn& step_rewards, const RLConfig& config,
                  std::uint64_t seed, const ValidationFn& validate = {}, const UpdateCallback& on_update = {});

}  // namespace dsp::train
