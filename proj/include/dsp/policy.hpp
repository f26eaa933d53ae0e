#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsp/autodiff.hpp"
#include "dsp/decoding.hpp"
#include "dsp/textkit.hpp"

namespace dsp::policy {

using ad::Matrix;
using ad::Vector;
using textkit::Vocab;

struct PolicyDims {
  std::size_t vocab = 0;
  std::size_t d = 64;   // embedding width
  std::size_t h = 128;  // hidden width
};

/// Indices of the named tensors inside PolicyParams::tensors.
struct TensorIndex {
  std::size_t embedding;
  std::size_t enc_Wz, enc_Uz, enc_bz, enc_Wr, enc_Ur, enc_br, enc_Wn, enc_Un, enc_bn;
  std::size_t dec_Wz, dec_Uz, dec_bz, dec_Wr, dec_Ur, dec_br, dec_Wn, dec_Un, dec_bn;
  std::size_t att_We, att_Wd, att_v;
  std::size_t comb_W, comb_b;
  std::size_t out_W, out_b;
  std::size_t value_w, value_b;
};

/// GRU encoder, GRU decoder with additive attention, vocabulary projection
/// and a linear value head reading the decoder state.
struct PolicyParams {
  PolicyDims dims;
  ad::ParameterSet tensors;
  TensorIndex idx{};

  /// All tensors zero, no range checks on the dimensions.
  static PolicyParams allocate(PolicyDims dims);

  Matrix& at(std::size_t i) { return tensors.value(i); }
  const Matrix& at(std::size_t i) const { return tensors.value(i); }
  bool all_finite() const { return tensors.all_finite(); }
};

/// Uniform(-1/sqrt(h), 1/sqrt(h)) everywhere except the zeroed value head.
/// Throws ConfigError unless d, h >= 8 and the vocabulary holds the specials.
PolicyParams init_params(const Vocab& vocab, std::size_t d, std::size_t h, std::uint64_t seed);
PolicyParams init_params(std::size_t vocab_size, std::size_t d, std::size_t h, std::uint64_t seed);

/// Read-only inference view for one input sequence; satisfies
/// decoding::StepModel. The decoder state starts after consuming BOS.
class PolicyModel {
 public:
  struct State {
    Vector s;
  };

  /// Throws ValidationError for ids outside the vocabulary.
  PolicyModel(const PolicyParams& params, std::span<const TokenId> input_ids);

  std::size_t vocab_size() const noexcept { return params_->dims.vocab; }
  State initial_state() const;
  decoding::Distribution next_distribution(const State& state) const;
  State advance(const State& state, TokenId token) const;
  double value(const State& state) const;

  /// Pre-softmax scores for the next token.
  Vector logits(const State& state) const;
  /// State after feeding `prefix` (without BOS).
  State state_after(std::span<const TokenId> prefix) const;
  const Matrix& encoder_states() const noexcept { return enc_; }

 private:
  const PolicyParams* params_;
  Matrix enc_;       // h x n, one column per input position (EOS appended)
  Matrix enc_proj_;  // att_We * enc_
};

static_assert(decoding::StepModel<PolicyModel>);

/// One GRU step, exposed for hand-computed oracles.
Vector gru_step(const PolicyParams& p, bool decoder, const Vector& x, const Vector& hprev);

decoding::Distribution next_token_distribution(const PolicyParams& params, std::span<const TokenId> input_ids,
                                               std::span<const TokenId> prefix_ids);

double state_value(const PolicyParams& params, std::span<const TokenId> input_ids,
                   std::span<const TokenId> prefix_ids);

struct SequenceLogprob {
  std::vector<double> per_token;
  double total = 0.0;
};

/// Full-distribution log-probabilities of each stimulus token given the true prefix.
SequenceLogprob sequence_logprob(const PolicyParams& params, std::span<const TokenId> input_ids,
                                 std::span<const TokenId> stimulus_ids);

struct SampledStimulus {
  std::vector<TokenId> ids;
  std::vector<double> logprobs;
  std::vector<double> values;
  std::string text;
  bool finished = false;
};

/// Sample or greedy decoding (beam mode dispatches to beam_decode).
SampledStimulus sample_stimulus(const PolicyParams& params, const Vocab& vocab, std::span<const TokenId> input_ids,
                                const decoding::DecodeParams& decode, std::uint64_t rng_seed);

SampledStimulus beam_decode(const PolicyParams& params, const Vocab& vocab, std::span<const TokenId> input_ids,
                            std::size_t beam_size, std::size_t max_new_tokens, std::size_t min_len = 0);

// ---------------------------------------------------------------- tape path

/// Differentiable teacher-forced pass: logits[t] scores targets[t] given
/// targets[<t]; values[t] is the value estimate of that same state.
struct TapeForward {
  std::vector<ad::Var> logits;
  std::vector<ad::Var> values;
};

/// `tape` must be bound to params.tensors.
TapeForward teacher_forced(ad::Tape& tape, const PolicyParams& params, std::span<const TokenId> input_ids,
                           std::span<const TokenId> targets);

// ---------------------------------------------------------------- checkpoints

struct CheckpointMeta {
  std::uint64_t step = 0;
  std::string stage;  // "sft" or "rl"
  std::string config_hash;
  nlohmann::json metrics = nlohmann::json::object();
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes `<path>` (binary, float32 LE row-major) and `<path>.json` metadata.
void save_checkpoint(const std::filesystem::path& path, const PolicyParams& params, const Vocab& vocab,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  PolicyParams params;
  CheckpointMeta meta;
};

/// Throws ValidationError for a bad magic/version, truncated data, or a
/// vocabulary hash different from `vocab`'s.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const Vocab& vocab);

/// 64-bit prefix of Vocab::hash(), stored in checkpoint headers.
std::uint64_t vocab_hash64(const Vocab& vocab);

}  // namespace dsp::policy
