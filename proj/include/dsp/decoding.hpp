#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsp/errors.hpp"
#include "dsp/rng.hpp"
#include "dsp/textkit.hpp"

namespace dsp::decoding {

using Distribution = std::vector<double>;

enum class Mode { kSample, kGreedy, kBeam };

struct DecodeParams {
  Mode mode = Mode::kSample;
  double temperature = 0.7;
  std::optional<std::size_t> top_k;
  std::optional<double> top_p;
  std::size_t beam_size = 5;
  std::size_t min_len = 0;
  std::size_t max_new_tokens = 80;

  /// Throws ConfigError when fields are out of range.
  void validate() const;
};

/// Autoregressive next-token model over an opaque decoder state.
template <class M>
concept StepModel = requires(const M& m, const typename M::State& s, TokenId t) {
  { m.vocab_size() } -> std::convertible_to<std::size_t>;
  { m.initial_state() } -> std::same_as<typename M::State>;
  { m.next_distribution(s) } -> std::same_as<Distribution>;
  { m.advance(s, t) } -> std::same_as<typename M::State>;
  { m.value(s) } -> std::convertible_to<double>;
};

// ---------------------------------------------------------------- truncation

/// Scales by 1/sum. Throws std::logic_error when no mass is left.
void renormalize(Distribution& p);

/// Zeroes EOS and renormalizes (used until min_len tokens have been emitted).
void block_eos(Distribution& p, TokenId eos = special::kEos);

/// p_i^(1/T) renormalized, computed in log space.
void apply_temperature(Distribution& p, double temperature);

/// Ids ordered by descending probability, ties by ascending id.
std::vector<TokenId> rank_tokens(const Distribution& p);

/// The k most probable ids (ties by lower id), sorted ascending.
std::vector<TokenId> top_k_support(const Distribution& p, std::size_t k);

/// Smallest prefix of rank_tokens(p) whose cumulative mass reaches top_p,
/// sorted ascending; top_p >= 1 keeps every id.
std::vector<TokenId> nucleus_support(const Distribution& p, double top_p);

/// Zeroes entries outside `support` (ascending ids) and renormalizes.
void restrict_to(Distribution& p, std::span<const TokenId> support);

/// Temperature, then top-k, then top-p, then renormalize.
Distribution sampling_distribution(Distribution p, const DecodeParams& params);

TokenId argmax(const Distribution& p);

/// Inverse-CDF draw over ids in ascending order.
TokenId draw(const Distribution& p, Rng& rng);

// ---------------------------------------------------------------- decoding

struct DecodedSequence {
  std::vector<TokenId> ids;  // ends with EOS unless truncated at max_new_tokens
  std::vector<double> logprobs;  // under the distribution actually sampled from
  std::vector<double> values;
  bool finished = false;  // EOS emitted
};

/// Applies min_len EOS blocking at step t, then `transform`, then samples
/// (or takes the argmax in greedy mode). `transform(step, state, dist)` may
/// rewrite the distribution before temperature/top-k/top-p are applied.
template <StepModel M, class Transform>
DecodedSequence sample_with(const M& model, const DecodeParams& params, Rng& rng, Transform&& transform) {
  params.validate();
  DecodedSequence out;
  auto state = model.initial_state();
  for (std::size_t t = 0; t < params.max_new_tokens; ++t) {
    Distribution p = model.next_distribution(state);
    if (t < params.min_len) block_eos(p);
    transform(t, state, p);
    TokenId tok;
    Distribution q;
    if (params.mode == Mode::kGreedy) {
      q = std::move(p);
      tok = argmax(q);
      out.logprobs.push_back(std::log(q[static_cast<std::size_t>(tok)]));
    } else {
      q = sampling_distribution(std::move(p), params);
      tok = draw(q, rng);
      out.logprobs.push_back(std::log(q[static_cast<std::size_t>(tok)]));
    }
    out.values.push_back(model.value(state));
    out.ids.push_back(tok);
    if (tok == special::kEos) {
      out.finished = true;
      break;
    }
    state = model.advance(state, tok);
  }
  return out;
}

template <StepModel M>
DecodedSequence sample(const M& model, const DecodeParams& params, Rng& rng) {
  return sample_with(model, params, rng, [](std::size_t, const auto&, Distribution&) {});
}

template <StepModel M>
DecodedSequence greedy(const M& model, std::size_t max_new_tokens, std::size_t min_len = 0) {
  DecodeParams params;
  params.mode = Mode::kGreedy;
  params.max_new_tokens = max_new_tokens;
  params.min_len = min_len;
  Rng unused(0);
  return sample(model, params, unused);
}

/// Beam search with length-normalized (mean log-probability) scoring.
///
/// Each step expands every live hypothesis by every token, keeps the
/// beam_size best candidates by cumulative log-probability (ties: the
/// lexicographically smaller id sequence), and retires those ending in EOS.
/// Hypotheses alive at max_new_tokens are retired unfinished. The best retired
/// hypothesis by mean log-probability is returned, ties again lexicographic.
template <StepModel M>
DecodedSequence beam_search(const M& model, std::size_t beam_size, std::size_t max_new_tokens,
                            std::size_t min_len = 0) {
  if (beam_size == 0) throw ConfigError("beam_size must be at least 1");
  if (max_new_tokens == 0) throw ConfigError("max_new_tokens must be at least 1");
  using State = typename M::State;
  struct Hyp {
    std::vector<TokenId> ids;
    std::vector<double> logprobs;
    std::vector<double> values;
    double total = 0.0;
    State state;
    bool finished = false;
  };
  auto lex_less = [](const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
  };

  std::vector<Hyp> live;
  live.push_back(Hyp{{}, {}, {}, 0.0, model.initial_state(), false});
  std::vector<Hyp> done;

  for (std::size_t t = 0; t < max_new_tokens && !live.empty(); ++t) {
    struct Cand {
      std::size_t parent;
      TokenId tok;
      double total;
      double logp;
    };
    std::vector<Cand> cands;
    std::vector<double> parent_values;
    for (std::size_t h = 0; h < live.size(); ++h) {
      Distribution p = model.next_distribution(live[h].state);
      if (t < min_len) block_eos(p);
      parent_values.push_back(model.value(live[h].state));
      for (std::size_t v = 0; v < p.size(); ++v) {
        if (p[v] <= 0.0) continue;
        const double lp = std::log(p[v]);
        cands.push_back({h, static_cast<TokenId>(v), live[h].total + lp, lp});
      }
    }
    const std::size_t keep = std::min(beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [&](const Cand& a, const Cand& b) {
                        if (a.total != b.total) return a.total > b.total;
                        // Same-length prefixes: compare parent sequence, then token.
                        const auto& pa = live[a.parent].ids;
                        const auto& pb = live[b.parent].ids;
                        if (pa != pb) return lex_less(pa, pb);
                        return a.tok < b.tok;
                      });
    std::vector<Hyp> next;
    for (std::size_t c = 0; c < keep; ++c) {
      const Cand& cand = cands[c];
      const Hyp& parent = live[cand.parent];
      Hyp h;
      h.ids = parent.ids;
      h.ids.push_back(cand.tok);
      h.logprobs = parent.logprobs;
      h.logprobs.push_back(cand.logp);
      h.values = parent.values;
      h.values.push_back(parent_values[cand.parent]);
      h.total = cand.total;
      if (cand.tok == special::kEos) {
        h.state = parent.state;
        h.finished = true;
        done.push_back(std::move(h));
      } else {
        h.state = model.advance(parent.state, cand.tok);
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }
  for (auto& h : live) done.push_back(std::move(h));

  auto score = [](const Hyp& h) { return h.total / static_cast<double>(h.ids.size()); };
  const Hyp* best = nullptr;
  for (const auto& h : done) {
    if (best == nullptr || score(h) > score(*best) || (score(h) == score(*best) && lex_less(h.ids, best->ids))) {
      best = &h;
    }
  }
  DecodedSequence out;
  out.ids = best->ids;
  out.logprobs = best->logprobs;
  out.values = best->values;
  out.finished = best->finished;
  return out;
}

/// Mean log-probability of a decoded sequence (beam search's ranking score).
double length_normalized_score(const DecodedSequence& seq);

}  // namespace dsp::decoding
