#include "dsp/decoding.hpp"

#include <stdexcept>

namespace dsp::decoding {

void DecodeParams::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("decode temperature must be positive");
  if (top_k && *top_k == 0) throw ConfigError("decode top_k must be at least 1");
  if (top_p && !(*top_p > 0.0 && *top_p <= 1.0)) throw ConfigError("decode top_p must lie in (0, 1]");
  if (mode == Mode::kBeam && beam_size == 0) throw ConfigError("beam_size must be at least 1");
  if (max_new_tokens == 0) throw ConfigError("max_new_tokens must be at least 1");
  if (min_len > max_new_tokens) throw ConfigError("min_len must not exceed max_new_tokens");
}

void renormalize(Distribution& p) {
  double z = 0.0;
  for (double x : p) z += x;
  if (!(z > 0.0)) throw std::logic_error("distribution has no probability mass left");
  for (double& x : p) x /= z;
}

void block_eos(Distribution& p, TokenId eos) {
  if (static_cast<std::size_t>(eos) < p.size()) p[static_cast<std::size_t>(eos)] = 0.0;
  renormalize(p);
}

void apply_temperature(Distribution& p, double temperature) {
  if (temperature == 1.0) return;
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : p) {
    if (x > 0.0) mx = std::max(mx, std::log(x));
  }
  for (double& x : p) x = x > 0.0 ? std::exp((std::log(x) - mx) / temperature) : 0.0;
  renormalize(p);
}

std::vector<TokenId> rank_tokens(const Distribution& p) {
  std::vector<TokenId> ids(p.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&p](TokenId a, TokenId b) {
    return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)];
  });
  return ids;
}

std::vector<TokenId> top_k_support(const Distribution& p, std::size_t k) {
  auto ranked = rank_tokens(p);
  if (k < ranked.size()) ranked.resize(k);
  std::sort(ranked.begin(), ranked.end());
  return ranked;
}

std::vector<TokenId> nucleus_support(const Distribution& p, double top_p) {
  auto ranked = rank_tokens(p);
  if (top_p >= 1.0) {
    std::sort(ranked.begin(), ranked.end());
    return ranked;
  }
  std::vector<TokenId> kept;
  double cumulative = 0.0;
  for (TokenId id : ranked) {
    kept.push_back(id);
    cumulative += p[static_cast<std::size_t>(id)];
    if (cumulative >= top_p) break;
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

void restrict_to(Distribution& p, std::span<const TokenId> support) {
  Distribution out(p.size(), 0.0);
  for (TokenId id : support) out[static_cast<std::size_t>(id)] = p[static_cast<std::size_t>(id)];
  renormalize(out);
  p = std::move(out);
}

Distribution sampling_distribution(Distribution p, const DecodeParams& params) {
  apply_temperature(p, params.temperature);
  if (params.top_k && *params.top_k < p.size()) restrict_to(p, top_k_support(p, *params.top_k));
  if (params.top_p && *params.top_p < 1.0) restrict_to(p, nucleus_support(p, *params.top_p));
  return p;
}

TokenId argmax(const Distribution& p) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] > p[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

TokenId draw(const Distribution& p, Rng& rng) {
  const double u = rng.uniform01();
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    last_positive = i;
    cumulative += p[i];
    if (u < cumulative) return static_cast<TokenId>(i);
  }
  // Rounding left u above the final cumulative sum.
  return static_cast<TokenId>(last_positive);
}

double length_normalized_score(const DecodedSequence& seq) {
  if (seq.logprobs.empty()) return 0.0;
  double total = 0.0;
  for (double lp : seq.logprobs) total += lp;
  return total / static_cast<double>(seq.logprobs.size());
}

}  // namespace dsp::decoding
