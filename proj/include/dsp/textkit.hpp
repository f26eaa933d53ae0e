#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace dsp {

using TokenId = std::int32_t;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
/// The ";" keyword separator inside rendered stimuli.
inline constexpr TokenId kSep = 4;
inline constexpr TokenId kCount = 5;
inline constexpr std::string_view kStrings[kCount] = {"<pad>", "<s>", "</s>", "<unk>", ";"};
}  // namespace special

namespace textkit {

struct Token {
  std::string text;
  std::size_t offset = 0;  // byte offset of the token's first char in the source
};

/// Lowercases and splits text into word, number, punctuation, and clitic tokens.
///
/// Rules, applied left to right over ASCII (bytes >= 0x80 count as word chars):
///   - whitespace separates tokens;
///   - letters, digits, '_' and non-ASCII bytes form words;
///   - a '.' or ',' between two digits stays inside the number ("108.6");
///   - an apostrophe followed by a clitic (s, t, d, m, re, ve, ll) and then a
///     non-word char starts a new token ("let's" -> "let", "'s");
///   - every other character is a standalone punctuation token.
std::vector<Token> tokenize_with_offsets(std::string_view text);

std::vector<std::string> tokenize_words(std::string_view text);

/// Joins tokens with single spaces.
std::string join_tokens(std::span<const std::string> tokens);

/// Joins tokens, attaching closing punctuation to the previous token and
/// opening brackets to the next one ("[ train ] x ." -> "[train] x.").
/// tokenize_words(detokenize(t)) == t for tokenizer output t.
std::string detokenize(std::span<const std::string> tokens);

/// True when the token has no letter or digit.
bool is_punctuation(std::string_view token);

/// Suffix stripper used by the simplified METEOR matcher.
///
/// Repeatedly strips one of "ing", "ed", "s" while the remaining stem keeps at
/// least three characters, so the result is a fixed point (idempotent).
std::string stem(std::string_view word);

class Vocab {
 public:
  /// A vocabulary holding only the five special tokens.
  Vocab();

  /// Rebuilds a vocabulary from an id-ordered token list whose first five
  /// entries are the special tokens.
  static Vocab from_tokens(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  /// Returns UNK for out-of-vocabulary tokens.
  TokenId id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(TokenId id) const;

  std::vector<TokenId> encode(std::span<const std::string> tokens) const;
  /// Maps ids back to token strings one-to-one (specials included).
  std::vector<std::string> decode(std::span<const TokenId> ids) const;

  /// Encodes text through tokenize_words.
  std::vector<TokenId> encode_text(std::string_view text) const;
  /// detokenize() over the ids; PAD, BOS and EOS are dropped, SEP renders as ";".
  std::string decode_text(std::span<const TokenId> ids) const;

  /// Hex SHA-256 over the id-ordered token list.
  std::string hash() const;

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  void append(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Frequency-ranked vocabulary: descending count, ties lexicographic,
/// truncated to max_size including the specials. Throws ConfigError when
/// max_size < special::kCount + 1.
Vocab build_vocab(std::span<const std::vector<std::string>> corpus, std::size_t max_size);

/// The built-in English stopword list.
const std::unordered_set<std::string>& default_stopwords();

/// Reads one lowercase word per line; blank lines and surrounding whitespace ignored.
std::unordered_set<std::string> load_stopwords(const std::filesystem::path& path);

struct RankedKeyword {
  std::string surface;
  double score = 0.0;
  std::size_t first_position = 0;  // byte offset of the first occurrence
};

struct TextRankParams {
  std::size_t window = 4;
  double damping = 0.85;
  std::size_t max_iters = 100;
  double tol = 1e-6;
};

/// Undirected, unweighted co-occurrence graph.
struct CooccurrenceGraph {
  std::vector<std::string> nodes;                 // in first-occurrence order
  std::vector<std::size_t> first_position;        // parallel to nodes
  std::vector<std::vector<std::size_t>> adjacency;  // sorted neighbor lists
};

/// Content tokens (non-stopword, non-punctuation) linked when they occur
/// fewer than `window` positions apart in the filtered token stream.
CooccurrenceGraph build_cooccurrence_graph(std::string_view text, std::size_t window,
                                           const std::unordered_set<std::string>& stopwords);

struct PageRankResult {
  std::vector<double> scores;
  /// Sum over nodes of |score change| for each iteration performed.
  std::vector<double> change_trace;
  std::size_t iterations = 0;
};

/// Synchronous iteration of score_i = (1-d) + d * sum_{j in adj(i)} score_j / deg(j),
/// starting from 1, until the max per-node change drops below tol.
PageRankResult pagerank(const std::vector<std::vector<std::size_t>>& adjacency, double damping,
                        std::size_t max_iters, double tol);

/// Keywords sorted by descending score, ties by first position.
std::vector<RankedKeyword> textrank_keywords(std::string_view text, const TextRankParams& params = {},
                                             const std::unordered_set<std::string>& stopwords =
                                                 default_stopwords());

}  // namespace textkit
}  // namespace dsp
