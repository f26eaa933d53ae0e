#include "dsp/textkit.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "dsp/errors.hpp"
#include "dsp/hashing.hpp"

namespace dsp::textkit {

extern const char* const kBuiltinStopwords;  // generated from data/stopwords.txt

namespace {

bool is_word_byte(unsigned char c) {
  return std::isalnum(c) != 0 || c == '_' || c >= 0x80;
}

bool is_space_byte(unsigned char c) { return std::isspace(c) != 0; }

// Length of the clitic starting right after an apostrophe at `pos`, or 0.
std::size_t clitic_length(std::string_view text, std::size_t pos) {
  static constexpr std::array<std::string_view, 7> kClitics = {"ll", "re", "ve", "s", "t", "d", "m"};
  const std::size_t start = pos + 1;
  for (std::string_view clitic : kClitics) {
    if (start + clitic.size() > text.size()) continue;
    bool match = true;
    for (std::size_t i = 0; i < clitic.size(); ++i) {
      if (std::tolower(static_cast<unsigned char>(text[start + i])) != clitic[i]) {
        match = false;
        break;
      }
    }
    if (!match) continue;
    const std::size_t end = start + clitic.size();
    if (end == text.size() || !is_word_byte(static_cast<unsigned char>(text[end]))) {
      return clitic.size();
    }
  }
  return 0;
}

std::string lowercase(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool is_apostrophe(char c) { return c == '\''; }

}  // namespace

std::vector<Token> tokenize_with_offsets(std::string_view text) {
  std::vector<Token> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_space_byte(c)) {
      ++i;
      continue;
    }
    if (is_word_byte(c)) {
      std::size_t j = i;
      while (j < n) {
        const auto cj = static_cast<unsigned char>(text[j]);
        if (is_word_byte(cj)) {
          ++j;
          continue;
        }
        if ((cj == '.' || cj == ',') && j > i && j + 1 < n &&
            std::isdigit(static_cast<unsigned char>(text[j - 1])) != 0 &&
            std::isdigit(static_cast<unsigned char>(text[j + 1])) != 0) {
          ++j;
          continue;
        }
        break;
      }
      out.push_back({lowercase(text.substr(i, j - i)), i});
      i = j;
      continue;
    }
    if (is_apostrophe(text[i])) {
      if (const std::size_t len = clitic_length(text, i); len > 0) {
        out.push_back({lowercase(text.substr(i, len + 1)), i});
        i += len + 1;
        continue;
      }
    }
    out.push_back({std::string(1, static_cast<char>(c)), i});
    ++i;
  }
  return out;
}

std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> out;
  for (auto& token : tokenize_with_offsets(text)) out.push_back(std::move(token.text));
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

std::string detokenize(std::span<const std::string> tokens) {
  auto closes = [](const std::string& t) { return t.size() == 1 && std::string_view(")]},.;:?!%").find(t[0]) != std::string_view::npos; };
  auto opens = [](const std::string& t) { return t == "(" || t == "[" || t == "{"; };
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0 && !closes(tokens[i]) && !opens(tokens[i - 1])) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

bool is_punctuation(std::string_view token) {
  return std::none_of(token.begin(), token.end(),
                      [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; });
}

std::string stem(std::string_view word) {
  static constexpr std::array<std::string_view, 3> kSuffixes = {"ing", "ed", "s"};
  constexpr std::size_t kMinStem = 3;
  std::string current(word);
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::string_view suffix : kSuffixes) {
      if (current.size() >= suffix.size() + kMinStem && current.ends_with(suffix)) {
        current.resize(current.size() - suffix.size());
        changed = true;
        break;
      }
    }
  }
  return current;
}

// ---------------------------------------------------------------- Vocab

namespace {
const std::array<std::string, special::kCount> kSpecialTokens = {"<pad>", "<s>", "</s>", "<unk>", ";"};
}

Vocab::Vocab() {
  for (const auto& t : kSpecialTokens) append(t);
}

void Vocab::append(std::string token) {
  const auto id = static_cast<TokenId>(tokens_.size());
  index_.emplace(token, id);
  tokens_.push_back(std::move(token));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < special::kCount) {
    throw ValidationError("vocabulary must start with the special tokens");
  }
  for (std::size_t i = 0; i < special::kCount; ++i) {
    if (tokens[i] != kSpecialTokens[i]) {
      throw ValidationError("vocabulary special token " + std::to_string(i) + " is '" + tokens[i] +
                            "', expected '" + kSpecialTokens[i] + "'");
    }
  }
  Vocab v;
  for (std::size_t i = special::kCount; i < tokens.size(); ++i) {
    if (v.contains(tokens[i])) throw ValidationError("duplicate vocabulary token '" + tokens[i] + "'");
    v.append(std::move(tokens[i]));
  }
  return v;
}

TokenId Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? special::kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.contains(std::string(token)); }

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ValidationError("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocab::encode(std::span<const std::string> tokens) const {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocab::decode(std::span<const TokenId> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (TokenId i : ids) out.push_back(token(i));
  return out;
}

std::vector<TokenId> Vocab::encode_text(std::string_view text) const {
  const auto tokens = tokenize_words(text);
  return encode(tokens);
}

std::string Vocab::decode_text(std::span<const TokenId> ids) const {
  std::vector<std::string> parts;
  for (TokenId i : ids) {
    if (i == special::kPad || i == special::kBos || i == special::kEos) continue;
    parts.push_back(token(i));
  }
  return detokenize(parts);
}

std::string Vocab::hash() const {
  std::string joined;
  for (const auto& t : tokens_) {
    joined += t;
    joined.push_back('\n');
  }
  return sha256_hex(joined);
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return from_tokens(std::move(tokens));
}

Vocab build_vocab(std::span<const std::vector<std::string>> corpus, std::size_t max_size) {
  if (max_size < special::kCount + 1) {
    throw ConfigError("vocabulary max_size must be at least " + std::to_string(special::kCount + 1));
  }
  std::map<std::string, std::size_t> counts;
  const Vocab specials;
  for (const auto& doc : corpus) {
    for (const auto& t : doc) {
      if (specials.contains(t)) continue;
      ++counts[t];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // counts is already lexicographic, so a stable sort on count keeps the tie order.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens(specials.tokens());
  for (auto& [token, count] : ranked) {
    if (tokens.size() >= max_size) break;
    tokens.push_back(token);
  }
  return Vocab::from_tokens(std::move(tokens));
}

// ---------------------------------------------------------------- stopwords

namespace {
std::unordered_set<std::string> parse_word_lines(std::istream& in) {
  std::unordered_set<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    words.insert(lowercase(std::string_view(line).substr(b, e - b + 1)));
  }
  return words;
}
}  // namespace

const std::unordered_set<std::string>& default_stopwords() {
  static const std::unordered_set<std::string> words = [] {
    std::istringstream in(kBuiltinStopwords);
    return parse_word_lines(in);
  }();
  return words;
}

std::unordered_set<std::string> load_stopwords(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read stopword file " + path.string());
  return parse_word_lines(in);
}

// ---------------------------------------------------------------- TextRank

CooccurrenceGraph build_cooccurrence_graph(std::string_view text, std::size_t window,
                                           const std::unordered_set<std::string>& stopwords) {
  if (window < 2) throw ConfigError("textrank window must be at least 2");
  CooccurrenceGraph graph;
  std::unordered_map<std::string, std::size_t> node_of;
  std::vector<std::size_t> stream;
  for (auto& token : tokenize_with_offsets(text)) {
    if (is_punctuation(token.text) || stopwords.contains(token.text)) continue;
    auto [it, inserted] = node_of.emplace(token.text, graph.nodes.size());
    if (inserted) {
      graph.nodes.push_back(token.text);
      graph.first_position.push_back(token.offset);
    }
    stream.push_back(it->second);
  }
  std::vector<std::vector<char>> linked(graph.nodes.size(), std::vector<char>(graph.nodes.size(), 0));
  for (std::size_t i = 0; i < stream.size(); ++i) {
    for (std::size_t j = i + 1; j < stream.size() && j - i < window; ++j) {
      const std::size_t a = stream[i];
      const std::size_t b = stream[j];
      if (a == b) continue;
      linked[a][b] = linked[b][a] = 1;
    }
  }
  graph.adjacency.resize(graph.nodes.size());
  for (std::size_t a = 0; a < graph.nodes.size(); ++a) {
    for (std::size_t b = 0; b < graph.nodes.size(); ++b) {
      if (linked[a][b] != 0) graph.adjacency[a].push_back(b);
    }
  }
  return graph;
}

PageRankResult pagerank(const std::vector<std::vector<std::size_t>>& adjacency, double damping,
                        std::size_t max_iters, double tol) {
  if (!(damping > 0.0 && damping < 1.0)) throw ConfigError("textrank damping must lie in (0, 1)");
  const std::size_t n = adjacency.size();
  PageRankResult result;
  result.scores.assign(n, 1.0);
  std::vector<double> next(n);
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j : adjacency[i]) acc += result.scores[j] / static_cast<double>(adjacency[j].size());
      next[i] = (1.0 - damping) + damping * acc;
    }
    double max_change = 0.0;
    double total_change = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double delta = std::abs(next[i] - result.scores[i]);
      max_change = std::max(max_change, delta);
      total_change += delta;
    }
    result.scores.swap(next);
    result.change_trace.push_back(total_change);
    result.iterations = iter + 1;
    if (max_change < tol) break;
  }
  return result;
}

std::vector<RankedKeyword> textrank_keywords(std::string_view text, const TextRankParams& params,
                                             const std::unordered_set<std::string>& stopwords) {
  const auto graph = build_cooccurrence_graph(text, params.window, stopwords);
  if (graph.nodes.empty()) return {};
  const auto ranks = pagerank(graph.adjacency, params.damping, params.max_iters, params.tol);
  std::vector<RankedKeyword> out;
  out.reserve(graph.nodes.size());
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    out.push_back({graph.nodes[i], ranks.scores[i], graph.first_position[i]});
  }
  std::stable_sort(out.begin(), out.end(), [](const RankedKeyword& a, const RankedKeyword& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.first_position < b.first_position;
  });
  return out;
}

}  // namespace dsp::textkit
