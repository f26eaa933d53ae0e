#include "dsp/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include <spdlog/spdlog.h>

#include "dsp/errors.hpp"

namespace dsp::corpus {

using nlohmann::json;

std::string_view to_string(Task task) {
  switch (task) {
    case Task::kSummarization:
      return "summarization";
    case Task::kDialogue:
      return "dialogue";
    case Task::kReasoning:
      return "reasoning";
  }
  return "unknown";
}

Task parse_task(std::string_view name) {
  if (name == "summarization") return Task::kSummarization;
  if (name == "dialogue") return Task::kDialogue;
  if (name == "reasoning") return Task::kReasoning;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

// ---------------------------------------------------------------- JSONL

namespace {

const std::string& require_string(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError("line " + std::to_string(line) + ": missing field '" + key + "'", line);
  if (!it->is_string()) {
    throw ParseError("line " + std::to_string(line) + ": field '" + key + "' must be a string", line);
  }
  return it->get_ref<const std::string&>();
}

Instance parse_record(const std::string& text, Task task, std::size_t line) {
  json obj;
  try {
    obj = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("line " + std::to_string(line) + ": " + e.what(), line);
  }
  if (!obj.is_object()) throw ParseError("line " + std::to_string(line) + ": expected a JSON object", line);
  static const std::set<std::string> kKnown = {"id", "input_text", "reference_output", "pseudo_stimulus",
                                               "annotations", "config_hash"};
  for (const auto& [key, _] : obj.items()) {
    if (!kKnown.contains(key)) {
      throw ParseError("line " + std::to_string(line) + ": unknown field '" + key + "'", line);
    }
  }
  Instance inst;
  inst.task = task;
  inst.id = require_string(obj, "id", line);
  inst.input_text = require_string(obj, "input_text", line);
  inst.reference_output = require_string(obj, "reference_output", line);
  if (inst.id.empty()) throw ParseError("line " + std::to_string(line) + ": empty id", line);
  if (inst.input_text.empty()) throw ParseError("line " + std::to_string(line) + ": empty input_text", line);
  if (obj.contains("pseudo_stimulus") && !obj["pseudo_stimulus"].is_null()) {
    inst.pseudo_stimulus = require_string(obj, "pseudo_stimulus", line);
  }
  if (obj.contains("annotations") && !obj["annotations"].is_null()) {
    if (!obj["annotations"].is_object()) {
      throw ParseError("line " + std::to_string(line) + ": annotations must be an object", line);
    }
    inst.annotations = obj["annotations"];
  }
  if (obj.contains("config_hash")) inst.config_hash = require_string(obj, "config_hash", line);
  return inst;
}

}  // namespace

Dataset parse_jsonl(std::string_view text, Task task, Split split) {
  Dataset ds;
  ds.split = split;
  std::unordered_set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Instance inst = parse_record(line, task, line_no);
    if (!seen.insert(inst.id).second) {
      throw ValidationError("line " + std::to_string(line_no) + ": duplicate id '" + inst.id + "'");
    }
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

Dataset load_jsonl(const std::filesystem::path& path, Task task, Split split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open dataset " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_jsonl(buffer.str(), task, split);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.line());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::string to_json_line(const Instance& instance) {
  nlohmann::ordered_json obj;
  obj["id"] = instance.id;
  obj["input_text"] = instance.input_text;
  obj["reference_output"] = instance.reference_output;
  if (instance.pseudo_stimulus) obj["pseudo_stimulus"] = *instance.pseudo_stimulus;
  if (!instance.annotations.empty()) obj["annotations"] = instance.annotations;
  if (instance.config_hash) obj["config_hash"] = *instance.config_hash;
  return obj.dump();
}

void save_jsonl(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write dataset " + path.string());
  for (const auto& inst : dataset.instances) out << to_json_line(inst) << '\n';
}

// ---------------------------------------------------------------- keywords

std::vector<std::string> extract_pseudo_keywords(std::string_view article, std::string_view summary,
                                                 std::size_t top_n, const textkit::TextRankParams& params,
                                                 bool include_summary_in_graph) {
  std::string source(article);
  if (include_summary_in_graph) {
    source.push_back('\n');
    source.append(summary);
  }
  const auto candidates = textkit::textrank_keywords(source, params);
  const auto summary_tokens = textkit::tokenize_words(summary);
  std::map<std::string, std::size_t> first_in_summary;
  for (std::size_t i = 0; i < summary_tokens.size(); ++i) first_in_summary.emplace(summary_tokens[i], i);

  // Candidates are unique surfaces already; keep the textrank top-n survivors.
  std::vector<std::pair<std::size_t, std::string>> kept;
  for (const auto& cand : candidates) {
    if (kept.size() >= top_n) break;
    auto it = first_in_summary.find(cand.surface);
    if (it != first_in_summary.end()) kept.emplace_back(it->second, cand.surface);
  }
  std::sort(kept.begin(), kept.end());
  std::vector<std::string> out;
  out.reserve(kept.size());
  for (auto& [_, word] : kept) out.push_back(std::move(word));
  return out;
}

std::string render_keyword_stimulus(std::span<const std::string> keywords) {
  if (keywords.empty()) return "";
  std::string out;
  for (std::size_t i = 0; i < keywords.size(); ++i) {
    const auto& k = keywords[i];
    if (k.empty()) throw ValidationError("empty keyword in stimulus");
    if (k.find(';') != std::string::npos) throw ValidationError("keyword '" + k + "' contains ';'");
    if (i > 0) out += "; ";
    out += k;
  }
  out.push_back('.');
  return out;
}

std::vector<std::string> parse_keyword_stimulus(std::string_view stimulus) {
  std::string_view body = stimulus;
  while (!body.empty() && (body.back() == ' ' || body.back() == '\n')) body.remove_suffix(1);
  if (body.empty()) return {};
  if (body.back() == '.') body.remove_suffix(1);
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= body.size()) {
    const std::size_t end = std::min(body.find(';', start), body.size());
    std::string_view piece = body.substr(start, end - start);
    while (!piece.empty() && piece.front() == ' ') piece.remove_prefix(1);
    while (!piece.empty() && piece.back() == ' ') piece.remove_suffix(1);
    if (!piece.empty()) out.emplace_back(piece);
    start = end + 1;
  }
  return out;
}

// ---------------------------------------------------------------- dialogue acts

const std::vector<std::string>& ontology_domains() {
  static const std::vector<std::string> kDomains = {"restaurant", "hotel",    "attraction", "taxi",
                                                    "train",      "hospital", "police",     "general"};
  return kDomains;
}

const std::vector<std::string>& ontology_acts() {
  static const std::vector<std::string> kActs = {"inform",   "request",     "select", "recommend",
                                                 "nooffer",  "offerbook",   "offerbooked", "nobook",
                                                 "welcome",  "greet",       "bye",    "reqmore"};
  return kActs;
}

const std::vector<std::string>& ontology_slots() {
  static const std::vector<std::string> kSlots = {
      "address", "postcode", "phone",     "name",      "area",   "pricerange", "type",  "internet",
      "parking", "stars",    "departure", "destination", "leave", "arrive",     "people", "reference",
      "id",      "price",    "time",      "department", "day",   "stay",       "car",   "food",
      "choice"};
  return kSlots;
}

bool act_allowed_in_domain(std::string_view domain, std::string_view act) {
  // Domain restrictions from the MultiWOZ act ontology; unlisted acts are universal.
  static const std::map<std::string, std::set<std::string>, std::less<>> kRestricted = {
      {"select", {"restaurant", "hotel", "attraction", "train"}},
      {"recommend", {"restaurant", "hotel", "attraction"}},
      {"nooffer", {"restaurant", "hotel", "attraction", "train"}},
      {"offerbook", {"restaurant", "hotel", "train"}},
      {"offerbooked", {"restaurant", "hotel", "train"}},
      {"nobook", {"restaurant", "hotel"}},
  };
  const auto& domains = ontology_domains();
  const auto& acts = ontology_acts();
  if (std::find(domains.begin(), domains.end(), domain) == domains.end()) return false;
  if (std::find(acts.begin(), acts.end(), act) == acts.end()) return false;
  auto it = kRestricted.find(act);
  if (it == kRestricted.end()) return true;
  return it->second.contains(std::string(domain));
}

namespace {
bool is_known_domain(std::string_view s) {
  const auto& d = ontology_domains();
  return std::find(d.begin(), d.end(), s) != d.end();
}
bool is_known_act(std::string_view s) {
  const auto& a = ontology_acts();
  return std::find(a.begin(), a.end(), s) != a.end();
}
}  // namespace

std::string verbalize_dialogue_acts(std::span<const DialogueAct> acts) {
  if (acts.empty()) throw ValidationError("cannot verbalize an empty dialogue act list");
  std::string out;
  const std::string* current_domain = nullptr;
  auto emit = [&out](std::string_view piece) {
    if (!out.empty()) out.push_back(' ');
    out.append(piece);
  };
  for (const auto& a : acts) {
    if (!is_known_domain(a.domain)) throw ValidationError("unknown dialogue domain '" + a.domain + "'");
    if (!is_known_act(a.act)) throw ValidationError("unknown dialogue act '" + a.act + "'");
    if (!act_allowed_in_domain(a.domain, a.act)) {
      throw ValidationError("act '" + a.act + "' is not valid for domain '" + a.domain + "'");
    }
    if (current_domain == nullptr || *current_domain != a.domain) {
      emit("[" + a.domain + "]");
      current_domain = &a.domain;
    }
    emit("[" + a.act + "]");
    for (const auto& slot : a.slots) {
      if (slot.empty() || slot.find_first_of(" []") != std::string::npos) {
        throw ValidationError("malformed slot name '" + slot + "'");
      }
      emit(slot);
    }
  }
  return out;
}

ParsedActs parse_dialogue_acts(std::string_view text) {
  ParsedActs result;
  std::istringstream in{std::string(text)};
  std::string word;
  std::optional<std::string> domain;
  bool act_open = false;
  while (in >> word) {
    if (word.size() >= 2 && word.front() == '[' && word.back() == ']') {
      const std::string name = word.substr(1, word.size() - 2);
      if (is_known_domain(name)) {
        domain = name;
        act_open = false;
      } else if (is_known_act(name) && domain && act_allowed_in_domain(*domain, name)) {
        result.acts.push_back({*domain, name, {}});
        act_open = true;
      } else {
        result.warnings.push_back(name);
        act_open = false;
      }
      continue;
    }
    if (act_open) {
      result.acts.back().slots.push_back(word);
    }
  }
  return result;
}

std::vector<DialogueAct> acts_from_json(const nlohmann::json& annotations) {
  std::vector<DialogueAct> acts;
  auto it = annotations.find("dialogue_acts");
  if (it == annotations.end()) return acts;
  if (!it->is_array()) throw ValidationError("annotations.dialogue_acts must be an array");
  for (const auto& entry : *it) {
    DialogueAct act;
    act.domain = entry.at("domain").get<std::string>();
    act.act = entry.at("act").get<std::string>();
    if (entry.contains("slots")) act.slots = entry.at("slots").get<std::vector<std::string>>();
    acts.push_back(std::move(act));
  }
  return acts;
}

// ---------------------------------------------------------------- policy input

std::string sft_input_text(Task task, const Instance& instance) {
  switch (task) {
    case Task::kSummarization:
      return "Extract the keywords: " + instance.input_text;
    case Task::kDialogue:
      return "Translate dialogue to dialogue action: " + instance.input_text;
    case Task::kReasoning:
      return instance.input_text;
  }
  return instance.input_text;
}

// ---------------------------------------------------------------- chain of thought

const std::vector<std::string>& human_cot_prompts() {
  static const std::vector<std::string> kPrompts = {
      "Let's think step by step.",
      "We should think about this step by step.",
      "First,",
      "Before we dive into the answer,",
      "Proof followed by the answer.",
      "Let's think step by step in a realistic way.",
      "Let's think step by step using common sense and knowledge.",
      "Let's think like a detective step by step.",
      "Let's think about this logically.",
      "Let's think step by step. First,",
      "Let's think",
      "Let's solve this problem by splitting it into steps.",
      "The answer is after the proof.",
      "Let's be realistic and think step by step.",
  };
  return kPrompts;
}

Dataset mine_cot_pairs(const Dataset& questions, std::span<const std::string> trigger_prompts,
                       const CotGenerator& generate, const CotChecker& checker, MiningStats* stats) {
  Dataset out;
  out.split = questions.split;
  MiningStats local;
  for (const auto& q : questions.instances) {
    for (std::size_t p = 0; p < trigger_prompts.size(); ++p) {
      ++local.calls;
      std::string reasoning;
      try {
        reasoning = generate(q, trigger_prompts[p]);
      } catch (const BackendError& e) {
        ++local.failures;
        spdlog::warn("skipping question '{}' with prompt {}: {}", q.id, p, e.what());
        continue;
      }
      if (!checker(q, reasoning)) continue;
      Instance pair = q;
      pair.id = q.id + "#p" + std::to_string(p);
      pair.pseudo_stimulus = trigger_prompts[p];
      out.instances.push_back(std::move(pair));
      ++local.kept;
    }
  }
  if (stats) *stats = local;
  if (local.calls > 0 && static_cast<double>(local.failures) > 0.2 * static_cast<double>(local.calls)) {
    throw BackendUnavailableError("chain-of-thought mining aborted: " + std::to_string(local.failures) + " of " +
                                  std::to_string(local.calls) + " backend calls failed");
  }
  return out;
}

}  // namespace dsp::corpus
