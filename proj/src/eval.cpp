#include "dsp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <regex>
#include <unordered_map>

#include <fmt/format.h>

#include "dsp/errors.hpp"
#include "dsp/textkit.hpp"

namespace dsp::eval {

namespace {

using Tokens = std::vector<std::string>;

std::string join_ngram(const Tokens& toks, std::size_t start, std::size_t n) {
  std::string key;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) key.push_back('\x1f');
    key += toks[start + i];
  }
  return key;
}

std::unordered_map<std::string, std::size_t> ngram_counts(const Tokens& toks, std::size_t n) {
  std::unordered_map<std::string, std::size_t> counts;
  if (toks.size() < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[join_ngram(toks, i, n)];
  return counts;
}

std::size_t clipped_overlap(const std::unordered_map<std::string, std::size_t>& cand,
                            const std::unordered_map<std::string, std::size_t>& ref) {
  std::size_t overlap = 0;
  for (const auto& [gram, c] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(c, it->second);
  }
  return overlap;
}

PRF make_prf(std::size_t overlap, std::size_t cand_total, std::size_t ref_total) {
  PRF out;
  if (cand_total == 0 || ref_total == 0) return out;
  out.precision = static_cast<double>(overlap) / static_cast<double>(cand_total);
  out.recall = static_cast<double>(overlap) / static_cast<double>(ref_total);
  if (out.precision + out.recall > 0.0) {
    out.f1 = 2.0 * out.precision * out.recall / (out.precision + out.recall);
  }
  return out;
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

PRF rouge_n(std::string_view candidate, std::string_view reference, std::size_t n) {
  if (n != 1 && n != 2) throw ConfigError("rouge_n supports n = 1 or 2");
  const Tokens c = textkit::tokenize_words(candidate);
  const Tokens r = textkit::tokenize_words(reference);
  const auto cc = ngram_counts(c, n);
  const auto rc = ngram_counts(r, n);
  const std::size_t ct = c.size() >= n ? c.size() - n + 1 : 0;
  const std::size_t rt = r.size() >= n ? r.size() - n + 1 : 0;
  return make_prf(clipped_overlap(cc, rc), ct, rt);
}

PRF rouge_l(std::string_view candidate, std::string_view reference) {
  const Tokens c = textkit::tokenize_words(candidate);
  const Tokens r = textkit::tokenize_words(reference);
  return make_prf(lcs_length(c, r), c.size(), r.size());
}

double rouge_avg(std::string_view candidate, std::string_view reference) {
  return (rouge_n(candidate, reference, 1).f1 + rouge_n(candidate, reference, 2).f1 +
          rouge_l(candidate, reference).f1) /
         3.0;
}

// ---------------------------------------------------------------- BLEU

void BleuStats::add(std::string_view candidate, std::string_view reference) {
  const Tokens c = textkit::tokenize_words(candidate);
  const Tokens r = textkit::tokenize_words(reference);
  candidate_length += c.size();
  reference_length += r.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    matches[n - 1] += clipped_overlap(ngram_counts(c, n), ngram_counts(r, n));
    totals[n - 1] += c.size() >= n ? c.size() - n + 1 : 0;
  }
}

namespace {

double brevity_penalty(std::size_t c, std::size_t r) {
  if (c == 0) return 0.0;
  if (c >= r) return 1.0;
  return std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
}

}  // namespace

double BleuStats::corpus_score() const {
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (matches[n] == 0 || totals[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matches[n]) / static_cast<double>(totals[n]));
  }
  return brevity_penalty(candidate_length, reference_length) * std::exp(log_sum / 4.0);
}

double bleu_corpus(std::span<const std::string> candidates, std::span<const std::string> references) {
  if (candidates.size() != references.size()) {
    throw ValidationError("bleu_corpus: " + std::to_string(candidates.size()) + " candidates vs " +
                          std::to_string(references.size()) + " references");
  }
  BleuStats stats;
  for (std::size_t i = 0; i < candidates.size(); ++i) stats.add(candidates[i], references[i]);
  return stats.corpus_score();
}

double sentence_bleu_smoothed(std::string_view candidate, std::string_view reference) {
  BleuStats s;
  s.add(candidate, reference);
  if (s.candidate_length == 0) return 0.0;
  double log_sum = 0.0;
  std::size_t order = 0;
  double zero_factor = 1.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (s.totals[n] == 0) break;
    ++order;
    double p;
    if (s.matches[n] == 0) {
      zero_factor *= 2.0;
      p = 1.0 / (zero_factor * static_cast<double>(s.totals[n]));
    } else {
      p = static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]);
    }
    log_sum += std::log(p);
  }
  return brevity_penalty(s.candidate_length, s.reference_length) * std::exp(log_sum / static_cast<double>(order));
}

// ---------------------------------------------------------------- METEOR

double meteor_simplified(std::string_view candidate, std::string_view reference) {
  const Tokens c = textkit::tokenize_words(candidate);
  const Tokens r = textkit::tokenize_words(reference);
  if (c.empty() || r.empty()) return 0.0;
  std::vector<std::ptrdiff_t> align(c.size(), -1);
  std::vector<char> used(r.size(), 0);
  auto pass = [&](auto&& key) {
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (align[i] >= 0) continue;
      const std::string ki = key(c[i]);
      for (std::size_t j = 0; j < r.size(); ++j) {
        if (!used[j] && key(r[j]) == ki) {
          align[i] = static_cast<std::ptrdiff_t>(j);
          used[j] = 1;
          break;
        }
      }
    }
  };
  pass([](const std::string& t) { return t; });
  pass([](const std::string& t) { return textkit::stem(t); });

  std::size_t matched = 0;
  std::size_t chunks = 0;
  std::ptrdiff_t prev = -2;
  bool in_chunk = false;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (align[i] < 0) {
      in_chunk = false;
      continue;
    }
    ++matched;
    if (!in_chunk || align[i] != prev + 1) ++chunks;
    in_chunk = true;
    prev = align[i];
  }
  if (matched == 0) return 0.0;
  const double P = static_cast<double>(matched) / static_cast<double>(c.size());
  const double R = static_cast<double>(matched) / static_cast<double>(r.size());
  const double fmean = 10.0 * P * R / (R + 9.0 * P);
  const double frag = static_cast<double>(chunks) / static_cast<double>(matched);
  return fmean * (1.0 - 0.5 * frag * frag * frag);
}

// ---------------------------------------------------------------- dialogue

bool offers_entity_by_default(std::string_view domain) {
  return domain == "restaurant" || domain == "hotel" || domain == "attraction" || domain == "train";
}

DialogueGoal goal_from_json(const nlohmann::json& annotations) {
  DialogueGoal goal;
  if (!annotations.is_object() || !annotations.contains("goal")) return goal;
  const auto& g = annotations.at("goal");
  if (!g.is_object()) throw ValidationError("annotations.goal must be an object");
  for (const auto& [domain, spec] : g.items()) {
    DomainGoal dg;
    dg.requires_offer = offers_entity_by_default(domain);
    if (spec.is_object()) {
      if (spec.contains("requestables")) {
        for (const auto& slot : spec.at("requestables")) dg.requestables.push_back(slot.get<std::string>());
      }
      if (spec.contains("offer")) dg.requires_offer = spec.at("offer").get<bool>();
    }
    goal.domains.emplace(domain, std::move(dg));
  }
  return goal;
}

double MetricReport::at(const std::string& name) const {
  auto it = scores.find(name);
  if (it == scores.end()) throw ValidationError("metric '" + name + "' missing from report");
  return it->second;
}

double combined_score(double inform, double success, double bleu) { return (inform + success) * 0.5 + bleu; }

MetricReport multiwoz_eval(std::span<const DialogueRecord> dialogues) {
  std::size_t informed = 0;
  std::size_t succeeded = 0;
  BleuStats bleu;
  for (const auto& d : dialogues) {
    auto mentions = [&d](std::string_view placeholder) {
      return std::any_of(d.responses.begin(), d.responses.end(),
                         [&](const std::string& r) { return r.find(placeholder) != std::string::npos; });
    };
    bool inform = true;
    bool slots = true;
    for (const auto& [domain, dg] : d.goal.domains) {
      if (dg.requires_offer && !mentions("[value_name]") && !mentions("[value_id]")) inform = false;
      for (const auto& slot : dg.requestables) {
        if (!mentions("[value_" + slot + "]")) slots = false;
      }
    }
    if (inform) ++informed;
    if (inform && slots) ++succeeded;
    const std::size_t pairs = std::min(d.responses.size(), d.oracle_responses.size());
    for (std::size_t i = 0; i < pairs; ++i) bleu.add(d.responses[i], d.oracle_responses[i]);
  }
  MetricReport rep;
  rep.sample_count = dialogues.size();
  const double n = static_cast<double>(dialogues.size());
  const double inform = dialogues.empty() ? 0.0 : 100.0 * static_cast<double>(informed) / n;
  const double success = dialogues.empty() ? 0.0 : 100.0 * static_cast<double>(succeeded) / n;
  const double b = 100.0 * bleu.corpus_score();
  rep.scores["inform"] = inform;
  rep.scores["success"] = success;
  rep.scores["bleu"] = b;
  rep.scores["combined"] = combined_score(inform, success, b);
  return rep;
}

std::vector<DialogueRecord> group_dialogues(std::span<const corpus::Instance> instances,
                                            std::span<const std::string> outputs) {
  if (instances.size() != outputs.size()) throw ValidationError("outputs and instances differ in length");
  std::vector<DialogueRecord> records;
  std::map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    std::string key = inst.id;
    if (inst.annotations.is_object() && inst.annotations.contains("dialogue_id")) {
      key = inst.annotations.at("dialogue_id").get<std::string>();
    }
    auto [it, fresh] = slot.emplace(key, records.size());
    if (fresh) {
      DialogueRecord rec;
      rec.id = key;
      rec.goal = goal_from_json(inst.annotations);
      records.push_back(std::move(rec));
    }
    auto& rec = records[it->second];
    rec.responses.push_back(outputs[i]);
    rec.oracle_responses.push_back(inst.reference_output);
    // Later turns may carry the goal when the first one does not.
    if (rec.goal.domains.empty()) rec.goal = goal_from_json(inst.annotations);
  }
  return records;
}

// ---------------------------------------------------------------- reasoning

std::string normalize_answer(std::string_view answer) {
  std::string s;
  for (char ch : answer) {
    if (ch != ',' && ch != ' ') s.push_back(ch);
  }
  while (!s.empty() && s.back() == '.') s.pop_back();
  if (s.size() > 2 && s.compare(s.size() - 2, 2, ".0") == 0) s.resize(s.size() - 2);
  return s;
}

std::string extract_answer(std::string_view text, const std::optional<std::vector<std::string>>& options) {
  const std::string s(text);
  if (options) {
    const std::size_t count = std::min<std::size_t>(options->empty() ? 5 : options->size(), 5);
    const std::string letters = std::string("ABCDE").substr(0, count);
    static const std::regex letter_re("(^|[^A-Za-z0-9])([A-E])(?![A-Za-z0-9])");
    std::string last;
    for (auto it = std::sregex_iterator(s.begin(), s.end(), letter_re); it != std::sregex_iterator(); ++it) {
      const std::string l = (*it)[2].str();
      if (letters.find(l) != std::string::npos) last = l;
    }
    return last;
  }
  static const std::regex number_re("-?[0-9][0-9,]*(\\.[0-9]+)?");
  std::string last;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), number_re); it != std::sregex_iterator(); ++it) {
    last = it->str();
  }
  // Thousands separators only: a trailing comma belongs to the sentence.
  while (!last.empty() && last.back() == ',') last.pop_back();
  return normalize_answer(last);
}

// ---------------------------------------------------------------- rewards

namespace {

std::optional<std::vector<std::string>> options_of(const corpus::Instance& inst) {
  if (inst.annotations.is_object() && inst.annotations.contains("options")) {
    return inst.annotations.at("options").get<std::vector<std::string>>();
  }
  return std::nullopt;
}

std::string gold_of(const corpus::Instance& inst) {
  if (inst.annotations.is_object() && inst.annotations.contains("gold_answer")) {
    return inst.annotations.at("gold_answer").get<std::string>();
  }
  return inst.reference_output;
}

}  // namespace

RewardFn reward_fn(corpus::Task task, std::string_view name) {
  (void)task;
  if (name == "rouge_avg_x10") {
    return [](const std::string&, const std::string& out, const corpus::Instance& inst) {
      return 10.0 * rouge_avg(out, inst.reference_output);
    };
  }
  if (name == "sacrebleu_sentence") {
    return [](const std::string&, const std::string& out, const corpus::Instance& inst) {
      return sentence_bleu_smoothed(out, inst.reference_output);
    };
  }
  if (name == "accuracy01") {
    return [](const std::string&, const std::string& out, const corpus::Instance& inst) {
      const auto opts = options_of(inst);
      const std::string got = extract_answer(out, opts);
      const std::string gold = opts ? gold_of(inst) : normalize_answer(gold_of(inst));
      return !got.empty() && got == gold ? 1.0 : 0.0;
    };
  }
  throw ConfigError("unknown reward function '" + std::string(name) + "'");
}

MetricReport evaluate_outputs(corpus::Task task, std::span<const corpus::Instance> instances,
                              std::span<const std::string> outputs) {
  if (instances.size() != outputs.size()) throw ValidationError("outputs and instances differ in length");
  MetricReport rep;
  rep.sample_count = instances.size();
  const double n = std::max<double>(1.0, static_cast<double>(instances.size()));
  switch (task) {
    case corpus::Task::kSummarization: {
      double r1 = 0, r2 = 0, rl = 0, met = 0;
      std::vector<std::string> refs;
      for (std::size_t i = 0; i < instances.size(); ++i) {
        const auto& ref = instances[i].reference_output;
        r1 += rouge_n(outputs[i], ref, 1).f1;
        r2 += rouge_n(outputs[i], ref, 2).f1;
        rl += rouge_l(outputs[i], ref).f1;
        met += meteor_simplified(outputs[i], ref);
        refs.push_back(ref);
      }
      rep.scores["rouge1"] = r1 / n;
      rep.scores["rouge2"] = r2 / n;
      rep.scores["rougeL"] = rl / n;
      rep.scores["rouge_avg"] = (r1 + r2 + rl) / (3.0 * n);
      rep.scores["bleu"] = bleu_corpus(outputs, refs);
      rep.scores["meteor_simplified"] = met / n;
      break;
    }
    case corpus::Task::kDialogue: {
      const auto records = group_dialogues(instances, outputs);
      rep = multiwoz_eval(records);
      rep.sample_count = instances.size();
      rep.scores["dialogues"] = static_cast<double>(records.size());
      break;
    }
    case corpus::Task::kReasoning: {
      const RewardFn acc = reward_fn(task, "accuracy01");
      double hits = 0;
      for (std::size_t i = 0; i < instances.size(); ++i) hits += acc(instances[i].input_text, outputs[i], instances[i]);
      rep.scores["accuracy"] = 100.0 * hits / n;
      break;
    }
  }
  return rep;
}

// ---------------------------------------------------------------- reports

namespace {

std::string fmt_value(double v) { return fmt::format("{:.6f}", v); }

bool percent_scaled(const std::string& metric) {
  return metric == "rouge1" || metric == "rouge2" || metric == "rougeL" || metric == "rouge_avg" ||
         metric == "meteor_simplified" || (metric == "bleu");
}

}  // namespace

std::string metric_csv(const MetricReport& report) {
  std::string out = "metric,value\n";
  for (const auto& [name, v] : report.scores) out += name + "," + fmt_value(v) + "\n";
  out += "sample_count," + std::to_string(report.sample_count) + "\n";
  return out;
}

std::vector<std::string> report_metrics(corpus::Task task) {
  switch (task) {
    case corpus::Task::kSummarization:
      return {"rouge1", "rouge2", "rougeL", "rouge_avg", "bleu", "meteor_simplified"};
    case corpus::Task::kDialogue:
      return {"inform", "success", "bleu", "combined"};
    case corpus::Task::kReasoning:
      return {"accuracy"};
  }
  return {};
}

std::string comparison_markdown(const std::vector<std::pair<std::string, MetricReport>>& arms,
                                std::span<const std::string> metrics) {
  auto header_of = [](const std::string& m) -> std::string {
    if (m == "inform") return "Inform";
    if (m == "success") return "Succ.";
    if (m == "bleu") return "BLEU";
    if (m == "combined") return "Comb.";
    if (m == "rouge1") return "ROUGE-1";
    if (m == "rouge2") return "ROUGE-2";
    if (m == "rougeL") return "ROUGE-L";
    if (m == "rouge_avg") return "ROUGE-Avg";
    if (m == "meteor_simplified") return "METEOR (simplified)";
    if (m == "accuracy") return "Accuracy";
    return m;
  };
  // Dialogue BLEU is already x100 inside multiwoz_eval.
  const bool dialogue = std::find(metrics.begin(), metrics.end(), "combined") != metrics.end();
  std::string out = "| Arm |";
  for (const auto& m : metrics) out += " " + header_of(m) + " |";
  out += "\n|---|";
  for (std::size_t i = 0; i < metrics.size(); ++i) out += "---:|";
  out += "\n";
  for (const auto& [arm, rep] : arms) {
    out += "| " + arm + " |";
    for (const auto& m : metrics) {
      auto it = rep.scores.find(m);
      if (it == rep.scores.end()) {
        out += " - |";
        continue;
      }
      const double v = percent_scaled(m) && !dialogue ? 100.0 * it->second : it->second;
      out += " " + fmt::format("{:.2f}", v) + " |";
    }
    out += "\n";
  }
  return out;
}

std::string comparison_csv(const std::vector<std::pair<std::string, MetricReport>>& arms,
                           std::span<const std::string> metrics) {
  std::string out = "metric";
  for (const auto& [arm, rep] : arms) out += "," + arm;
  out += ",delta\n";
  for (const auto& m : metrics) {
    out += m;
    double first = 0.0, last = 0.0;
    for (std::size_t a = 0; a < arms.size(); ++a) {
      auto it = arms[a].second.scores.find(m);
      const double v = it == arms[a].second.scores.end() ? 0.0 : it->second;
      if (a == 0) first = v;
      last = v;
      out += "," + fmt_value(v);
    }
    out += "," + fmt_value(last - first) + "\n";
  }
  return out;
}

}  // namespace dsp::eval
