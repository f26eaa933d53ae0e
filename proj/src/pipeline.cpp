#include "dsp/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include "dsp/errors.hpp"
#include "dsp/eval.hpp"
#include "dsp/hashing.hpp"
#include "dsp/policy.hpp"

namespace dsp::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

namespace {

void flatten(const YAML::Node& node, const std::string& prefix, std::map<std::string, YAML::Node>& out) {
  if (node.IsMap()) {
    for (const auto& kv : node) {
      const std::string key = kv.first.as<std::string>();
      flatten(kv.second, prefix.empty() ? key : prefix + "." + key, out);
    }
    return;
  }
  if (prefix.empty()) throw ConfigError("config must be a mapping of keys to values");
  if (out.count(prefix)) throw ConfigError("duplicate config key '" + prefix + "'");
  out[prefix] = node;
}

class Fields {
 public:
  explicit Fields(std::map<std::string, YAML::Node> flat) : flat_(std::move(flat)) {}

  template <class T>
  bool get(const std::string& key, T& target) {
    auto it = flat_.find(key);
    if (it == flat_.end() || it->second.IsNull()) {
      if (it != flat_.end()) flat_.erase(it);
      return false;
    }
    try {
      target = it->second.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError("config key '" + key + "' has an invalid value");
    }
    flat_.erase(it);
    return true;
  }

  void finish() const {
    if (!flat_.empty()) throw ConfigError("unknown config key '" + flat_.begin()->first + "'");
  }

 private:
  std::map<std::string, YAML::Node> flat_;
};

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

decoding::Mode parse_mode(const std::string& s) {
  if (s == "greedy") return decoding::Mode::kGreedy;
  if (s == "sample") return decoding::Mode::kSample;
  if (s == "beam") return decoding::Mode::kBeam;
  throw ConfigError("decode.mode must be greedy, sample or beam");
}

std::string_view mode_name(decoding::Mode m) {
  switch (m) {
    case decoding::Mode::kGreedy: return "greedy";
    case decoding::Mode::kSample: return "sample";
    case decoding::Mode::kBeam: return "beam";
  }
  return "greedy";
}

std::string default_reward(corpus::Task task) {
  switch (task) {
    case corpus::Task::kSummarization: return "rouge_avg_x10";
    case corpus::Task::kDialogue: return "sacrebleu_sentence";
    case corpus::Task::kReasoning: return "accuracy01";
  }
  return "";
}

}  // namespace

ExperimentConfig parse_config(std::string_view yaml_text, const fs::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(yaml_text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("cannot parse config: ") + e.what());
  }
  std::map<std::string, YAML::Node> flat;
  if (!root.IsNull()) flatten(root, "", flat);
  Fields f(std::move(flat));
  ExperimentConfig c;

  std::string s;
  if (!f.get("task", s)) throw ConfigError("config key 'task' is required");
  c.task = corpus::parse_task(s);
  if (!f.get("seed", c.seed)) throw ConfigError("config key 'seed' is required");
  if (!f.get("run_dir", s)) throw ConfigError("config key 'run_dir' is required");
  c.run_dir = resolve(base_dir, s);
  if (f.get("data.train", s)) c.data.train = resolve(base_dir, s);
  if (f.get("data.valid", s)) c.data.valid = resolve(base_dir, s);
  if (f.get("data.test", s)) c.data.test = resolve(base_dir, s);
  f.get("data.num_demonstrations", c.num_demonstrations);
  f.get("template.id", c.template_id);

  if (f.get("backend.kind", s)) {
    if (s == "http") {
      c.backend.kind = llm::BackendKind::kHttp;
    } else if (s == "mock") {
      c.backend.kind = llm::BackendKind::kMock;
    } else {
      throw ConfigError("backend.kind must be http or mock");
    }
  }
  f.get("backend.endpoint", c.backend.endpoint);
  f.get("backend.model", c.backend.model);
  f.get("backend.auth_env", c.backend.auth_env);
  f.get("backend.timeout_seconds", c.backend.timeout_seconds);
  f.get("backend.max_retries", c.backend.max_retries);
  if (f.get("backend.cache_path", s)) c.backend.cache_path = resolve(base_dir, s).string();
  f.get("backend.completions_api", c.backend.completions_api);
  c.backend.rule_set = std::string(corpus::to_string(c.task));
  f.get("backend.rule_set", c.backend.rule_set);
  f.get("backend.sentences_to_select", c.backend.sentences_to_select);
  f.get("backend.noise_rate", c.backend.noise_rate);
  c.backend.seed = c.seed;

  f.get("gen.temperature", c.gen.temperature);
  f.get("gen.top_p", c.gen.top_p);
  f.get("gen.max_tokens", c.gen.max_tokens);
  std::vector<std::string> stop;
  if (f.get("gen.stop", stop)) c.gen.stop = stop;

  f.get("policy.vocab_size", c.vocab_size);
  f.get("policy.embed_dim", c.embed_dim);
  f.get("policy.hidden_dim", c.hidden_dim);
  f.get("policy.max_input_tokens", c.max_input_tokens);
  f.get("extract.keyword_top_n", c.keyword_top_n);

  f.get("sft.epochs", c.sft.epochs);
  f.get("sft.learning_rate", c.sft.learning_rate);
  f.get("sft.batch_size", c.sft.batch_size);
  f.get("sft.weight_decay", c.sft.weight_decay);
  if (f.get("sft.lr_schedule", s)) c.sft.lr_schedule = train::parse_lr_schedule(s);
  f.get("sft.max_grad_norm", c.sft.max_grad_norm);

  f.get("rl.enabled", c.rl_enabled);
  f.get("rl.total_steps", c.rl.total_steps);
  f.get("rl.steps_per_update", c.rl.steps_per_update);
  f.get("rl.batch_size", c.rl.batch_size);
  f.get("rl.epochs_per_update", c.rl.epochs_per_update);
  f.get("rl.learning_rate", c.rl.learning_rate);
  f.get("rl.clip_ratio", c.rl.clip_ratio);
  f.get("rl.vf_coef", c.rl.vf_coef);
  f.get("rl.ent_coef", c.rl.ent_coef);
  f.get("rl.gamma", c.rl.gamma);
  f.get("rl.gae_lambda", c.rl.gae_lambda);
  f.get("rl.kl_target", c.rl.kl_target);
  f.get("rl.beta0", c.rl.beta0);
  f.get("rl.k_beta", c.rl.k_beta);
  f.get("rl.top_mask_p", c.rl.top_mask_p);
  f.get("rl.rollouts_top_k", c.rl.rollouts_top_k);
  f.get("rl.mask_sync_iters", c.rl.mask_sync_iters);
  f.get("rl.n_llm_samples", c.rl.n_llm_samples);
  f.get("rl.reward_scale", c.rl.reward_scale);
  f.get("rl.temperature", c.rl.temperature);
  f.get("rl.min_len", c.rl.min_len);
  f.get("rl.max_new_tokens", c.rl.max_new_tokens);
  f.get("rl.stepwise_reward", c.rl.stepwise_reward);
  f.get("rl.weight_decay", c.rl.weight_decay);
  f.get("rl.max_grad_norm", c.rl.max_grad_norm);
  f.get("rl.separate_critic", c.rl.separate_critic);
  f.get("rl.validation_size", c.validation_size);

  c.reward = default_reward(c.task);
  f.get("reward.name", c.reward);

  c.decode.mode = decoding::Mode::kGreedy;
  c.decode.max_new_tokens = c.rl.max_new_tokens;
  if (f.get("decode.mode", s)) c.decode.mode = parse_mode(s);
  f.get("decode.temperature", c.decode.temperature);
  std::size_t top_k = 0;
  if (f.get("decode.top_k", top_k)) c.decode.top_k = top_k;
  double top_p = 0.0;
  if (f.get("decode.top_p", top_p)) c.decode.top_p = top_p;
  f.get("decode.beam_size", c.decode.beam_size);
  f.get("decode.min_len", c.decode.min_len);
  f.get("decode.max_new_tokens", c.decode.max_new_tokens);
  f.finish();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), fs::absolute(path).parent_path());
}

void ExperimentConfig::validate() const {
  for (const auto& [name, p] : {std::pair{"data.train", data.train}, {"data.valid", data.valid}, {"data.test", data.test}}) {
    if (p.empty()) throw ConfigError(std::string("config key '") + name + "' is required");
    if (!fs::is_regular_file(p)) throw ConfigError(std::string(name) + " does not exist: " + p.string());
  }
  if (template_id != "builtin") throw ConfigError("template.id must be 'builtin'");
  backend.validate();
  if (gen.n != 1) throw ConfigError("gen.n is fixed to 1; use rl.n_llm_samples for multi-sample rewards");
  if (embed_dim < 8 || hidden_dim < 8) throw ConfigError("policy dimensions must be at least 8");
  if (vocab_size < special::kCount + 1) throw ConfigError("policy.vocab_size is too small");
  if (max_input_tokens < 1) throw ConfigError("policy.max_input_tokens must be at least 1");
  if (keyword_top_n < 1) throw ConfigError("extract.keyword_top_n must be at least 1");
  sft.validate();
  if (rl_enabled) rl.validate();
  eval::reward_fn(task, reward);
  decode.validate();
}

nlohmann::json ExperimentConfig::to_json() const {
  auto file_digest = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return sha256_hex(ss.str()).substr(0, 16);
  };
  nlohmann::json j;
  j["task"] = corpus::to_string(task);
  j["seed"] = seed;
  j["data"] = {{"train", file_digest(data.train)},
               {"valid", file_digest(data.valid)},
               {"test", file_digest(data.test)},
               {"num_demonstrations", num_demonstrations}};
  j["template"] = template_id;
  j["backend"] = {{"kind", backend.kind == llm::BackendKind::kHttp ? "http" : "mock"},
                  {"endpoint", backend.endpoint},
                  {"model", backend.model},
                  {"completions_api", backend.completions_api},
                  {"rule_set", backend.rule_set},
                  {"sentences_to_select", backend.sentences_to_select},
                  {"noise_rate", backend.noise_rate}};
  j["gen"] = gen.canonical_json();
  j["policy"] = {{"vocab_size", vocab_size},
                 {"embed_dim", embed_dim},
                 {"hidden_dim", hidden_dim},
                 {"max_input_tokens", max_input_tokens}};
  j["extract"] = {{"keyword_top_n", keyword_top_n}};
  j["sft"] = {{"epochs", sft.epochs},
              {"learning_rate", sft.learning_rate},
              {"batch_size", sft.batch_size},
              {"weight_decay", sft.weight_decay},
              {"lr_schedule", train::to_string(sft.lr_schedule)},
              {"max_grad_norm", sft.max_grad_norm}};
  j["rl"] = {{"enabled", rl_enabled},
             {"total_steps", rl.total_steps},
             {"steps_per_update", rl.steps_per_update},
             {"batch_size", rl.batch_size},
             {"epochs_per_update", rl.epochs_per_update},
             {"learning_rate", rl.learning_rate},
             {"clip_ratio", rl.clip_ratio},
             {"vf_coef", rl.vf_coef},
             {"ent_coef", rl.ent_coef},
             {"gamma", rl.gamma},
             {"gae_lambda", rl.gae_lambda},
             {"kl_target", rl.kl_target},
             {"beta0", rl.beta0},
             {"k_beta", rl.k_beta},
             {"top_mask_p", rl.top_mask_p},
             {"rollouts_top_k", rl.rollouts_top_k},
             {"mask_sync_iters", rl.mask_sync_iters},
             {"n_llm_samples", rl.n_llm_samples},
             {"reward_scale", rl.reward_scale},
             {"temperature", rl.temperature},
             {"min_len", rl.min_len},
             {"max_new_tokens", rl.max_new_tokens},
             {"stepwise_reward", rl.stepwise_reward},
             {"weight_decay", rl.weight_decay},
             {"max_grad_norm", rl.max_grad_norm},
             {"separate_critic", rl.separate_critic},
             {"validation_size", validation_size}};
  j["reward"] = reward;
  j["decode"] = {{"mode", mode_name(decode.mode)},
                 {"temperature", decode.temperature},
                 {"top_k", decode.top_k ? nlohmann::json(*decode.top_k) : nlohmann::json()},
                 {"top_p", decode.top_p ? nlohmann::json(*decode.top_p) : nlohmann::json()},
                 {"beam_size", decode.beam_size},
                 {"min_len", decode.min_len},
                 {"max_new_tokens", decode.max_new_tokens}};
  return j;
}

std::string ExperimentConfig::hash() const { return sha256_hex(to_json().dump()).substr(0, 16); }

// ---------------------------------------------------------------- run dir

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::kExtract: return "extract";
    case Stage::kSft: return "sft";
    case Stage::kRl: return "rl";
    case Stage::kEval: return "eval";
  }
  return "";
}

namespace {

constexpr Stage kStages[] = {Stage::kExtract, Stage::kSft, Stage::kRl, Stage::kEval};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void write_atomic(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw ValidationError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
  fs::create_directories(run_dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw ConfigError("run directory " + run_dir.string() + " is locked by another process (remove " +
                      path_.string() + " if it is stale)");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

Manifest Manifest::open(const fs::path& run_dir, const std::string& config_hash) {
  Manifest m;
  m.path_ = run_dir / "manifest.json";
  if (fs::exists(m.path_)) {
    try {
      m.doc_ = nlohmann::json::parse(read_file(m.path_));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("corrupt manifest " + m.path_.string() + ": " + e.what());
    }
    const std::string stored = m.doc_.value("config_hash", "");
    if (stored != config_hash) {
      throw ConfigError("run directory " + run_dir.string() + " belongs to config hash " + stored +
                        " but the current config hashes to " + config_hash);
    }
  } else {
    m.doc_ = {{"config_hash", config_hash}, {"stages", nlohmann::json::object()},
              {"checkpoints", nlohmann::json::object()}};
    for (Stage s : kStages) m.doc_["stages"][std::string(to_string(s))] = {{"done", false}};
  }
  return m;
}

bool Manifest::done(Stage stage) const {
  return doc_.at("stages").at(std::string(to_string(stage))).value("done", false);
}

void Manifest::require_runnable(Stage stage, bool force) const {
  auto need = [this, stage](Stage prior) {
    if (!done(prior)) {
      throw ValidationError(fmt::format("cannot run '{}': manifest {} shows stage '{}' incomplete", to_string(stage),
                                        path_.string(), to_string(prior)));
    }
  };
  switch (stage) {
    case Stage::kExtract: break;
    case Stage::kSft: need(Stage::kExtract); break;
    case Stage::kRl: need(Stage::kSft); break;
    case Stage::kEval: need(Stage::kSft); break;
  }
  if (done(stage) && !force) {
    throw ValidationError(fmt::format("stage '{}' already completed according to {}; pass --force to rerun it",
                                      to_string(stage), path_.string()));
  }
}

void Manifest::invalidate_from(Stage stage) {
  for (Stage s : kStages) {
    if (static_cast<int>(s) >= static_cast<int>(stage)) doc_["stages"][std::string(to_string(s))] = {{"done", false}};
  }
}

void Manifest::complete(Stage stage, nlohmann::json record) {
  invalidate_from(stage);
  record["done"] = true;
  doc_["stages"][std::string(to_string(stage))] = std::move(record);
}

const nlohmann::json& Manifest::record(Stage stage) const {
  return doc_.at("stages").at(std::string(to_string(stage)));
}

void Manifest::set_checkpoint(const std::string& name, const std::string& relative_path) {
  doc_["checkpoints"][name] = relative_path;
}

std::optional<std::string> Manifest::checkpoint(const std::string& name) const {
  const auto& c = doc_.at("checkpoints");
  if (!c.contains(name)) return std::nullopt;
  return c.at(name).get<std::string>();
}

void Manifest::save() const { write_atomic(path_, doc_.dump(2) + "\n"); }

// ---------------------------------------------------------------- shared stage helpers

namespace {

struct RunContext {
  const ExperimentConfig& config;
  std::string hash;
  RunLock lock;
  Manifest manifest;

  explicit RunContext(const ExperimentConfig& c)
      : config(c), hash(c.hash()), lock(c.run_dir), manifest(Manifest::open(c.run_dir, hash)) {}

  fs::path data_file(corpus::Split split) const {
    switch (split) {
      case corpus::Split::kTrain: return config.run_dir / "data" / "train.jsonl";
      case corpus::Split::kValidation: return config.run_dir / "data" / "valid.jsonl";
      case corpus::Split::kTest: return config.run_dir / "data" / "test.jsonl";
    }
    return {};
  }

  corpus::Dataset load(corpus::Split split) const { return corpus::load_jsonl(data_file(split), config.task, split); }

  textkit::Vocab vocab() const {
    const auto j = nlohmann::json::parse(read_file(config.run_dir / "vocab.json"));
    if (j.value("config_hash", "") != hash) throw ConfigError("vocab.json was written under a different config");
    return textkit::Vocab::from_tokens(j.at("tokens").get<std::vector<std::string>>());
  }

  policy::PolicyParams load_policy(const std::string& name, const textkit::Vocab& vocab) const {
    const auto rel = manifest.checkpoint(name);
    if (!rel) throw ValidationError("manifest has no '" + name + "' checkpoint");
    auto loaded = policy::load_checkpoint(config.run_dir / *rel, vocab);
    if (loaded.meta.config_hash != hash) throw ConfigError("checkpoint " + *rel + " was written under a different config");
    return std::move(loaded.params);
  }

  void append_curve(nlohmann::json record) const {
    record["config_hash"] = hash;
    std::ofstream out(config.run_dir / "curves.jsonl", std::ios::app | std::ios::binary);
    out << record.dump() << '\n';
  }

  /// Drops curve lines of `stage` and every later stage.
  void truncate_curves(Stage stage) const {
    const fs::path p = config.run_dir / "curves.jsonl";
    if (!fs::exists(p)) return;
    std::istringstream in(read_file(p));
    std::string kept, line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const std::string s = j.value("stage", "");
      const bool later = (s == "sft" && stage <= Stage::kSft) || (s == "rl" && stage <= Stage::kRl);
      if (!later) kept += line + "\n";
    }
    write_atomic(p, kept);
  }
};

void save_dataset(const fs::path& path, corpus::Dataset data, const std::string& hash) {
  std::string text;
  for (auto& inst : data.instances) {
    inst.config_hash = hash;
    text += corpus::to_json_line(inst) + "\n";
  }
  write_atomic(path, text);
}

llm::PromptTemplate make_template(const ExperimentConfig& config, const corpus::Dataset& train, bool stimulus) {
  auto tmpl = llm::builtin_template(config.task, stimulus);
  const std::size_t n = std::min(config.num_demonstrations, train.size());
  llm::add_demonstrations(tmpl, std::span(train.instances).first(n));
  return tmpl;
}

std::vector<TokenId> policy_input(const ExperimentConfig& config, const textkit::Vocab& vocab,
                                  const corpus::Instance& inst) {
  auto ids = vocab.encode_text(corpus::sft_input_text(config.task, inst));
  if (ids.size() > config.max_input_tokens) ids.resize(config.max_input_tokens);
  return ids;
}

llm::GenParams single_sample(const ExperimentConfig& config) {
  llm::GenParams g = config.gen;
  g.n = 1;
  return g;
}

/// Vocabulary over the training stimuli first, then policy inputs.
textkit::Vocab build_policy_vocab(const ExperimentConfig& config, const corpus::Dataset& train) {
  std::vector<std::vector<std::string>> stimuli, inputs;
  for (const auto& inst : train.instances) {
    if (inst.pseudo_stimulus) stimuli.push_back(textkit::tokenize_words(*inst.pseudo_stimulus));
    inputs.push_back(textkit::tokenize_words(corpus::sft_input_text(config.task, inst)));
  }
  const auto sv = textkit::build_vocab(stimuli, std::numeric_limits<std::size_t>::max());
  const auto iv = textkit::build_vocab(inputs, std::numeric_limits<std::size_t>::max());
  std::vector<std::string> tokens = sv.tokens();
  std::set<std::string> seen(tokens.begin(), tokens.end());
  for (const auto& t : iv.tokens()) {
    if (tokens.size() >= config.vocab_size) break;
    if (seen.insert(t).second) tokens.push_back(t);
  }
  if (tokens.size() > config.vocab_size) {
    spdlog::warn("stimulus tokens alone exceed policy.vocab_size; keeping {} tokens", tokens.size());
  }
  return textkit::Vocab::from_tokens(std::move(tokens));
}

}  // namespace

// ---------------------------------------------------------------- extract

void cmd_extract(const ExperimentConfig& config, const RunOptions& options, std::ostream& out) {
  config.validate();
  RunContext run(config);
  run.manifest.require_runnable(Stage::kExtract, options.force);

  auto train = corpus::load_jsonl(config.data.train, config.task, corpus::Split::kTrain);
  auto valid = corpus::load_jsonl(config.data.valid, config.task, corpus::Split::kValidation);
  auto test = corpus::load_jsonl(config.data.test, config.task, corpus::Split::kTest);

  corpus::Dataset augmented;
  augmented.split = corpus::Split::kTrain;
  std::size_t dropped = 0;
  switch (config.task) {
    case corpus::Task::kSummarization:
      for (auto inst : train.instances) {
        const auto kws = corpus::extract_pseudo_keywords(inst.input_text, inst.reference_output, config.keyword_top_n);
        if (kws.empty()) {
          ++dropped;
          continue;
        }
        inst.pseudo_stimulus = corpus::render_keyword_stimulus(kws);
        augmented.instances.push_back(std::move(inst));
      }
      break;
    case corpus::Task::kDialogue:
      for (auto inst : train.instances) {
        try {
          const auto acts = corpus::acts_from_json(inst.annotations);
          inst.pseudo_stimulus = corpus::verbalize_dialogue_acts(acts);
          augmented.instances.push_back(std::move(inst));
        } catch (const ValidationError& e) {
          spdlog::warn("dropping dialogue turn '{}': {}", inst.id, e.what());
          ++dropped;
        }
      }
      break;
    case corpus::Task::kReasoning: {
      const auto tmpl = make_template(config, corpus::Dataset{}, true);
      const auto backend = llm::make_backend(config.backend, config.task, tmpl);
      const auto gen = single_sample(config);
      const auto reward = eval::reward_fn(config.task, "accuracy01");
      corpus::MiningStats stats;
      augmented = corpus::mine_cot_pairs(
          train, corpus::human_cot_prompts(),
          [&](const corpus::Instance& q, const std::string& prompt) {
            return backend->generate(llm::build_prompt(tmpl, q.input_text, prompt), gen).front();
          },
          [&](const corpus::Instance& q, const std::string& reasoning) {
            return reward(q.input_text, reasoning, q) > 0.5;
          },
          &stats);
      dropped = stats.calls - stats.kept;
      out << fmt::format("mined {} correct (question, prompt) pairs from {} calls ({} failed)\n", stats.kept,
                         stats.calls, stats.failures);
      break;
    }
  }
  if (augmented.instances.empty()) throw ValidationError("no training instance received a pseudo-stimulus");
  out << fmt::format("extract: kept {} dropped {}\n", augmented.size(), dropped);

  const auto vocab = build_policy_vocab(config, augmented);
  fs::create_directories(config.run_dir / "data");
  save_dataset(run.data_file(corpus::Split::kTrain), augmented, run.hash);
  save_dataset(run.data_file(corpus::Split::kValidation), valid, run.hash);
  save_dataset(run.data_file(corpus::Split::kTest), test, run.hash);
  const nlohmann::json vj = {{"config_hash", run.hash}, {"tokens", vocab.tokens()}};
  write_atomic(config.run_dir / "vocab.json", vj.dump() + "\n");
  out << fmt::format("policy vocabulary: {} tokens\n", vocab.size());

  run.truncate_curves(Stage::kSft);
  run.manifest.complete(Stage::kExtract, {{"kept", augmented.size()},
                                          {"dropped", dropped},
                                          {"valid", valid.size()},
                                          {"test", test.size()},
                                          {"vocab_size", vocab.size()}});
  run.manifest.save();
}

// ---------------------------------------------------------------- sft

void cmd_sft(const ExperimentConfig& config, const RunOptions& options, std::ostream& out) {
  config.validate();
  RunContext run(config);
  run.manifest.require_runnable(Stage::kSft, options.force);
  const auto vocab = run.vocab();
  const auto train = run.load(corpus::Split::kTrain);
  const auto examples = train::make_sft_examples(train, vocab, config.max_input_tokens);

  run.truncate_curves(Stage::kSft);
  auto init = policy::init_params(vocab, config.embed_dim, config.hidden_dim, derive_seed(config.seed, 0x1417));
  const auto result = train::sft_train(std::move(init), examples, config.sft, config.seed, [&](std::size_t e, double loss) {
    run.append_curve({{"stage", "sft"}, {"epoch", e}, {"loss", loss}});
    out << fmt::format("sft epoch {} loss {:.6f}\n", e, loss);
  });

  const std::string rel = "checkpoints/sft.ckpt";
  policy::CheckpointMeta meta{config.sft.epochs, "sft", run.hash, {{"final_loss", result.epoch_loss.back()}}};
  fs::create_directories(config.run_dir / "checkpoints");
  policy::save_checkpoint(config.run_dir / rel, result.params, vocab, meta);
  run.manifest.set_checkpoint("sft", rel);
  run.manifest.complete(Stage::kSft, {{"checkpoint", rel}, {"final_loss", result.epoch_loss.back()}});
  run.manifest.save();
}

// ---------------------------------------------------------------- rl

namespace {

struct StimulusScorer {
  const ExperimentConfig& config;
  llm::PromptTemplate tmpl;
  std::shared_ptr<llm::Backend> backend;
  eval::RewardFn reward;

  double score(const corpus::Instance& inst, const std::string& stimulus, std::size_t n) const {
    llm::GenParams g = config.gen;
    g.n = n;
    const auto outs = backend->generate(llm::build_prompt(tmpl, inst.input_text, stimulus), g);
    double total = 0.0;
    for (const auto& o : outs) total += reward(inst.input_text, o, inst);
    return total / static_cast<double>(outs.size());
  }
};

}  // namespace

void cmd_rl(const ExperimentConfig& config, const RunOptions& options, std::ostream& out) {
  config.validate();
  if (!config.rl_enabled) throw ConfigError("rl.enabled is false in this config");
  RunContext run(config);
  run.manifest.require_runnable(Stage::kRl, options.force);
  const auto vocab = run.vocab();
  const auto train = run.load(corpus::Split::kTrain);
  const auto valid = run.load(corpus::Split::kValidation);
  const auto sft = run.load_policy("sft", vocab);

  const auto tmpl = make_template(config, train, true);
  StimulusScorer scorer{config, tmpl, llm::make_backend(config.backend, config.task, tmpl),
                        eval::reward_fn(config.task, config.reward)};

  std::vector<train::RlInstance> instances;
  for (const auto& inst : train.instances) instances.push_back({&inst, policy_input(config, vocab, inst)});
  std::vector<train::RlInstance> val;
  for (std::size_t i = 0; i < std::min(config.validation_size, valid.size()); ++i) {
    val.push_back({&valid.instances[i], policy_input(config, vocab, valid.instances[i])});
  }

  const train::EpisodeScorer episode = [&](const train::RlInstance& ri, std::span<const TokenId>,
                                           const std::string& text) {
    return scorer.score(*ri.instance, text, config.rl.n_llm_samples);
  };
  train::StepRewardFn steps;
  if (config.rl.stepwise_reward) {
    if (config.task != corpus::Task::kSummarization) throw ConfigError("rl.stepwise_reward applies to summarization only");
    steps = [&](const train::RlInstance& ri, std::span<const TokenId> ids) {
      const auto toks = vocab.decode(ids);
      return train::stepwise_keyword_rewards(toks, ri.instance->reference_output);
    };
  }
  decoding::DecodeParams greedy;
  greedy.mode = decoding::Mode::kGreedy;
  greedy.max_new_tokens = config.rl.max_new_tokens;
  greedy.min_len = config.rl.min_len;
  const train::ValidationFn validate = [&](const policy::PolicyParams& params) {
    if (val.empty()) return 0.0;
    double total = 0.0;
    for (const auto& ri : val) {
      const auto s = policy::sample_stimulus(params, vocab, ri.input_ids, greedy, 0);
      total += scorer.score(*ri.instance, s.text, 1);
    }
    return total / static_cast<double>(val.size());
  };

  run.truncate_curves(Stage::kRl);
  const auto result = train::rl_train(sft, instances, vocab, episode, steps, config.rl, config.seed, validate,
                                      [&](const train::RlCurveRecord& rec) {
                                        auto j = rec.to_json();
                                        j["stage"] = "rl";
                                        run.append_curve(j);
                                        out << fmt::format("rl update {} mean_R_llm {:.4f} kl {:.4f} val {:.4f}\n",
                                                           rec.update_idx, rec.mean_r_llm, rec.mean_kl,
                                                           rec.validation_score);
                                      });

  const std::string rel = "checkpoints/rl.ckpt";
  const double last_val = result.curve.empty() ? 0.0 : result.curve.back().validation_score;
  policy::CheckpointMeta meta{config.rl.updates(), "rl", run.hash, {{"validation_score", last_val}}};
  fs::create_directories(config.run_dir / "checkpoints");
  policy::save_checkpoint(config.run_dir / rel, result.params, vocab, meta);
  run.manifest.set_checkpoint("rl", rel);
  // Any earlier evaluation used the sft policy and is reset here.
  run.manifest.complete(Stage::kRl, {{"checkpoint", rel},
                                     {"updates", result.curve.size()},
                                     {"mask_sync_updates", result.mask_sync_updates},
                                     {"final_validation_score", last_val}});
  run.manifest.save();
}

// ---------------------------------------------------------------- eval

std::string_view to_string(Arm arm) { return arm == Arm::kStandard ? "standard" : "dsp"; }

Arm parse_arm(std::string_view name) {
  if (name == "standard") return Arm::kStandard;
  if (name == "dsp") return Arm::kDsp;
  throw ConfigError("arm must be 'standard' or 'dsp'");
}

namespace {

std::string metrics_csv_with_hash(const eval::MetricReport& report, const std::string& hash) {
  return eval::metric_csv(report) + "config_hash," + hash + "\n";
}

eval::MetricReport report_from_json(const nlohmann::json& j) {
  eval::MetricReport r;
  r.sample_count = j.at("sample_count").get<std::size_t>();
  r.scores = j.at("scores").get<std::map<std::string, double>>();
  return r;
}

void write_comparison(const RunContext& run) {
  const auto& rec = run.manifest.record(Stage::kEval);
  std::vector<std::pair<std::string, eval::MetricReport>> arms;
  for (Arm a : {Arm::kStandard, Arm::kDsp}) {
    const std::string name(to_string(a));
    if (rec.contains("arms") && rec["arms"].contains(name)) arms.emplace_back(name, report_from_json(rec["arms"][name]));
  }
  const auto metrics = eval::report_metrics(run.config.task);
  const fs::path dir = run.config.run_dir / "reports";
  write_atomic(dir / "comparison.md",
               fmt::format("Config hash: {}\n\n{}", run.hash, eval::comparison_markdown(arms, metrics)));
  write_atomic(dir / "comparison.csv", eval::comparison_csv(arms, metrics) + "config_hash," + run.hash + "\n");
}

}  // namespace

void cmd_eval(const ExperimentConfig& config, const std::vector<Arm>& arms, const RunOptions& options,
              std::ostream& out) {
  config.validate();
  if (arms.empty()) throw ConfigError("no evaluation arm selected");
  RunContext run(config);
  // Evaluating an additional arm is not a rerun; only repeated arms need --force.
  nlohmann::json record = run.manifest.done(Stage::kEval) ? run.manifest.record(Stage::kEval) : nlohmann::json::object();
  for (Arm a : arms) {
    if (record.contains("arms") && record["arms"].contains(std::string(to_string(a))) && !options.force) {
      throw ValidationError(fmt::format("arm '{}' was already evaluated according to the manifest; pass --force",
                                        to_string(a)));
    }
  }
  run.manifest.require_runnable(Stage::kEval, true);
  if (config.rl_enabled && !run.manifest.done(Stage::kRl)) {
    out << "note: rl stage not complete; evaluating the sft policy\n";
  }

  const auto vocab = run.vocab();
  const auto train = run.load(corpus::Split::kTrain);
  const auto test = run.load(corpus::Split::kTest);
  const auto gen = single_sample(config);
  const fs::path dir = config.run_dir / "reports";
  fs::create_directories(dir);

  for (Arm arm : arms) {
    const bool dsp = arm == Arm::kDsp;
    const auto tmpl = make_template(config, train, dsp);
    const auto backend = llm::make_backend(config.backend, config.task, tmpl);
    std::optional<policy::PolicyParams> params;
    std::string policy_name;
    if (dsp) {
      policy_name = run.manifest.done(Stage::kRl) ? "rl" : "sft";
      params = run.load_policy(policy_name, vocab);
    }
    std::vector<std::string> outputs;
    std::string lines;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto& inst = test.instances[i];
      std::optional<std::string> stimulus;
      if (dsp) {
        const auto ids = policy_input(config, vocab, inst);
        stimulus = policy::sample_stimulus(*params, vocab, ids, config.decode, derive_seed(config.seed, 0xe7a1, i)).text;
      }
      outputs.push_back(backend->generate(llm::build_prompt(tmpl, inst.input_text, stimulus), gen).front());
      nlohmann::json j = {{"id", inst.id}, {"output", outputs.back()}, {"config_hash", run.hash}};
      j["stimulus"] = stimulus ? nlohmann::json(*stimulus) : nlohmann::json();
      lines += j.dump() + "\n";
    }
    const auto report = eval::evaluate_outputs(config.task, test.instances, outputs);
    const std::string name(to_string(arm));
    write_atomic(dir / ("outputs_" + name + ".jsonl"), lines);
    write_atomic(dir / ("metrics_" + name + ".csv"), metrics_csv_with_hash(report, run.hash));
    record["arms"][name] = {{"scores", report.scores}, {"sample_count", report.sample_count}};
    if (dsp) record["arms"][name]["policy"] = policy_name;
    out << fmt::format("eval [{}]\n{}", name, eval::metric_csv(report));
  }
  run.manifest.complete(Stage::kEval, record);
  run.manifest.save();
  if (record["arms"].size() == 2) write_comparison(run);
}

// ---------------------------------------------------------------- report

void cmd_report(const ExperimentConfig& config, std::ostream& out) {
  RunContext run(config);
  if (!run.manifest.done(Stage::kEval)) {
    throw ValidationError("cannot report: manifest " + (config.run_dir / "manifest.json").string() +
                          " shows stage 'eval' incomplete");
  }
  write_comparison(run);
  std::string curve = "update_idx,mean_reward,validation_score,config_hash\n";
  std::size_t rows = 0;
  const fs::path curves = config.run_dir / "curves.jsonl";
  if (fs::exists(curves)) {
    std::istringstream in(read_file(curves));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (j.value("stage", "") != "rl") continue;
      curve += fmt::format("{},{:.6f},{:.6f},{}\n", j.at("update_idx").get<std::size_t>(),
                           j.at("mean_reward").get<double>(), j.at("validation_score").get<double>(), run.hash);
      ++rows;
    }
  }
  write_atomic(config.run_dir / "reports" / "curve.csv", curve);
  out << read_file(config.run_dir / "reports" / "comparison.md");
  out << fmt::format("curve.csv: {} rl updates\n", rows);
}

void run_all(const ExperimentConfig& config, const RunOptions& options, std::ostream& out) {
  cmd_extract(config, options, out);
  cmd_sft(config, options, out);
  if (config.rl_enabled) cmd_rl(config, options, out);
  cmd_eval(config, {Arm::kStandard, Arm::kDsp}, options, out);
  cmd_report(config, out);
}

}  // namespace dsp::pipeline
