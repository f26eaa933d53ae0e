// Writes the bundled toy corpora (train/valid/test JSONL per task).
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dsp/synthetic.hpp"

namespace {

using namespace dsp;

// Splits by position; dialogue turns never straddle a split because whole
// dialogues are assigned at once.
void write_splits(const corpus::Dataset& data, const std::filesystem::path& dir, double train_frac, double valid_frac) {
  std::filesystem::create_directories(dir);
  corpus::Dataset train, valid, test;
  const auto n = data.size();
  const auto n_train = static_cast<std::size_t>(train_frac * static_cast<double>(n));
  const auto n_valid = static_cast<std::size_t>(valid_frac * static_cast<double>(n));
  std::string prev_group;
  std::size_t split = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto inst = data.instances[i];
    inst.pseudo_stimulus.reset();
    const std::string group = inst.annotations.contains("dialogue_id")
                                  ? inst.annotations["dialogue_id"].get<std::string>()
                                  : inst.id;
    if (group != prev_group) split = i < n_train ? 0 : i < n_train + n_valid ? 1 : 2;
    prev_group = group;
    (split == 0 ? train : split == 1 ? valid : test).instances.push_back(std::move(inst));
  }
  corpus::save_jsonl(dir / "train.jsonl", train);
  corpus::save_jsonl(dir / "valid.jsonl", valid);
  corpus::save_jsonl(dir / "test.jsonl", test);
  std::cout << dir.string() << ": " << train.size() << '/' << valid.size() << '/' << test.size() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generate the toy corpora."};
  std::string out = "data/toy";
  std::uint64_t seed = 7;
  app.add_option("--out", out, "output directory");
  app.add_option("--seed", seed, "generator seed");
  CLI11_PARSE(app, argc, argv);

  const std::filesystem::path root(out);
  write_splits(synthetic::summarization_corpus(60, seed), root / "summarization", 0.7, 0.1);
  write_splits(synthetic::dialogue_corpus(30, seed), root / "dialogue", 0.7, 0.1);
  write_splits(synthetic::reasoning_corpus(60, seed), root / "reasoning", 0.7, 0.1);
  return 0;
}
