#include "dsp/policy.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "dsp/errors.hpp"
#include "dsp/rng.hpp"

namespace dsp::policy {

namespace {

constexpr char kMagic[8] = {'D', 'S', 'P', 'C', 'K', 'P', 'T', '\0'};

Vector softmax(const Vector& x) {
  const double mx = x.maxCoeff();
  Vector e = (x.array() - mx).exp();
  return e / e.sum();
}

Vector sigmoid(const Vector& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

void check_ids(std::span<const TokenId> ids, std::size_t vocab, const char* what) {
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ValidationError(std::string(what) + " id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(vocab));
    }
  }
}

struct GruIdx {
  std::size_t Wz, Uz, bz, Wr, Ur, br, Wn, Un, bn;
};

GruIdx gru_idx(const TensorIndex& t, bool decoder) {
  if (decoder) return {t.dec_Wz, t.dec_Uz, t.dec_bz, t.dec_Wr, t.dec_Ur, t.dec_br, t.dec_Wn, t.dec_Un, t.dec_bn};
  return {t.enc_Wz, t.enc_Uz, t.enc_bz, t.enc_Wr, t.enc_Ur, t.enc_br, t.enc_Wn, t.enc_Un, t.enc_bn};
}

}  // namespace

PolicyParams PolicyParams::allocate(PolicyDims dims) {
  PolicyParams p;
  p.dims = dims;
  const auto V = static_cast<Eigen::Index>(dims.vocab);
  const auto d = static_cast<Eigen::Index>(dims.d);
  const auto h = static_cast<Eigen::Index>(dims.h);
  auto& t = p.tensors;
  auto& ix = p.idx;
  ix.embedding = t.add("embedding", Matrix::Zero(V, d));
  for (const char* side : {"enc", "dec"}) {
    const std::string s(side);
    std::size_t* slots[9];
    if (s == "enc") {
      std::size_t* e[9] = {&ix.enc_Wz, &ix.enc_Uz, &ix.enc_bz, &ix.enc_Wr, &ix.enc_Ur,
                           &ix.enc_br, &ix.enc_Wn, &ix.enc_Un, &ix.enc_bn};
      std::copy(e, e + 9, slots);
    } else {
      std::size_t* e[9] = {&ix.dec_Wz, &ix.dec_Uz, &ix.dec_bz, &ix.dec_Wr, &ix.dec_Ur,
                           &ix.dec_br, &ix.dec_Wn, &ix.dec_Un, &ix.dec_bn};
      std::copy(e, e + 9, slots);
    }
    int k = 0;
    for (const char* gate : {"z", "r", "n"}) {
      *slots[k++] = t.add(s + "_W" + gate, Matrix::Zero(h, d));
      *slots[k++] = t.add(s + "_U" + gate, Matrix::Zero(h, h));
      *slots[k++] = t.add(s + "_b" + gate, Matrix::Zero(h, 1));
    }
  }
  ix.att_We = t.add("att_We", Matrix::Zero(h, h));
  ix.att_Wd = t.add("att_Wd", Matrix::Zero(h, h));
  ix.att_v = t.add("att_v", Matrix::Zero(1, h));
  ix.comb_W = t.add("comb_W", Matrix::Zero(h, 2 * h));
  ix.comb_b = t.add("comb_b", Matrix::Zero(h, 1));
  ix.out_W = t.add("out_W", Matrix::Zero(V, h));
  ix.out_b = t.add("out_b", Matrix::Zero(V, 1));
  ix.value_w = t.add("value_w", Matrix::Zero(1, h));
  ix.value_b = t.add("value_b", Matrix::Zero(1, 1));
  return p;
}

PolicyParams init_params(std::size_t vocab_size, std::size_t d, std::size_t h, std::uint64_t seed) {
  if (d < 8 || h < 8) throw ConfigError("policy widths d and h must be at least 8");
  if (vocab_size < static_cast<std::size_t>(special::kCount)) {
    throw ConfigError("vocabulary must contain the special tokens");
  }
  PolicyParams p = PolicyParams::allocate({vocab_size, d, h});
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(h));
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    if (i == p.idx.value_w || i == p.idx.value_b) continue;
    Matrix& m = p.tensors.value(i);
    // Unit-variance embeddings; small ones leave encoder states nearly token-independent.
    const double b = i == p.idx.embedding ? std::sqrt(3.0) : bound;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.uniform(-b, b);
    }
  }
  return p;
}

PolicyParams init_params(const Vocab& vocab, std::size_t d, std::size_t h, std::uint64_t seed) {
  return init_params(vocab.size(), d, h, seed);
}

Vector gru_step(const PolicyParams& p, bool decoder, const Vector& x, const Vector& hprev) {
  const GruIdx g = gru_idx(p.idx, decoder);
  const Vector z = sigmoid(p.at(g.Wz) * x + p.at(g.Uz) * hprev + p.at(g.bz));
  const Vector r = sigmoid(p.at(g.Wr) * x + p.at(g.Ur) * hprev + p.at(g.br));
  const Vector n = (p.at(g.Wn) * x + p.at(g.bn) + r.cwiseProduct(p.at(g.Un) * hprev)).array().tanh().matrix();
  return (1.0 - z.array()).matrix().cwiseProduct(n) + z.cwiseProduct(hprev);
}

// ---------------------------------------------------------------- PolicyModel

PolicyModel::PolicyModel(const PolicyParams& params, std::span<const TokenId> input_ids) : params_(&params) {
  check_ids(input_ids, params.dims.vocab, "input");
  const auto h = static_cast<Eigen::Index>(params.dims.h);
  const auto n = static_cast<Eigen::Index>(input_ids.size() + 1);
  enc_.resize(h, n);
  Vector state = Vector::Zero(h);
  const Matrix& E = params.at(params.idx.embedding);
  for (Eigen::Index j = 0; j < n; ++j) {
    const TokenId id = j + 1 < n ? input_ids[static_cast<std::size_t>(j)] : special::kEos;
    state = gru_step(params, false, E.row(id).transpose(), state);
    enc_.col(j) = state;
  }
  enc_proj_ = params.at(params.idx.att_We) * enc_;
}

PolicyModel::State PolicyModel::initial_state() const {
  return advance(State{enc_.col(enc_.cols() - 1)}, special::kBos);
}

PolicyModel::State PolicyModel::advance(const State& state, TokenId token) const {
  if (token < 0 || static_cast<std::size_t>(token) >= params_->dims.vocab) {
    throw ValidationError("decoder token id " + std::to_string(token) + " outside vocabulary");
  }
  const Matrix& E = params_->at(params_->idx.embedding);
  return State{gru_step(*params_, true, E.row(token).transpose(), state.s)};
}

Vector PolicyModel::logits(const State& state) const {
  const auto& p = *params_;
  const Vector q = p.at(p.idx.att_Wd) * state.s;
  const Matrix pre = (enc_proj_.colwise() + q).array().tanh().matrix();
  const Vector scores = (p.at(p.idx.att_v) * pre).transpose();
  const Vector alpha = softmax(scores);
  const Vector ctx = enc_ * alpha;
  Vector joint(state.s.size() + ctx.size());
  joint << state.s, ctx;
  const Vector comb = (p.at(p.idx.comb_W) * joint + p.at(p.idx.comb_b)).array().tanh().matrix();
  return p.at(p.idx.out_W) * comb + p.at(p.idx.out_b);
}

decoding::Distribution PolicyModel::next_distribution(const State& state) const {
  const Vector probs = softmax(logits(state));
  return decoding::Distribution(probs.data(), probs.data() + probs.size());
}

double PolicyModel::value(const State& state) const {
  const auto& p = *params_;
  return (p.at(p.idx.value_w) * state.s)(0, 0) + p.at(p.idx.value_b)(0, 0);
}

PolicyModel::State PolicyModel::state_after(std::span<const TokenId> prefix) const {
  State s = initial_state();
  for (TokenId t : prefix) s = advance(s, t);
  return s;
}

// ---------------------------------------------------------------- free functions

decoding::Distribution next_token_distribution(const PolicyParams& params, std::span<const TokenId> input_ids,
                                               std::span<const TokenId> prefix_ids) {
  const PolicyModel model(params, input_ids);
  return model.next_distribution(model.state_after(prefix_ids));
}

double state_value(const PolicyParams& params, std::span<const TokenId> input_ids,
                   std::span<const TokenId> prefix_ids) {
  const PolicyModel model(params, input_ids);
  return model.value(model.state_after(prefix_ids));
}

SequenceLogprob sequence_logprob(const PolicyParams& params, std::span<const TokenId> input_ids,
                                 std::span<const TokenId> stimulus_ids) {
  check_ids(stimulus_ids, params.dims.vocab, "stimulus");
  const PolicyModel model(params, input_ids);
  SequenceLogprob out;
  auto state = model.initial_state();
  for (std::size_t t = 0; t < stimulus_ids.size(); ++t) {
    const Vector lg = model.logits(state);
    const double mx = lg.maxCoeff();
    const double lse = mx + std::log((lg.array() - mx).exp().sum());
    const double lp = lg(stimulus_ids[t]) - lse;
    out.per_token.push_back(lp);
    out.total += lp;
    if (t + 1 < stimulus_ids.size()) state = model.advance(state, stimulus_ids[t]);
  }
  return out;
}

namespace {

SampledStimulus to_stimulus(decoding::DecodedSequence seq, const Vocab& vocab) {
  SampledStimulus out;
  out.text = vocab.decode_text(seq.ids);
  out.ids = std::move(seq.ids);
  out.logprobs = std::move(seq.logprobs);
  out.values = std::move(seq.values);
  out.finished = seq.finished;
  return out;
}

}  // namespace

SampledStimulus sample_stimulus(const PolicyParams& params, const Vocab& vocab, std::span<const TokenId> input_ids,
                                const decoding::DecodeParams& decode, std::uint64_t rng_seed) {
  decode.validate();
  if (decode.mode == decoding::Mode::kBeam) {
    return beam_decode(params, vocab, input_ids, decode.beam_size, decode.max_new_tokens, decode.min_len);
  }
  const PolicyModel model(params, input_ids);
  Rng rng(rng_seed);
  return to_stimulus(decoding::sample(model, decode, rng), vocab);
}

SampledStimulus beam_decode(const PolicyParams& params, const Vocab& vocab, std::span<const TokenId> input_ids,
                            std::size_t beam_size, std::size_t max_new_tokens, std::size_t min_len) {
  const PolicyModel model(params, input_ids);
  return to_stimulus(decoding::beam_search(model, beam_size, max_new_tokens, min_len), vocab);
}

// ---------------------------------------------------------------- tape path

namespace {

ad::Var tape_gru(ad::Tape& tp, const GruIdx& g, ad::Var x, ad::Var hprev) {
  auto lin = [&](std::size_t W, std::size_t U, std::size_t b) {
    return tp.add(tp.add(tp.matmul(tp.param(W), x), tp.matmul(tp.param(U), hprev)), tp.param(b));
  };
  const ad::Var z = tp.sigmoid(lin(g.Wz, g.Uz, g.bz));
  const ad::Var r = tp.sigmoid(lin(g.Wr, g.Ur, g.br));
  const ad::Var n = tp.tanh(tp.add(tp.add(tp.matmul(tp.param(g.Wn), x), tp.param(g.bn)),
                                   tp.mul(r, tp.matmul(tp.param(g.Un), hprev))));
  return tp.add(tp.mul(tp.one_minus(z), n), tp.mul(z, hprev));
}

}  // namespace

TapeForward teacher_forced(ad::Tape& tp, const PolicyParams& params, std::span<const TokenId> input_ids,
                           std::span<const TokenId> targets) {
  check_ids(input_ids, params.dims.vocab, "input");
  check_ids(targets, params.dims.vocab, "target");
  const auto& ix = params.idx;
  const GruIdx enc = gru_idx(ix, false);
  const GruIdx dec = gru_idx(ix, true);
  const ad::Var E = tp.param(ix.embedding);

  ad::Var state = tp.constant(Matrix::Zero(static_cast<Eigen::Index>(params.dims.h), 1));
  std::vector<ad::Var> columns;
  for (std::size_t j = 0; j <= input_ids.size(); ++j) {
    const TokenId id = j < input_ids.size() ? input_ids[j] : special::kEos;
    state = tape_gru(tp, enc, tp.row(E, id), state);
    columns.push_back(state);
  }
  const ad::Var H = tp.hconcat(columns);
  const ad::Var Hproj = tp.matmul(tp.param(ix.att_We), H);

  TapeForward out;
  ad::Var s = tape_gru(tp, dec, tp.row(E, special::kBos), state);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const ad::Var q = tp.matmul(tp.param(ix.att_Wd), s);
    const ad::Var scores = tp.matmul(tp.param(ix.att_v), tp.tanh(tp.add(Hproj, q)));
    const ad::Var alpha = tp.softmax(scores);
    const ad::Var ctx = tp.matmul(H, tp.transpose(alpha));
    const ad::Var comb = tp.tanh(tp.add(tp.matmul(tp.param(ix.comb_W), tp.vconcat(s, ctx)), tp.param(ix.comb_b)));
    out.logits.push_back(tp.add(tp.matmul(tp.param(ix.out_W), comb), tp.param(ix.out_b)));
    out.values.push_back(tp.add(tp.matmul(tp.param(ix.value_w), s), tp.param(ix.value_b)));
    if (t + 1 < targets.size()) s = tape_gru(tp, dec, tp.row(E, targets[t]), s);
  }
  return out;
}

// ---------------------------------------------------------------- checkpoints

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::uint64_t vocab_hash64(const Vocab& vocab) { return std::stoull(vocab.hash().substr(0, 16), nullptr, 16); }

namespace {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ValidationError("checkpoint truncated: " + path.string());
  return v;
}

std::filesystem::path meta_path(const std::filesystem::path& path) {
  std::filesystem::path m = path;
  m += ".json";
  return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const PolicyParams& params, const Vocab& vocab,
                     const CheckpointMeta& meta) {
  if (!params.all_finite()) throw NumericError("refusing to checkpoint non-finite parameters");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot write checkpoint: " + path.string());
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint64_t>(os, vocab_hash64(vocab));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(params.dims.d));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(params.dims.h));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(params.dims.vocab));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(params.tensors.size()));
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      const std::string& name = params.tensors.name(i);
      const Matrix& m = params.tensors.value(i);
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) put<float>(os, static_cast<float>(m(r, c)));
      }
    }
    if (!os) throw ConfigError("failed writing checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);

  nlohmann::json j = {{"step", meta.step},
                      {"stage", meta.stage},
                      {"config_hash", meta.config_hash},
                      {"metrics", meta.metrics},
                      {"format_version", kCheckpointVersion},
                      {"vocab_hash", vocab.hash()}};
  std::ofstream ms(meta_path(path), std::ios::trunc);
  ms << j.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const Vocab& vocab) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ValidationError("not a checkpoint file: " + path.string());
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto vhash = get<std::uint64_t>(is, path);
  if (vhash != vocab_hash64(vocab)) throw ValidationError("checkpoint vocabulary hash does not match vocabulary");
  PolicyDims dims;
  dims.d = get<std::uint32_t>(is, path);
  dims.h = get<std::uint32_t>(is, path);
  dims.vocab = get<std::uint32_t>(is, path);
  if (dims.vocab != vocab.size()) throw ValidationError("checkpoint vocabulary size does not match vocabulary");
  const auto count = get<std::uint32_t>(is, path);

  LoadedCheckpoint out{PolicyParams::allocate(dims), {}};
  if (count != out.params.tensors.size()) throw ValidationError("checkpoint tensor count mismatch");
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = get<std::uint32_t>(is, path);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rows = get<std::uint32_t>(is, path);
    const auto cols = get<std::uint32_t>(is, path);
    const auto slot = out.params.tensors.find(name);
    if (!slot) throw ValidationError("checkpoint has unknown tensor '" + name + "'");
    Matrix& m = out.params.tensors.value(*slot);
    if (m.rows() != rows || m.cols() != cols) throw ValidationError("checkpoint tensor '" + name + "' has wrong shape");
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = get<float>(is, path);
    }
  }
  if (!out.params.all_finite()) throw NumericError("checkpoint contains non-finite values");

  std::ifstream ms(meta_path(path));
  if (ms) {
    try {
      const auto j = nlohmann::json::parse(ms);
      out.meta.step = j.value("step", std::uint64_t{0});
      out.meta.stage = j.value("stage", std::string{});
      out.meta.config_hash = j.value("config_hash", std::string{});
      out.meta.metrics = j.value("metrics", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("checkpoint metadata unreadable: " + std::string(e.what()));
    }
  }
  return out;
}

}  // namespace dsp::policy
