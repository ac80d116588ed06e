// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/sampling.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "wmlab/error.hpp"
#include "wmlab/lm/container.hpp"
#include "wmlab/lm/decoder.hpp"
#include "wmlab/lm/model.hpp"
#include "wmlab/rng.hpp"

namespace wmlab::wm {

int KgwParams::green_count(int vocab_size) const {
  return static_cast<int>(std::floor(gamma * static_cast<double>(vocab_size)));
}

void KgwParams::validate(int vocab_size) const {
  const int g = green_count(vocab_size);
  if (!(gamma > 0.0 && gamma < 1.0) || g < 1 || g >= vocab_size) {
    throw ParameterError(fmt::format("gamma {} gives {} green tokens of {}", gamma, g, vocab_size));
  }
  if (!(delta >= 0.0)) throw ParameterError(fmt::format("delta must be >= 0, got {}", delta));
  if (k < 1) throw ParameterError(fmt::format("context width k must be >= 1, got {}", k));
}

uint64_t token_hash(int token) { return mix64(static_cast<uint64_t>(token) ^ 0x6b67775f746f6b6eULL); }

uint64_t kgw_context_seed(const KgwParams& params, std::span<const int> prev) {
  uint64_t acc = 0;
  for (int i = 0; i < params.k; ++i) {
    const auto idx = static_cast<std::ptrdiff_t>(prev.size()) - 1 - i;
    acc += token_hash(idx >= 0 ? prev[static_cast<size_t>(idx)] : lm::kBos);
  }
  return mix64(params.key ^ acc);
}

std::vector<uint8_t> kgw_partition(const KgwParams& params, std::span<const int> prev, int vocab_size) {
  std::vector<int> perm(static_cast<size_t>(vocab_size));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(kgw_context_seed(params, prev));
  rng.shuffle(std::span<int>(perm));
  std::vector<uint8_t> mask(static_cast<size_t>(vocab_size), 0);
  const int g = params.green_count(vocab_size);
  for (int i = 0; i < g; ++i) mask[static_cast<size_t>(perm[static_cast<size_t>(i)])] = 1;
  return mask;
}

KgwPartitioner::KgwPartitioner(KgwParams params, int vocab_size) : params_(params), vocab_size_(vocab_size) {
  params_.validate(vocab_size);
}

const std::vector<uint8_t>& KgwPartitioner::green(std::span<const int> prev) {
  const uint64_t seed = kgw_context_seed(params_, prev);
  auto it = cache_.find(seed);
  if (it != cache_.end()) return it->second;
  return cache_.emplace(seed, kgw_partition(params_, prev, vocab_size_)).first->second;
}

std::vector<double> kgw_transform(std::span<const float> logits, std::span<const uint8_t> green, double delta,
                                  double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("temperature must be > 0");
  std::vector<double> z(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < z.size(); ++i) {
    z[i] = static_cast<double>(logits[i]) / temperature + (green[i] ? delta : 0.0);
    mx = std::max(mx, z[i]);
  }
  double s = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : z) v /= s;
  return z;
}

std::vector<double> kgw_transform(std::span<const float> logits, std::span<const int> prev, const KgwParams& params,
                                  double temperature) {
  const auto green = kgw_partition(params, prev, static_cast<int>(logits.size()));
  return kgw_transform(logits, green, params.delta, temperature);
}

double kth_key_entry(uint64_t seed, int vocab_size, int token, int col) {
  const uint64_t index = static_cast<uint64_t>(col) * static_cast<uint64_t>(vocab_size) + static_cast<uint64_t>(token);
  return unit_open(mix64(mix64(seed) ^ mix64(index + 0x4b5448ULL)));
}

KthKey KthKey::generate(uint64_t seed, int vocab_size, int n_key, KthConvention convention) {
  if (vocab_size < 1 || n_key < 1) throw ParameterError("KTH key needs vocab_size >= 1 and n_key >= 1");
  KthKey key;
  key.seed = seed;
  key.vocab_size = vocab_size;
  key.n_key = n_key;
  key.convention = convention;
  key.matrix.resize(static_cast<size_t>(vocab_size) * static_cast<size_t>(n_key));
  for (int c = 0; c < n_key; ++c) {
    for (int t = 0; t < vocab_size; ++t) {
      key.matrix[static_cast<size_t>(c) * vocab_size + t] = kth_key_entry(seed, vocab_size, t, c);
    }
  }
  return key;
}

void save_kth_key(const KthKey& key, const std::filesystem::path& path) {
  lm::Container c;
  c.header["kind"] = "kth_key";
  c.header["seed"] = key.seed;
  c.header["vocab_size"] = key.vocab_size;
  c.header["n_key"] = key.n_key;
  c.header["convention"] = key.convention == KthConvention::kInverseProb ? "inverse_prob" : "prob_as_written";
  c.entries.push_back({"xi", {key.n_key, key.vocab_size}, "f64", lm::pack_f64(key.matrix)});
  lm::write_container(path, c);
}

KthKey load_kth_key(const std::filesystem::path& path) {
  lm::Container c = lm::read_container(path);
  if (c.header.value("kind", std::string()) != "kth_key" || c.entries.size() != 1) {
    throw FormatError(fmt::format("'{}' is not a KTH key", path.string()));
  }
  KthKey key;
  key.seed = c.header.at("seed").get<uint64_t>();
  key.vocab_size = c.header.at("vocab_size").get<int>();
  key.n_key = c.header.at("n_key").get<int>();
  key.convention = c.header.value("convention", std::string("inverse_prob")) == "prob_as_written"
                       ? KthConvention::kProbAsWritten
                       : KthConvention::kInverseProb;
  key.matrix = lm::unpack_f64(c.entries[0].bytes);
  if (key.matrix.size() != static_cast<size_t>(key.vocab_size) * static_cast<size_t>(key.n_key)) {
    throw LengthError(fmt::format("'{}' key matrix has {} entries", path.string(), key.matrix.size()));
  }
  return key;
}

int kth_sample_column(std::span<const double> probs, std::span<const double> column, KthConvention convention) {
  int best = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (!(p > 0.0)) continue;
    // Monotone (log) form of xi^(1/p) or xi^p.
    const double lx = std::log(column[i]);
    const double score = convention == KthConvention::kInverseProb ? lx / p : lx * p;
    if (best < 0 || score > best_score) {
      best = static_cast<int>(i);
      best_score = score;
    }
  }
  if (best < 0) throw ParameterError("kth_sample needs a probability vector with positive mass");
  return best;
}

int kth_sample(std::span<const double> probs, const KthKey& key, int64_t position, int shift) {
  if (static_cast<int>(probs.size()) != key.vocab_size) {
    throw ParameterError(fmt::format("probability vector has {} entries, key vocab is {}", probs.size(), key.vocab_size));
  }
  const int col = static_cast<int>((position + shift) % key.n_key);
  return kth_sample_column(probs, key.column(col), key.convention);
}

int kth_draw_shift(uint64_t seed, uint64_t generation_index, int n_key) {
  if (n_key < 1) throw ParameterError("n_key must be >= 1");
  Rng rng(derive_seed(derive_seed(seed, "kth-shift"), generation_index));
  return static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_key)));
}

int sample_categorical(std::span<const double> probs, double u) {
  double total = 0.0;
  for (double p : probs) total += p;
  const double target = u * total;
  double acc = 0.0;
  int last_positive = -1;
  for (size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last_positive = static_cast<int>(i);
    if (acc > target) return last_positive;
  }
  if (last_positive < 0) throw ParameterError("cannot sample from an all-zero distribution");
  return last_positive;
}

void Sampler::validate(int vocab_size) const {
  if (!(temperature > 0.0)) throw ParameterError("sampler temperature must be > 0");
  switch (kind) {
    case SamplerKind::kPlain:
      if (kgw || kth) throw ParameterError("plain sampler must not carry watermark parameters");
      break;
    case SamplerKind::kKgw:
      if (!kgw || kth) throw ParameterError("kgw sampler needs exactly KGW parameters");
      kgw->validate(vocab_size);
      break;
    case SamplerKind::kKth:
      if (!kth || kgw) throw ParameterError("kth sampler needs exactly a KTH key");
      if (kth->vocab_size != vocab_size) throw ParameterError("KTH key vocabulary does not match the model");
      break;
  }
}

Sampler Sampler::plain(uint64_t seed, double temperature) {
  Sampler s;
  s.seed = seed;
  s.temperature = temperature;
  return s;
}

Sampler Sampler::with_kgw(KgwParams params, uint64_t seed, double temperature) {
  Sampler s = plain(seed, temperature);
  s.kind = SamplerKind::kKgw;
  s.kgw = params;
  return s;
}

Sampler Sampler::with_kth(std::shared_ptr<const KthKey> key, uint64_t seed, bool random_shift, double temperature) {
  Sampler s = plain(seed, temperature);
  s.kind = SamplerKind::kKth;
  s.kth = std::move(key);
  s.kth_random_shift = random_shift;
  return s;
}

Generation generate(const ModelParams& params, const TokenSequence& prompt, int completion_len,
                    const Sampler& sampler, uint64_t generation_index) {
  const int V = params.config.vocab_size;
  sampler.validate(V);
  if (prompt.tokens.empty()) throw ParameterError("generate needs a nonempty prompt");
  if (completion_len < 0) throw ParameterError("completion_len must be >= 0");
  if (static_cast<int>(prompt.size()) + completion_len > params.config.context_len) {
    throw LengthError(fmt::format("prompt {} + completion {} exceeds context_len {}", prompt.size(), completion_len,
                                  params.config.context_len));
  }
  prompt.validate(V);
  params.check_finite();

  Generation gen;
  gen.text.tokens = prompt.tokens;
  gen.text.split_point = prompt.size();
  if (completion_len == 0) return gen;

  Rng rng(sampler.seed + generation_index);
  std::optional<KgwPartitioner> partitioner;
  if (sampler.kind == SamplerKind::kKgw) partitioner.emplace(*sampler.kgw, V);
  if (sampler.kind == SamplerKind::kKth && sampler.kth_random_shift) {
    gen.kth_shift = kth_draw_shift(sampler.seed, generation_index, sampler.kth->n_key);
  }

  lm::IncrementalDecoder decoder(params);
  std::span<const float> raw = decoder.push_all(prompt.tokens);
  std::vector<float> logits;
  const bool has_specials = V > lm::kPad;
  for (int step = 0; step < completion_len; ++step) {
    logits.assign(raw.begin(), raw.end());
    if (has_specials) {
      logits[lm::kPad] = -std::numeric_limits<float>::infinity();
      if (!sampler.allow_eos) logits[lm::kEos] = -std::numeric_limits<float>::infinity();
    }
    int token;
    const double u = rng.uniform();
    switch (sampler.kind) {
      case SamplerKind::kPlain:
        token = sample_categorical(lm::softmax(logits, sampler.temperature), u);
        break;
      case SamplerKind::kKgw:
        token = sample_categorical(
            kgw_transform(logits, partitioner->green(gen.text.tokens), sampler.kgw->delta, sampler.temperature), u);
        break;
      case SamplerKind::kKth:
        token = kth_sample(lm::softmax(logits, sampler.temperature), *sampler.kth, step, gen.kth_shift);
        break;
    }
    gen.text.tokens.push_back(token);
    if (has_specials && token == lm::kEos) break;
    if (step + 1 < completion_len) raw = decoder.push(token);
  }
  return gen;
}

}  // namespace wmlab::wm
