// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <fstream>

#include "fd_oracle.hpp"
#include "test_util.hpp"
#include "wmlab/error.hpp"
#include "wmlab/lm/checkpoint.hpp"
#include "wmlab/lm/container.hpp"
#include "wmlab/lm/decoder.hpp"
#include "wmlab/lm/model.hpp"
#include "wmlab/lm/optim.hpp"

using namespace wmlab;
using namespace wmlab::lm;
using wmlab::testing::random_params;
using wmlab::testing::random_tokens;
using wmlab::testing::tiny_config;

namespace {

// vocab 2, d_model 2, no blocks: logits = W * LN(tok[x] + pos[t]) + bias.
ModelParams hand_model() {
  ModelConfig c;
  c.vocab_size = 2;
  c.d_model = 2;
  c.n_heads = 1;
  c.n_layers = 0;
  c.d_ff = 1;
  c.context_len = 4;
  ModelParams p = ModelParams::zeros(c);
  p.at(names::kTokEmb).data = {1.0f, 0.0f, 0.0f, 2.0f};
  p.at(names::kPosEmb).data = {0.0f, 0.0f, 0.5f, 0.0f, 0.0f, 0.5f, 0.0f, 0.0f};
  p.at(names::kFinalNormGain).data = {1.0f, 0.5f};
  p.at(names::kFinalNormBias).data = {0.1f, -0.2f};
  p.at(names::kHead).data = {1.0f, 2.0f, -1.0f, 0.5f};
  p.at(names::kOutputBias).data = {0.3f, -0.3f};
  return p;
}

// Independent scalar evaluation of the affine map above.
std::vector<double> hand_logits(const ModelParams& p, int token, int position) {
  const auto& tok = p.at(names::kTokEmb).data;
  const auto& pos = p.at(names::kPosEmb).data;
  const double x0 = tok[token * 2] + pos[position * 2];
  const double x1 = tok[token * 2 + 1] + pos[position * 2 + 1];
  const double mean = (x0 + x1) / 2.0;
  const double var = ((x0 - mean) * (x0 - mean) + (x1 - mean) * (x1 - mean)) / 2.0;
  const double r = 1.0 / std::sqrt(var + 1e-5);
  const auto& g = p.at(names::kFinalNormGain).data;
  const auto& b = p.at(names::kFinalNormBias).data;
  const double h0 = (x0 - mean) * r * g[0] + b[0];
  const double h1 = (x1 - mean) * r * g[1] + b[1];
  const auto& w = p.at(names::kHead).data;
  const auto& bias = p.at(names::kOutputBias).data;
  return {w[0] * h0 + w[1] * h1 + bias[0], w[2] * h0 + w[3] * h1 + bias[1]};
}

double hand_log_softmax(const std::vector<double>& l, int k) {
  return l[k] - std::log(std::exp(l[0]) + std::exp(l[1]));
}

}  // namespace

TEST_CASE("config invariants") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = ModelConfig{};
  c.context_len = 1;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = ModelConfig{};
  c.vocab_size = 1;
  CHECK_THROWS_AS(c.validate(), ParameterError);
}

TEST_CASE("zero model gives zero logits and a uniform distribution") {
  const ModelParams p = ModelParams::zeros(tiny_config());
  const TokenSequence ctx{{72, 105, 33}, 0};
  for (float l : forward_logits(p, ctx)) CHECK(l == 0.0f);
  for (double q : next_token_dist(p, ctx, 1.0)) CHECK(q == doctest::Approx(1.0 / kByteVocab).epsilon(1e-12));
}

TEST_CASE("forward is deterministic") {
  const ModelParams p = ModelParams::init(tiny_config(), 7);
  const TokenSequence ctx{random_tokens(10, 3), 0};
  CHECK(forward_logits(p, ctx) == forward_logits(p, ctx));
}

TEST_CASE("hand-set affine model matches scalar evaluation") {
  const ModelParams p = hand_model();
  for (int token = 0; token < 2; ++token) {
    const auto got = forward_logits(p, TokenSequence{{token}, 0});
    const auto want = hand_logits(p, token, 0);
    CHECK(got[0] == doctest::Approx(want[0]).epsilon(1e-5));
    CHECK(got[1] == doctest::Approx(want[1]).epsilon(1e-5));
  }
  const auto got = forward_logits(p, TokenSequence{{1, 0, 1}, 0});
  const auto want = hand_logits(p, 1, 2);
  CHECK(got[0] == doctest::Approx(want[0]).epsilon(1e-5));
  CHECK(got[1] == doctest::Approx(want[1]).epsilon(1e-5));
}

TEST_CASE("forward_logits rejects overlong context and non-finite weights") {
  ModelParams p = ModelParams::init(tiny_config(16, 1, 8), 1);
  CHECK_THROWS_AS(forward_logits(p, TokenSequence{random_tokens(9, 1), 0}), LengthError);
  p.at(names::kHead).data[3] = NAN;
  CHECK_THROWS_AS(forward_logits(p, TokenSequence{{1, 2}, 0}), CorruptionError);
}

TEST_CASE("softmax and temperature") {
  const std::vector<float> logits = {std::log(1.0f), std::log(3.0f)};
  const auto q = softmax(logits, 1.0);
  CHECK(q[0] == doctest::Approx(0.25).epsilon(1e-7));
  CHECK(q[1] == doctest::Approx(0.75).epsilon(1e-7));
  CHECK_THROWS_AS(softmax(logits, 0.0), ParameterError);
  CHECK_THROWS_AS(softmax(logits, -1.0), ParameterError);

  const std::vector<float> l3 = {0.3f, 1.2f, -0.5f};
  const auto greedy = softmax(l3, 1e-3);
  CHECK(greedy[1] > 1.0 - 1e-12);
}

TEST_CASE("softmax sums to one on random logits") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> l(kByteVocab);
    for (auto& v : l) v = static_cast<float>(20.0 * rng.normal());
    const auto q = softmax(l, 0.1 + rng.uniform() * 3.0);
    double s = 0.0;
    for (double v : q) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("log_prob of the uniform model") {
  const ModelParams p = ModelParams::zeros(tiny_config());
  const TokenSequence text{random_tokens(12, 5), 4};
  CHECK(log_prob(p, text, 4) == doctest::Approx(8 * std::log(1.0 / kByteVocab)).epsilon(1e-9));
  CHECK_THROWS_AS(log_prob(p, text, 12), ParameterError);
  CHECK_THROWS_AS(log_prob(p, text, 0), ParameterError);
}

TEST_CASE("log_prob equals the sum of next-token log probabilities") {
  const ModelParams p = ModelParams::init(tiny_config(), 9);
  const TokenSequence text{random_tokens(10, 6), 3};
  double sum = 0.0;
  for (size_t t = 3; t < text.size(); ++t) {
    TokenSequence prefix{std::vector<int>(text.tokens.begin(), text.tokens.begin() + t), 0};
    sum += std::log(next_token_dist(p, prefix, 1.0)[text.tokens[t]]);
  }
  const double lp = log_prob(p, text);
  CHECK(lp <= 0.0);
  CHECK(lp == doctest::Approx(sum).epsilon(1e-5));
}

TEST_CASE("log_prob on the hand-set model follows the chain rule") {
  const ModelParams p = hand_model();
  const TokenSequence text{{0, 1, 1}, 0};
  const double want = hand_log_softmax(hand_logits(p, 0, 0), 1) + hand_log_softmax(hand_logits(p, 1, 1), 1);
  CHECK(log_prob(p, text, 1) == doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("causality: future tokens never change earlier conditionals") {
  const ModelParams p = random_params(tiny_config(), 21);
  auto tokens = random_tokens(14, 8);
  const auto before = token_log_probs(p, TokenSequence{tokens, 1});
  for (size_t t = 1; t < tokens.size(); ++t) {
    auto altered = tokens;
    for (size_t j = t + 1; j < altered.size(); ++j) altered[j] = (altered[j] + 37) % 256;
    const auto after = token_log_probs(p, TokenSequence{altered, 1});
    for (size_t j = 0; j < t; ++j) CHECK(after[j] == before[j]);
  }
}

TEST_CASE("grad_log_prob of an unused embedding row is zero") {
  const ModelParams p = random_params(tiny_config(), 4);
  const TokenSequence text{{65, 66, 67, 68, 69}, 1};
  const Tensor g = grad_log_prob(p, text, TensorSelector{names::kTokEmb, {}});
  for (float v : g.row(200)) CHECK(v == 0.0f);
  double norm = 0.0;
  for (float v : g.row(66)) norm += v * v;
  CHECK(norm > 0.0);
  CHECK_THROWS_AS(grad_log_prob(p, text, TensorSelector{"blocks.9.mlp.up", {}}), LookupError);
}

TEST_CASE("grad_log_prob is deterministic and respects the selector mask") {
  const ModelParams p = random_params(tiny_config(), 4);
  const TokenSequence text{random_tokens(12, 2), 4};
  const TensorSelector sel{names::block(1, leaf::kUp), {}};
  const Tensor a = grad_log_prob(p, text, sel);
  CHECK(a == grad_log_prob(p, text, sel));
  std::vector<uint8_t> mask(static_cast<size_t>(a.numel()), 0);
  for (size_t i = 0; i < mask.size(); i += 3) mask[i] = 1;
  const Tensor masked = grad_log_prob(p, text, TensorSelector{sel.tensor_name, mask});
  for (size_t i = 0; i < mask.size(); ++i) CHECK(masked.data[i] == (mask[i] ? a.data[i] : 0.0f));
}

TEST_CASE("grad_log_prob matches central finite differences on every tensor") {
  ModelConfig c = tiny_config(16, 2, 12);
  c.compute_precision = Precision::kDouble;
  const ModelParams p = random_params(c, 17);
  const TokenSequence text{random_tokens(11, 12), 3};
  const DoubleWeights dw = to_double(p);
  for (const auto& spec : tensor_specs(c)) {
    CAPTURE(spec.name);
    const auto fd = wmlab::testing::finite_difference_grad(dw, text, spec.name);
    const auto exact = grad_log_prob(dw, text, spec.name);
    CHECK(wmlab::testing::relative_l2_error(exact, fd) <= 1e-5);
  }
}

TEST_CASE("float-precision gradients agree with the double path") {
  const ModelParams p = random_params(tiny_config(), 5);
  const TokenSequence text{random_tokens(12, 1), 2};
  const std::string name = names::block(0, leaf::kWq);
  const Tensor g = grad_log_prob(p, text, TensorSelector{name, {}});
  const auto ref = grad_log_prob(to_double(p), text, name);
  std::vector<double> gf(g.data.begin(), g.data.end());
  CHECK(wmlab::testing::relative_l2_error(gf, ref) < 1e-4);
}

TEST_CASE("incremental decoder reproduces full-forward logits") {
  const ModelParams p = random_params(tiny_config(16, 2, 16), 3, 0.1);
  const auto tokens = random_tokens(16, 4);
  IncrementalDecoder dec(p);
  for (size_t t = 0; t < tokens.size(); ++t) {
    const auto inc = dec.push(tokens[t]);
    const auto full = forward_logits(p, TokenSequence{std::vector<int>(tokens.begin(), tokens.begin() + t + 1), 0});
    for (size_t j = 0; j < full.size(); ++j) CHECK(inc[j] == doctest::Approx(full[j]).epsilon(1e-4).scale(1.0));
  }
  CHECK_THROWS_AS(dec.push(1), LengthError);
}

TEST_CASE("train_step with zero learning rate leaves params bit-identical") {
  ModelParams p = ModelParams::init(tiny_config(), 2);
  const ModelParams before = p;
  const std::vector<TokenSequence> batch = {{random_tokens(10, 1), 0}, {random_tokens(10, 2), 0}};
  OptimizerState sgd{.kind = OptimizerKind::kSgd};
  train_step(p, batch, 0.0, sgd);
  CHECK(p.same_weights(before));
  OptimizerState adam;
  train_step(p, batch, 0.0, adam);
  CHECK(p.same_weights(before));
  CHECK_THROWS_AS(train_step(p, batch, -1.0, adam), ParameterError);
  CHECK_THROWS_AS(train_step(p, std::vector<TokenSequence>{}, 0.1, adam), ParameterError);
}

TEST_CASE("Adam with a zero gradient leaves params unchanged") {
  ModelParams p = ModelParams::init(tiny_config(), 2);
  const ModelParams before = p;
  const std::vector<TokenSequence> batch = {{random_tokens(10, 1), 0}};
  LossHook zero = [](size_t, const TokenSequence&, const LogitsMatrix&, LogitsMatrix&) { return LossValue{0.0, 1}; };
  OptimizerState adam;
  for (int i = 0; i < 3; ++i) train_step(p, batch, 1e-2, adam, {}, zero);
  CHECK(p.same_weights(before));
}

TEST_CASE("SGD on a repeated batch strictly decreases the loss") {
  ModelParams p = ModelParams::init(tiny_config(32, 2, 32), 5);
  const std::string text = "the quick brown fox jumps over";
  std::vector<int> tokens = {kBos};
  for (char ch : text) tokens.push_back(static_cast<unsigned char>(ch));
  const std::vector<TokenSequence> batch = {{tokens, 0}};
  OptimizerState sgd{.kind = OptimizerKind::kSgd};
  GradMap unused;
  double prev = compute_gradients(p, batch, {}, unused);
  for (int step = 0; step < 50; ++step) {
    train_step(p, batch, 0.1, sgd);
    const double loss = compute_gradients(p, batch, {}, unused);
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("train_step keeps the output bias frozen unless enabled") {
  ModelParams p = random_params(tiny_config(), 8);
  const auto bias = p.at(names::kOutputBias).data;
  const std::vector<TokenSequence> batch = {{random_tokens(10, 1), 0}};
  OptimizerState adam;
  train_step(p, batch, 1e-2, adam);
  CHECK(p.at(names::kOutputBias).data == bias);
  train_step(p, batch, 1e-2, adam, TrainOptions{.train_output_bias = true});
  CHECK(p.at(names::kOutputBias).data != bias);
}

TEST_CASE("train_step respects update masks bit-exactly") {
  ModelParams p = random_params(tiny_config(), 8);
  const ModelParams before = p;
  std::map<std::string, std::vector<uint8_t>> mask;
  for (const auto& [name, t] : p.tensors) {
    auto& m = mask[name];
    m.resize(t.data.size());
    for (size_t i = 0; i < m.size(); ++i) m[i] = (i % 2 == 0);
  }
  OptimizerState adam;
  const std::vector<TokenSequence> batch = {{random_tokens(10, 1), 0}};
  for (int s = 0; s < 5; ++s) train_step(p, batch, 1e-2, adam, TrainOptions{.update_mask = &mask});
  for (const auto& [name, t] : p.tensors) {
    if (name == names::kOutputBias) continue;
    bool changed = false;
    for (size_t i = 0; i < t.data.size(); ++i) {
      if (i % 2) CHECK(t.data[i] == before.at(name).data[i]);
      else changed |= t.data[i] != before.at(name).data[i];
    }
    CHECK(changed);
  }
}

TEST_CASE("non-finite loss raises a divergence error") {
  ModelParams p = ModelParams::init(tiny_config(), 2);
  const std::vector<TokenSequence> batch = {{random_tokens(10, 1), 0}};
  LossHook bad = [](size_t, const TokenSequence&, const LogitsMatrix&, LogitsMatrix&) {
    return LossValue{NAN, 1};
  };
  OptimizerState adam;
  CHECK_THROWS_AS(train_step(p, batch, 1e-2, adam, {}, bad), DivergenceError);
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 1000, 100, 1.0) == doctest::Approx(0.01));
  CHECK(cosine_lr(99, 1000, 100, 1.0) == doctest::Approx(1.0));
  CHECK(cosine_lr(100, 1000, 100, 1.0) == doctest::Approx(1.0));
  CHECK(cosine_lr(550, 1000, 100, 1.0) == doctest::Approx(0.5));
  CHECK(cosine_lr(1000, 1000, 100, 1.0) == doctest::Approx(0.0));
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  ModelParams p = random_params(tiny_config(), 31);
  p.metadata["lineage"] = nlohmann::json::array({{{"kind", "test"}}});
  const auto path = wmlab::testing::temp_path("roundtrip.dwmf");
  save_checkpoint(p, path);
  const ModelParams q = load_checkpoint(path);
  CHECK(q.same_weights(p));
  CHECK(q.metadata == p.metadata);
  for (const auto& [name, t] : p.tensors) {
    CHECK(std::memcmp(t.data.data(), q.at(name).data.data(), t.data.size() * 4) == 0);
  }
}

TEST_CASE("checkpoint header layout") {
  const ModelParams p = ModelParams::init(tiny_config(), 1);
  const auto path = wmlab::testing::temp_path("layout.dwmf");
  save_checkpoint(p, path);
  std::ifstream in(path, std::ios::binary);
  char magic[5];
  in.read(magic, 5);
  CHECK(std::string(magic, 4) == "DWMF");
  CHECK(magic[4] == 0x01);
  const Container c = read_container(path);
  CHECK(c.header["seed"] == 1);
  CHECK(c.entries.front().name == names::kTokEmb);
  CHECK(c.entries.front().dtype == "f32");
}

TEST_CASE("corrupted checkpoints are rejected") {
  const ModelParams p = ModelParams::init(tiny_config(), 1);
  const auto path = wmlab::testing::temp_path("corrupt.dwmf");
  save_checkpoint(p, path);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto write = [&](const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << data;
  };

  SUBCASE("bad magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    write(bad);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("bad version") {
    std::string bad = bytes;
    bad[4] = 0x02;
    write(bad);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("truncated data") {
    write(bytes.substr(0, bytes.size() - 10));
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("declared byte length disagrees with shape") {
    Container c = read_container(wmlab::testing::temp_path("layout.dwmf"));
    c.entries[0].bytes.resize(c.entries[0].bytes.size() - 4);
    write_container(path, c);
    CHECK_THROWS_AS(load_checkpoint(path), LengthError);
  }
  SUBCASE("shape mismatch against the embedded config") {
    Container c = read_container(wmlab::testing::temp_path("layout.dwmf"));
    c.header["config"]["d_ff"] = 64;
    write_container(path, c);
    CHECK_THROWS_AS(load_checkpoint(path), ShapeError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint(path.string() + ".missing"), IoError); }
}
