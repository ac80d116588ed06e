// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/distill.hpp"

#include <cmath>
#include <optional>

#include <fmt/format.h>

#include "wmlab/error.hpp"
#include "wmlab/lm/container.hpp"
#include "wmlab/lm/model.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab::wm {

using lm::LogitsMatrix;
using lm::LossValue;
using lm::ModelParams;
using lm::TokenSequence;

nlohmann::json DistillReport::to_json() const {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& e : log) {
    steps.push_back({{"step", e.step}, {"loss", e.loss}, {"lr", e.lr}, {"grad_norm", e.grad_norm}});
  }
  return {{"data_seed", data_seed},           {"generation_seed", generation_seed},
          {"tokens_seen", tokens_seen},       {"heldout_before", heldout_before},
          {"heldout_after", heldout_after},   {"log", steps}};
}

LossValue completion_cross_entropy(const TokenSequence& seq, const LogitsMatrix& logits, LogitsMatrix& dlogits) {
  LossValue out;
  const size_t first = std::max<size_t>(1, seq.split_point);
  for (size_t t = first; t < seq.size(); ++t) {
    const auto r = static_cast<Eigen::Index>(t - 1);
    const int target = seq.tokens[t];
    const float mx = logits.row(r).maxCoeff();
    const Eigen::ArrayXf e = (logits.row(r).array() - mx).exp().transpose();
    const double z = e.cast<double>().sum();
    out.sum += -(static_cast<double>(logits(r, target)) - mx - std::log(z));
    ++out.count;
    dlogits.row(r) = (e / static_cast<float>(z)).matrix().transpose();
    dlogits(r, target) -= 1.0f;
  }
  return out;
}

LossValue kl_to_targets(const std::vector<std::vector<double>>& targets, const LogitsMatrix& logits,
                        LogitsMatrix& dlogits) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw ShapeError(fmt::format("{} target rows for {} logit rows", targets.size(), logits.rows()));
  }
  LossValue out;
  const Eigen::Index V = logits.cols();
  std::vector<double> logp(static_cast<size_t>(V));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto& q = targets[static_cast<size_t>(r)];
    double mx = -INFINITY;
    for (Eigen::Index j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(logits(r, j)));
    double z = 0.0;
    for (Eigen::Index j = 0; j < V; ++j) z += std::exp(static_cast<double>(logits(r, j)) - mx);
    const double lz = std::log(z) + mx;
    double kl = 0.0;
    for (Eigen::Index j = 0; j < V; ++j) {
      logp[static_cast<size_t>(j)] = static_cast<double>(logits(r, j)) - lz;
      const double qj = q[static_cast<size_t>(j)];
      if (qj > 0.0) kl += qj * (std::log(qj) - logp[static_cast<size_t>(j)]);
      dlogits(r, j) = static_cast<float>(std::exp(logp[static_cast<size_t>(j)]) - qj);
    }
    out.sum += kl;
    ++out.count;
  }
  return out;
}

std::vector<std::vector<double>> kgw_teacher_targets(const ModelParams& teacher, const TokenSequence& seq,
                                                     KgwPartitioner& partitioner) {
  const std::span<const int> input(seq.tokens.data(), seq.size() - 1);
  const LogitsMatrix logits = lm::sequence_logits(teacher, input);
  std::vector<std::vector<double>> q(static_cast<size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const std::span<const float> row(logits.data() + r * logits.cols(), static_cast<size_t>(logits.cols()));
    const auto& green = partitioner.green(std::span<const int>(seq.tokens.data(), static_cast<size_t>(r) + 1));
    q[static_cast<size_t>(r)] = kgw_transform(row, green, partitioner.params().delta);
  }
  return q;
}

namespace {

void check_options(const DistillOptions& o, const lm::ModelConfig& config) {
  if (o.steps < 0) throw ParameterError("steps must be >= 0");
  if (o.batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (o.seq_len < 2 || o.seq_len + 1 > config.context_len) {
    throw ParameterError(fmt::format("seq_len {} must be in [2, context_len - 1 = {}]", o.seq_len, config.context_len - 1));
  }
  if (!(o.lr >= 0.0)) throw ParameterError("learning rate must be >= 0");
}

void check_same_vocab(const ModelParams& a, const ModelParams& b) {
  if (a.config.vocab_size != b.config.vocab_size) {
    throw ShapeError(fmt::format("student vocab {} != teacher vocab {}", a.config.vocab_size, b.config.vocab_size));
  }
}

double mean_ce(const ModelParams& params, const std::vector<TokenSequence>& samples) {
  if (samples.empty()) return 0.0;
  lm::GradMap unused;
  return lm::compute_gradients(params, samples, {}, unused,
                               [](size_t, const TokenSequence& s, const LogitsMatrix& l, LogitsMatrix& d) {
                                 return completion_cross_entropy(s, l, d);
                               });
}

void record(DistillReport& report, const DistillOptions& o, int64_t step, const lm::StepResult& r, double lr) {
  TrainLogEntry e{step, r.loss, lr, r.grad_norm};
  report.log.push_back(e);
  if (o.on_step) o.on_step(e);
}

// Corpus prompts, or bare BOS prompts when prompt_len is 0 so the student
// never sees unwatermarked text.
class PromptSource {
 public:
  PromptSource(const corpus::Corpus& corpus, int prompt_len, int batch_size, uint64_t seed, int context_len)
      : batch_size_(batch_size) {
    if (prompt_len > 0) stream_.emplace(corpus, prompt_len, batch_size, seed, context_len);
  }
  std::vector<TokenSequence> next() {
    if (stream_) return stream_->next();
    return std::vector<TokenSequence>(static_cast<size_t>(batch_size_), TokenSequence{{lm::kBos}, 0});
  }

 private:
  int batch_size_;
  std::optional<corpus::BatchStream> stream_;
};

}  // namespace

DistillResult distill_sampling(const ModelParams& student, const ModelParams& teacher, const Sampler& sampler,
                               const corpus::Corpus& corpus, const DistillOptions& options) {
  check_options(options, student.config);
  check_same_vocab(student, teacher);
  if (sampler.kind == SamplerKind::kPlain) throw ParameterError("sampling distillation needs a watermarked sampler");
  if (options.prompt_len < 0 || options.prompt_len >= options.seq_len) {
    throw ParameterError(fmt::format("prompt_len {} must be in [0, seq_len)", options.prompt_len));
  }
  if (options.seq_len + 1 > teacher.config.context_len) throw ParameterError("seq_len exceeds the teacher context");
  // Completions are forced to full length so every step sees the same token budget.
  Sampler gen = sampler;
  gen.allow_eos = false;
  const int completion_len = options.seq_len - options.prompt_len;

  DistillResult result{student, {}};
  result.report.data_seed = derive_seed(options.seed, "prompts");
  result.report.generation_seed = gen.seed;
  uint64_t gen_index = 0;

  std::vector<TokenSequence> heldout;
  if (options.heldout_samples > 0) {
    PromptSource hp(corpus, options.prompt_len, options.heldout_samples, derive_seed(options.seed, "heldout"),
                    teacher.config.context_len);
    for (auto& p : hp.next()) {
      p.split_point = p.size();
      heldout.push_back(generate(teacher, p, completion_len, gen, gen_index++).text);
    }
    result.report.heldout_before = mean_ce(result.student, heldout);
  }
  if (options.steps == 0) {
    result.report.heldout_after = result.report.heldout_before;
    return result;
  }

  PromptSource prompts(corpus, options.prompt_len, options.batch_size, result.report.data_seed,
                       teacher.config.context_len);
  lm::OptimizerState state;
  lm::TrainOptions topts;
  topts.max_grad_norm = options.max_grad_norm;
  const lm::LossHook hook = [](size_t, const TokenSequence& s, const LogitsMatrix& l, LogitsMatrix& d) {
    return completion_cross_entropy(s, l, d);
  };
  std::vector<TokenSequence> batch;
  for (int64_t step = 0; step < options.steps; ++step) {
    batch.clear();
    for (auto& p : prompts.next()) {
      p.split_point = p.size();
      batch.push_back(generate(teacher, p, completion_len, gen, gen_index++).text);
      result.report.tokens_seen += completion_len;
    }
    const double lr = lm::cosine_lr(step, options.steps, options.warmup_steps, options.lr);
    const auto r = lm::train_step(result.student, batch, lr, state, topts, hook);
    record(result.report, options, step, r, lr);
  }
  if (!heldout.empty()) result.report.heldout_after = mean_ce(result.student, heldout);
  return result;
}

DistillResult distill_logit(const ModelParams& student, const ModelParams& teacher, const KgwParams& kgw,
                            const corpus::Corpus& corpus, const DistillOptions& options, const CoordMask* mask) {
  check_options(options, student.config);
  check_same_vocab(student, teacher);
  if (options.seq_len + 1 > teacher.config.context_len) throw ParameterError("seq_len exceeds the teacher context");
  KgwPartitioner partitioner(kgw, teacher.config.vocab_size);
  if (mask) {
    for (const auto& [name, m] : *mask) {
      if (!student.has(name) || static_cast<int64_t>(m.size()) != student.at(name).numel()) {
        throw ShapeError(fmt::format("update mask for '{}' does not match the student", name));
      }
    }
  }

  DistillResult result{student, {}};
  result.report.data_seed = derive_seed(options.seed, "data");
  if (options.steps == 0) return result;

  corpus::BatchStream data(corpus, options.seq_len, options.batch_size, result.report.data_seed,
                           std::min(student.config.context_len, teacher.config.context_len));
  lm::OptimizerState state;
  lm::TrainOptions topts;
  topts.max_grad_norm = options.max_grad_norm;
  topts.update_mask = mask;
  std::vector<std::vector<std::vector<double>>> targets;
  const lm::LossHook hook = [&targets](size_t i, const TokenSequence&, const LogitsMatrix& l, LogitsMatrix& d) {
    return kl_to_targets(targets[i], l, d);
  };
  for (int64_t step = 0; step < options.steps; ++step) {
    const auto batch = data.next();
    targets.clear();
    for (const auto& seq : batch) {
      targets.push_back(kgw_teacher_targets(teacher, seq, partitioner));
      result.report.tokens_seen += static_cast<int64_t>(seq.size()) - 1;
    }
    const double lr = lm::cosine_lr(step, options.steps, options.warmup_steps, options.lr);
    const auto r = lm::train_step(result.student, batch, lr, state, topts, hook);
    record(result.report, options, step, r, lr);
  }
  return result;
}

int64_t CtvMask::selected() const {
  int64_t n = 0;
  for (const auto& [_, m] : masks) {
    for (uint8_t b : m) n += b != 0;
  }
  return n;
}

int64_t CtvMask::total() const {
  int64_t n = 0;
  for (const auto& [_, m] : masks) n += static_cast<int64_t>(m.size());
  return n;
}

CtvMask ctv_mask(const ModelParams& theta0, const ModelParams& theta1, const ModelParams& theta2) {
  if (lm::to_json(theta0.config) != lm::to_json(theta1.config) ||
      lm::to_json(theta0.config) != lm::to_json(theta2.config)) {
    throw ShapeError("ctv_mask needs three models with the same config");
  }
  CtvMask out;
  for (const auto& [name, t0] : theta0.tensors) {
    const auto& a = theta1.at(name).data;
    const auto& b = theta2.at(name).data;
    auto& m = out.masks[name];
    m.resize(t0.data.size());
    for (size_t i = 0; i < m.size(); ++i) {
      m[i] = std::abs(a[i] - t0.data[i]) > std::abs(b[i] - t0.data[i]) ? 1 : 0;
    }
  }
  auto seed_of = [](const ModelParams& p) { return p.metadata.value("seed", nlohmann::json()); };
  out.provenance = {{"theta0", seed_of(theta0)}, {"theta1", seed_of(theta1)}, {"theta2", seed_of(theta2)}};
  return out;
}

DistillResult distill_logit_masked(const ModelParams& theta0, const ModelParams& teacher, const KgwParams& kgw,
                                   const CtvMask& mask, const corpus::Corpus& corpus, const DistillOptions& options) {
  for (const auto& [name, t] : theta0.tensors) {
    auto it = mask.masks.find(name);
    if (it == mask.masks.end() || static_cast<int64_t>(it->second.size()) != t.numel()) {
      throw ShapeError(fmt::format("CTV mask does not cover tensor '{}'", name));
    }
  }
  return distill_logit(theta0, teacher, kgw, corpus, options, &mask.masks);
}

void save_ctv_mask(const CtvMask& mask, const std::filesystem::path& path) {
  lm::Container c;
  c.header["kind"] = "ctv_mask";
  c.header["provenance"] = mask.provenance;
  for (const auto& [name, m] : mask.masks) {
    c.entries.push_back({name, {static_cast<int64_t>(m.size())}, "b1", lm::pack_bits(m)});
  }
  lm::write_container(path, c);
}

CtvMask load_ctv_mask(const std::filesystem::path& path) {
  const lm::Container c = lm::read_container(path);
  if (c.header.value("kind", std::string()) != "ctv_mask") {
    throw FormatError(fmt::format("'{}' is not a CTV mask", path.string()));
  }
  CtvMask out;
  out.provenance = c.header.value("provenance", nlohmann::json::object());
  for (const auto& e : c.entries) {
    if (e.dtype != "b1") throw FormatError(fmt::format("mask entry '{}' has dtype {}", e.name, e.dtype));
    out.masks[e.name] = lm::unpack_bits(e.bytes, shape_numel(e.shape));
  }
  return out;
}

}  // namespace wmlab::wm
