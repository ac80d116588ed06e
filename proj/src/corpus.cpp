// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/corpus.hpp"

#include <fstream>
#include <iterator>
#include <numeric>

#include <fmt/format.h>

#include "wmlab/error.hpp"
#include "wmlab/rng.hpp"

namespace wmlab::corpus {

std::vector<int> encode(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<unsigned char>(c));
  return out;
}

std::string decode(const std::vector<int>& tokens) {
  std::string out;
  for (int t : tokens) {
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
  }
  return out;
}

size_t Corpus::total_tokens() const {
  size_t n = 0;
  for (const auto& d : documents) n += d.size();
  return n;
}

namespace {

bool is_blank(std::string_view line) {
  return line.find_first_not_of(" \t\r") == std::string_view::npos;
}

std::vector<std::string> split_blank_lines(std::string_view text) {
  std::vector<std::string> docs;
  std::string current;
  size_t pos = 0;
  while (pos <= text.size()) {
    const size_t nl = text.find('\n', pos);
    const std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    if (is_blank(line)) {
      if (!current.empty()) docs.push_back(std::move(current));
      current.clear();
    } else {
      if (!current.empty()) current.push_back('\n');
      current.append(line);
    }
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  if (!current.empty()) docs.push_back(std::move(current));
  return docs;
}

std::vector<std::string> split_literal(std::string_view text, std::string_view delim) {
  std::vector<std::string> docs;
  size_t pos = 0;
  while (true) {
    const size_t at = text.find(delim, pos);
    const auto piece = text.substr(pos, at == std::string_view::npos ? std::string_view::npos : at - pos);
    if (!piece.empty()) docs.emplace_back(piece);
    if (at == std::string_view::npos) break;
    pos = at + delim.size();
  }
  return docs;
}

}  // namespace

Corpus from_text(std::string_view text, std::string_view doc_delimiter, std::string source) {
  Corpus c;
  c.source_path = std::move(source);
  const auto docs = doc_delimiter.empty() ? split_blank_lines(text) : split_literal(text, doc_delimiter);
  for (const auto& d : docs) c.documents.push_back(encode(d));
  if (c.documents.empty()) throw CapacityError(fmt::format("'{}' contains no documents", c.source_path));
  return c;
}

Corpus ingest(const std::filesystem::path& path, std::string_view doc_delimiter) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read corpus '{}'", path.string()));
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.empty()) throw CapacityError(fmt::format("corpus '{}' is empty", path.string()));
  return from_text(text, doc_delimiter, path.string());
}

BatchStream::BatchStream(const Corpus& corpus, int tokens_per_sample, int batch_size, uint64_t seed, int context_len)
    : batch_size_(batch_size), seed_(seed) {
  if (tokens_per_sample < 1) throw ParameterError("tokens_per_sample must be >= 1");
  if (tokens_per_sample > context_len) {
    throw ParameterError(
        fmt::format("tokens_per_sample {} exceeds context_len {}", tokens_per_sample, context_len));
  }
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  std::vector<int> stream;
  for (const auto& d : corpus.documents) {
    stream.insert(stream.end(), d.begin(), d.end());
    stream.push_back(lm::kEos);
  }
  const size_t n = stream.size() / static_cast<size_t>(tokens_per_sample);
  if (n == 0) {
    throw CapacityError(fmt::format("corpus of {} tokens is smaller than one {}-token sample", stream.size(),
                                    tokens_per_sample));
  }
  for (size_t i = 0; i < n; ++i) {
    std::vector<int> chunk = {lm::kBos};
    const auto begin = stream.begin() + static_cast<std::ptrdiff_t>(i * tokens_per_sample);
    chunk.insert(chunk.end(), begin, begin + tokens_per_sample);
    chunks_.push_back(std::move(chunk));
  }
  reshuffle();
}

void BatchStream::reshuffle() {
  order_.resize(chunks_.size());
  std::iota(order_.begin(), order_.end(), size_t{0});
  Rng rng(derive_seed(seed_, static_cast<uint64_t>(epoch_)));
  rng.shuffle(std::span<size_t>(order_));
  cursor_ = 0;
}

std::vector<TokenSequence> BatchStream::next() {
  std::vector<TokenSequence> batch;
  batch.reserve(static_cast<size_t>(batch_size_));
  while (static_cast<int>(batch.size()) < batch_size_) {
    if (cursor_ == order_.size()) {
      ++epoch_;
      reshuffle();
    }
    const auto& chunk = chunks_[order_[cursor_++]];
    batch.push_back(TokenSequence{chunk, 0});
    tokens_served_ += static_cast<int64_t>(chunk.size()) - 1;
  }
  return batch;
}

BatchStream make_batches(const Corpus& corpus, int tokens_per_sample, int batch_size, uint64_t seed,
                         int context_len) {
  return BatchStream(corpus, tokens_per_sample, batch_size, seed, context_len);
}

PromptSet make_prompt_set(const Corpus& corpus, int n_prompts, int prompt_len, int completion_len, uint64_t seed,
                          int min_tail) {
  if (n_prompts < 1 || prompt_len < 1) throw ParameterError("n_prompts and prompt_len must be >= 1");
  std::vector<size_t> eligible;
  for (size_t i = 0; i < corpus.documents.size(); ++i) {
    if (static_cast<int>(corpus.documents[i].size()) >= prompt_len + min_tail) eligible.push_back(i);
  }
  if (static_cast<int>(eligible.size()) < n_prompts) {
    throw CapacityError(fmt::format("need {} documents of >= {} tokens, corpus has {}", n_prompts,
                                    prompt_len + min_tail, eligible.size()));
  }
  Rng rng(seed);
  rng.shuffle(std::span<size_t>(eligible));
  PromptSet set;
  set.completion_len = completion_len;
  for (int i = 0; i < n_prompts; ++i) {
    const auto& doc = corpus.documents[eligible[i]];
    set.prompts.push_back(TokenSequence{std::vector<int>(doc.begin(), doc.begin() + prompt_len),
                                        static_cast<size_t>(prompt_len)});
    set.document_ids.push_back(eligible[i]);
  }
  return set;
}

TokenSequence perturb_text(const TokenSequence& text, double rate, uint64_t seed, int vocab_size) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ParameterError(fmt::format("substitution rate {} outside [0, 1]", rate));
  TokenSequence out = text;
  Rng rng(seed);
  for (size_t i = text.split_point; i < out.tokens.size(); ++i) {
    // Always draw both variates so positions stay aligned across rates.
    const double u = rng.uniform();
    const int replacement = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(vocab_size)));
    if (u < rate) out.tokens[i] = replacement;
  }
  return out;
}

}  // namespace wmlab::corpus
