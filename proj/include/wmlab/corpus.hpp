// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "wmlab/lm/params.hpp"

namespace wmlab::corpus {

using lm::TokenSequence;

// Byte-level tokenizer: each UTF-8 byte is one token id in [0, 256).
std::vector<int> encode(std::string_view text);
// Inverse of encode; special tokens are dropped.
std::string decode(const std::vector<int>& tokens);

struct Corpus {
  std::vector<std::vector<int>> documents;
  std::string source_path;
  std::string tokenizer_id = "bytes-v1";

  size_t total_tokens() const;
};

// An empty delimiter selects blank-line splitting (runs of two or more
// newlines, with whitespace-only lines counting as blank).
Corpus ingest(const std::filesystem::path& path, std::string_view doc_delimiter = {});
Corpus from_text(std::string_view text, std::string_view doc_delimiter = {}, std::string source = "<memory>");

// Deterministic, endless stream of training batches. Documents are joined
// into one stream (each followed by EOS), cut into contiguous chunks of
// tokens_per_sample, and each sample is BOS + chunk. Chunk order is
// reshuffled every epoch from (seed, epoch).
class BatchStream {
 public:
  BatchStream(const Corpus& corpus, int tokens_per_sample, int batch_size, uint64_t seed, int context_len);

  std::vector<TokenSequence> next();
  size_t chunk_count() const { return chunks_.size(); }
  int64_t epoch() const { return epoch_; }
  int64_t tokens_served() const { return tokens_served_; }

 private:
  void reshuffle();

  std::vector<std::vector<int>> chunks_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
  int batch_size_;
  uint64_t seed_;
  int64_t epoch_ = 0;
  int64_t tokens_served_ = 0;
};

// Throws ParameterError when tokens_per_sample > context_len and
// CapacityError when the corpus holds less than one sample.
BatchStream make_batches(const Corpus& corpus, int tokens_per_sample, int batch_size, uint64_t seed,
                         int context_len = 256);

struct PromptSet {
  std::vector<TokenSequence> prompts;  // split_point == prompt length
  int completion_len = 0;
  std::vector<size_t> document_ids;
};

// First prompt_len tokens of n_prompts distinct documents chosen by a seeded
// shuffle among documents with at least prompt_len + min_tail tokens.
PromptSet make_prompt_set(const Corpus& corpus, int n_prompts, int prompt_len, int completion_len, uint64_t seed,
                          int min_tail = 0);

// Replaces each completion token independently with probability `rate` by a
// token drawn uniformly from the vocabulary; the prompt is untouched.
TokenSequence perturb_text(const TokenSequence& text, double rate, uint64_t seed, int vocab_size = lm::kByteVocab);

}  // namespace wmlab::corpus
