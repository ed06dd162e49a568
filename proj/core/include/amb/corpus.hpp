#pragma once

// Text ingestion: tokenization, frequency-thresholded vocabulary, JSONL
// loading, and padded/masked batching of document -> sentence -> token
// hierarchies.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "amb/errors.hpp"

namespace amb {

// A document whose sentences are still token strings (pre vocabulary).
struct RawDocument {
  int label = 0;
  std::vector<std::vector<std::string>> sentences;
};

// A document mapped to vocabulary ids.
struct Document {
  int label = 0;
  std::vector<std::vector<std::int32_t>> sentences;
};

class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;

  // Counts tokens over the training split and retains those appearing at
  // least min_count times. Ids start at 2 and are assigned in descending
  // frequency, ties broken lexicographically.
  static Vocabulary build(const std::vector<RawDocument>& training_docs, int min_count = 6);

  std::int32_t id_of(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    return it == token_to_id_.end() ? kUnk : it->second;
  }
  const std::string& token_of(std::int32_t id) const { return id_to_token_.at(id); }
  bool contains(std::string_view token) const {
    return token_to_id_.count(std::string(token)) != 0;
  }

  // Total id count including pad and unk; valid ids are [0, size).
  std::int32_t size() const { return static_cast<std::int32_t>(id_to_token_.size()); }
  int min_count() const { return min_count_; }

  // One retained token per line, line number = id - 2.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  // The retained tokens in id order (pad/unk excluded), and the inverse —
  // together they let a vocabulary ride inside other files (checkpoints).
  std::vector<std::string> retained_tokens() const;
  static Vocabulary from_tokens(const std::vector<std::string>& retained);

 private:
  std::unordered_map<std::string, std::int32_t> token_to_id_;
  std::vector<std::string> id_to_token_ = {"<pad>", "<unk>"};
  int min_count_ = 0;
};

// Splits text into sentences on runs of [.!?] followed by whitespace (or end
// of input), lowercases, and strips punctuation except apostrophes between
// letters. Text with no terminator is a single sentence. Sentences that end
// up empty are dropped.
std::vector<std::vector<std::string>> tokenize(std::string_view text);

// Tokenizes a single pre-split sentence with the word rules only.
std::vector<std::string> tokenize_words(std::string_view sentence);

// Each line holds {"label": int, "text": str} or {"label": int,
// "sentences": [str, ...]}. Order follows the file. Malformed lines, labels
// outside [0, num_classes), and documents with no usable tokens raise
// DataError naming the line number. Blank lines are skipped.
std::vector<RawDocument> load_jsonl(const std::string& path, int num_classes);

Document map_to_ids(const RawDocument& doc, const Vocabulary& vocab);
std::vector<Document> map_to_ids(const std::vector<RawDocument>& docs, const Vocabulary& vocab);

// One padded minibatch. Masks are float 0/1 so they can feed either tensor
// instantiation; padded id slots hold pad id 0.
struct Batch {
  std::int64_t size = 0;       // B: documents in this batch
  std::int64_t sentences = 0;  // S: max sentences per document (after truncation)
  std::int64_t tokens = 0;     // T: max tokens per sentence (after truncation)
  std::vector<std::int32_t> token_ids;  // [B*S*T]
  std::vector<float> word_mask;         // [B*S*T]
  std::vector<float> sentence_mask;     // [B*S]
  std::vector<std::int32_t> labels;     // [B]
};

// Truncates to max_sentences/max_tokens, optionally shuffles document order
// with the given seed (document order is preserved when shuffle_seed is
// empty), and packs fixed-shape batches; the last partial batch is kept.
std::vector<Batch> batch(const std::vector<Document>& docs, int batch_size, int max_sentences,
                         int max_tokens, std::optional<std::uint64_t> shuffle_seed);

}  // namespace amb
