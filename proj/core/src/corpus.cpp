#include "amb/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

namespace amb {

namespace {

bool is_word_byte(unsigned char c) {
  return std::isalnum(c) != 0 || c >= 0x80;  // keep non-ASCII UTF-8 bytes
}

bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }

// Lowercases and strips punctuation; apostrophes survive only between word
// characters ("don't" keeps its apostrophe, "'quoted'" loses both).
std::string clean_word(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(raw[i]);
    if (is_word_byte(c)) {
      out.push_back(static_cast<char>(std::tolower(c)));
    } else if (c == '\'' && i > 0 && i + 1 < raw.size() &&
               is_word_byte(static_cast<unsigned char>(raw[i - 1])) &&
               is_word_byte(static_cast<unsigned char>(raw[i + 1]))) {
      out.push_back('\'');
    }
  }
  return out;
}

}  // namespace

std::vector<std::string> tokenize_words(std::string_view sentence) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < sentence.size()) {
    while (i < sentence.size() && std::isspace(static_cast<unsigned char>(sentence[i]))) ++i;
    std::size_t start = i;
    while (i < sentence.size() && !std::isspace(static_cast<unsigned char>(sentence[i]))) ++i;
    if (i > start) {
      std::string w = clean_word(sentence.substr(start, i - start));
      if (!w.empty()) words.push_back(std::move(w));
    }
  }
  return words;
}

std::vector<std::vector<std::string>> tokenize(std::string_view text) {
  std::vector<std::vector<std::string>> sentences;
  std::size_t start = 0;
  std::size_t i = 0;
  auto flush = [&](std::size_t end) {
    auto words = tokenize_words(text.substr(start, end - start));
    if (!words.empty()) sentences.push_back(std::move(words));
  };
  while (i < text.size()) {
    if (is_terminator(text[i])) {
      std::size_t run = i;
      while (run < text.size() && is_terminator(text[run])) ++run;
      // A terminator run splits only at whitespace or end of input, so
      // "3.5" and "e.g.x" stay intact.
      if (run >= text.size() || std::isspace(static_cast<unsigned char>(text[run]))) {
        flush(i);
        start = run;
        i = run;
        continue;
      }
      i = run;
      continue;
    }
    ++i;
  }
  flush(text.size());
  return sentences;
}

Vocabulary Vocabulary::build(const std::vector<RawDocument>& training_docs, int min_count) {
  std::unordered_map<std::string, std::int64_t> counts;
  std::int64_t total = 0;
  for (const auto& doc : training_docs)
    for (const auto& sent : doc.sentences)
      for (const auto& tok : sent) {
        ++counts[tok];
        ++total;
      }
  if (total == 0) throw DataError("build_vocabulary: no tokens in training corpus");

  std::vector<std::pair<std::string, std::int64_t>> retained;
  for (auto& [tok, n] : counts)
    if (n >= min_count) retained.emplace_back(tok, n);
  std::sort(retained.begin(), retained.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  v.min_count_ = min_count;
  for (auto& [tok, n] : retained) {
    v.token_to_id_.emplace(tok, static_cast<std::int32_t>(v.id_to_token_.size()));
    v.id_to_token_.push_back(tok);
  }
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("vocabulary: cannot write " + path);
  for (std::size_t id = 2; id < id_to_token_.size(); ++id) out << id_to_token_[id] << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("vocabulary: cannot read " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) tokens.push_back(line);
  }
  return from_tokens(tokens);
}

std::vector<std::string> Vocabulary::retained_tokens() const {
  return {id_to_token_.begin() + 2, id_to_token_.end()};
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& retained) {
  Vocabulary v;
  for (const auto& token : retained) {
    if (!v.token_to_id_.emplace(token, static_cast<std::int32_t>(v.id_to_token_.size())).second)
      throw DataError("vocabulary: duplicate token \"" + token + "\"");
    v.id_to_token_.push_back(token);
  }
  return v;
}

std::vector<RawDocument> load_jsonl(const std::string& path, int num_classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_jsonl: cannot read " + path);

  std::vector<RawDocument> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = [&] { return path + ":" + std::to_string(lineno); };

    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw DataError("load_jsonl: " + where() + ": malformed JSON object");
    if (!j.contains("label") || !j["label"].is_number_integer())
      throw DataError("load_jsonl: " + where() + ": missing integer \"label\"");

    RawDocument doc;
    doc.label = j["label"].get<int>();
    if (doc.label < 0 || doc.label >= num_classes)
      throw DataError("load_jsonl: " + where() + ": label " + std::to_string(doc.label) +
                      " outside [0, " + std::to_string(num_classes) + ")");

    if (j.contains("text") && j["text"].is_string()) {
      doc.sentences = tokenize(j["text"].get<std::string>());
    } else if (j.contains("sentences") && j["sentences"].is_array()) {
      for (const auto& s : j["sentences"]) {
        if (!s.is_string())
          throw DataError("load_jsonl: " + where() + ": \"sentences\" must hold strings");
        auto words = tokenize_words(s.get<std::string>());
        if (!words.empty()) doc.sentences.push_back(std::move(words));
      }
    } else {
      throw DataError("load_jsonl: " + where() + ": need \"text\" or \"sentences\"");
    }
    if (doc.sentences.empty())
      throw DataError("load_jsonl: " + where() + ": document has no usable tokens");
    docs.push_back(std::move(doc));
  }
  return docs;
}

Document map_to_ids(const RawDocument& doc, const Vocabulary& vocab) {
  Document out;
  out.label = doc.label;
  out.sentences.reserve(doc.sentences.size());
  for (const auto& sent : doc.sentences) {
    std::vector<std::int32_t> ids;
    ids.reserve(sent.size());
    for (const auto& tok : sent) ids.push_back(vocab.id_of(tok));
    out.sentences.push_back(std::move(ids));
  }
  return out;
}

std::vector<Document> map_to_ids(const std::vector<RawDocument>& docs, const Vocabulary& vocab) {
  std::vector<Document> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(map_to_ids(d, vocab));
  return out;
}

std::vector<Batch> batch(const std::vector<Document>& docs, int batch_size, int max_sentences,
                         int max_tokens, std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size < 1)
    throw ConfigError("batch: batch_size must be >= 1, got " + std::to_string(batch_size));
  if (max_sentences < 1 || max_tokens < 1)
    throw ConfigError("batch: truncation limits must be >= 1");

  std::vector<std::size_t> order(docs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle_seed) {
    std::mt19937 rng(static_cast<std::uint32_t>(*shuffle_seed ^ (*shuffle_seed >> 32)));
    std::shuffle(order.begin(), order.end(), rng);
  }

  std::vector<Batch> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end = std::min(order.size(), begin + batch_size);
    Batch b;
    b.size = static_cast<std::int64_t>(end - begin);

    for (std::size_t i = begin; i < end; ++i) {
      const Document& d = docs[order[i]];
      const std::int64_t s =
          std::min<std::int64_t>(static_cast<std::int64_t>(d.sentences.size()), max_sentences);
      b.sentences = std::max(b.sentences, s);
      for (std::int64_t si = 0; si < s; ++si)
        b.tokens = std::max(b.tokens, std::min<std::int64_t>(
                                          static_cast<std::int64_t>(d.sentences[si].size()),
                                          max_tokens));
    }

    b.token_ids.assign(b.size * b.sentences * b.tokens, Vocabulary::kPad);
    b.word_mask.assign(b.size * b.sentences * b.tokens, 0.0f);
    b.sentence_mask.assign(b.size * b.sentences, 0.0f);
    for (std::size_t i = begin; i < end; ++i) {
      const std::int64_t bi = static_cast<std::int64_t>(i - begin);
      const Document& d = docs[order[i]];
      b.labels.push_back(static_cast<std::int32_t>(d.label));
      const std::int64_t s =
          std::min<std::int64_t>(static_cast<std::int64_t>(d.sentences.size()), max_sentences);
      for (std::int64_t si = 0; si < s; ++si) {
        b.sentence_mask[bi * b.sentences + si] = 1.0f;
        const auto& sent = d.sentences[si];
        const std::int64_t t =
            std::min<std::int64_t>(static_cast<std::int64_t>(sent.size()), max_tokens);
        for (std::int64_t ti = 0; ti < t; ++ti) {
          const std::int64_t at = (bi * b.sentences + si) * b.tokens + ti;
          b.token_ids[at] = sent[ti];
          b.word_mask[at] = 1.0f;
        }
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace amb
