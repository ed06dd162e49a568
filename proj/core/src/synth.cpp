#include "amb/synth.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

namespace amb {

std::vector<std::vector<std::string>> SynthSpec::effective_signal_sets() const {
  if (!signal_tokens.empty()) return signal_tokens;
  std::vector<std::vector<std::string>> sets(static_cast<std::size_t>(num_classes));
  for (int k = 0; k < num_classes; ++k) {
    for (int i = 0; i < signal_tokens_per_class; ++i) {
      sets[static_cast<std::size_t>(k)].push_back("sig" + std::to_string(k) + "x" +
                                                  std::to_string(i));
    }
  }
  return sets;
}

std::vector<std::string> SynthSpec::effective_noise_set() const {
  if (!noise_tokens.empty()) return noise_tokens;
  std::vector<std::string> set;
  set.reserve(static_cast<std::size_t>(noise_vocab));
  for (int i = 0; i < noise_vocab; ++i) set.push_back("w" + std::to_string(i));
  return set;
}

void SynthSpec::validate() const {
  if (num_classes < 2) throw ConfigError("synth: num_classes must be at least 2");
  if (signal_tokens_per_class < 1 && signal_tokens.empty())
    throw ConfigError("synth: signal_tokens_per_class must be positive");
  if (noise_vocab < 1 && noise_tokens.empty())
    throw ConfigError("synth: noise_vocab must be positive");
  if (!(signal_rate > 0.0 && signal_rate < 1.0))
    throw ConfigError("synth: signal_rate must lie strictly between 0 and 1");
  if (min_sentences < 1 || max_sentences < min_sentences)
    throw ConfigError("synth: sentence count range is invalid");
  if (min_tokens < 1 || max_tokens < min_tokens)
    throw ConfigError("synth: token count range is invalid");
  if (train_docs < 1 || valid_docs < 1 || test_docs < 1)
    throw ConfigError("synth: every split needs at least one document");

  const auto sets = effective_signal_sets();
  if (static_cast<int>(sets.size()) != num_classes)
    throw ConfigError("synth: need one signal token set per class");
  std::unordered_set<std::string> seen;
  for (const auto& set : sets) {
    if (set.empty()) throw ConfigError("synth: a signal token set is empty");
    for (const auto& tok : set) {
      if (!seen.insert(tok).second)
        throw ConfigError("synth: token sets overlap on '" + tok + "'");
    }
  }
  for (const auto& tok : effective_noise_set()) {
    if (seen.count(tok))
      throw ConfigError("synth: token sets overlap on '" + tok + "'");
  }
}

namespace {

// Balanced label sequence: counts differ by at most one across classes,
// order shuffled deterministically.
std::vector<int> balanced_labels(int n, int num_classes, std::mt19937& rng) {
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % num_classes;
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

std::vector<RawDocument> make_split(const SynthSpec& spec,
                                    const std::vector<std::vector<std::string>>& signal,
                                    const std::vector<std::string>& noise, int n,
                                    std::mt19937& rng) {
  std::uniform_int_distribution<int> n_sents(spec.min_sentences, spec.max_sentences);
  std::uniform_int_distribution<int> n_toks(spec.min_tokens, spec.max_tokens);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> noise_pick(0, noise.size() - 1);

  std::vector<RawDocument> docs;
  docs.reserve(static_cast<std::size_t>(n));
  for (int label : balanced_labels(n, spec.num_classes, rng)) {
    const auto& set = signal[static_cast<std::size_t>(label)];
    std::uniform_int_distribution<std::size_t> signal_pick(0, set.size() - 1);
    RawDocument doc;
    doc.label = label;
    const int s = n_sents(rng);
    doc.sentences.resize(static_cast<std::size_t>(s));
    for (auto& sent : doc.sentences) {
      const int t = n_toks(rng);
      sent.reserve(static_cast<std::size_t>(t));
      for (int j = 0; j < t; ++j) {
        if (coin(rng) < spec.signal_rate)
          sent.push_back(set[signal_pick(rng)]);
        else
          sent.push_back(noise[noise_pick(rng)]);
      }
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

}  // namespace

SynthSplits generate(const SynthSpec& spec) {
  spec.validate();
  const auto signal = spec.effective_signal_sets();
  const auto noise = spec.effective_noise_set();
  std::mt19937 rng(static_cast<std::uint32_t>(spec.seed ^ (spec.seed >> 32)));
  SynthSplits out;
  out.train = make_split(spec, signal, noise, spec.train_docs, rng);
  out.valid = make_split(spec, signal, noise, spec.valid_docs, rng);
  out.test = make_split(spec, signal, noise, spec.test_docs, rng);
  return out;
}

void write_jsonl(const std::string& path, const std::vector<RawDocument>& docs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& doc : docs) {
    nlohmann::json j;
    j["label"] = doc.label;
    auto sents = nlohmann::json::array();
    for (const auto& sent : doc.sentences) {
      std::string line;
      for (std::size_t i = 0; i < sent.size(); ++i) {
        if (i) line += ' ';
        line += sent[i];
      }
      sents.push_back(line);
    }
    j["sentences"] = std::move(sents);
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("failed writing '" + path + "'");
}

double counting_baseline_accuracy(const SynthSpec& spec,
                                  const std::vector<RawDocument>& docs) {
  if (docs.empty()) throw DataError("counting baseline: no documents");
  // token -> owning class
  std::unordered_map<std::string, int> owner;
  const auto sets = spec.effective_signal_sets();
  for (int k = 0; k < static_cast<int>(sets.size()); ++k)
    for (const auto& tok : sets[static_cast<std::size_t>(k)]) owner[tok] = k;

  int correct = 0;
  std::vector<int> hits(static_cast<std::size_t>(spec.num_classes));
  for (const auto& doc : docs) {
    std::fill(hits.begin(), hits.end(), 0);
    for (const auto& sent : doc.sentences)
      for (const auto& tok : sent) {
        auto it = owner.find(tok);
        if (it != owner.end()) ++hits[static_cast<std::size_t>(it->second)];
      }
    int best = 0;
    for (int k = 1; k < spec.num_classes; ++k)
      if (hits[static_cast<std::size_t>(k)] > hits[static_cast<std::size_t>(best)]) best = k;
    if (best == doc.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(docs.size());
}

}  // namespace amb
