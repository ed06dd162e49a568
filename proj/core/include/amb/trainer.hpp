#pragma once

// Training loop: RMSProp over the composite loss with per-epoch validation,
// early stopping on validation accuracy, and a best-epoch parameter
// snapshot. Fully deterministic for a given seed, config, and corpus.

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "amb/corpus.hpp"
#include "amb/encoder.hpp"
#include "amb/errors.hpp"
#include "amb/model.hpp"
#include "amb/optimizer.hpp"
#include "amb/tensor.hpp"

namespace amb {

struct TrainerOptions {
  int epochs = 30;
  int batch_size = 32;
  int max_sentences = 30;
  int max_tokens = 40;
  int patience = 5;  // epochs without validation improvement; <= 0 disables
  std::uint64_t seed = 0;
  LossWeights weights;
  double learning_rate = 0.001;
  double rho = 0.9;
  double epsilon = 1e-8;
  double clip_norm = 5.0;
  bool adv_to_encoder = false;
  // On return the model holds the best-validation epoch's parameters; set
  // false to keep the final epoch's parameters instead (the best snapshot is
  // still reported and returned either way).
  bool restore_best = true;

  void validate() const {
    if (epochs < 1) throw ConfigError("trainer: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("trainer: batch_size must be >= 1");
    weights.validate();
  }
};

struct EpochRecord {
  int epoch = 0;           // 1-based
  double bin_sum = 0.0;    // epoch means of the loss parts (document-weighted)
  double mul = 0.0;
  double adv = 0.0;
  double diff = 0.0;
  double total = 0.0;
  double val_accuracy = 0.0;
  double disc_accuracy = 0.0;  // discriminator accuracy on training batches
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 1-based epoch the snapshot comes from
  double best_val_accuracy = 0.0;
};

struct Evaluation {
  double accuracy = 0.0;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
};

namespace detail {

// Distinct, deterministic shuffle stream per epoch (splitmix64 over the
// seed/epoch pair).
inline std::uint64_t epoch_shuffle_seed(std::uint64_t seed, int epoch) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(epoch + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Fraction of (document, branch) pairs whose source branch the
// discriminator names correctly.
template <typename Real>
double discriminator_accuracy(const std::vector<Tensor<Real>>& disc_probs) {
  std::int64_t hits = 0, total = 0;
  for (std::size_t k = 0; k < disc_probs.size(); ++k) {
    const auto pred = predict(disc_probs[k]);
    for (auto p : pred) hits += p == static_cast<std::int32_t>(k) ? 1 : 0;
    total += static_cast<std::int64_t>(pred.size());
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace detail

template <typename Real>
Evaluation evaluate(AMBModel<Real>& model, const std::vector<Document>& docs,
                    const TrainerOptions& to) {
  if (docs.empty()) throw ConfigError("evaluate: empty dataset");
  const int K = model.config().num_classes;
  Evaluation ev;
  ev.confusion.assign(K, std::vector<std::int64_t>(K, 0));
  std::int64_t hits = 0, total = 0;
  for (const Batch& b :
       batch(docs, to.batch_size, to.max_sentences, to.max_tokens, std::nullopt)) {
    auto view = BatchView<Real>::from(b);
    auto out = model.forward(view, to.weights);
    auto pred = predict(out.probs);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      ev.confusion[b.labels[i]][pred[i]] += 1;
      hits += pred[i] == b.labels[i] ? 1 : 0;
      ++total;
    }
  }
  ev.accuracy = static_cast<double>(hits) / static_cast<double>(total);
  return ev;
}

template <typename Real>
struct TrainResult {
  TrainReport report;
  std::vector<std::vector<Real>> best_params;  // values in params() order
};

// Trains in place; on return the model holds the best-validation-epoch
// parameters (ties keep the earlier epoch). on_epoch, when given, sees each
// record as it completes (progress reporting).
template <typename Real>
TrainResult<Real> train(AMBModel<Real>& model, const std::vector<Document>& train_docs,
                        const std::vector<Document>& val_docs, const TrainerOptions& to,
                        const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  to.validate();
  if (train_docs.empty()) throw ConfigError("train: empty training split");
  if (val_docs.empty()) throw ConfigError("train: empty validation split");

  auto params = model.params();
  for (auto& [name, p] : params) p->set_requires_grad(true);

  typename RmsProp<Real>::Options ro;
  ro.learning_rate = static_cast<Real>(to.learning_rate);
  ro.rho = static_cast<Real>(to.rho);
  ro.epsilon = static_cast<Real>(to.epsilon);
  ro.clip_norm = static_cast<Real>(to.clip_norm);
  RmsProp<Real> opt(ro);

  ForwardOptions<Real> fwd;
  fwd.adv_to_encoder = to.adv_to_encoder;

  auto snapshot = [&] {
    std::vector<std::vector<Real>> vals;
    vals.reserve(params.size());
    for (auto& [name, p] : params) vals.emplace_back(p->data().begin(), p->data().end());
    return vals;
  };

  TrainResult<Real> result;
  result.best_params = snapshot();
  int stale = 0;

  for (int epoch = 1; epoch <= to.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;

    double docs_seen = 0.0, disc_acc = 0.0;
    const auto batches = batch(train_docs, to.batch_size, to.max_sentences, to.max_tokens,
                               detail::epoch_shuffle_seed(to.seed, epoch));
    for (const Batch& b : batches) {
      auto view = BatchView<Real>::from(b);
      Tape<Real> tape;
      typename Tape<Real>::Scope scope(tape);
      for (auto& [name, p] : params) tape.watch(*p);
      auto out = model.forward(view, to.weights, fwd);
      auto grads = tape.backward(out.total);
      opt.step(params, grads);

      const double bsz = static_cast<double>(b.size);
      rec.bin_sum += static_cast<double>(out.bin_sum.item()) * bsz;
      rec.mul += static_cast<double>(out.mul_loss.item()) * bsz;
      rec.adv += static_cast<double>(out.adv_loss.item()) * bsz;
      rec.diff += static_cast<double>(out.diff.item()) * bsz;
      rec.total += static_cast<double>(out.total.item()) * bsz;
      disc_acc += detail::discriminator_accuracy(out.disc_probs) * bsz;
      docs_seen += bsz;
    }
    rec.bin_sum /= docs_seen;
    rec.mul /= docs_seen;
    rec.adv /= docs_seen;
    rec.diff /= docs_seen;
    rec.total /= docs_seen;
    rec.disc_accuracy = disc_acc / docs_seen;
    rec.val_accuracy = evaluate(model, val_docs, to).accuracy;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (result.report.best_epoch == 0 || rec.val_accuracy > result.report.best_val_accuracy) {
      result.report.best_epoch = epoch;
      result.report.best_val_accuracy = rec.val_accuracy;
      result.best_params = snapshot();
      stale = 0;
    } else if (++stale >= to.patience && to.patience > 0) {
      break;
    }
  }

  if (to.restore_best) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto dst = params[i].second->data();
      const auto& src = result.best_params[i];
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j];
    }
  }
  return result;
}

// Attention weights for one document: K class-specific rows then K
// adversarial rows, one weight per real sentence.
struct AttentionRecord {
  std::vector<std::string> sentences;            // reconstructed sentence text
  std::vector<std::vector<double>> class_rows;   // [K][S]
  std::vector<std::vector<double>> adv_rows;     // [K][S]
  std::int32_t predicted = 0;
};

template <typename Real>
AttentionRecord export_attention(AMBModel<Real>& model, const RawDocument& doc,
                                 const Vocabulary& vocab, const TrainerOptions& to) {
  std::vector<Document> docs = {map_to_ids(doc, vocab)};
  Batch b = batch(docs, 1, to.max_sentences, to.max_tokens, std::nullopt)[0];
  auto view = BatchView<Real>::from(b);
  auto out = model.forward(view, to.weights);

  AttentionRecord rec;
  const std::int64_t S = b.sentences;
  for (std::int64_t s = 0; s < S; ++s) {
    if (b.sentence_mask[s] == 0.0f) continue;
    std::string text;
    for (const auto& w : doc.sentences[s]) {
      if (!text.empty()) text += ' ';
      text += w;
    }
    rec.sentences.push_back(std::move(text));
  }
  const std::int64_t real = static_cast<std::int64_t>(rec.sentences.size());
  for (int k = 0; k < model.config().num_classes; ++k) {
    std::vector<double> cls(real), adv(real);
    for (std::int64_t s = 0; s < real; ++s) {
      cls[s] = static_cast<double>(out.class_weights[k].data()[s]);
      adv[s] = static_cast<double>(out.adv_weights[k].data()[s]);
    }
    rec.class_rows.push_back(std::move(cls));
    rec.adv_rows.push_back(std::move(adv));
  }
  rec.predicted = predict(out.probs)[0];
  return rec;
}

}  // namespace amb
