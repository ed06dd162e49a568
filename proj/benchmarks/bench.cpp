// Microbenchmarks for the training hot path, at the shapes one training
// batch actually uses (batch 32, up to 8 sentences x 15 tokens, dims
// 32/16/16, 4 classes): the dense kernels, the fused recurrence, attention
// pooling, the full model forward and forward+backward, and tokenization.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "amb/corpus.hpp"
#include "amb/encoder.hpp"
#include "amb/model.hpp"
#include "amb/synth.hpp"
#include "amb/tensor.hpp"
#include "amb/trainer.hpp"

namespace {

using FTensor = amb::Tensor<float>;

template <typename Real>
void fill(amb::Tensor<Real>& t, std::mt19937& rng) {
  std::uniform_real_distribution<Real> dist(Real(-1), Real(1));
  for (auto& v : t.data()) v = dist(rng);
}

// One real training batch plus a model at training dimensions, built once.
struct Fixture {
  amb::Vocabulary vocab;
  std::vector<amb::Document> docs;
  amb::ModelConfig cfg;
  amb::AMBModel<float> model;
  amb::BatchView<float> view;
  amb::LossWeights weights;

  static amb::ModelConfig make_config(std::int64_t vocab_size) {
    amb::ModelConfig cfg;
    cfg.num_classes = 4;
    cfg.vocab_size = vocab_size;
    cfg.d_emb = 32;
    cfg.d_h = 16;
    cfg.d_a = 16;
    return cfg;
  }

  explicit Fixture(const amb::SynthSplits& splits)
      : vocab(amb::Vocabulary::build(splits.train)),
        docs(amb::map_to_ids(splits.train, vocab)),
        cfg(make_config(vocab.size())),
        model(cfg, 1),
        view(amb::BatchView<float>::from(amb::batch(docs, 32, 30, 40, std::nullopt)[0])) {
    for (auto& [name, p] : model.params()) p->set_requires_grad(true);
  }
};

Fixture& fixture() {
  static Fixture f = [] {
    amb::SynthSpec spec;
    spec.train_docs = 320;
    spec.valid_docs = 4;
    spec.test_docs = 4;
    return Fixture(amb::generate(spec));
  }();
  return f;
}

void BM_Matmul(benchmark::State& state) {
  std::mt19937 rng(1);
  FTensor a({256, 32}), b({32, 64});
  fill(a, rng);
  fill(b, rng);
  for (auto _ : state) benchmark::DoNotOptimize(amb::matmul(a, b));
}
BENCHMARK(BM_Matmul)->Unit(benchmark::kMicrosecond);

void BM_LstmSeqForward(benchmark::State& state) {
  std::mt19937 rng(2);
  const std::int64_t steps = 15, lanes = 256, d_in = 32, H = 16;
  FTensor x({steps * lanes, d_in}), wx({d_in, 4 * H}), wh({H, 4 * H}), b({4 * H});
  fill(x, rng);
  fill(wx, rng);
  fill(wh, rng);
  fill(b, rng);
  for (auto _ : state)
    benchmark::DoNotOptimize(
        amb::lstm_seq(x, wx, wh, b, std::span<const float>(), steps, lanes, false));
}
BENCHMARK(BM_LstmSeqForward)->Unit(benchmark::kMicrosecond);

void BM_LstmSeqTrain(benchmark::State& state) {
  std::mt19937 rng(3);
  const std::int64_t steps = 15, lanes = 256, d_in = 32, H = 16;
  FTensor x({steps * lanes, d_in}), wx({d_in, 4 * H}), wh({H, 4 * H}), b({4 * H});
  fill(x, rng);
  fill(wx, rng);
  fill(wh, rng);
  fill(b, rng);
  for (auto* t : {&x, &wx, &wh, &b}) t->set_requires_grad(true);
  for (auto _ : state) {
    amb::Tape<float> tape;
    amb::Tape<float>::Scope scope(tape);
    for (auto* t : {&x, &wx, &wh, &b}) tape.watch(*t);
    auto out = amb::lstm_seq(x, wx, wh, b, std::span<const float>(), steps, lanes, false);
    benchmark::DoNotOptimize(tape.backward(amb::reduce_sum(out)));
  }
}
BENCHMARK(BM_LstmSeqTrain)->Unit(benchmark::kMicrosecond);

void BM_AttentionPool(benchmark::State& state) {
  std::mt19937 rng(4);
  const std::int64_t steps = 8, lanes = 32, dim = 32, d_a = 16;
  FTensor states({steps * lanes, dim});
  fill(states, rng);
  auto head = amb::AttentionHead<float>::init(dim, d_a, rng);
  FTensor mask = FTensor::full({lanes, steps}, 1.0f);
  for (auto _ : state) {
    auto scores = amb::detail::attention_scores(states, head, steps, lanes);
    auto w = amb::masked_softmax(scores, mask);
    benchmark::DoNotOptimize(amb::detail::pool_states(states, w, steps, lanes));
  }
}
BENCHMARK(BM_AttentionPool)->Unit(benchmark::kMicrosecond);

void BM_ModelForward(benchmark::State& state) {
  auto& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(f.model.forward(f.view, f.weights));
}
BENCHMARK(BM_ModelForward)->Unit(benchmark::kMillisecond);

void BM_ModelForwardBackward(benchmark::State& state) {
  auto& f = fixture();
  auto params = f.model.params();
  for (auto _ : state) {
    amb::Tape<float> tape;
    amb::Tape<float>::Scope scope(tape);
    for (auto& [name, p] : params) tape.watch(*p);
    auto out = f.model.forward(f.view, f.weights);
    benchmark::DoNotOptimize(tape.backward(out.total));
  }
}
BENCHMARK(BM_ModelForwardBackward)->Unit(benchmark::kMillisecond);

void BM_Tokenize(benchmark::State& state) {
  const std::string text =
      "The committee reviewed the quarterly filings in detail. Nothing in the record suggested"
      " any irregularity, and the auditors agreed! Did the board approve the final version?"
      " It did, after a long discussion about the footnotes and the carried-forward totals.";
  for (auto _ : state) benchmark::DoNotOptimize(amb::tokenize(text));
}
BENCHMARK(BM_Tokenize)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
