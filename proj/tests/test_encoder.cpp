#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "amb/corpus.hpp"
#include "amb/encoder.hpp"
#include "testutil.hpp"

using amb::Batch;
using amb::Document;
using DTensor = amb::Tensor<double>;

namespace {

// Independent re-computation of the attention formula with plain loops:
// u_s = tanh(h_s W + b), score_s = u_s . ctx, masked softmax, weighted sum.
struct AttendRef {
  std::vector<double> pooled;   // [B x D]
  std::vector<double> weights;  // [B x S]
};

AttendRef attend_ref(const amb::EncodedSequence<double>& seq,
                     const amb::AttentionHead<double>& head) {
  const std::int64_t S = seq.S, B = seq.B;
  const std::int64_t D = seq.states.dim(1), A = head.ctx.size();
  const auto state = [&](std::int64_t s, std::int64_t b, std::int64_t d) {
    return seq.states.data()[(s * B + b) * D + d];  // step-major rows
  };
  AttendRef ref;
  ref.pooled.assign(B * D, 0.0);
  ref.weights.assign(B * S, 0.0);
  for (std::int64_t b = 0; b < B; ++b) {
    std::vector<double> score(S, 0.0);
    for (std::int64_t s = 0; s < S; ++s) {
      for (std::int64_t a = 0; a < A; ++a) {
        double u = head.bias.data()[a];
        for (std::int64_t d = 0; d < D; ++d) u += state(s, b, d) * head.proj.data()[d * A + a];
        score[s] += std::tanh(u) * head.ctx.data()[a];
      }
    }
    double mx = -1e300, z = 0.0;
    for (std::int64_t s = 0; s < S; ++s)
      if (seq.mask.data()[b * S + s] != 0.0) mx = std::max(mx, score[s]);
    for (std::int64_t s = 0; s < S; ++s)
      if (seq.mask.data()[b * S + s] != 0.0) z += std::exp(score[s] - mx);
    for (std::int64_t s = 0; s < S; ++s) {
      if (seq.mask.data()[b * S + s] == 0.0) continue;
      const double w = std::exp(score[s] - mx) / z;
      ref.weights[b * S + s] = w;
      for (std::int64_t d = 0; d < D; ++d) ref.pooled[b * D + d] += w * state(s, b, d);
    }
  }
  return ref;
}

amb::EncodedSequence<double> random_sequence(std::int64_t B, std::int64_t S, std::int64_t D,
                                             std::mt19937& rng) {
  amb::EncodedSequence<double> seq;
  seq.B = B;
  seq.S = S;
  seq.states = DTensor({S * B, D});
  testutil::fill_uniform(seq.states, rng);
  seq.mask = DTensor::full({B, S}, 1.0);
  return seq;
}

Batch small_batch() {
  // Doc 0: sentences of 3 and 1 tokens; doc 1: one sentence of 2 tokens.
  std::vector<Document> docs = {
      {0, {{2, 3, 4}, {5}}},
      {1, {{3, 2}}},
  };
  return amb::batch(docs, 2, 30, 40, std::nullopt)[0];
}

}  // namespace

TEST_CASE("encode_branch meets the shape contract at reference dimensions") {
  std::mt19937 rng(1);
  const std::int64_t d_emb = 8, d_h = 100, d_a = 4;
  auto branch = amb::EncoderBranch<double>::init(d_emb, d_h, d_a, rng);
  auto embedding = amb::init_embedding<double>(6, d_emb, rng);

  std::vector<Document> docs = {{0, {{2}}}};  // one sentence, one token
  Batch b = amb::batch(docs, 1, 30, 40, std::nullopt)[0];
  auto seq = amb::encode_branch(b, branch, embedding);
  REQUIRE(seq.S == 1);
  CHECK(seq.states.shape() == amb::Shape({1, 200}));
  CHECK(amb::packed_states(seq).shape() == amb::Shape({1, 1, 200}));
}

TEST_CASE("attend on a single sentence returns weight 1 and the state itself") {
  std::mt19937 rng(2);
  auto seq = random_sequence(2, 1, 6, rng);
  auto head = amb::AttentionHead<double>::init(6, 4, rng);
  auto att = amb::attend(seq, head);
  CHECK(att.weights.at({0, 0}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(att.weights.at({1, 0}) == doctest::Approx(1.0).epsilon(1e-12));
  for (std::int64_t d = 0; d < 6; ++d)
    CHECK(att.pooled.at({0, d}) == doctest::Approx(seq.states.at({0, d})).epsilon(1e-12));
}

TEST_CASE("identical sentence states split attention evenly") {
  std::mt19937 rng(3);
  amb::EncodedSequence<double> seq;
  DTensor h({1, 6});
  testutil::fill_uniform(h, rng);
  seq.B = 1;
  seq.S = 2;
  seq.states = DTensor({2, 6});  // the same state at both steps
  std::copy_n(h.data().data(), 6, seq.states.data().data());
  std::copy_n(h.data().data(), 6, seq.states.data().data() + 6);
  seq.mask = DTensor::full({1, 2}, 1.0);
  auto head = amb::AttentionHead<double>::init(6, 4, rng);
  auto att = amb::attend(seq, head);
  CHECK(att.weights.at({0, 0}) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(att.weights.at({0, 1}) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("attend matches an independent 64-bit reference with a partial mask") {
  std::mt19937 rng(4);
  const std::int64_t B = 3, S = 4, D = 6, A = 5;
  auto seq = random_sequence(B, S, D, rng);
  // Mask out two positions; every document keeps at least one sentence.
  seq.mask.data()[0 * S + 3] = 0.0;
  seq.mask.data()[2 * S + 1] = 0.0;
  seq.mask.data()[2 * S + 2] = 0.0;
  auto head = amb::AttentionHead<double>::init(D, A, rng);

  auto att = amb::attend(seq, head);
  auto ref = attend_ref(seq, head);

  for (std::int64_t b = 0; b < B; ++b) {
    double sum = 0.0;
    for (std::int64_t s = 0; s < S; ++s) {
      const double w = att.weights.at({b, s});
      CHECK(w == doctest::Approx(ref.weights[b * S + s]).epsilon(1e-9));
      if (seq.mask.at({b, s}) == 0.0) CHECK(w == 0.0);  // exact zero on masked
      sum += w;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    for (std::int64_t d = 0; d < D; ++d)
      CHECK(att.pooled.at({b, d}) == doctest::Approx(ref.pooled[b * D + d]).epsilon(1e-9));
  }
}

TEST_CASE("attend rejects a document with no real sentences") {
  std::mt19937 rng(5);
  auto seq = random_sequence(2, 2, 4, rng);
  seq.mask.data()[2] = 0.0;
  seq.mask.data()[3] = 0.0;  // document 1 fully masked
  auto head = amb::AttentionHead<double>::init(4, 3, rng);
  CHECK_THROWS_AS(amb::attend(seq, head), amb::ContractError);
}

TEST_CASE("identical documents in one batch produce identical encoder rows") {
  std::mt19937 rng(6);
  auto branch = amb::EncoderBranch<double>::init(5, 3, 3, rng);
  auto embedding = amb::init_embedding<double>(8, 5, rng);
  std::vector<Document> docs = {{0, {{2, 3}, {4}}}, {1, {{2, 3}, {4}}}};
  Batch b = amb::batch(docs, 2, 30, 40, std::nullopt)[0];
  auto seq = amb::encode_branch(b, branch, embedding);
  for (std::int64_t s = 0; s < seq.S; ++s)
    for (std::int64_t d = 0; d < seq.states.dim(1); ++d)
      CHECK(seq.states.at({s * seq.B + 0, d}) == seq.states.at({s * seq.B + 1, d}));
}

TEST_CASE("appending an all-pad sentence leaves the pooled vector unchanged") {
  std::mt19937 rng(7);
  const std::int64_t d_emb = 5, d_h = 3, d_a = 3;
  auto branch = amb::EncoderBranch<double>::init(d_emb, d_h, d_a, rng);
  auto head = amb::AttentionHead<double>::init(2 * d_h, d_a, rng);
  auto embedding = amb::init_embedding<double>(8, d_emb, rng);

  std::vector<Document> docs = {{0, {{2, 3, 4}, {5, 6}}}};
  Batch plain = amb::batch(docs, 1, 30, 40, std::nullopt)[0];

  Batch padded = plain;  // widen to 3 sentence slots, the extra one all pad
  padded.sentences = 3;
  padded.token_ids.assign(padded.sentences * padded.tokens, amb::Vocabulary::kPad);
  padded.word_mask.assign(padded.sentences * padded.tokens, 0.0f);
  padded.sentence_mask.assign(padded.sentences, 0.0f);
  for (std::int64_t s = 0; s < plain.sentences; ++s) {
    padded.sentence_mask[s] = plain.sentence_mask[s];
    for (std::int64_t t = 0; t < plain.tokens; ++t) {
      padded.token_ids[s * padded.tokens + t] = plain.token_ids[s * plain.tokens + t];
      padded.word_mask[s * padded.tokens + t] = plain.word_mask[s * plain.tokens + t];
    }
  }

  auto a0 = amb::attend(amb::encode_branch(plain, branch, embedding), head);
  auto a1 = amb::attend(amb::encode_branch(padded, branch, embedding), head);
  for (std::int64_t d = 0; d < a0.pooled.dim(1); ++d)
    CHECK(std::abs(a0.pooled.at({0, d}) - a1.pooled.at({0, d})) <= 1e-6);
  CHECK(a1.weights.at({0, 2}) == 0.0);
}

TEST_CASE("perturbing one branch leaves another branch's encoding bit-identical") {
  std::mt19937 rng(8);
  auto branch_k = amb::EncoderBranch<double>::init(5, 3, 3, rng);
  auto branch_j = amb::EncoderBranch<double>::init(5, 3, 3, rng);
  auto embedding = amb::init_embedding<double>(8, 5, rng);
  Batch b = small_batch();

  auto before = amb::encode_branch(b, branch_k, embedding);
  branch_j.word_fwd.wx.data()[0] += 10.0;  // branches must not share storage
  branch_j.sent_bwd.wh.data()[1] -= 3.0;
  auto after = amb::encode_branch(b, branch_k, embedding);
  for (std::int64_t i = 0; i < before.states.size(); ++i)
    CHECK(before.states.data()[i] == after.states.data()[i]);
}

TEST_CASE("full encoder + attention pass a finite-difference gradient check") {
  std::mt19937 rng(9);
  const std::int64_t d_emb = 3, d_h = 2, d_a = 2, V = 7;
  auto branch = amb::EncoderBranch<double>::init(d_emb, d_h, d_a, rng);
  auto head = amb::AttentionHead<double>::init(2 * d_h, d_a, rng);
  auto embedding = amb::init_embedding<double>(V, d_emb, rng);
  Batch b = small_batch();
  auto view = amb::BatchView<double>::from(b);

  std::vector<std::pair<std::string, DTensor*>> leaves = {{"embedding", &embedding}};
  branch.collect("branch", leaves);
  head.collect("head", leaves);

  auto wp = testutil::random_weights<double>(2 * 2 * d_h, rng);
  auto ww = testutil::random_weights<double>(2 * 2, rng);
  auto res = testutil::gradcheck(leaves, [&] {
    auto att = amb::attend(amb::encode_branch(view, branch, embedding), head);
    return amb::add(testutil::weighted_sum(att.pooled, wp), testutil::weighted_sum(att.weights, ww));
  });
  INFO(res.summary());
  CHECK(res.ok);
}

TEST_CASE("masked softmax zeroes fully masked rows without normalizing them") {
  DTensor scores({2, 3}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  DTensor mask({2, 3}, {1, 0, 1, 0, 0, 0});
  auto w = amb::masked_softmax(scores, mask);
  CHECK(w.at({0, 1}) == 0.0);
  CHECK(w.at({0, 0}) + w.at({0, 2}) == doctest::Approx(1.0).epsilon(1e-12));
  for (std::int64_t s = 0; s < 3; ++s) CHECK(w.at({1, s}) == 0.0);
}
