#pragma once

// Hierarchical document encoder: a shared word embedding feeds per-class
// branches, each running a word-level BiLSTM + attention pool per sentence
// and a sentence-level BiLSTM over the pooled sentence vectors. Attention
// heads (per-class and shared) pool the sentence states into one document
// vector per class.
//
// Padding contract: masked steps hold the recurrent state, padded tokens
// embed row 0 (all zero, never updated), and masked positions get exactly
// zero attention weight — so appending padding to a document leaves every
// real output bit-identical.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "amb/corpus.hpp"
#include "amb/errors.hpp"
#include "amb/tensor.hpp"

namespace amb {

template <typename Real>
using ParamRefs = std::vector<std::pair<std::string, Tensor<Real>*>>;

namespace detail {

template <typename Real>
Real xavier_bound(std::int64_t fan_in, std::int64_t fan_out) {
  return std::sqrt(Real(6) / static_cast<Real>(fan_in + fan_out));
}

template <typename Real>
Tensor<Real> uniform_init(Shape shape, Real bound, std::mt19937& rng) {
  Tensor<Real> t(std::move(shape));
  std::uniform_real_distribution<Real> dist(-bound, bound);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace detail

// One LSTM direction. Gate order along the 4*d_h axis: input, forget,
// candidate, output. The forget-gate bias block starts at +1.
template <typename Real>
struct LstmParams {
  Tensor<Real> wx;  // [input_dim x 4*d_h]
  Tensor<Real> wh;  // [d_h x 4*d_h]
  Tensor<Real> b;   // [4*d_h]
  std::int64_t d_h = 0;

  static LstmParams init(std::int64_t input_dim, std::int64_t d_h, std::mt19937& rng) {
    LstmParams p;
    p.d_h = d_h;
    p.wx = detail::uniform_init<Real>({input_dim, 4 * d_h},
                                      detail::xavier_bound<Real>(input_dim, 4 * d_h), rng);
    p.wh =
        detail::uniform_init<Real>({d_h, 4 * d_h}, detail::xavier_bound<Real>(d_h, 4 * d_h), rng);
    p.b = Tensor<Real>({4 * d_h});
    for (std::int64_t i = d_h; i < 2 * d_h; ++i) p.b.data()[i] = Real(1);
    return p;
  }

  void collect(const std::string& prefix, ParamRefs<Real>& out) {
    out.emplace_back(prefix + ".wx", &wx);
    out.emplace_back(prefix + ".wh", &wh);
    out.emplace_back(prefix + ".b", &b);
  }
};

template <typename Real>
struct AttentionHead {
  Tensor<Real> proj;  // [2*d_h x d_a]
  Tensor<Real> bias;  // [d_a]
  Tensor<Real> ctx;   // [d_a]

  static AttentionHead init(std::int64_t state_dim, std::int64_t d_a, std::mt19937& rng) {
    AttentionHead h;
    h.proj = detail::uniform_init<Real>({state_dim, d_a},
                                        detail::xavier_bound<Real>(state_dim, d_a), rng);
    h.bias = Tensor<Real>({d_a});
    h.ctx = detail::uniform_init<Real>({d_a}, detail::xavier_bound<Real>(d_a, 1), rng);
    return h;
  }

  void collect(const std::string& prefix, ParamRefs<Real>& out) {
    out.emplace_back(prefix + ".proj", &proj);
    out.emplace_back(prefix + ".bias", &bias);
    out.emplace_back(prefix + ".ctx", &ctx);
  }
};

// Per-class encoder parameters; all branches share shapes, none share values.
template <typename Real>
struct EncoderBranch {
  LstmParams<Real> word_fwd, word_bwd;
  AttentionHead<Real> word_attn;
  LstmParams<Real> sent_fwd, sent_bwd;

  static EncoderBranch init(std::int64_t d_emb, std::int64_t d_h, std::int64_t d_a,
                            std::mt19937& rng) {
    EncoderBranch b;
    b.word_fwd = LstmParams<Real>::init(d_emb, d_h, rng);
    b.word_bwd = LstmParams<Real>::init(d_emb, d_h, rng);
    b.word_attn = AttentionHead<Real>::init(2 * d_h, d_a, rng);
    b.sent_fwd = LstmParams<Real>::init(2 * d_h, d_h, rng);
    b.sent_bwd = LstmParams<Real>::init(2 * d_h, d_h, rng);
    return b;
  }

  void collect(const std::string& prefix, ParamRefs<Real>& out) {
    word_fwd.collect(prefix + ".word_fwd", out);
    word_bwd.collect(prefix + ".word_bwd", out);
    word_attn.collect(prefix + ".word_attn", out);
    sent_fwd.collect(prefix + ".sent_fwd", out);
    sent_bwd.collect(prefix + ".sent_bwd", out);
  }
};

// Shared word embedding; row 0 is the pad row, all zero and never updated.
template <typename Real>
Tensor<Real> init_embedding(std::int64_t vocab_size, std::int64_t d_emb, std::mt19937& rng) {
  Tensor<Real> e = detail::uniform_init<Real>({vocab_size, d_emb}, Real(0.05), rng);
  for (std::int64_t j = 0; j < d_emb; ++j) e.data()[j] = Real(0);
  return e;
}

// Batch reorganized for recurrent evaluation: step-major token ids and flat
// step-major masks for the fused recurrence, plus lane-major mask matrices
// for attention. Precomputed once and shared by all branches. The flat masks
// stay empty when every position is real, which lets the recurrence skip
// masking entirely.
template <typename Real>
struct BatchView {
  std::int64_t B = 0, S = 0, T = 0, N = 0;  // N = B*S sentence lanes
  std::vector<std::int32_t> ids_tm;         // [T*N] step-major
  std::vector<Real> word_mask_tm;           // [T*N] 0/1; empty when all real
  Tensor<Real> word_mask_rows;              // [N x T]
  std::vector<Real> sent_mask_tm;           // [S*B] 0/1; empty when all real
  Tensor<Real> sentence_mask;               // [B x S]
  std::vector<std::int32_t> labels;

  static BatchView from(const Batch& b) {
    BatchView v;
    v.B = b.size;
    v.S = b.sentences;
    v.T = b.tokens;
    v.N = b.size * b.sentences;
    v.labels = b.labels;

    v.ids_tm.resize(static_cast<std::size_t>(v.T * v.N));
    for (std::int64_t n = 0; n < v.N; ++n)
      for (std::int64_t t = 0; t < v.T; ++t) v.ids_tm[t * v.N + n] = b.token_ids[n * v.T + t];

    v.word_mask_rows = Tensor<Real>({v.N, v.T});
    bool word_all_real = true;
    for (std::int64_t i = 0; i < v.N * v.T; ++i) {
      v.word_mask_rows.data()[i] = static_cast<Real>(b.word_mask[i]);
      word_all_real = word_all_real && b.word_mask[i] == 1.0f;
    }
    if (!word_all_real) {
      v.word_mask_tm.resize(static_cast<std::size_t>(v.T * v.N));
      for (std::int64_t n = 0; n < v.N; ++n)
        for (std::int64_t t = 0; t < v.T; ++t)
          v.word_mask_tm[t * v.N + n] = static_cast<Real>(b.word_mask[n * v.T + t]);
    }

    v.sentence_mask = Tensor<Real>({v.B, v.S});
    bool sent_all_real = true;
    for (std::int64_t i = 0; i < v.B * v.S; ++i) {
      v.sentence_mask.data()[i] = static_cast<Real>(b.sentence_mask[i]);
      sent_all_real = sent_all_real && b.sentence_mask[i] == 1.0f;
    }
    if (!sent_all_real) {
      v.sent_mask_tm.resize(static_cast<std::size_t>(v.S * v.B));
      for (std::int64_t bi = 0; bi < v.B; ++bi)
        for (std::int64_t s = 0; s < v.S; ++s)
          v.sent_mask_tm[s * v.B + bi] = static_cast<Real>(b.sentence_mask[bi * v.S + s]);
    }
    return v;
  }
};

// Softmax over each row of `scores` restricted to positions where mask is 1.
// Masked scores are buried at -1e9 before normalization and their weights
// forced to exact zero after it; rows with no unmasked positions come back
// all zero.
template <typename Real>
Tensor<Real> masked_softmax(const Tensor<Real>& scores, const Tensor<Real>& mask) {
  return mul(softmax(mask_fill(scores, mask, Real(-1e9)), scores.rank() - 1), mask);
}

namespace detail {

// Both directions of one BiLSTM level over a step-major input, concatenated
// along the feature axis into [steps*lanes x 2*d_h].
template <typename Real>
Tensor<Real> run_bilstm(const LstmParams<Real>& fwd, const LstmParams<Real>& bwd,
                        const Tensor<Real>& x_tm, std::span<const Real> mask_tm,
                        std::int64_t steps, std::int64_t lanes) {
  return concat<Real>({lstm_seq(x_tm, fwd.wx, fwd.wh, fwd.b, mask_tm, steps, lanes, false),
                       lstm_seq(x_tm, bwd.wx, bwd.wh, bwd.b, mask_tm, steps, lanes, true)},
                      1);
}

// tanh(states @ proj + bias) @ ctx for every row at once; step-major states
// [steps*lanes x dim] come back as lane-major score rows [lanes x steps].
template <typename Real>
Tensor<Real> attention_scores(const Tensor<Real>& states_tm, const AttentionHead<Real>& head,
                              std::int64_t steps, std::int64_t lanes) {
  const std::int64_t d_a = head.ctx.size();
  Tensor<Real> flat =
      matmul(tanh(add(matmul(states_tm, head.proj), head.bias)), reshape(head.ctx, {d_a, 1}));
  return reshape(swap01(flat, steps, lanes), {lanes, steps});
}

// Weighted sum over steps of step-major states [steps*lanes x dim] with
// lane-major weights [lanes x steps]; returns [lanes x dim].
template <typename Real>
Tensor<Real> pool_states(const Tensor<Real>& states_tm, const Tensor<Real>& weights,
                         std::int64_t steps, std::int64_t lanes) {
  const std::int64_t dim = states_tm.dim(1);
  Tensor<Real> w_tm = reshape(swap01(weights, lanes, steps), {steps * lanes});
  Tensor<Real> weighted = scale_rows(states_tm, w_tm);
  return reshape(reduce_sum(reshape(weighted, {steps, lanes * dim}), 0), {lanes, dim});
}

}  // namespace detail

template <typename Real>
struct EncodedSequence {
  Tensor<Real> states;  // [S*B x 2*d_h] step-major: sentence s of document b at row s*B + b
  Tensor<Real> mask;    // [B x S] sentence mask (constant)
  std::int64_t B = 0, S = 0;
};

template <typename Real>
struct Attention {
  Tensor<Real> pooled;   // [B x 2*d_h]
  Tensor<Real> weights;  // [B x S]
};

// Runs one branch over a batch: embed -> word BiLSTM -> word attention pool
// per sentence -> sentence BiLSTM. Returns the per-sentence hidden states.
template <typename Real>
EncodedSequence<Real> encode_branch(const BatchView<Real>& v, const EncoderBranch<Real>& branch,
                                    const Tensor<Real>& embedding) {
  // Word level: N = B*S sentence lanes over T token steps.
  Tensor<Real> x = embedding_lookup(embedding, std::span<const std::int32_t>(v.ids_tm));
  Tensor<Real> word_states = detail::run_bilstm(branch.word_fwd, branch.word_bwd, x,
                                                std::span<const Real>(v.word_mask_tm), v.T, v.N);

  // Pool each sentence's word states; fully padded sentences produce a zero
  // vector and are excluded downstream by the sentence mask.
  Tensor<Real> scores = detail::attention_scores(word_states, branch.word_attn, v.T, v.N);
  Tensor<Real> weights = masked_softmax(scores, v.word_mask_rows);
  Tensor<Real> sent_vec = detail::pool_states(word_states, weights, v.T, v.N);  // [N x 2*d_h]

  // Sentence level: B document lanes over S steps, step-major.
  Tensor<Real> sv_tm = reshape(swap01(sent_vec, v.B, v.S), {v.S * v.B, sent_vec.dim(1)});
  EncodedSequence<Real> out;
  out.states = detail::run_bilstm(branch.sent_fwd, branch.sent_bwd, sv_tm,
                                  std::span<const Real>(v.sent_mask_tm), v.S, v.B);
  out.mask = v.sentence_mask;
  out.B = v.B;
  out.S = v.S;
  return out;
}

template <typename Real>
EncodedSequence<Real> encode_branch(const Batch& batch, const EncoderBranch<Real>& branch,
                                    const Tensor<Real>& embedding) {
  return encode_branch(BatchView<Real>::from(batch), branch, embedding);
}

// Attention pooling over sentence states. Every document must have at least
// one real sentence; weights are zero exactly on masked positions.
template <typename Real>
Attention<Real> attend(const EncodedSequence<Real>& seq, const AttentionHead<Real>& head) {
  const auto& mask = seq.mask;
  for (std::int64_t b = 0; b < mask.dim(0); ++b) {
    bool any = false;
    for (std::int64_t s = 0; s < mask.dim(1); ++s)
      any = any || mask.data()[b * mask.dim(1) + s] != Real(0);
    if (!any)
      throw ContractError("attend: document " + std::to_string(b) + " has no real sentences");
  }
  Attention<Real> out;
  out.weights = masked_softmax(detail::attention_scores(seq.states, head, seq.S, seq.B), mask);
  out.pooled = detail::pool_states(seq.states, out.weights, seq.S, seq.B);
  return out;
}

// Repacks step-major states into one [B x S x dim] tensor (visualization and
// tests; the training path stays step-major).
template <typename Real>
Tensor<Real> packed_states(const EncodedSequence<Real>& seq) {
  const std::int64_t D = seq.states.dim(1);
  return reshape(swap01(seq.states, seq.S, seq.B), {seq.B, seq.S, D});
}

}  // namespace amb
