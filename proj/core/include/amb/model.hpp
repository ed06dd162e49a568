#pragma once

// The adversarial multi-binary model: K one-vs-rest binary heads over
// class-specific document vectors, a multi-class head whose logit i depends
// only on branch i's vector, a shared adversarial attention head whose
// pooled vectors feed a source-branch discriminator through a gradient
// reversal, and an orthogonality penalty keeping class-specific and shared
// vectors apart. The composite training loss is
//
//   L = alpha * sum_k L_bin_k + beta * L_mul + gamma * L_adv + delta * L_diff
//
// and a single minimization drives the discriminator/adversary min-max via
// the reversal.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "amb/corpus.hpp"
#include "amb/encoder.hpp"
#include "amb/errors.hpp"
#include "amb/tensor.hpp"

namespace amb {

struct LossWeights {
  double alpha = 0.5;
  double beta = 1.0;
  double gamma = 0.1;
  double delta = 0.1;
  double lambda_adv = 1.0;  // reversal strength inside the adversarial loss

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0 || delta < 0 || lambda_adv < 0)
      throw ConfigError("loss weights must be >= 0");
  }
};

// Two-logit softmax head for "is this document class k".
template <typename Real>
struct BinaryHead {
  Tensor<Real> w;   // [2*d_h] positive-class weight vector
  Tensor<Real> wp;  // [2*d_h] rest-class weight vector

  static BinaryHead init(std::int64_t dim, std::mt19937& rng) {
    BinaryHead h;
    h.w = detail::uniform_init<Real>({dim}, detail::xavier_bound<Real>(dim, 1), rng);
    h.wp = detail::uniform_init<Real>({dim}, detail::xavier_bound<Real>(dim, 1), rng);
    return h;
  }

  void collect(const std::string& prefix, ParamRefs<Real>& out) {
    out.emplace_back(prefix + ".w", &w);
    out.emplace_back(prefix + ".wp", &wp);
  }
};

namespace detail {

// One-hot rows as an untracked constant, [B x num_cols].
template <typename Real>
Tensor<Real> one_hot(const std::vector<std::int32_t>& labels, std::int64_t num_cols) {
  Tensor<Real> t({static_cast<std::int64_t>(labels.size()), num_cols});
  for (std::size_t b = 0; b < labels.size(); ++b) t.data()[b * num_cols + labels[b]] = Real(1);
  return t;
}

// Mean over the batch of -log(probs at the hot column).
template <typename Real>
Tensor<Real> nll(const Tensor<Real>& probs, const Tensor<Real>& hot) {
  const Real inv_b = Real(1) / static_cast<Real>(probs.dim(0));
  return mul(reduce_sum(mul(log(probs), hot)), -inv_b);
}

}  // namespace detail

// Binary one-vs-rest loss for class k: two logits (w . a_k, wp . a_k),
// softmax, mean negative log likelihood of "label == k".
template <typename Real>
Tensor<Real> binary_loss(const Tensor<Real>& a_k, const BinaryHead<Real>& head,
                         const std::vector<std::int32_t>& labels, int k) {
  const std::int64_t dim = a_k.dim(1);
  Tensor<Real> pos = matmul(a_k, reshape(head.w, {dim, 1}));
  Tensor<Real> rest = matmul(a_k, reshape(head.wp, {dim, 1}));
  Tensor<Real> probs = softmax(concat<Real>({pos, rest}, 1), 1);  // [B x 2]

  std::vector<std::int32_t> is_k(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) is_k[i] = labels[i] == k ? 0 : 1;
  return detail::nll(probs, detail::one_hot<Real>(is_k, 2));
}

// Pre-softmax multi-class logits: logit_i = u_i . a_i, so each class's logit
// depends on its own branch vector and weight row alone.
template <typename Real>
Tensor<Real> multiclass_logits(const std::vector<Tensor<Real>>& a, const Tensor<Real>& u) {
  const std::int64_t K = static_cast<std::int64_t>(a.size());
  if (K < 2 || u.dim(0) != K)
    throw ShapeError("multiclass_logits: need one weight row per class, got " +
                     shape_str(u.shape()) + " for K=" + std::to_string(K));
  std::vector<Tensor<Real>> cols;
  cols.reserve(a.size());
  for (std::int64_t k = 0; k < K; ++k)
    cols.push_back(matmul(a[k], transpose(slice(u, 0, k, 1))));  // [B x 1]
  return concat(cols, 1);
}

template <typename Real>
Tensor<Real> multiclass_probs(const std::vector<Tensor<Real>>& a, const Tensor<Real>& u) {
  return softmax(multiclass_logits(a, u), 1);
}

template <typename Real>
Tensor<Real> multiclass_loss(const Tensor<Real>& probs, const std::vector<std::int32_t>& labels) {
  return detail::nll(probs, detail::one_hot<Real>(labels, probs.dim(1)));
}

template <typename Real>
struct AdversarialResult {
  Tensor<Real> loss;                    // scalar: mean over batch and classes
  std::vector<Tensor<Real>> a_adv;      // K pooled vectors [B x 2*d_h]
  std::vector<Tensor<Real>> weights;    // K attention maps [B x S]
  std::vector<Tensor<Real>> probs;      // K discriminator outputs [B x K]
};

// Shared attention over each branch's states, then a discriminator that
// must name the source branch. The pooled vectors pass through a gradient
// reversal scaled by lambda_adv, so minimizing the returned cross-entropy
// simultaneously trains the discriminator to win and the shared attention
// to make it lose. Callers control whether encoder gradients are exposed by
// detaching the sequences they pass in.
template <typename Real>
AdversarialResult<Real> adversarial_loss(const std::vector<EncodedSequence<Real>>& seqs,
                                         const AttentionHead<Real>& adv_head,
                                         const Tensor<Real>& v, Real lambda_adv) {
  const std::int64_t K = static_cast<std::int64_t>(seqs.size());
  if (K < 2) throw ContractError("adversarial_loss: need at least 2 classes");
  AdversarialResult<Real> out;
  Tensor<Real> vt = transpose(v);  // [2*d_h x K]
  Tensor<Real> sum;
  for (std::int64_t k = 0; k < K; ++k) {
    Attention<Real> att = attend(seqs[k], adv_head);
    Tensor<Real> probs =
        softmax(matmul(gradient_reversal(att.pooled, lambda_adv), vt), 1);  // [B x K]
    // Target z is "came from branch k": only column k survives.
    Tensor<Real> term = mul(reduce_mean(slice(log(probs), 1, k, 1)), Real(-1));
    sum = k == 0 ? std::move(term) : add(sum, term);
    out.a_adv.push_back(att.pooled);
    out.weights.push_back(att.weights);
    out.probs.push_back(std::move(probs));
  }
  out.loss = mul(sum, Real(1) / static_cast<Real>(K));
  return out;
}

// Orthogonality penalty: mean over the batch of sum_k (a_k . a_adv(k))^2.
template <typename Real>
Tensor<Real> diff_loss(const std::vector<Tensor<Real>>& a, const std::vector<Tensor<Real>>& a_adv) {
  if (a.size() != a_adv.size() || a.empty())
    throw ShapeError("diff_loss: class-specific and shared lists must match");
  Tensor<Real> acc;
  for (std::size_t k = 0; k < a.size(); ++k) {
    Tensor<Real> dot = reduce_sum(mul(a[k], a_adv[k]), 1);  // [B]
    Tensor<Real> sq = mul(dot, dot);
    acc = k == 0 ? std::move(sq) : add(acc, sq);
  }
  return reduce_mean(acc);
}

// alpha * bin_sum + beta * mul + gamma * adv + delta * diff, no hidden terms.
template <typename Real>
Tensor<Real> total_loss(const Tensor<Real>& bin_sum, const Tensor<Real>& mul_loss,
                        const Tensor<Real>& adv, const Tensor<Real>& diff,
                        const LossWeights& w) {
  w.validate();
  return add(add(mul(bin_sum, static_cast<Real>(w.alpha)), mul(mul_loss, static_cast<Real>(w.beta))),
             add(mul(adv, static_cast<Real>(w.gamma)), mul(diff, static_cast<Real>(w.delta))));
}

// Argmax per row; ties go to the smallest class index.
template <typename Real>
std::vector<std::int32_t> predict(const Tensor<Real>& probs) {
  std::vector<std::int32_t> labels(static_cast<std::size_t>(probs.dim(0)));
  const std::int64_t K = probs.dim(1);
  for (std::int64_t b = 0; b < probs.dim(0); ++b) {
    std::int32_t best = 0;
    for (std::int64_t k = 1; k < K; ++k)
      if (probs.data()[b * K + k] > probs.data()[b * K + best])
        best = static_cast<std::int32_t>(k);
    labels[b] = best;
  }
  return labels;
}

struct ModelConfig {
  int num_classes = 4;
  std::int64_t vocab_size = 0;  // including pad and unk
  std::int64_t d_emb = 200;
  std::int64_t d_h = 100;
  std::int64_t d_a = 100;

  void validate() const {
    if (num_classes < 2) throw ConfigError("model: need at least 2 classes");
    if (vocab_size < 2) throw ConfigError("model: vocabulary must include pad and unk");
    if (d_emb < 1 || d_h < 1 || d_a < 1) throw ConfigError("model: dimensions must be >= 1");
  }
};

template <typename Real>
struct ForwardOptions {
  // When true the reversed adversarial gradient continues into the encoder
  // branches; default keeps encoders out of the adversarial game.
  bool adv_to_encoder = false;
  // Pins the adversarial head's input to these values (K step-major state
  // matrices [S*B x 2*d_h]). Finite-difference harnesses use this to hold the
  // detached path constant while perturbing encoder parameters.
  const std::vector<Tensor<Real>>* frozen_adv_states = nullptr;
};

template <typename Real>
struct ForwardResult {
  Tensor<Real> total;                        // scalar composite loss
  Tensor<Real> bin_sum;                      // scalar sum_k L_bin_k
  std::vector<Tensor<Real>> bin;             // K scalars
  Tensor<Real> mul_loss;                     // scalar
  Tensor<Real> adv_loss;                     // scalar
  Tensor<Real> diff;                         // scalar
  Tensor<Real> probs;                        // [B x K] multiclass probabilities
  std::vector<Tensor<Real>> a;               // K class vectors [B x 2*d_h]
  std::vector<Tensor<Real>> a_adv;           // K shared vectors [B x 2*d_h]
  std::vector<Tensor<Real>> class_weights;   // K attention maps [B x S]
  std::vector<Tensor<Real>> adv_weights;     // K attention maps [B x S]
  std::vector<Tensor<Real>> disc_probs;      // K discriminator outputs [B x K]
  std::vector<Tensor<Real>> enc_states;      // K detached state matrices [S*B x 2*d_h]
};

template <typename Real>
class AMBModel {
 public:
  AMBModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937 rng(static_cast<std::uint32_t>(seed ^ (seed >> 32)));
    embedding_ = init_embedding<Real>(cfg_.vocab_size, cfg_.d_emb, rng);
    for (int k = 0; k < cfg_.num_classes; ++k)
      branches_.push_back(EncoderBranch<Real>::init(cfg_.d_emb, cfg_.d_h, cfg_.d_a, rng));
    for (int k = 0; k < cfg_.num_classes; ++k)
      class_attn_.push_back(AttentionHead<Real>::init(2 * cfg_.d_h, cfg_.d_a, rng));
    for (int k = 0; k < cfg_.num_classes; ++k)
      binary_.push_back(BinaryHead<Real>::init(2 * cfg_.d_h, rng));
    u_ = detail::uniform_init<Real>({cfg_.num_classes, 2 * cfg_.d_h},
                                    detail::xavier_bound<Real>(2 * cfg_.d_h, cfg_.num_classes),
                                    rng);
    adv_attn_ = AttentionHead<Real>::init(2 * cfg_.d_h, cfg_.d_a, rng);
    v_ = detail::uniform_init<Real>({cfg_.num_classes, 2 * cfg_.d_h},
                                    detail::xavier_bound<Real>(2 * cfg_.d_h, cfg_.num_classes),
                                    rng);
  }

  const ModelConfig& config() const { return cfg_; }

  // Every trainable parameter in a fixed, documented order. The order is the
  // checkpoint blob order and the optimizer state order.
  ParamRefs<Real> params() {
    ParamRefs<Real> out;
    out.emplace_back("embedding", &embedding_);
    for (int k = 0; k < cfg_.num_classes; ++k)
      branches_[k].collect("branch" + std::to_string(k), out);
    for (int k = 0; k < cfg_.num_classes; ++k)
      class_attn_[k].collect("class_attn" + std::to_string(k), out);
    for (int k = 0; k < cfg_.num_classes; ++k)
      binary_[k].collect("binary" + std::to_string(k), out);
    out.emplace_back("multiclass.u", &u_);
    adv_attn_.collect("adv_attn", out);
    out.emplace_back("discriminator.v", &v_);
    return out;
  }

  ParamRefs<Real> discriminator_params() { return {{"discriminator.v", &v_}}; }
  ParamRefs<Real> adv_attention_params() {
    ParamRefs<Real> out;
    adv_attn_.collect("adv_attn", out);
    return out;
  }

  Tensor<Real>& embedding() { return embedding_; }
  EncoderBranch<Real>& branch(int k) { return branches_.at(k); }
  AttentionHead<Real>& class_attention(int k) { return class_attn_.at(k); }
  BinaryHead<Real>& binary_head(int k) { return binary_.at(k); }
  Tensor<Real>& multiclass_weights() { return u_; }
  AttentionHead<Real>& adv_attention() { return adv_attn_; }
  Tensor<Real>& discriminator() { return v_; }

  ForwardResult<Real> forward(const BatchView<Real>& view, const LossWeights& w,
                              const ForwardOptions<Real>& opt = {}) {
    w.validate();
    const int K = cfg_.num_classes;
    ForwardResult<Real> out;

    std::vector<EncodedSequence<Real>> adv_in(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
      EncodedSequence<Real> seq = encode_branch(view, branches_[k], embedding_);
      Attention<Real> att = attend(seq, class_attn_[k]);
      out.a.push_back(att.pooled);
      out.class_weights.push_back(att.weights);

      Tensor<Real> detached = seq.states.detached();
      out.enc_states.push_back(detached);

      adv_in[k].mask = seq.mask;
      adv_in[k].B = seq.B;
      adv_in[k].S = seq.S;
      if (opt.frozen_adv_states) {
        adv_in[k].states = (*opt.frozen_adv_states)[k];
      } else if (opt.adv_to_encoder) {
        adv_in[k].states = std::move(seq.states);
      } else {
        adv_in[k].states = std::move(detached);
      }

      Tensor<Real> lb = binary_loss(att.pooled, binary_[k], view.labels, k);
      out.bin_sum = k == 0 ? lb : add(out.bin_sum, lb);
      out.bin.push_back(std::move(lb));
    }

    out.probs = multiclass_probs(out.a, u_);
    out.mul_loss = multiclass_loss(out.probs, view.labels);

    AdversarialResult<Real> adv =
        adversarial_loss(adv_in, adv_attn_, v_, static_cast<Real>(w.lambda_adv));
    out.adv_loss = adv.loss;
    out.a_adv = std::move(adv.a_adv);
    out.adv_weights = std::move(adv.weights);
    out.disc_probs = std::move(adv.probs);

    out.diff = diff_loss(out.a, out.a_adv);
    out.total = total_loss(out.bin_sum, out.mul_loss, out.adv_loss, out.diff, w);
    return out;
  }

 private:
  ModelConfig cfg_;
  Tensor<Real> embedding_;
  std::vector<EncoderBranch<Real>> branches_;
  std::vector<AttentionHead<Real>> class_attn_;
  std::vector<BinaryHead<Real>> binary_;
  Tensor<Real> u_;
  AttentionHead<Real> adv_attn_;
  Tensor<Real> v_;
};

}  // namespace amb
