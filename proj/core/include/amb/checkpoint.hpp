#pragma once

// Checkpoint persistence: one UTF-8 JSON header line (dimensions, loss
// weights, epoch, seed, and the named shape of every parameter in order),
// then the parameters as concatenated little-endian 32-bit floats in header
// order. Round trips are bit-exact for float models on one platform.

#include <bit>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "amb/errors.hpp"
#include "amb/model.hpp"
#include "amb/tensor.hpp"

namespace amb {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts need a byte swap");

struct CheckpointHeader {
  ModelConfig model;
  LossWeights weights;
  int epoch = 0;
  std::uint64_t seed = 0;
  // Retained vocabulary tokens in id order (may be empty for bare model
  // snapshots); carrying them makes a checkpoint self-contained for
  // evaluation and prediction.
  std::vector<std::string> vocab;
  std::vector<std::pair<std::string, Shape>> params;  // blob order
};

struct CheckpointData {
  CheckpointHeader header;
  std::vector<std::vector<float>> blobs;  // one per header.params entry
};

void save_checkpoint_file(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint_file(const std::string& path);

// Snapshot a model (plus the training weights/epoch/seed that produced it
// and, when given, the vocabulary it was trained against).
template <typename Real>
CheckpointData make_checkpoint(AMBModel<Real>& model, const LossWeights& weights, int epoch,
                               std::uint64_t seed, std::vector<std::string> vocab = {}) {
  CheckpointData data;
  data.header.model = model.config();
  data.header.weights = weights;
  data.header.epoch = epoch;
  data.header.seed = seed;
  data.header.vocab = std::move(vocab);
  for (auto& [name, p] : model.params()) {
    data.header.params.emplace_back(name, p->shape());
    std::vector<float> blob(static_cast<std::size_t>(p->size()));
    for (std::int64_t i = 0; i < p->size(); ++i) blob[i] = static_cast<float>(p->data()[i]);
    data.blobs.push_back(std::move(blob));
  }
  return data;
}

// Rebuild a model from a checkpoint. The header's dimensions construct the
// model; every stored parameter must match the constructed shape exactly.
template <typename Real>
AMBModel<Real> restore_model(const CheckpointData& data) {
  AMBModel<Real> model(data.header.model, data.header.seed);
  auto params = model.params();
  if (params.size() != data.header.params.size())
    throw DataError("checkpoint: expected " + std::to_string(params.size()) +
                    " parameters, file has " + std::to_string(data.header.params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    const auto& [stored_name, stored_shape] = data.header.params[i];
    if (name != stored_name || p->shape() != stored_shape)
      throw DataError("checkpoint: parameter " + std::to_string(i) + " is \"" + stored_name +
                      "\" " + shape_str(stored_shape) + ", model expects \"" + name + "\" " +
                      shape_str(p->shape()));
    const auto& blob = data.blobs[i];
    for (std::int64_t j = 0; j < p->size(); ++j) p->data()[j] = static_cast<Real>(blob[j]);
  }
  return model;
}

template <typename Real>
void save_checkpoint(const std::string& path, AMBModel<Real>& model, const LossWeights& weights,
                     int epoch, std::uint64_t seed, std::vector<std::string> vocab = {}) {
  save_checkpoint_file(path, make_checkpoint(model, weights, epoch, seed, std::move(vocab)));
}

template <typename Real>
AMBModel<Real> load_checkpoint(const std::string& path) {
  return restore_model<Real>(load_checkpoint_file(path));
}

}  // namespace amb
