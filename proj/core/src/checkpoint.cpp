#include "amb/checkpoint.hpp"

#include <fstream>

#include <json.hpp>

namespace amb {

namespace {

constexpr const char* kFormat = "amb-checkpoint";
constexpr int kVersion = 1;

}  // namespace

void save_checkpoint_file(const std::string& path, const CheckpointData& data) {
  nlohmann::json header;
  header["format"] = kFormat;
  header["version"] = kVersion;
  header["num_classes"] = data.header.model.num_classes;
  header["vocab_size"] = data.header.model.vocab_size;
  header["d_emb"] = data.header.model.d_emb;
  header["d_h"] = data.header.model.d_h;
  header["d_a"] = data.header.model.d_a;
  header["weights"] = {{"alpha", data.header.weights.alpha},
                       {"beta", data.header.weights.beta},
                       {"gamma", data.header.weights.gamma},
                       {"delta", data.header.weights.delta},
                       {"lambda_adv", data.header.weights.lambda_adv}};
  header["epoch"] = data.header.epoch;
  header["seed"] = data.header.seed;
  header["vocab"] = data.header.vocab;
  header["params"] = nlohmann::json::array();
  for (const auto& [name, shape] : data.header.params)
    header["params"].push_back({{"name", name}, {"shape", shape}});

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write " + path);
  out << header.dump() << '\n';
  for (const auto& blob : data.blobs)
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!out) throw DataError("checkpoint: short write to " + path);
}

CheckpointData load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("checkpoint: " + path + " is empty");

  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.is_object() || header.value("format", "") != kFormat)
    throw DataError("checkpoint: " + path + " has no valid header line");
  if (header.value("version", 0) != kVersion)
    throw DataError("checkpoint: " + path + " is version " +
                    std::to_string(header.value("version", 0)) + ", expected " +
                    std::to_string(kVersion));

  CheckpointData data;
  try {
    data.header.model.num_classes = header.at("num_classes").get<int>();
    data.header.model.vocab_size = header.at("vocab_size").get<std::int64_t>();
    data.header.model.d_emb = header.at("d_emb").get<std::int64_t>();
    data.header.model.d_h = header.at("d_h").get<std::int64_t>();
    data.header.model.d_a = header.at("d_a").get<std::int64_t>();
    const auto& w = header.at("weights");
    data.header.weights.alpha = w.at("alpha").get<double>();
    data.header.weights.beta = w.at("beta").get<double>();
    data.header.weights.gamma = w.at("gamma").get<double>();
    data.header.weights.delta = w.at("delta").get<double>();
    data.header.weights.lambda_adv = w.at("lambda_adv").get<double>();
    data.header.epoch = header.at("epoch").get<int>();
    data.header.seed = header.at("seed").get<std::uint64_t>();
    data.header.vocab = header.value("vocab", std::vector<std::string>{});
    for (const auto& entry : header.at("params"))
      data.header.params.emplace_back(entry.at("name").get<std::string>(),
                                      entry.at("shape").get<Shape>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: " + path + " header is malformed: " + e.what());
  }

  for (const auto& [name, shape] : data.header.params) {
    std::vector<float> blob(static_cast<std::size_t>(shape_size(shape)));
    in.read(reinterpret_cast<char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(blob.size() * sizeof(float)))
      throw DataError("checkpoint: " + path + " truncated in parameter \"" + name + "\"");
    data.blobs.push_back(std::move(blob));
  }
  return data;
}

}  // namespace amb
