#include "amb/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace amb {

namespace {

using nlohmann::json;

// Rejects keys the schema does not know; a typo must not silently fall back
// to a default value.
void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: \"" + where + "\" must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key))
      throw ConfigError("config: unknown key \"" + where + (where.empty() ? "" : ".") + key +
                        "\"");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: \"" + where + (where.empty() ? "" : ".") + key +
                      "\" has the wrong type");
  }
}

json parse_text(const std::string& text, const std::string& what) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw ConfigError(what + ": not a JSON object");
  return j;
}

// key.path=value; the value parses as JSON when possible (numbers, bools,
// arrays), otherwise it is taken as a string.
void apply_override(json& j, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override \"" + spec + "\" is not key.path=value");
  const std::string path = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);

  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &j;
  std::istringstream keys(path);
  std::string key, next;
  std::getline(keys, key, '.');
  while (std::getline(keys, next, '.')) {
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    if (!node->is_object())
      throw ConfigError("override \"" + spec + "\": \"" + key + "\" is not an object");
    key = next;
  }
  (*node)[key] = value;
}

RunConfig from_json(const json& j) {
  check_keys(j, {"mode", "model", "weights", "trainer", "data"}, "");

  RunConfig c;
  read(j, "mode", c.mode, "");

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"num_classes", "d_emb", "d_h", "d_a"}, "model");
    read(m, "num_classes", c.model.num_classes, "model");
    read(m, "d_emb", c.model.d_emb, "model");
    read(m, "d_h", c.model.d_h, "model");
    read(m, "d_a", c.model.d_a, "model");
  }

  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    check_keys(w, {"alpha", "beta", "gamma", "delta", "lambda_adv"}, "weights");
    read(w, "alpha", c.trainer.weights.alpha, "weights");
    read(w, "beta", c.trainer.weights.beta, "weights");
    read(w, "gamma", c.trainer.weights.gamma, "weights");
    read(w, "delta", c.trainer.weights.delta, "weights");
    read(w, "lambda_adv", c.trainer.weights.lambda_adv, "weights");
  }

  if (j.contains("trainer")) {
    const auto& t = j.at("trainer");
    check_keys(t,
               {"epochs", "batch_size", "max_sentences", "max_tokens", "patience", "seed",
                "learning_rate", "rho", "epsilon", "clip_norm", "adv_to_encoder"},
               "trainer");
    read(t, "epochs", c.trainer.epochs, "trainer");
    read(t, "batch_size", c.trainer.batch_size, "trainer");
    read(t, "max_sentences", c.trainer.max_sentences, "trainer");
    read(t, "max_tokens", c.trainer.max_tokens, "trainer");
    read(t, "patience", c.trainer.patience, "trainer");
    read(t, "seed", c.trainer.seed, "trainer");
    read(t, "learning_rate", c.trainer.learning_rate, "trainer");
    read(t, "rho", c.trainer.rho, "trainer");
    read(t, "epsilon", c.trainer.epsilon, "trainer");
    read(t, "clip_norm", c.trainer.clip_norm, "trainer");
    read(t, "adv_to_encoder", c.trainer.adv_to_encoder, "trainer");
  }

  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, {"train", "valid", "test", "min_count"}, "data");
    read(d, "train", c.train_path, "data");
    read(d, "valid", c.valid_path, "data");
    read(d, "test", c.test_path, "data");
    read(d, "min_count", c.min_count, "data");
  }
  return c;
}

std::string read_file(const std::string& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(what + ": cannot read " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

void RunConfig::apply_mode() {
  if (mode == "amb") return;
  if (mode == "mb") {
    trainer.weights.gamma = 0.0;
    trainer.weights.delta = 0.0;
    return;
  }
  if (mode == "mul-only") {
    trainer.weights.alpha = 0.0;
    trainer.weights.gamma = 0.0;
    trainer.weights.delta = 0.0;
    return;
  }
  throw ConfigError("config: mode must be amb, mb, or mul-only (got \"" + mode + "\")");
}

void RunConfig::validate() const {
  if (mode != "amb" && mode != "mb" && mode != "mul-only")
    throw ConfigError("config: mode must be amb, mb, or mul-only (got \"" + mode + "\")");
  if (model.num_classes < 2) throw ConfigError("config: model.num_classes must be >= 2");
  if (model.d_emb < 1 || model.d_h < 1 || model.d_a < 1)
    throw ConfigError("config: model dimensions must be positive");
  if (min_count < 1) throw ConfigError("config: data.min_count must be >= 1");
  trainer.validate();
}

RunConfig parse_run_config(const std::string& json_text) {
  RunConfig c = from_json(parse_text(json_text, "config"));
  c.apply_mode();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = parse_text(read_file(path, "config"), "config");
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = from_json(j);
  c.apply_mode();
  c.validate();
  return c;
}

std::string run_config_json(const RunConfig& c) {
  json j;
  j["mode"] = c.mode;
  j["model"] = {{"num_classes", c.model.num_classes},
                {"d_emb", c.model.d_emb},
                {"d_h", c.model.d_h},
                {"d_a", c.model.d_a}};
  j["weights"] = {{"alpha", c.trainer.weights.alpha},
                  {"beta", c.trainer.weights.beta},
                  {"gamma", c.trainer.weights.gamma},
                  {"delta", c.trainer.weights.delta},
                  {"lambda_adv", c.trainer.weights.lambda_adv}};
  j["trainer"] = {{"epochs", c.trainer.epochs},
                  {"batch_size", c.trainer.batch_size},
                  {"max_sentences", c.trainer.max_sentences},
                  {"max_tokens", c.trainer.max_tokens},
                  {"patience", c.trainer.patience},
                  {"seed", c.trainer.seed},
                  {"learning_rate", c.trainer.learning_rate},
                  {"rho", c.trainer.rho},
                  {"epsilon", c.trainer.epsilon},
                  {"clip_norm", c.trainer.clip_norm},
                  {"adv_to_encoder", c.trainer.adv_to_encoder}};
  j["data"] = {{"train", c.train_path},
               {"valid", c.valid_path},
               {"test", c.test_path},
               {"min_count", c.min_count}};
  return j.dump(2) + "\n";
}

SynthSpec parse_synth_spec(const std::string& json_text) {
  const json j = parse_text(json_text, "synth spec");
  check_keys(j,
             {"num_classes", "signal_tokens_per_class", "noise_vocab", "min_sentences",
              "max_sentences", "min_tokens", "max_tokens", "signal_rate", "train_docs",
              "valid_docs", "test_docs", "seed", "signal_tokens", "noise_tokens"},
             "");
  SynthSpec s;
  read(j, "num_classes", s.num_classes, "");
  read(j, "signal_tokens_per_class", s.signal_tokens_per_class, "");
  read(j, "noise_vocab", s.noise_vocab, "");
  read(j, "min_sentences", s.min_sentences, "");
  read(j, "max_sentences", s.max_sentences, "");
  read(j, "min_tokens", s.min_tokens, "");
  read(j, "max_tokens", s.max_tokens, "");
  read(j, "signal_rate", s.signal_rate, "");
  read(j, "train_docs", s.train_docs, "");
  read(j, "valid_docs", s.valid_docs, "");
  read(j, "test_docs", s.test_docs, "");
  read(j, "seed", s.seed, "");
  read(j, "signal_tokens", s.signal_tokens, "");
  read(j, "noise_tokens", s.noise_tokens, "");
  s.validate();
  return s;
}

SynthSpec load_synth_spec(const std::string& path, const std::vector<std::string>& overrides) {
  json j = path.empty() ? json::object()
                        : parse_text(read_file(path, "synth spec"), "synth spec");
  for (const auto& o : overrides) apply_override(j, o);
  return parse_synth_spec(j.dump());
}

}  // namespace amb
