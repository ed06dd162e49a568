// Command-line frontend: train / eval / predict / attention / synth.
// Exit codes: 0 success, 2 configuration or data problem, 3 numeric abort.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "amb/checkpoint.hpp"
#include "amb/config.hpp"
#include "amb/corpus.hpp"
#include "amb/export.hpp"
#include "amb/synth.hpp"
#include "amb/trainer.hpp"

namespace {

using namespace amb;

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("failed writing " + path);
}

// Loaded checkpoint plus the pieces every inference command needs.
struct LoadedModel {
  AMBModel<float> model;
  Vocabulary vocab;
  LossWeights weights;
};

LoadedModel load_for_inference(const std::string& path) {
  auto data = load_checkpoint_file(path);
  if (data.header.vocab.empty())
    throw DataError("checkpoint " + path + " carries no vocabulary; retrain to evaluate");
  return {restore_model<float>(data), Vocabulary::from_tokens(data.header.vocab),
          data.header.weights};
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_dir) {
  const RunConfig cfg = load_run_config(config_path, overrides);
  if (cfg.train_path.empty() || cfg.valid_path.empty())
    throw ConfigError("config: data.train and data.valid are required");

  std::filesystem::create_directories(out_dir);
  const auto out = [&](const std::string& name) {
    return (std::filesystem::path(out_dir) / name).string();
  };

  const auto train_raw = load_jsonl(cfg.train_path, cfg.model.num_classes);
  const auto valid_raw = load_jsonl(cfg.valid_path, cfg.model.num_classes);
  const auto vocab = Vocabulary::build(train_raw, cfg.min_count);

  ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.size();
  AMBModel<float> model(mc, cfg.trainer.seed);
  std::printf("mode %s | %zu train docs, %zu valid docs, vocabulary %d\n", cfg.mode.c_str(),
              train_raw.size(), valid_raw.size(), vocab.size());

  auto result = train(model, map_to_ids(train_raw, vocab), map_to_ids(valid_raw, vocab),
                      cfg.trainer, [&](const EpochRecord& e) {
                        std::printf(
                            "epoch %3d | total %.4f (bin %.4f mul %.4f adv %.4f diff %.4f) "
                            "| val %.4f | disc %.4f | %.1fs\n",
                            e.epoch, e.total, e.bin_sum, e.mul, e.adv, e.diff, e.val_accuracy,
                            e.disc_accuracy, e.seconds);
                        std::fflush(stdout);
                      });

  save_checkpoint(out("checkpoint.bin"), model, cfg.trainer.weights,
                  result.report.best_epoch, cfg.trainer.seed, vocab.retained_tokens());
  write_file(out("report.csv"), report_csv(result.report));
  write_file(out("report.json"), report_json(result.report));
  write_file(out("config.json"), run_config_json(cfg));
  std::printf("best epoch %d, validation accuracy %.4f\n", result.report.best_epoch,
              result.report.best_val_accuracy);

  if (!cfg.test_path.empty()) {
    const auto test_raw = load_jsonl(cfg.test_path, cfg.model.num_classes);
    const auto ev = evaluate(model, map_to_ids(test_raw, vocab), cfg.trainer);
    write_file(out("eval.json"), evaluation_json(ev));
    std::printf("test accuracy %.4f\n", ev.accuracy);
  }
  std::printf("artifacts in %s\n", out_dir.c_str());
  return 0;
}

TrainerOptions inference_options(int batch_size, int max_sentences, int max_tokens,
                                 const LossWeights& weights) {
  TrainerOptions to;
  to.batch_size = batch_size;
  to.max_sentences = max_sentences;
  to.max_tokens = max_tokens;
  to.weights = weights;
  return to;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path, bool as_json,
             const TrainerOptions& base) {
  auto lm = load_for_inference(ckpt);
  const auto to = inference_options(base.batch_size, base.max_sentences, base.max_tokens,
                                    lm.weights);
  const auto docs = load_jsonl(data_path, lm.model.config().num_classes);
  const auto ev = evaluate(lm.model, map_to_ids(docs, lm.vocab), to);
  if (as_json) {
    std::fputs(evaluation_json(ev).c_str(), stdout);
    return 0;
  }
  std::printf("accuracy %.4f over %zu documents\n", ev.accuracy, docs.size());
  std::printf("confusion (rows: true, cols: predicted)\n");
  for (const auto& row : ev.confusion) {
    for (auto v : row) std::printf("%6lld", static_cast<long long>(v));
    std::printf("\n");
  }
  return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& text, const std::string& jsonl,
                bool as_json, const TrainerOptions& base) {
  auto lm = load_for_inference(ckpt);
  const auto to = inference_options(base.batch_size, base.max_sentences, base.max_tokens,
                                    lm.weights);

  std::vector<RawDocument> raw;
  if (!text.empty()) {
    RawDocument doc;
    doc.label = 0;  // unused for prediction
    doc.sentences = tokenize(text);
    if (doc.sentences.empty()) throw DataError("predict: no usable tokens in --text");
    raw.push_back(std::move(doc));
  } else {
    raw = load_jsonl(jsonl, lm.model.config().num_classes);
  }
  const auto docs = map_to_ids(raw, lm.vocab);

  nlohmann::json rows = nlohmann::json::array();
  for (const Batch& b :
       batch(docs, to.batch_size, to.max_sentences, to.max_tokens, std::nullopt)) {
    auto view = BatchView<float>::from(b);
    auto fwd = lm.model.forward(view, to.weights);
    const auto pred = predict(fwd.probs);
    const int K = lm.model.config().num_classes;
    for (std::int64_t i = 0; i < b.size; ++i) {
      if (as_json) {
        std::vector<double> probs(static_cast<std::size_t>(K));
        for (int k = 0; k < K; ++k)
          probs[static_cast<std::size_t>(k)] =
              static_cast<double>(fwd.probs.data()[i * K + k]);
        rows.push_back({{"predicted", pred[static_cast<std::size_t>(i)]}, {"probs", probs}});
      } else {
        std::printf("predicted %d | probs", pred[static_cast<std::size_t>(i)]);
        for (int k = 0; k < K; ++k)
          std::printf(" %.4f", static_cast<double>(fwd.probs.data()[i * K + k]));
        std::printf("\n");
      }
    }
  }
  if (as_json) std::fputs((rows.dump(2) + "\n").c_str(), stdout);
  return 0;
}

int cmd_attention(const std::string& ckpt, const std::string& jsonl, const std::string& out_dir,
                  const TrainerOptions& base) {
  auto lm = load_for_inference(ckpt);
  const auto to = inference_options(1, base.max_sentences, base.max_tokens, lm.weights);
  const auto raw = load_jsonl(jsonl, lm.model.config().num_classes);
  std::filesystem::create_directories(out_dir);

  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto rec = export_attention(lm.model, raw[i], lm.vocab, to);
    const auto stem =
        (std::filesystem::path(out_dir) / ("attention_" + std::to_string(i))).string();
    write_file(stem + ".json", attention_json(rec));
    write_file(stem + ".txt", attention_heatmap(rec));
  }
  std::printf("wrote %zu attention records to %s\n", raw.size(), out_dir.c_str());
  return 0;
}

int cmd_synth(const std::string& spec_path, const std::vector<std::string>& overrides,
              const std::string& out_dir) {
  const SynthSpec spec = load_synth_spec(spec_path, overrides);

  std::filesystem::create_directories(out_dir);
  const auto out = [&](const std::string& name) {
    return (std::filesystem::path(out_dir) / name).string();
  };
  const auto splits = generate(spec);
  write_jsonl(out("train.jsonl"), splits.train);
  write_jsonl(out("valid.jsonl"), splits.valid);
  write_jsonl(out("test.jsonl"), splits.test);

  const double base_train = counting_baseline_accuracy(spec, splits.train);
  const double base_test = counting_baseline_accuracy(spec, splits.test);
  nlohmann::json j;
  j["train_docs"] = splits.train.size();
  j["valid_docs"] = splits.valid.size();
  j["test_docs"] = splits.test.size();
  j["counting_baseline_train"] = base_train;
  j["counting_baseline_test"] = base_test;
  write_file(out("synth.json"), j.dump(2) + "\n");
  std::printf("generated %zu/%zu/%zu documents in %s\n", splits.train.size(),
              splits.valid.size(), splits.test.size(), out_dir.c_str());
  std::printf("counting baseline: train %.4f, test %.4f\n", base_train, base_test);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarial multi-binary hierarchical text classifier"};
  app.require_subcommand(1);

  std::string config_path, out_dir = ".", ckpt, data_path, text, jsonl, spec_path;
  std::vector<std::string> overrides;
  bool as_json = false;
  TrainerOptions base;  // inference batch/truncation defaults

  auto* t = app.add_subcommand("train", "train a model from a JSON config");
  t->add_option("--config", config_path, "JSON run configuration")->required();
  t->add_option("--override", overrides, "key.path=value settings applied over the config");
  t->add_option("--out", out_dir, "output directory (default .)");

  auto* e = app.add_subcommand("eval", "accuracy and confusion matrix on a dataset");
  e->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
  e->add_option("--data", data_path, "JSONL dataset")->required();
  e->add_flag("--json", as_json, "emit JSON instead of text");
  e->add_option("--batch-size", base.batch_size);
  e->add_option("--max-sentences", base.max_sentences);
  e->add_option("--max-tokens", base.max_tokens);

  auto* p = app.add_subcommand("predict", "predicted label and class probabilities");
  p->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
  p->add_option("--text", text, "classify one document given as text");
  p->add_option("--jsonl", jsonl, "classify every document in a JSONL file");
  p->add_flag("--json", as_json, "emit JSON instead of text");
  p->add_option("--batch-size", base.batch_size);
  p->add_option("--max-sentences", base.max_sentences);
  p->add_option("--max-tokens", base.max_tokens);

  auto* a = app.add_subcommand("attention", "per-document attention heatmaps");
  a->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
  a->add_option("--jsonl", jsonl, "JSONL documents to explain")->required();
  a->add_option("--out", out_dir, "output directory")->required();
  a->add_option("--max-sentences", base.max_sentences);
  a->add_option("--max-tokens", base.max_tokens);

  auto* s = app.add_subcommand("synth", "generate a planted-signal corpus");
  s->add_option("--spec", spec_path, "JSON generator spec (defaults when omitted)");
  s->add_option("--override", overrides, "key.path=value settings applied over the spec");
  s->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (t->parsed()) return cmd_train(config_path, overrides, out_dir);
    if (e->parsed()) return cmd_eval(ckpt, data_path, as_json, base);
    if (p->parsed()) {
      if (text.empty() == jsonl.empty())
        throw ConfigError("predict: give exactly one of --text or --jsonl");
      return cmd_predict(ckpt, text, jsonl, as_json, base);
    }
    if (a->parsed()) return cmd_attention(ckpt, jsonl, out_dir, base);
    if (s->parsed()) return cmd_synth(spec_path, overrides, out_dir);
  } catch (const NumericError& err) {
    std::fprintf(stderr, "numeric abort: %s\n", err.what());
    return 3;
  } catch (const Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "internal error: %s\n", err.what());
    return 1;
  }
  return 0;
}
