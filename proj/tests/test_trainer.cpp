#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <random>
#include <sstream>

#include "amb/checkpoint.hpp"
#include "amb/export.hpp"
#include "amb/optimizer.hpp"
#include "amb/synth.hpp"
#include "amb/trainer.hpp"
#include "testutil.hpp"

using namespace amb;

namespace {

// A corpus small enough for seconds-scale training but with real signal.
SynthSpec tiny_spec() {
  SynthSpec spec;
  spec.num_classes = 3;
  spec.signal_tokens_per_class = 4;
  spec.noise_vocab = 30;
  spec.min_sentences = 2;
  spec.max_sentences = 3;
  spec.min_tokens = 3;
  spec.max_tokens = 6;
  spec.signal_rate = 0.5;
  spec.train_docs = 60;
  spec.valid_docs = 21;
  spec.test_docs = 21;
  spec.seed = 11;
  return spec;
}

struct TinyTask {
  Vocabulary vocab;
  std::vector<Document> train, valid, test;
  ModelConfig config;
};

TinyTask tiny_task() {
  const auto spec = tiny_spec();
  const auto splits = generate(spec);
  TinyTask task;
  task.vocab = Vocabulary::build(splits.train, 1);
  task.train = map_to_ids(splits.train, task.vocab);
  task.valid = map_to_ids(splits.valid, task.vocab);
  task.test = map_to_ids(splits.test, task.vocab);
  task.config.num_classes = spec.num_classes;
  task.config.vocab_size = static_cast<std::int64_t>(task.vocab.size());
  task.config.d_emb = 8;
  task.config.d_h = 4;
  task.config.d_a = 4;
  return task;
}

TrainerOptions tiny_options() {
  TrainerOptions to;
  to.epochs = 3;
  to.batch_size = 16;
  to.max_sentences = 4;
  to.max_tokens = 8;
  to.patience = 0;
  to.seed = 5;
  return to;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

ParamRefs<double> single_param(Tensor<double>& t, const std::string& name = "p") {
  return {{name, &t}};
}

// Runs loss = sum(w * p) through a tape so the gradient of p is exactly w.
GradientMap<double> grads_for(Tensor<double>& p, const std::vector<double>& w) {
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  tape.watch(p);
  Tensor<double> wt({p.size()}, std::vector<double>(w));
  auto loss = reduce_sum(mul(reshape(p, {p.size()}), wt));
  return tape.backward(loss);
}

}  // namespace

TEST_CASE("rmsprop single step matches hand evaluation") {
  Tensor<double> p({1}, {1.0});
  p.set_requires_grad(true);
  RmsProp<double> opt;
  auto params = single_param(p);
  auto grads = grads_for(p, {1.0});
  opt.step(params, grads);

  const double s = 0.1 * 1.0;  // rho 0.9, fresh state, g = 1
  const double expected = 1.0 - 0.001 * 1.0 / (std::sqrt(s) + 1e-8);
  CHECK(p.data()[0] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(opt.accumulator(0)[0] == doctest::Approx(s).epsilon(1e-12));
}

TEST_CASE("rmsprop zero gradient leaves the parameter untouched") {
  Tensor<double> p({3}, {1.0, -2.0, 0.5});
  p.set_requires_grad(true);
  RmsProp<double> opt;
  auto params = single_param(p);
  auto grads = grads_for(p, {0.0, 0.0, 0.0});
  opt.step(params, grads);
  CHECK(p.data()[0] == 1.0);
  CHECK(p.data()[1] == -2.0);
  CHECK(p.data()[2] == 0.5);
}

TEST_CASE("rmsprop repeated identical gradients shrink the step") {
  Tensor<double> p({1}, {1.0});
  p.set_requires_grad(true);
  RmsProp<double> opt;
  auto params = single_param(p);

  double before = p.data()[0];
  auto g1 = grads_for(p, {1.0});
  opt.step(params, g1);
  const double step1 = before - p.data()[0];

  before = p.data()[0];
  auto g2 = grads_for(p, {1.0});
  opt.step(params, g2);
  const double step2 = before - p.data()[0];

  CHECK(step1 > 0.0);
  CHECK(step2 > 0.0);
  CHECK(step2 < step1);  // s grows, normalized step shrinks
}

TEST_CASE("rmsprop clips the global gradient norm") {
  // Two parameters with combined norm 10 against clip 5: every gradient is
  // effectively halved, and the update must match a hand computation.
  Tensor<double> a({1}, {0.0});
  Tensor<double> b({1}, {0.0});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  ParamRefs<double> params = {{"a", &a}, {"b", &b}};

  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  tape.watch(a);
  tape.watch(b);
  auto loss = add(mul(reduce_sum(a), 6.0), mul(reduce_sum(b), 8.0));
  auto grads = tape.backward(loss);

  RmsProp<double>::Options ro;
  ro.clip_norm = 5.0;
  RmsProp<double> opt(ro);
  opt.step(params, grads);

  const double ga = 6.0 * 0.5, gb = 8.0 * 0.5;  // norm 10 scaled to 5
  const double sa = 0.1 * ga * ga, sb = 0.1 * gb * gb;
  CHECK(a.data()[0] == doctest::Approx(-0.001 * ga / (std::sqrt(sa) + 1e-8)).epsilon(1e-12));
  CHECK(b.data()[0] == doctest::Approx(-0.001 * gb / (std::sqrt(sb) + 1e-8)).epsilon(1e-12));
}

TEST_CASE("rmsprop aborts on a non-finite gradient, naming the parameter") {
  Tensor<double> p({2}, {1.0, 1.0});
  p.set_requires_grad(true);
  RmsProp<double> opt;
  ParamRefs<double> params = {{"branch0.word_fwd.wx", &p}};

  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  tape.watch(p);
  // log(p - 1) at p = 1 hits the clamp rather than producing inf, so build
  // the NaN directly: 0 * inf through a crafted gradient is awkward — use
  // division by zero via exp overflow instead.
  auto loss = reduce_sum(exp(mul(p, 1000.0)));  // exp(1000) overflows to inf
  auto grads = tape.backward(loss);

  const double before = p.data()[0];
  try {
    opt.step(params, grads);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("branch0.word_fwd.wx") != std::string::npos);
  }
  CHECK(p.data()[0] == before);  // aborted before moving anything
}

TEST_CASE("rmsprop rejects a changed parameter set") {
  Tensor<double> p({1}, {1.0});
  Tensor<double> q({1}, {1.0});
  p.set_requires_grad(true);
  q.set_requires_grad(true);
  RmsProp<double> opt;
  auto params = single_param(p);
  auto grads = grads_for(p, {1.0});
  opt.step(params, grads);

  ParamRefs<double> two = {{"p", &p}, {"q", &q}};
  CHECK_THROWS_AS(opt.step(two, grads), ContractError);
}

TEST_CASE("rmsprop option validation") {
  RmsProp<double>::Options ro;
  ro.learning_rate = 0.0;
  CHECK_THROWS_AS(RmsProp<double>{ro}, ConfigError);
  ro = {};
  ro.rho = 1.0;
  CHECK_THROWS_AS(RmsProp<double>{ro}, ConfigError);
}

TEST_CASE("checkpoint file round trip restores every parameter exactly") {
  auto task = tiny_task();
  AMBModel<float> model(task.config, 7);
  LossWeights w;
  const std::string path = temp_path("amb_test_ckpt.bin");
  save_checkpoint(path, model, w, 12, 7);

  auto restored = load_checkpoint<float>(path);
  auto orig = model.params();
  auto back = restored.params();
  REQUIRE(orig.size() == back.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    CHECK(orig[i].first == back[i].first);
    REQUIRE(orig[i].second->shape() == back[i].second->shape());
    const auto a = orig[i].second->data();
    const auto b = back[i].second->data();
    for (std::int64_t j = 0; j < orig[i].second->size(); ++j) {
      if (a[j] != b[j]) {
        CAPTURE(orig[i].first);
        REQUIRE(a[j] == b[j]);
      }
    }
  }

  // Evaluation through the restored model is bit-identical.
  auto to = tiny_options();
  auto ev1 = evaluate(model, task.test, to);
  auto ev2 = evaluate(restored, task.test, to);
  CHECK(ev1.accuracy == ev2.accuracy);
  CHECK(ev1.confusion == ev2.confusion);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint header survives the round trip and resaves identically") {
  auto task = tiny_task();
  AMBModel<float> model(task.config, 3);
  LossWeights w;
  w.alpha = 0.25;
  w.gamma = 0.05;

  auto data = make_checkpoint(model, w, 9, 3);
  const std::string p1 = temp_path("amb_test_ckpt_a.bin");
  const std::string p2 = temp_path("amb_test_ckpt_b.bin");
  save_checkpoint_file(p1, data);
  auto loaded = load_checkpoint_file(p1);
  CHECK(loaded.header.epoch == 9);
  CHECK(loaded.header.seed == 3);
  CHECK(loaded.header.weights.alpha == 0.25);
  CHECK(loaded.header.weights.gamma == 0.05);
  CHECK(loaded.header.model.num_classes == task.config.num_classes);
  CHECK(loaded.header.params.size() == data.header.params.size());

  save_checkpoint_file(p2, loaded);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("checkpoint load rejects truncation and junk") {
  auto task = tiny_task();
  AMBModel<float> model(task.config, 1);
  const std::string path = temp_path("amb_test_ckpt_trunc.bin");
  save_checkpoint(path, model, LossWeights{}, 1, 1);

  // Cut the file shortly after the header so the first parameter comes up
  // short.
  std::ifstream in(path, std::ios::binary);
  std::string line;
  std::getline(in, line);
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << line << '\n' << "xx";
  out.close();
  try {
    load_checkpoint_file(path);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("embedding") != std::string::npos);
  }

  std::ofstream junk(path, std::ios::binary | std::ios::trunc);
  junk << "not json\n";
  junk.close();
  CHECK_THROWS_AS(load_checkpoint_file(path), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("training runs, records every epoch, and improves on random init") {
  auto task = tiny_task();
  AMBModel<float> model(task.config, 7);
  auto to = tiny_options();
  to.epochs = 6;

  const double before = evaluate(model, task.test, to).accuracy;
  to.epochs = 40;
  auto result = train(model, task.train, task.valid, to);
  REQUIRE(result.report.epochs.size() == 40);
  for (std::size_t i = 0; i < result.report.epochs.size(); ++i) {
    const auto& e = result.report.epochs[i];
    CHECK(e.epoch == static_cast<int>(i) + 1);
    CHECK(std::isfinite(e.total));
    CHECK(e.total > 0.0);
    CHECK(e.val_accuracy >= 0.0);
    CHECK(e.val_accuracy <= 1.0);
    CHECK(e.seconds >= 0.0);
  }
  CHECK(result.report.best_epoch >= 1);
  CHECK(result.report.best_epoch <= 40);
  const double after = evaluate(model, task.test, to).accuracy;
  // Planted signal at rate 0.5 is easy: forty epochs reach high accuracy.
  CHECK(after > before);
  CHECK(after >= 0.8);
}

TEST_CASE("same seed reproduces the loss sequence bit for bit") {
  auto task = tiny_task();
  auto to = tiny_options();

  AMBModel<float> m1(task.config, 7);
  AMBModel<float> m2(task.config, 7);
  auto r1 = train(m1, task.train, task.valid, to);
  auto r2 = train(m2, task.train, task.valid, to);
  REQUIRE(r1.report.epochs.size() == r2.report.epochs.size());
  for (std::size_t i = 0; i < r1.report.epochs.size(); ++i) {
    CHECK(r1.report.epochs[i].total == r2.report.epochs[i].total);
    CHECK(r1.report.epochs[i].bin_sum == r2.report.epochs[i].bin_sum);
    CHECK(r1.report.epochs[i].mul == r2.report.epochs[i].mul);
    CHECK(r1.report.epochs[i].adv == r2.report.epochs[i].adv);
    CHECK(r1.report.epochs[i].diff == r2.report.epochs[i].diff);
    CHECK(r1.report.epochs[i].val_accuracy == r2.report.epochs[i].val_accuracy);
  }

  // A different seed takes a different path.
  AMBModel<float> m3(task.config, 8);
  auto to3 = to;
  to3.seed = 9;
  auto r3 = train(m3, task.train, task.valid, to3);
  CHECK(r3.report.epochs[0].total != r1.report.epochs[0].total);
}

TEST_CASE("early stopping halts after patience epochs without improvement") {
  auto task = tiny_task();
  auto to = tiny_options();
  to.epochs = 12;
  to.patience = 1;
  to.learning_rate = 1e-12;  // updates too small to move validation accuracy

  AMBModel<float> model(task.config, 7);
  auto result = train(model, task.train, task.valid, to);
  // Epoch 1 sets the best; epoch 2 cannot strictly improve, so one stale
  // epoch exhausts the patience.
  CHECK(result.report.best_epoch == 1);
  CHECK(result.report.epochs.size() == 2);
}

TEST_CASE("best-epoch parameters are restored when training ends") {
  auto task = tiny_task();
  auto to = tiny_options();
  to.epochs = 4;
  AMBModel<float> model(task.config, 7);
  auto result = train(model, task.train, task.valid, to);

  // The in-place model must equal the recorded best snapshot.
  auto params = model.params();
  REQUIRE(params.size() == result.best_params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto live = params[i].second->data();
    const auto& snap = result.best_params[i];
    REQUIRE(static_cast<std::size_t>(params[i].second->size()) == snap.size());
    bool same = true;
    for (std::size_t j = 0; j < snap.size(); ++j) same = same && live[j] == snap[j];
    CHECK(same);
  }

  // And evaluation must reproduce the recorded best validation accuracy.
  CHECK(evaluate(model, task.valid, to).accuracy == result.report.best_val_accuracy);
}

TEST_CASE("restore_best=false keeps the final epoch's parameters") {
  auto task = tiny_task();
  auto to = tiny_options();
  to.epochs = 4;
  to.restore_best = false;

  AMBModel<float> kept(task.config, 7);
  auto result = train(kept, task.train, task.valid, to);
  REQUIRE(result.report.epochs.size() == 4);

  // The best snapshot is still tracked and returned.
  REQUIRE(result.best_params.size() == kept.params().size());

  // The live model holds the final epoch's weights: re-evaluating reproduces
  // the last epoch's recorded validation accuracy bit for bit, and matches
  // the best snapshot only when the best epoch was the final one.
  CHECK(evaluate(kept, task.valid, to).accuracy == result.report.epochs.back().val_accuracy);

  auto params = kept.params();
  bool equals_best = true;
  for (std::size_t i = 0; i < params.size() && equals_best; ++i) {
    const auto live = params[i].second->data();
    const auto& snap = result.best_params[i];
    for (std::size_t j = 0; j < snap.size(); ++j)
      if (live[j] != snap[j]) {
        equals_best = false;
        break;
      }
  }
  CHECK(equals_best == (result.report.best_epoch == 4));

  // Same run with the default policy lands on the best snapshot instead.
  auto to_restore = to;
  to_restore.restore_best = true;
  AMBModel<float> restored(task.config, 7);
  auto r2 = train(restored, task.train, task.valid, to_restore);
  REQUIRE(r2.report.epochs.size() == result.report.epochs.size());
  for (std::size_t i = 0; i < r2.report.epochs.size(); ++i)
    CHECK(r2.report.epochs[i].total == result.report.epochs[i].total);
  CHECK(evaluate(restored, task.valid, to).accuracy == r2.report.best_val_accuracy);
}

TEST_CASE("multiclass-only training loss is non-increasing early on") {
  auto task = tiny_task();
  auto to = tiny_options();
  to.epochs = 5;
  to.learning_rate = 5e-4;
  to.weights.alpha = 0.0;
  to.weights.beta = 1.0;
  to.weights.gamma = 0.0;
  to.weights.delta = 0.0;

  AMBModel<float> model(task.config, 7);
  auto result = train(model, task.train, task.valid, to);
  REQUIRE(result.report.epochs.size() == 5);
  for (std::size_t i = 1; i < result.report.epochs.size(); ++i) {
    CHECK(result.report.epochs[i].total <= result.report.epochs[i - 1].total);
  }
}

TEST_CASE("empty splits are rejected") {
  auto task = tiny_task();
  AMBModel<float> model(task.config, 7);
  auto to = tiny_options();
  std::vector<Document> none;
  CHECK_THROWS_AS(train(model, none, task.valid, to), ConfigError);
  CHECK_THROWS_AS(train(model, task.train, none, to), ConfigError);
  CHECK_THROWS_AS(evaluate(model, none, to), ConfigError);
}

TEST_CASE("evaluation confusion matrix is consistent with accuracy") {
  auto task = tiny_task();
  AMBModel<float> model(task.config, 7);
  auto to = tiny_options();
  auto ev = evaluate(model, task.test, to);

  std::int64_t total = 0, diag = 0;
  for (std::size_t i = 0; i < ev.confusion.size(); ++i)
    for (std::size_t j = 0; j < ev.confusion[i].size(); ++j) {
      total += ev.confusion[i][j];
      if (i == j) diag += ev.confusion[i][j];
    }
  CHECK(total == static_cast<std::int64_t>(task.test.size()));
  CHECK(ev.accuracy == doctest::Approx(static_cast<double>(diag) / total).epsilon(1e-12));
}

TEST_CASE("attention export has one row per branch and weights over real sentences") {
  auto task = tiny_task();
  AMBModel<float> model(task.config, 7);
  auto to = tiny_options();

  RawDocument doc;
  doc.label = 1;
  doc.sentences = {{"sig1x0", "sig1x1", "w3"}, {"w0", "w1", "w2"}, {"sig1x2", "w4"}};
  const auto rec = export_attention(model, doc, task.vocab, to);

  REQUIRE(rec.sentences.size() == 3);
  CHECK(rec.sentences[0] == "sig1x0 sig1x1 w3");
  REQUIRE(rec.class_rows.size() == 3);
  REQUIRE(rec.adv_rows.size() == 3);
  for (int k = 0; k < 3; ++k) {
    REQUIRE(rec.class_rows[k].size() == 3);
    REQUIRE(rec.adv_rows[k].size() == 3);
    double sum_c = 0.0, sum_a = 0.0;
    for (int s = 0; s < 3; ++s) {
      CHECK(rec.class_rows[k][s] >= 0.0);
      CHECK(rec.adv_rows[k][s] >= 0.0);
      sum_c += rec.class_rows[k][s];
      sum_a += rec.adv_rows[k][s];
    }
    CHECK(sum_c == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(sum_a == doctest::Approx(1.0).epsilon(1e-4));
  }
  CHECK(rec.predicted >= 0);
  CHECK(rec.predicted < 3);
}

TEST_CASE("report renderings carry the numbers") {
  TrainReport report;
  EpochRecord e;
  e.epoch = 1;
  e.bin_sum = 1.5;
  e.mul = 0.75;
  e.adv = 1.0986;
  e.diff = 0.01;
  e.total = 2.5;
  e.val_accuracy = 0.875;
  e.disc_accuracy = 0.25;
  e.seconds = 0.5;
  report.epochs.push_back(e);
  e.epoch = 2;
  e.total = 2.25;
  report.epochs.push_back(e);
  report.best_epoch = 2;
  report.best_val_accuracy = 0.875;

  const auto csv = report_csv(report);
  CHECK(csv.find("epoch,binary,multiclass,adversarial,difference,total") == 0);
  CHECK(csv.find("\n1,1.5,0.75,") != std::string::npos);
  CHECK(csv.find("\n2,") != std::string::npos);
  // header + 2 rows, trailing newline
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  const auto parsed = nlohmann::json::parse(report_json(report));
  CHECK(parsed["best_epoch"] == 2);
  CHECK(parsed["epochs"].size() == 2);
  CHECK(parsed["epochs"][0]["multiclass"] == 0.75);
  CHECK(parsed["epochs"][1]["total"] == 2.25);
}

TEST_CASE("attention renderings: json fields and aligned heatmap shades") {
  AttentionRecord rec;
  rec.sentences = {"a b", "c d", "e"};
  rec.class_rows = {{0.0, 0.2, 0.8}, {1.0, 0.0, 0.0}};
  rec.adv_rows = {{0.34, 0.33, 0.33}, {0.5, 0.25, 0.25}};
  rec.predicted = 1;

  const auto parsed = nlohmann::json::parse(attention_json(rec));
  CHECK(parsed["sentences"].size() == 3);
  CHECK(parsed["class_weights"][0][2] == 0.8);
  CHECK(parsed["adversarial_weights"][1][0] == 0.5);
  CHECK(parsed["predicted"] == 1);

  const auto map = attention_heatmap(rec);
  CHECK(map.find("class 0") != std::string::npos);
  CHECK(map.find("class 1") != std::string::npos);
  CHECK(map.find("adv 0") != std::string::npos);
  CHECK(map.find("adv 1") != std::string::npos);
  CHECK(map.find("predicted: 1") != std::string::npos);
  CHECK(map.find("█") != std::string::npos);  // the 1.0 cell is solid
  CHECK(map.find("░") != std::string::npos);  // the 0.2 cell is light

  // Every row between the first and last must render at the same width.
  std::vector<std::string> lines;
  std::istringstream in(map);
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  std::size_t width = 0;
  for (const auto& line : lines)
    if (line.find('|') != std::string::npos) {
      std::size_t cells = static_cast<std::size_t>(std::count(line.begin(), line.end(), '|'));
      if (width == 0) width = cells;
      CHECK(cells == width);
    }
}

TEST_CASE("evaluation and separation renderings are valid json") {
  Evaluation ev;
  ev.accuracy = 0.75;
  ev.confusion = {{3, 1}, {0, 4}};
  auto parsed = nlohmann::json::parse(evaluation_json(ev));
  CHECK(parsed["accuracy"] == 0.75);
  CHECK(parsed["confusion"][0][1] == 1);

  SeparationReport rep;
  rep.shared_cosine = 0.9;
  rep.specific_cosine = 0.2;
  rep.discriminator_accuracy = 0.3;
  parsed = nlohmann::json::parse(separation_json(rep));
  CHECK(parsed["shared_cosine"] == 0.9);
  CHECK(parsed["specific_cosine"] == 0.2);
  CHECK(parsed["discriminator_accuracy"] == 0.3);
}
