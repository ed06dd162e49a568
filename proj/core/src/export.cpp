#include "amb/export.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include <json.hpp>

namespace amb {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.8g", v);
  return buf;
}

nlohmann::json epoch_json(const EpochRecord& e) {
  return nlohmann::json{{"epoch", e.epoch},
                        {"binary", e.bin_sum},
                        {"multiclass", e.mul},
                        {"adversarial", e.adv},
                        {"difference", e.diff},
                        {"total", e.total},
                        {"val_accuracy", e.val_accuracy},
                        {"disc_accuracy", e.disc_accuracy},
                        {"seconds", e.seconds}};
}

}  // namespace

std::string report_csv(const TrainReport& report) {
  std::ostringstream out;
  out << "epoch,binary,multiclass,adversarial,difference,total,"
         "val_accuracy,disc_accuracy,seconds\n";
  for (const auto& e : report.epochs) {
    out << e.epoch << ',' << fmt(e.bin_sum) << ',' << fmt(e.mul) << ',' << fmt(e.adv)
        << ',' << fmt(e.diff) << ',' << fmt(e.total) << ',' << fmt(e.val_accuracy) << ','
        << fmt(e.disc_accuracy) << ',' << fmt(e.seconds) << '\n';
  }
  return out.str();
}

std::string report_json(const TrainReport& report) {
  nlohmann::json j;
  j["best_epoch"] = report.best_epoch;
  j["best_val_accuracy"] = report.best_val_accuracy;
  auto epochs = nlohmann::json::array();
  for (const auto& e : report.epochs) epochs.push_back(epoch_json(e));
  j["epochs"] = std::move(epochs);
  return j.dump(2) + "\n";
}

std::string evaluation_json(const Evaluation& eval) {
  nlohmann::json j;
  j["accuracy"] = eval.accuracy;
  j["confusion"] = eval.confusion;
  return j.dump(2) + "\n";
}

std::string separation_json(const SeparationReport& report) {
  nlohmann::json j;
  j["shared_cosine"] = report.shared_cosine;
  j["specific_cosine"] = report.specific_cosine;
  j["discriminator_accuracy"] = report.discriminator_accuracy;
  return j.dump(2) + "\n";
}

std::string attention_json(const AttentionRecord& record) {
  nlohmann::json j;
  j["sentences"] = record.sentences;
  j["class_weights"] = record.class_rows;
  j["adversarial_weights"] = record.adv_rows;
  j["predicted"] = record.predicted;
  return j.dump(2) + "\n";
}

std::string attention_heatmap(const AttentionRecord& record) {
  // Five shades from blank to solid; each weight in [0, 1] picks one.
  static const char* kShades[] = {" ", "░", "▒", "▓", "█"};
  auto cell = [](double w) {
    int idx = static_cast<int>(w * 5.0);
    idx = std::clamp(idx, 0, 4);
    std::string c;
    c += kShades[idx];
    c += kShades[idx];
    return c;
  };

  const std::size_t S = record.sentences.size();
  std::ostringstream out;
  out << "sentence ";
  for (std::size_t s = 0; s < S; ++s) out << '|' << (s + 1) % 10 << ' ';
  out << "|\n";

  auto row = [&](const std::string& label, const std::vector<double>& w) {
    out << label;
    for (std::size_t i = label.size(); i < 9; ++i) out << ' ';
    for (std::size_t s = 0; s < S; ++s) out << '|' << cell(s < w.size() ? w[s] : 0.0);
    out << "|\n";
  };

  for (std::size_t k = 0; k < record.class_rows.size(); ++k)
    row("class " + std::to_string(k), record.class_rows[k]);
  out << "---------" << '\n';
  for (std::size_t k = 0; k < record.adv_rows.size(); ++k)
    row("adv " + std::to_string(k), record.adv_rows[k]);
  out << "predicted: " << record.predicted << '\n';
  return out.str();
}

}  // namespace amb
