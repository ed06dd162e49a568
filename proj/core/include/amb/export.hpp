#pragma once

// Text renderings of training artifacts: CSV/JSON for reports, JSON and a
// shade-character heatmap for attention records. Pure string producers; the
// command-line tools decide where the strings go.

#include <string>

#include "amb/synth.hpp"
#include "amb/trainer.hpp"

namespace amb {

// One row per epoch plus a header row.
std::string report_csv(const TrainReport& report);
std::string report_json(const TrainReport& report);

std::string evaluation_json(const Evaluation& eval);
std::string separation_json(const SeparationReport& report);

std::string attention_json(const AttentionRecord& record);

// Aligned text heatmap: per-branch rows of quantized shade cells, one cell
// per sentence — class-specific rows on top, adversarial rows below.
std::string attention_heatmap(const AttentionRecord& record);

}  // namespace amb
