#pragma once

// Run configuration: one JSON file describing a whole run (dimensions, loss
// weights, optimizer settings, corpus paths, mode), with dot-path
// `key.path=value` overrides applied on top. The training mode ablation
// (amb / mb / mul-only) is realized purely by zeroing loss weights so every
// mode runs the identical code path.

#include <string>
#include <vector>

#include "amb/model.hpp"
#include "amb/synth.hpp"
#include "amb/trainer.hpp"

namespace amb {

struct RunConfig {
  std::string mode = "amb";  // amb | mb | mul-only
  ModelConfig model;         // vocab_size is derived from the corpus at train time
  TrainerOptions trainer;    // carries LossWeights plus optimizer settings
  std::string train_path, valid_path, test_path;
  int min_count = 6;  // vocabulary retention threshold

  // mb zeroes gamma and delta; mul-only additionally zeroes alpha.
  void apply_mode();
  void validate() const;
};

// Parses a config from JSON text. Unknown keys are rejected so typos fail
// loudly instead of silently training with defaults.
RunConfig parse_run_config(const std::string& json_text);

// Reads the file, applies `key.path=value` overrides in order (values parse
// as JSON scalars, bare words fall back to strings), resolves the mode, and
// validates.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

// The fully resolved configuration as JSON — written next to training
// outputs so a run can be reproduced from its artifacts alone.
std::string run_config_json(const RunConfig& config);

// Synthetic-corpus specs share the override mechanics. An empty path means
// "all defaults" (overrides still apply).
SynthSpec parse_synth_spec(const std::string& json_text);
SynthSpec load_synth_spec(const std::string& path, const std::vector<std::string>& overrides);

}  // namespace amb
