#pragma once

// Plain-text run configuration: `key = value` lines under `[section]`
// headers, `#` comments, starting from a named profile.

#include "stamp/eval.hpp"
#include "stamp/synthvol.hpp"
#include "stamp/trainer.hpp"

#include <cstdint>
#include <string>
#include <string_view>

namespace stamp::config {

struct RunConfig {
  std::string profile = "desk";
  synthvol::DatasetConfig data;
  std::uint64_t data_seed = 0;
  int pretrain_patients = 200;
  int probe_patients = 240;
  trainer::TrainConfig train;
  eval::ProbeConfig probe;
};

/// "desk" (laptop scale) or "paper" (original architecture and optimizer).
RunConfig profile_defaults(std::string_view profile);

/// Applies the text on top of the profile. Errors carry the line number.
/// A `profile = ...` line in the top section selects the base profile and
/// must precede all other keys.
RunConfig parse_config(std::string_view text, std::string_view profile = "desk");

/// Every key, fully written out; parse_config(emit_config(c)) == c.
std::string emit_config(const RunConfig& cfg);

/// Model and pretraining sections only, as stored in checkpoints.
std::string emit_train_config(const trainer::TrainConfig& cfg);
trainer::TrainConfig parse_train_config(std::string_view text);

/// FNV-1a of emit_config.
std::uint64_t config_digest(const RunConfig& cfg);

bool operator==(const RunConfig& a, const RunConfig& b);

}  // namespace stamp::config
