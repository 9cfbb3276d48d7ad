#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "kml/metalearn.hpp"
#include "kml/transference.hpp"

namespace kml {

struct TransferConfig {
  std::size_t sources = 300;
  std::size_t targets = 1;
  double alpha = 0.05;
  double epsilon = 0.01;
  double bin_lo = 0.8;
  double bin_hi = 1.2;
  std::size_t bin_count = 40;
  int source_mode = -1;  // -1: sources drawn from every mode
  int target_mode = -1;
  std::uint64_t seed = 0;
};

/// Everything one CLI run needs. Serialized as flat `key=value` lines.
struct RunConfig {
  MetaLearnerConfig learner;
  std::vector<ModeSpec> modes;
  std::uint64_t data_seed = 0;
  std::size_t eval_episodes = 1000;
  std::uint64_t eval_seed = 0;
  std::size_t embed_episodes = 0;
  TransferConfig transfer;
  bool checkpoint_f32 = false;
  std::string output_dir = "run";

  TaskDistribution distribution() const;
  // Validates learner and transfer settings; ConfigError names the key.
  void validate() const;
};

// Unknown keys, duplicates, malformed values and missing required keys
// (learner, iterations, mode.0.kind) raise ConfigError naming the key.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

// Every key, resolved defaults included. parse_config(render_config(c)) == c.
std::string render_config(const RunConfig& cfg);

// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

}  // namespace kml
