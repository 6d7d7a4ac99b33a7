#pragma once

// Run configuration files for the command-line tool.
//
//   # comment
//   manifest = data/manifest.txt
//   output_dir = runs/a
//   epochs = 30
//
// Keys are the TrainingConfig fields, the network fields base_channels,
// decoder_blocks and pooling_mode, and the paths below. Unknown or repeated
// keys are errors. Relative paths resolve against the file's directory.

#include <iosfwd>
#include <string>
#include <vector>

#include "wpfuse/pipeline.hpp"

namespace wpfuse {

struct RunConfig {
  std::string manifest;
  std::string output_dir;
  std::string checkpoint;      // default <output_dir>/model.wpf
  std::string loss_csv;        // default <output_dir>/loss.csv
  std::string ablation_table;  // default <output_dir>/ablation_table.csv
  std::string ablation_rows;   // default <output_dir>/ablation_rows.csv
  TrainingConfig training;

  /// manifest must name an existing file; output_dir must exist or have an
  /// existing parent directory. Throws ConfigError or IoError.
  void validate_paths() const;
};

/// Recognized keys, in documentation order.
const std::vector<std::string>& run_config_keys();

/// Throws ConfigError with "<origin>:<line>: ..." on any malformed entry.
RunConfig parse_run_config(std::istream& in, const std::string& base_dir, const std::string& origin = "config");
RunConfig load_run_config(const std::string& path);

}  // namespace wpfuse
