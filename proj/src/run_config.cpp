#include "wpfuse/run_config.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <set>

#include "wpfuse/errors.hpp"

namespace wpfuse {
namespace {

namespace fs = std::filesystem;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& text, const std::string& where) {
  T v{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(where + ": cannot parse '" + text + "' as a number");
  return v;
}

}  // namespace

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = {
      "manifest",      "output_dir",     "checkpoint", "loss_csv",   "ablation_table",
      "ablation_rows", "patch_size",     "epochs",     "batch_size", "learning_rate",
      "beta1",         "beta2",          "epsilon",    "seed",       "patch_keep_threshold",
      "max_steps",     "validation_fraction", "base_channels", "decoder_blocks", "pooling_mode"};
  return keys;
}

RunConfig parse_run_config(std::istream& in, const std::string& base_dir, const std::string& origin) {
  RunConfig rc;
  TrainingConfig& t = rc.training;
  auto resolve = [&](const std::string& p) {
    return fs::path(p).is_absolute() || base_dir.empty() ? p : (fs::path(base_dir) / p).string();
  };

  std::set<std::string> seen;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (value.empty()) throw ConfigError(where + ": empty value for '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");

    if (key == "manifest") rc.manifest = resolve(value);
    else if (key == "output_dir") rc.output_dir = resolve(value);
    else if (key == "checkpoint") rc.checkpoint = resolve(value);
    else if (key == "loss_csv") rc.loss_csv = resolve(value);
    else if (key == "ablation_table") rc.ablation_table = resolve(value);
    else if (key == "ablation_rows") rc.ablation_rows = resolve(value);
    else if (key == "patch_size") t.patch_size = parse_number<Index>(value, where);
    else if (key == "epochs") t.epochs = parse_number<Index>(value, where);
    else if (key == "batch_size") t.batch_size = parse_number<Index>(value, where);
    else if (key == "learning_rate") t.learning_rate = parse_number<double>(value, where);
    else if (key == "beta1") t.beta1 = parse_number<double>(value, where);
    else if (key == "beta2") t.beta2 = parse_number<double>(value, where);
    else if (key == "epsilon") t.epsilon = parse_number<double>(value, where);
    else if (key == "seed") t.seed = parse_number<std::uint64_t>(value, where);
    else if (key == "patch_keep_threshold") t.patch_keep_threshold = parse_number<double>(value, where);
    else if (key == "max_steps") t.max_steps = parse_number<Index>(value, where);
    else if (key == "validation_fraction") t.validation_fraction = parse_number<double>(value, where);
    else if (key == "base_channels") t.network.base_channels = parse_number<Index>(value, where);
    else if (key == "decoder_blocks") {
      t.network.decoder_blocks = parse_number<Index>(value, where);
      t.network.encoder_blocks = t.network.decoder_blocks + 1;
    } else if (key == "pooling_mode") {
      try {
        t.network.pooling_mode = parse_pooling_mode(value);
      } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
      }
    } else {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }

  if (rc.manifest.empty()) throw ConfigError(origin + ": missing required key 'manifest'");
  if (rc.output_dir.empty()) throw ConfigError(origin + ": missing required key 'output_dir'");
  const fs::path out(rc.output_dir);
  if (rc.checkpoint.empty()) rc.checkpoint = (out / "model.wpf").string();
  if (rc.loss_csv.empty()) rc.loss_csv = (out / "loss.csv").string();
  if (rc.ablation_table.empty()) rc.ablation_table = (out / "ablation_table.csv").string();
  if (rc.ablation_rows.empty()) rc.ablation_rows = (out / "ablation_rows.csv").string();
  try {
    t.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  return parse_run_config(in, fs::path(path).parent_path().string(), path);
}

void RunConfig::validate_paths() const {
  if (!fs::is_regular_file(manifest)) throw IoError("manifest not found: " + manifest);
  const fs::path out(output_dir);
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) throw IoError("output_dir is not a directory: " + output_dir);
  } else {
    const fs::path parent = fs::absolute(out).parent_path();
    if (!fs::is_directory(parent)) throw IoError("parent of output_dir does not exist: " + parent.string());
  }
  for (const std::string* p : {&checkpoint, &loss_csv, &ablation_table, &ablation_rows}) {
    const fs::path parent = fs::absolute(*p).parent_path();
    if (parent != fs::absolute(out) && !fs::is_directory(parent))
      throw IoError("directory for " + *p + " does not exist");
  }
}

}  // namespace wpfuse
