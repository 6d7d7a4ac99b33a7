#include "wpfuse/network.hpp"

namespace wpfuse {

std::string_view to_string(PoolingMode mode) {
  switch (mode) {
    case PoolingMode::kWdepp: return "wdepp";
    case PoolingMode::kMax: return "max";
    case PoolingMode::kAverage: return "average";
  }
  return "unknown";
}

PoolingMode parse_pooling_mode(std::string_view text) {
  if (text == "wdepp") return PoolingMode::kWdepp;
  if (text == "max") return PoolingMode::kMax;
  if (text == "average" || text == "avg") return PoolingMode::kAverage;
  throw ConfigError("unknown pooling mode '" + std::string(text) + "' (expected wdepp, max or average)");
}

void NetworkConfig::validate() const {
  if (base_channels < 1) throw ConfigError("base_channels must be positive");
  if (decoder_blocks < 1) throw ConfigError("decoder_blocks must be at least 1");
  if (encoder_blocks != decoder_blocks + 1)
    throw ConfigError("encoder_blocks must equal decoder_blocks + 1 (got " + std::to_string(encoder_blocks) +
                      " and " + std::to_string(decoder_blocks) + ")");
  if (encoder_blocks > 8) throw ConfigError("encoder_blocks larger than 8 is not supported");
  if (input_channels != 2) throw ConfigError("input_channels must be 2 (two concatenated sources)");
  if (output_channels != 1) throw ConfigError("output_channels must be 1");
}

}  // namespace wpfuse
