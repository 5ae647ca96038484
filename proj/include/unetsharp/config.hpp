#pragma once

#include "unetsharp/train.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace unetsharp {

/// Malformed config text: unknown key, duplicate key or unparsable value.
class ConfigError : public ArgumentError {
public:
    using ArgumentError::ArgumentError;
};

struct ConfigKey {
    std::string key;
    std::string default_value;
    std::string help;
};

/// Every recognised key with its default, in file order.
const std::vector<ConfigKey>& config_keys();

/// Parses flat `key = value` lines; '#' starts a comment. Keys not given
/// keep their defaults. The result is validated.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);

/// Every key of `config`, one per line; parse_config inverts it exactly.
std::string format_config(const TrainConfig& config);

} // namespace unetsharp
