#pragma once

#include <filesystem>
#include <iosfwd>

#include "loraxs/training.hpp"

namespace loraxs {

// INI-style `key = value` lines, optionally under a [train] section. Keys are
// the TrainConfig field names; values not mentioned keep those of `base`.
// Throws ParameterError naming the offending key.
TrainConfig parse_train_config(std::istream& in, const TrainConfig& base = {});
TrainConfig load_train_config(const std::filesystem::path& path, const TrainConfig& base = {});

void write_train_config(std::ostream& out, const TrainConfig& config);

}  // namespace loraxs
