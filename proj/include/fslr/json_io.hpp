// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include "fslr/models.hpp"

namespace fslr {

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Missing keys keep their defaults; unknown enum strings raise ConfigError.
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace fslr
