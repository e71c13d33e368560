#pragma once

#include <json.hpp>

#include "ssmlm/model.hpp"

namespace ssmlm {

void to_json(nlohmann::json& j, const BlockConfig& c);
void from_json(const nlohmann::json& j, BlockConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

} // namespace ssmlm
