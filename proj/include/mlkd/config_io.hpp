#pragma once

// JSON <-> config structs for the CLI and run records.

#include <json.hpp>

#include "mlkd/data.hpp"

namespace mlkd {

nlohmann::ordered_json scene_spec_to_json(const SceneSpec& s);
SceneSpec scene_spec_from_json(const nlohmann::json& j);

}  // namespace mlkd
