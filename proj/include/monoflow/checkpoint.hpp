#pragma once

#include <string>

#include <json.hpp>

#include "monoflow/flow.hpp"

namespace monoflow {

// JSON model serialization: structural config, named parameter tensors at
// full precision, and spectral/actnorm state. `extra` carries an opaque
// section (training config, optimizer state) preserved on round trip.
nlohmann::json model_to_json(FlowModel& m, const nlohmann::json& extra);
FlowModel model_from_json(const nlohmann::json& j, nlohmann::json* extra_out = nullptr);

void save_checkpoint(const std::string& path, FlowModel& m, const nlohmann::json& extra);
FlowModel load_checkpoint(const std::string& path, nlohmann::json* extra_out = nullptr);

}  // namespace monoflow
