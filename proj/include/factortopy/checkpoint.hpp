// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "factortopy/encoder.hpp"

namespace factortopy {

nlohmann::json config_to_json(const EncoderConfig& config);
EncoderConfig config_from_json(const nlohmann::json& doc);

/// Binary model container:
///
///   "FTOPYCKP" | u32 version | u64 header bytes | header JSON | f32le payload
///
/// The header holds the config echo, layer spec, voxel count, the ordered
/// list of parameter groups (name, shape) and a free-form `extra` object.
void save_checkpoint(const EncoderModel& model, const std::filesystem::path& file,
                     const nlohmann::json& extra = nlohmann::json::object());

EncoderModel load_checkpoint(const std::filesystem::path& file, nlohmann::json* extra = nullptr);

/// In-memory byte form of the same container.
std::string serialize_model(const EncoderModel& model,
                            const nlohmann::json& extra = nlohmann::json::object());
EncoderModel deserialize_model(const std::string& bytes, const std::string& source,
                               nlohmann::json* extra = nullptr);

}  // namespace factortopy
