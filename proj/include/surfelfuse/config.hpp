#pragma once

// JSON (de)serialization of configs, scenes, cameras and reports. Parsing is
// strict: unknown keys and wrong types raise ConfigError naming the field.

#include "surfelfuse/metrics.hpp"
#include "surfelfuse/optim.hpp"
#include "surfelfuse/sim.hpp"

#include <json.hpp>

#include <stdexcept>
#include <string>

namespace surfelfuse {

class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& field, const std::string& what)
        : std::runtime_error(field + ": " + what), field_(field) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

using Json = nlohmann::ordered_json;

Json to_json(const LidarConfig& c);
LidarConfig lidar_from_json(const Json& j, const std::string& where = "lidar");

Json to_json(const ProtocolConfig& c);
ProtocolConfig protocol_from_json(const Json& j);

Json to_json(const OptimConfig& c);
/// Fields absent from `j` keep their value from `base`.
OptimConfig optim_from_json(const Json& j, OptimConfig base = {});

Json to_json(const CameraModel& c);
CameraModel camera_from_json(const Json& j);

Json to_json(const Scene& s);
Scene scene_from_json(const Json& j);

Json to_json(const MetricsReport& r);
MetricsReport report_from_json(const Json& j);

/// "inf" / "-inf" strings stand in for infinities.
Json number_to_json(double v);
double number_from_json(const Json& j, const std::string& field);

}  // namespace surfelfuse
