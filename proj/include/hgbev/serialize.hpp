#pragma once

#include "hgbev/box.hpp"
#include "hgbev/geometry.hpp"

#include <json.hpp>

namespace hgbev {

nlohmann::ordered_json grid_to_json(const GridSpec& g);
GridSpec grid_from_json(const nlohmann::json& j);
nlohmann::ordered_json box_to_json(const Box3D& b);
Box3D box_from_json(const nlohmann::json& j);

}  // namespace hgbev
