// DCASE task3 metadata CSV: headerless rows of
// frame_idx,class_idx,track_idx,azimuth_deg,elevation_deg (integer degrees).
#pragma once

#include <string>

#include "seld/events.hpp"

namespace seld {

EventList read_dcase_csv(const std::string& path);
void write_dcase_csv(const std::string& path, const EventList& events);

}  // namespace seld
