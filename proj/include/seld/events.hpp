// Frame-level sound-event records shared by the feature pipeline, metrics,
// and the scene synthesizer. Frames are 100 ms label frames; azimuth is in
// [-180, 180) degrees, elevation in [-90, 90].
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace seld {

struct Event {
    std::int64_t frame = 0;
    int class_idx = 0;
    int track = 0;
    double azimuth_deg = 0.0;
    double elevation_deg = 0.0;
};

using EventList = std::vector<Event>;

constexpr double kDegToRad = 0.017453292519943295;
constexpr double kRadToDeg = 57.29577951308232;

// x = cos(el)cos(az), y = cos(el)sin(az), z = sin(el)
inline std::array<double, 3> doa_to_unit(double azimuth_deg, double elevation_deg) {
    const double az = azimuth_deg * kDegToRad;
    const double el = elevation_deg * kDegToRad;
    return {std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
}

inline double unit_to_azimuth_deg(const std::array<double, 3>& v) {
    return std::atan2(v[1], v[0]) * kRadToDeg;
}

inline double unit_to_elevation_deg(const std::array<double, 3>& v) {
    const double z = std::max(-1.0, std::min(1.0, v[2]));
    return std::asin(z) * kRadToDeg;
}

}  // namespace seld
