#include "seld/csv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "seld/wav.hpp"  // FileError

namespace seld {

EventList read_dcase_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot open metadata csv: " + path);
    EventList events;
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream is(line);
        Event e;
        long long frame;
        if (!(is >> frame >> e.class_idx >> e.track >> e.azimuth_deg >> e.elevation_deg))
            throw FileError(path + ":" + std::to_string(line_no) + ": malformed csv row: " + line);
        e.frame = frame;
        events.push_back(e);
    }
    return events;
}

void write_dcase_csv(const std::string& path, const EventList& events) {
    std::ofstream os(path);
    if (!os) throw FileError("cannot create metadata csv: " + path);
    for (const auto& e : events) {
        os << e.frame << "," << e.class_idx << "," << e.track << ","
           << static_cast<long long>(std::llround(e.azimuth_deg)) << ","
           << static_cast<long long>(std::llround(e.elevation_deg)) << "\n";
    }
    if (!os) throw FileError("failed writing metadata csv: " + path);
}

}  // namespace seld
