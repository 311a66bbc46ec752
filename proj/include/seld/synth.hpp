// Synthetic FoA scene generator: free-field plane-wave encoding of tones,
// chirps, and noise bursts, with frame-accurate metadata. Stands in for real
// recordings so the feature pipeline, losses, and metrics are verifiable at
// desk scale. SN3D scaling, channels emitted in W,Y,Z,X order.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "seld/events.hpp"
#include "seld/features.hpp"
#include "seld/rng.hpp"

namespace seld {

enum class SourceKind { Tone, Chirp, NoiseBurst };

struct SceneEvent {
    int class_idx = 0;
    double onset_s = 0.0;
    double offset_s = 0.0;
    double azimuth_deg = 0.0;
    double elevation_deg = 0.0;
    SourceKind kind = SourceKind::Tone;
    double amplitude = 0.5;
    double freq_hz = 1000.0;    // tone frequency / chirp start
    double freq_end_hz = 0.0;   // chirp end (ignored otherwise)
    std::uint64_t noise_stream = 0;
};

struct SceneSpec {
    double duration_s = 5.0;
    std::vector<SceneEvent> events;
    std::optional<double> noise_snr_db;
    std::uint64_t seed = 0;
};

struct OverlapProfile {
    enum class Mode { Mono, Ov2, Ov3 };
    Mode mode = Mode::Ov2;
    int n_classes = 13;
    double min_event_s = 0.6;
    double max_event_s = 1.4;
    double elevation_limit_deg = 75.0;  // keep sources off the poles

    static OverlapProfile from_string(const std::string& s, int n_classes);
    std::string name() const;
    int max_overlap() const {
        return mode == Mode::Mono ? 1 : (mode == Mode::Ov2 ? 2 : 3);
    }
};

// Renders the scene; the EventList is derived from onsets/offsets at 100 ms
// resolution (any overlap with a label frame marks it active).
struct RenderedScene {
    FoaClip clip;
    EventList events;
};

RenderedScene render_scene(const SceneSpec& spec, int sample_rate = 24000);

// Draw a random scene consistent with the profile. Onsets snap to the 100 ms
// label grid so that metadata round-trips losslessly.
SceneSpec sample_scene(const OverlapProfile& profile, double duration_s, CounterRng& rng);

// Writes clip_####.wav / clip_####.csv pairs plus manifest.json; byte-stable
// for a fixed seed.
struct MakeDatasetOptions {
    int n_clips = 8;
    std::uint64_t seed = 1;
    double duration_s = 5.0;
    OverlapProfile profile;
    std::optional<double> noise_snr_db;
};

void make_dataset(const std::string& out_dir, const MakeDatasetOptions& opts);

}  // namespace seld
