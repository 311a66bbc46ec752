#include "seld/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "seld/csv.hpp"
#include "seld/loss.hpp"
#include "seld/wav.hpp"

namespace fs = std::filesystem;

namespace seld {

OverlapProfile OverlapProfile::from_string(const std::string& s, int n_classes) {
    OverlapProfile p;
    p.n_classes = n_classes;
    if (s == "mono")
        p.mode = Mode::Mono;
    else if (s == "ov2")
        p.mode = Mode::Ov2;
    else if (s == "ov3")
        p.mode = Mode::Ov3;
    else
        throw ConfigError("unknown overlap profile '" + s + "' (expected mono|ov2|ov3)");
    return p;
}

std::string OverlapProfile::name() const {
    switch (mode) {
        case Mode::Mono: return "mono";
        case Mode::Ov2: return "ov2";
        default: return "ov3";
    }
}

namespace {

// 5 ms raised-cosine onset/offset ramps keep event edges from dominating the
// spectrum while leaving the label timing intact.
double envelope(double t_rel, double length, double ramp = 0.005) {
    ramp = std::min(ramp, length / 2.0);
    if (t_rel < 0.0 || t_rel >= length) return 0.0;
    if (t_rel < ramp) return 0.5 - 0.5 * std::cos(M_PI * t_rel / ramp);
    if (t_rel > length - ramp) return 0.5 - 0.5 * std::cos(M_PI * (length - t_rel) / ramp);
    return 1.0;
}

double source_sample(const SceneEvent& e, double t_rel, CounterRng& noise_rng) {
    switch (e.kind) {
        case SourceKind::Tone:
            return std::sin(2.0 * M_PI * e.freq_hz * t_rel);
        case SourceKind::Chirp: {
            const double dur = e.offset_s - e.onset_s;
            const double rate = (e.freq_end_hz - e.freq_hz) / dur;
            return std::sin(2.0 * M_PI * (e.freq_hz * t_rel + 0.5 * rate * t_rel * t_rel));
        }
        default:
            return 2.0 * noise_rng.uniform() - 1.0;
    }
}

void check_capacity(const SceneSpec& spec) {
    // same-class concurrency at 100 ms resolution must stay within 3 tracks
    const std::int64_t frames = static_cast<std::int64_t>(std::ceil(spec.duration_s * 10.0));
    for (std::int64_t f = 0; f < frames; ++f) {
        std::vector<int> count(64, 0);
        for (const auto& e : spec.events) {
            const std::int64_t first = static_cast<std::int64_t>(std::floor(e.onset_s * 10.0));
            const std::int64_t last = static_cast<std::int64_t>(std::ceil(e.offset_s * 10.0)) - 1;
            if (f >= first && f <= last && e.class_idx < 64) {
                if (++count[static_cast<std::size_t>(e.class_idx)] > 3)
                    throw CapacityError("scene has more than 3 overlapping events of class " +
                                        std::to_string(e.class_idx) + " at frame " +
                                        std::to_string(f));
            }
        }
    }
}

}  // namespace

RenderedScene render_scene(const SceneSpec& spec, int sample_rate) {
    for (const auto& e : spec.events)
        if (!(e.onset_s >= 0.0 && e.onset_s < e.offset_s && e.offset_s <= spec.duration_s))
            throw ConfigError("scene event outside [0, duration]: onset " +
                              std::to_string(e.onset_s) + ", offset " + std::to_string(e.offset_s));
    check_capacity(spec);

    const std::int64_t n = static_cast<std::int64_t>(std::llround(spec.duration_s * sample_rate));
    RenderedScene out;
    out.clip.sample_rate = sample_rate;
    out.clip.channels.assign(4, std::vector<double>(static_cast<std::size_t>(n), 0.0));
    auto& w = out.clip.channels[0];
    auto& y = out.clip.channels[1];
    auto& z = out.clip.channels[2];
    auto& x = out.clip.channels[3];

    for (std::size_t ei = 0; ei < spec.events.size(); ++ei) {
        const SceneEvent& e = spec.events[ei];
        const auto dir = doa_to_unit(e.azimuth_deg, e.elevation_deg);
        const double gx = dir[0], gy = dir[1], gz = dir[2];
        CounterRng noise_rng(spec.seed, 0x5151 + e.noise_stream + ei);
        const std::int64_t first = static_cast<std::int64_t>(std::ceil(e.onset_s * sample_rate));
        const std::int64_t last =
            std::min<std::int64_t>(n, static_cast<std::int64_t>(std::ceil(e.offset_s * sample_rate)));
        const double length = e.offset_s - e.onset_s;
        for (std::int64_t i = first; i < last; ++i) {
            const double t_rel = static_cast<double>(i) / sample_rate - e.onset_s;
            const double s =
                e.amplitude * envelope(t_rel, length) * source_sample(e, t_rel, noise_rng);
            w[static_cast<std::size_t>(i)] += s;
            x[static_cast<std::size_t>(i)] += s * gx;
            y[static_cast<std::size_t>(i)] += s * gy;
            z[static_cast<std::size_t>(i)] += s * gz;
        }
    }

    if (spec.noise_snr_db) {
        double signal_power = 0.0;
        for (const auto& ch : out.clip.channels)
            for (double v : ch) signal_power += v * v;
        signal_power /= static_cast<double>(4 * n);
        const double noise_power = signal_power / std::pow(10.0, *spec.noise_snr_db / 10.0);
        const double sigma = std::sqrt(noise_power);
        CounterRng noise_rng(spec.seed, 0xD1FF);
        for (auto& ch : out.clip.channels)
            for (auto& v : ch) v += sigma * noise_rng.normal();
    }

    // metadata at 100 ms resolution; track ids separate overlapping same-class events
    struct ActiveSpan {
        std::int64_t first, last;
        std::size_t event;
    };
    std::vector<ActiveSpan> spans;
    for (std::size_t ei = 0; ei < spec.events.size(); ++ei) {
        const SceneEvent& e = spec.events[ei];
        ActiveSpan s;
        s.first = static_cast<std::int64_t>(std::floor(e.onset_s * 10.0));
        s.last = static_cast<std::int64_t>(std::ceil(e.offset_s * 10.0)) - 1;
        s.event = ei;
        spans.push_back(s);
    }
    std::vector<int> track_of(spec.events.size(), 0);
    for (std::size_t i = 0; i < spans.size(); ++i) {
        std::vector<bool> taken(3, false);
        for (std::size_t j = 0; j < i; ++j) {
            if (spec.events[spans[j].event].class_idx != spec.events[spans[i].event].class_idx)
                continue;
            if (spans[j].first <= spans[i].last && spans[i].first <= spans[j].last)
                taken[static_cast<std::size_t>(track_of[spans[j].event])] = true;
        }
        int t = 0;
        while (t < 3 && taken[static_cast<std::size_t>(t)]) ++t;
        track_of[spans[i].event] = t;
    }
    for (const auto& s : spans) {
        const SceneEvent& e = spec.events[s.event];
        for (std::int64_t f = s.first; f <= s.last; ++f) {
            Event ev;
            ev.frame = f;
            ev.class_idx = e.class_idx;
            ev.track = track_of[s.event];
            ev.azimuth_deg = e.azimuth_deg;
            ev.elevation_deg = e.elevation_deg;
            out.events.push_back(ev);
        }
    }
    std::sort(out.events.begin(), out.events.end(), [](const Event& a, const Event& b) {
        if (a.frame != b.frame) return a.frame < b.frame;
        if (a.class_idx != b.class_idx) return a.class_idx < b.class_idx;
        return a.track < b.track;
    });
    return out;
}

SceneSpec sample_scene(const OverlapProfile& profile, double duration_s, CounterRng& rng) {
    SceneSpec spec;
    spec.duration_s = duration_s;
    const int max_ov = profile.max_overlap();

    // sequential slots of 1..max_overlap concurrent events, gaps in between;
    // all times snapped to the 0.1 s label grid
    double cursor = 0.1 * static_cast<double>(rng.uniform_int(0, 2));
    while (true) {
        const double len = 0.1 * static_cast<double>(rng.uniform_int(
                                     static_cast<std::int64_t>(profile.min_event_s * 10),
                                     static_cast<std::int64_t>(profile.max_event_s * 10)));
        if (cursor + len > duration_s) break;
        int concurrent = 1;
        if (max_ov >= 2 && rng.uniform() < 0.5) concurrent = 2;
        if (max_ov >= 3 && concurrent == 2 && rng.uniform() < 0.3) concurrent = 3;
        std::vector<int> used_classes;
        for (int c = 0; c < concurrent; ++c) {
            SceneEvent e;
            // distinct classes within a slot keep same-class polyphony rare
            do {
                e.class_idx = static_cast<int>(rng.uniform_int(0, profile.n_classes - 1));
            } while (std::find(used_classes.begin(), used_classes.end(), e.class_idx) !=
                     used_classes.end());
            used_classes.push_back(e.class_idx);
            e.onset_s = cursor;
            // concurrent events may end at slightly different grid points
            const double sub = std::min(len, 0.1 * static_cast<double>(rng.uniform_int(
                                                      static_cast<std::int64_t>(len * 10 * 2 / 3),
                                                      static_cast<std::int64_t>(len * 10))));
            e.offset_s = cursor + std::max(0.2, sub);
            e.azimuth_deg = static_cast<double>(rng.uniform_int(-180, 179));
            e.elevation_deg = static_cast<double>(
                rng.uniform_int(-static_cast<std::int64_t>(profile.elevation_limit_deg),
                                static_cast<std::int64_t>(profile.elevation_limit_deg)));
            const std::int64_t kind = rng.uniform_int(0, 2);
            e.kind = kind == 0 ? SourceKind::Tone
                               : (kind == 1 ? SourceKind::Chirp : SourceKind::NoiseBurst);
            e.amplitude = rng.uniform(0.3, 0.8);
            e.freq_hz = rng.uniform(250.0, 4000.0);
            e.freq_end_hz = e.freq_hz * rng.uniform(0.5, 2.0);
            e.noise_stream = rng.next_u64() & 0xFFFF;
            spec.events.push_back(e);
        }
        cursor += len + 0.1 * static_cast<double>(rng.uniform_int(1, 4));
    }
    if (spec.events.empty()) {
        // degenerate draw on very short clips: place one minimal event
        SceneEvent e;
        e.class_idx = static_cast<int>(rng.uniform_int(0, profile.n_classes - 1));
        e.onset_s = 0.0;
        e.offset_s = std::min(duration_s, 0.5);
        e.azimuth_deg = static_cast<double>(rng.uniform_int(-180, 179));
        e.elevation_deg = 0.0;
        e.amplitude = 0.5;
        e.freq_hz = 1000.0;
        spec.events.push_back(e);
    }
    return spec;
}

namespace {

nlohmann::json scene_spec_json(const SceneSpec& spec) {
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : spec.events) {
        const char* kind = e.kind == SourceKind::Tone ? "tone"
                           : e.kind == SourceKind::Chirp ? "chirp"
                                                         : "noise";
        events.push_back({{"class", e.class_idx},
                          {"onset_s", e.onset_s},
                          {"offset_s", e.offset_s},
                          {"azimuth_deg", e.azimuth_deg},
                          {"elevation_deg", e.elevation_deg},
                          {"kind", kind},
                          {"amplitude", e.amplitude},
                          {"freq_hz", e.freq_hz},
                          {"freq_end_hz", e.freq_end_hz}});
    }
    nlohmann::json j{{"duration_s", spec.duration_s}, {"events", events}};
    if (spec.noise_snr_db) j["noise_snr_db"] = *spec.noise_snr_db;
    return j;
}

}  // namespace

void make_dataset(const std::string& out_dir, const MakeDatasetOptions& opts) {
    fs::create_directories(out_dir);
    nlohmann::json manifest{{"kind", "synth_dataset"},
                            {"seed", opts.seed},
                            {"n_clips", opts.n_clips},
                            {"overlap", opts.profile.name()},
                            {"n_classes", opts.profile.n_classes},
                            {"duration_s", opts.duration_s}};
    nlohmann::json clips = nlohmann::json::array();
    for (int i = 0; i < opts.n_clips; ++i) {
        CounterRng rng(opts.seed, 0xC11B + static_cast<std::uint64_t>(i));
        SceneSpec spec = sample_scene(opts.profile, opts.duration_s, rng);
        spec.seed = opts.seed + static_cast<std::uint64_t>(i);
        spec.noise_snr_db = opts.noise_snr_db;
        RenderedScene scene = render_scene(spec);

        char name[32];
        std::snprintf(name, sizeof(name), "clip_%04d", i);
        const std::string wav_name = std::string(name) + ".wav";
        const std::string csv_name = std::string(name) + ".csv";
        write_wav_float32((fs::path(out_dir) / wav_name).string(), scene.clip.channels,
                          scene.clip.sample_rate);
        write_dcase_csv((fs::path(out_dir) / csv_name).string(), scene.events);
        clips.push_back({{"wav", wav_name},
                         {"csv", csv_name},
                         {"n_events", spec.events.size()},
                         {"scene", scene_spec_json(spec)}});
    }
    manifest["clips"] = clips;
    std::ofstream os(fs::path(out_dir) / "manifest.json");
    os << manifest.dump(2) << "\n";
    if (!os) throw FileError("failed writing manifest to " + out_dir);
}

}  // namespace seld
