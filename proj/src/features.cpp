#include "seld/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>

#include "json.hpp"
#include "seld/archive.hpp"
#include "seld/csv.hpp"
#include "seld/wav.hpp"

namespace fs = std::filesystem;

namespace seld {

FoaClip foa_from_wav(const std::string& path) {
    WavData wav = read_wav(path);
    if (wav.channels.size() != 4)
        throw FileError(path + ": expected 4 FoA channels, found " +
                        std::to_string(wav.channels.size()));
    if (wav.sample_rate != 24000)
        throw FileError(path + ": sample rate " + std::to_string(wav.sample_rate) +
                        " Hz is not supported; clips must be 24000 Hz");
    FoaClip clip;
    clip.sample_rate = wav.sample_rate;
    clip.channels = std::move(wav.channels);
    return clip;
}

namespace {

// Reflection (no edge repeat): index into a virtual padded signal.
double sample_reflected(const std::vector<double>& x, std::int64_t idx) {
    const std::int64_t n = static_cast<std::int64_t>(x.size());
    if (idx < 0) idx = -idx;
    if (idx >= n) idx = 2 * (n - 1) - idx;
    return x[static_cast<std::size_t>(idx)];
}

std::mutex& fftw_plan_mutex() {
    static std::mutex m;
    return m;
}

}  // namespace

Spectrogram stft(const FoaClip& clip, const FeatureConfig& cfg) {
    if (clip.channels.size() != 4) throw ShapeError("stft: clip must have 4 channels");
    const std::int64_t n = clip.n_samples();
    if (n < cfg.win)
        throw ShapeError("stft: clip of " + std::to_string(n) +
                         " samples is shorter than one window (" + std::to_string(cfg.win) + ")");
    const std::int64_t frames = (n + cfg.hop - 1) / cfg.hop;  // ceil(N / hop)
    const int bins = cfg.n_bins();

    // periodic Hann of length win, centered in the nfft buffer
    std::vector<double> window(static_cast<std::size_t>(cfg.nfft), 0.0);
    const int off = (cfg.nfft - cfg.win) / 2;
    for (int i = 0; i < cfg.win; ++i)
        window[static_cast<std::size_t>(off + i)] =
            0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(cfg.win));

    Spectrogram spec;
    spec.frames = frames;
    spec.bins = bins;
    spec.data.assign(static_cast<std::size_t>(4) * frames * bins, {0.0, 0.0});

    double* in = fftw_alloc_real(static_cast<std::size_t>(cfg.nfft));
    fftw_complex* out = fftw_alloc_complex(static_cast<std::size_t>(bins));
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lock(fftw_plan_mutex());
        plan = fftw_plan_dft_r2c_1d(cfg.nfft, in, out, FFTW_ESTIMATE);
    }

    const std::int64_t half = cfg.nfft / 2;
    for (int ch = 0; ch < 4; ++ch) {
        const auto& x = clip.channels[static_cast<std::size_t>(ch)];
        for (std::int64_t t = 0; t < frames; ++t) {
            const std::int64_t start = t * cfg.hop - half;  // frame center at t * hop
            for (int i = 0; i < cfg.nfft; ++i)
                in[i] = sample_reflected(x, start + i) * window[static_cast<std::size_t>(i)];
            fftw_execute(plan);
            std::complex<double>* dst = &spec.at(ch, t, 0);
            for (int b = 0; b < bins; ++b) dst[b] = {out[b][0], out[b][1]};
        }
    }

    {
        std::lock_guard<std::mutex> lock(fftw_plan_mutex());
        fftw_destroy_plan(plan);
    }
    fftw_free(in);
    fftw_free(out);
    return spec;
}

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace

MelFilterbank make_mel_filterbank(const FeatureConfig& cfg) {
    MelFilterbank fb;
    fb.n_mels = cfg.n_mels;
    fb.n_bins = cfg.n_bins();
    fb.weights.assign(static_cast<std::size_t>(fb.n_mels) * fb.n_bins, 0.0);
    fb.band_lo.assign(static_cast<std::size_t>(fb.n_mels), fb.n_bins);
    fb.band_hi.assign(static_cast<std::size_t>(fb.n_mels), 0);

    std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels) + 2);
    const double mel_lo = hz_to_mel(cfg.mel_fmin_hz);
    const double mel_hi = hz_to_mel(cfg.mel_fmax_hz);
    for (std::size_t i = 0; i < edges.size(); ++i)
        edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                          static_cast<double>(cfg.n_mels + 1));

    const double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.nfft;
    for (int m = 0; m < cfg.n_mels; ++m) {
        const double fl = edges[static_cast<std::size_t>(m)];
        const double fc = edges[static_cast<std::size_t>(m) + 1];
        const double fr = edges[static_cast<std::size_t>(m) + 2];
        const double area_norm = 2.0 / (fr - fl);
        for (int b = 0; b < fb.n_bins; ++b) {
            const double f = b * bin_hz;
            double w = 0.0;
            if (f > fl && f < fr) w = f <= fc ? (f - fl) / (fc - fl) : (fr - f) / (fr - fc);
            if (w > 0.0) {
                fb.weights[static_cast<std::size_t>(m) * fb.n_bins + b] = w * area_norm;
                fb.band_lo[static_cast<std::size_t>(m)] =
                    std::min(fb.band_lo[static_cast<std::size_t>(m)], b);
                fb.band_hi[static_cast<std::size_t>(m)] =
                    std::max(fb.band_hi[static_cast<std::size_t>(m)], b + 1);
            }
        }
    }
    return fb;
}

std::vector<double> logmel(const Spectrogram& spec, const MelFilterbank& fb,
                           const FeatureConfig& cfg) {
    std::vector<double> out(static_cast<std::size_t>(4) * spec.frames * fb.n_mels, 0.0);
    std::vector<double> power(static_cast<std::size_t>(spec.bins));
    for (int ch = 0; ch < 4; ++ch) {
        for (std::int64_t t = 0; t < spec.frames; ++t) {
            for (std::int64_t b = 0; b < spec.bins; ++b) {
                const auto& s = spec.at(ch, t, b);
                power[static_cast<std::size_t>(b)] = std::norm(s);
            }
            double* dst = out.data() + (static_cast<std::size_t>(ch) * spec.frames + t) * fb.n_mels;
            for (int m = 0; m < fb.n_mels; ++m) {
                double acc = 0.0;
                for (int b = fb.band_lo[static_cast<std::size_t>(m)];
                     b < fb.band_hi[static_cast<std::size_t>(m)]; ++b)
                    acc += fb.w(m, b) * power[static_cast<std::size_t>(b)];
                dst[m] = std::log(acc + cfg.log_floor);
            }
        }
    }
    return out;
}

std::vector<double> intensity_vectors(const Spectrogram& spec, const MelFilterbank& fb,
                                      const FeatureConfig& cfg) {
    // clip channel order is W,Y,Z,X; output order is Ix,Iy,Iz
    constexpr int kW = 0, kY = 1, kZ = 2, kX = 3;
    std::vector<double> out(static_cast<std::size_t>(3) * spec.frames * fb.n_mels, 0.0);
    std::vector<double> ivx(static_cast<std::size_t>(spec.bins));
    std::vector<double> ivy(static_cast<std::size_t>(spec.bins));
    std::vector<double> ivz(static_cast<std::size_t>(spec.bins));
    for (std::int64_t t = 0; t < spec.frames; ++t) {
        for (std::int64_t b = 0; b < spec.bins; ++b) {
            const auto w = spec.at(kW, t, b);
            const auto sx = spec.at(kX, t, b);
            const auto sy = spec.at(kY, t, b);
            const auto sz = spec.at(kZ, t, b);
            const double energy =
                std::norm(w) + std::norm(sx) + std::norm(sy) + std::norm(sz) + cfg.iv_eps;
            ivx[static_cast<std::size_t>(b)] = (std::conj(w) * sx).real() / energy;
            ivy[static_cast<std::size_t>(b)] = (std::conj(w) * sy).real() / energy;
            ivz[static_cast<std::size_t>(b)] = (std::conj(w) * sz).real() / energy;
        }
        for (int m = 0; m < fb.n_mels; ++m) {
            double ax = 0.0, ay = 0.0, az = 0.0;
            for (int b = fb.band_lo[static_cast<std::size_t>(m)];
                 b < fb.band_hi[static_cast<std::size_t>(m)]; ++b) {
                const double w = fb.w(m, b);
                ax += w * ivx[static_cast<std::size_t>(b)];
                ay += w * ivy[static_cast<std::size_t>(b)];
                az += w * ivz[static_cast<std::size_t>(b)];
            }
            const std::size_t base = (static_cast<std::size_t>(0) * spec.frames + t) * fb.n_mels + m;
            out[base] = ax;
            out[(static_cast<std::size_t>(1) * spec.frames + t) * fb.n_mels + m] = ay;
            out[(static_cast<std::size_t>(2) * spec.frames + t) * fb.n_mels + m] = az;
        }
    }
    return out;
}

FeatureClip extract_features(const FoaClip& clip, const FeatureConfig& cfg) {
    const Spectrogram spec = stft(clip, cfg);
    const MelFilterbank fb = make_mel_filterbank(cfg);
    const std::vector<double> lm = logmel(spec, fb, cfg);
    const std::vector<double> iv = intensity_vectors(spec, fb, cfg);

    FeatureClip out;
    out.frames = spec.frames;
    out.channels = 7;
    out.mels = cfg.n_mels;
    out.data.resize(static_cast<std::size_t>(7) * spec.frames * cfg.n_mels);
    const std::size_t plane = static_cast<std::size_t>(spec.frames) * cfg.n_mels;
    for (int ch = 0; ch < 4; ++ch)
        for (std::size_t i = 0; i < plane; ++i)
            out.data[ch * plane + i] = static_cast<float>(lm[ch * plane + i]);
    for (int ch = 0; ch < 3; ++ch)
        for (std::size_t i = 0; i < plane; ++i)
            out.data[(4 + ch) * plane + i] = static_cast<float>(iv[ch * plane + i]);
    return out;
}

TargetTensor encode_target(const EventList& events, std::int64_t n_frames, int n_classes) {
    TargetTensor target;
    target.frames = n_frames;
    target.classes = n_classes;
    target.data.assign(static_cast<std::size_t>(n_frames) * 3 * 3 * n_classes, 0.0f);

    // gather per (frame, class), preserving track order
    struct Key {
        std::int64_t frame;
        int cls;
        bool operator<(const Key& o) const {
            return frame != o.frame ? frame < o.frame : cls < o.cls;
        }
    };
    std::map<Key, std::vector<const Event*>> cells;
    for (const auto& e : events) {
        if (e.frame < 0 || e.frame >= n_frames)
            throw ShapeError("encode_target: event frame " + std::to_string(e.frame) +
                             " outside [0, " + std::to_string(n_frames) + ")");
        if (e.class_idx < 0 || e.class_idx >= n_classes)
            throw ShapeError("encode_target: class " + std::to_string(e.class_idx) +
                             " outside [0, " + std::to_string(n_classes) + ")");
        cells[{e.frame, e.class_idx}].push_back(&e);
    }
    for (auto& [key, evs] : cells) {
        if (evs.size() > 3)
            throw CapacityError("encode_target: " + std::to_string(evs.size()) +
                                " simultaneous events of class " + std::to_string(key.cls) +
                                " at frame " + std::to_string(key.frame) +
                                " exceed the 3-track capacity");
        std::sort(evs.begin(), evs.end(),
                  [](const Event* a, const Event* b) { return a->track < b->track; });
        // n=1: duplicate on all tracks; n=2: (a,b,a); n=3: (a,b,c)
        for (int track = 0; track < 3; ++track) {
            const Event* e = evs[static_cast<std::size_t>(track) % evs.size()];
            const auto v = doa_to_unit(e->azimuth_deg, e->elevation_deg);
            for (int axis = 0; axis < 3; ++axis)
                target.at(key.frame, track, axis, key.cls) = static_cast<float>(v[axis]);
        }
    }
    return target;
}

std::vector<SegmentView> segment_clip(const FeatureClip& features, const TargetTensor& target,
                                      const FeatureConfig& cfg) {
    const std::int64_t seg_t = cfg.segment_frames;
    const std::int64_t seg_l = cfg.segment_label_frames();
    const int k = target.classes;
    const std::int64_t n_segments = (features.frames + seg_t - 1) / seg_t;
    std::vector<SegmentView> out(static_cast<std::size_t>(n_segments));
    for (std::int64_t s = 0; s < n_segments; ++s) {
        SegmentView& seg = out[static_cast<std::size_t>(s)];
        seg.features.assign(static_cast<std::size_t>(7) * seg_t * features.mels, 0.0f);
        seg.target.assign(static_cast<std::size_t>(seg_l) * 3 * 3 * k, 0.0f);
        for (int ch = 0; ch < 7; ++ch)
            for (std::int64_t t = 0; t < seg_t; ++t) {
                const std::int64_t src_t = s * seg_t + t;
                if (src_t >= features.frames) break;
                std::memcpy(seg.features.data() +
                                (static_cast<std::size_t>(ch) * seg_t + t) * features.mels,
                            features.data.data() +
                                (static_cast<std::size_t>(ch) * features.frames + src_t) *
                                    features.mels,
                            static_cast<std::size_t>(features.mels) * sizeof(float));
            }
        const std::size_t label_stride = static_cast<std::size_t>(3) * 3 * k;
        for (std::int64_t t = 0; t < seg_l; ++t) {
            const std::int64_t src_t = s * seg_l + t;
            if (src_t >= target.frames) break;
            std::memcpy(seg.target.data() + static_cast<std::size_t>(t) * label_stride,
                        target.data.data() + static_cast<std::size_t>(src_t) * label_stride,
                        label_stride * sizeof(float));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// cache files
// ---------------------------------------------------------------------------

namespace {

nlohmann::json feature_config_json(const FeatureConfig& cfg) {
    return nlohmann::json{{"sample_rate", cfg.sample_rate}, {"hop", cfg.hop},
                          {"win", cfg.win},                 {"nfft", cfg.nfft},
                          {"n_mels", cfg.n_mels},           {"mel_fmin_hz", cfg.mel_fmin_hz},
                          {"mel_fmax_hz", cfg.mel_fmax_hz}, {"log_floor", cfg.log_floor},
                          {"iv_eps", cfg.iv_eps},           {"label_hop", cfg.label_hop},
                          {"segment_frames", cfg.segment_frames}};
}

FeatureConfig feature_config_from_json(const nlohmann::json& j) {
    FeatureConfig cfg;
    cfg.sample_rate = j.value("sample_rate", cfg.sample_rate);
    cfg.hop = j.value("hop", cfg.hop);
    cfg.win = j.value("win", cfg.win);
    cfg.nfft = j.value("nfft", cfg.nfft);
    cfg.n_mels = j.value("n_mels", cfg.n_mels);
    cfg.mel_fmin_hz = j.value("mel_fmin_hz", cfg.mel_fmin_hz);
    cfg.mel_fmax_hz = j.value("mel_fmax_hz", cfg.mel_fmax_hz);
    cfg.log_floor = j.value("log_floor", cfg.log_floor);
    cfg.iv_eps = j.value("iv_eps", cfg.iv_eps);
    cfg.label_hop = j.value("label_hop", cfg.label_hop);
    cfg.segment_frames = j.value("segment_frames", cfg.segment_frames);
    return cfg;
}

nlohmann::json events_json(const EventList& events) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : events)
        rows.push_back({e.frame, e.class_idx, e.track, e.azimuth_deg, e.elevation_deg});
    return rows;
}

EventList events_from_json(const nlohmann::json& rows) {
    EventList events;
    for (const auto& r : rows) {
        Event e;
        e.frame = r.at(0).get<std::int64_t>();
        e.class_idx = r.at(1).get<int>();
        e.track = r.at(2).get<int>();
        e.azimuth_deg = r.at(3).get<double>();
        e.elevation_deg = r.at(4).get<double>();
        events.push_back(e);
    }
    return events;
}

}  // namespace

void save_feature_cache(const std::string& path, const DatasetClip& clip,
                        const FeatureConfig& cfg, int n_classes) {
    Archive a;
    nlohmann::json meta{{"kind", "features"},
                        {"name", clip.name},
                        {"n_classes", n_classes},
                        {"frames", clip.features.frames},
                        {"label_frames", clip.target.frames},
                        {"feature_config", feature_config_json(cfg)},
                        {"events", events_json(clip.events)}};
    a.meta_json = meta.dump();
    {
        ArchiveEntry e;
        e.name = "features";
        e.dtype = ArchiveDType::F32;
        e.trainable = false;
        e.shape = {7, clip.features.frames, clip.features.mels};
        e.payload.resize(clip.features.data.size() * sizeof(float));
        std::memcpy(e.payload.data(), clip.features.data.data(), e.payload.size());
        a.entries.push_back(std::move(e));
    }
    {
        ArchiveEntry e;
        e.name = "target";
        e.dtype = ArchiveDType::F32;
        e.trainable = false;
        e.shape = {clip.target.frames, 3, 3, n_classes};
        e.payload.resize(clip.target.data.size() * sizeof(float));
        std::memcpy(e.payload.data(), clip.target.data.data(), e.payload.size());
        a.entries.push_back(std::move(e));
    }
    write_archive(path, a);
}

DatasetClip load_feature_cache(const std::string& path) {
    Archive a = read_archive(path);
    const nlohmann::json meta = nlohmann::json::parse(a.meta_json);
    if (meta.value("kind", "") != "features")
        throw ArchiveError(path + ": not a feature cache");
    DatasetClip clip;
    clip.name = meta.value("name", "");
    clip.events = events_from_json(meta.at("events"));
    const ArchiveEntry* fe = a.find("features");
    const ArchiveEntry* te = a.find("target");
    if (!fe || !te) throw ArchiveError(path + ": missing features or target entry");
    clip.features.channels = static_cast<int>(fe->shape.at(0));
    clip.features.frames = fe->shape.at(1);
    clip.features.mels = static_cast<int>(fe->shape.at(2));
    clip.features.data.resize(fe->payload.size() / sizeof(float));
    std::memcpy(clip.features.data.data(), fe->payload.data(), fe->payload.size());
    clip.target.frames = te->shape.at(0);
    clip.target.classes = static_cast<int>(te->shape.at(3));
    clip.target.data.resize(te->payload.size() / sizeof(float));
    std::memcpy(clip.target.data.data(), te->payload.data(), te->payload.size());
    return clip;
}

int extract_directory(const std::string& data_dir, const std::string& out_dir,
                      const FeatureConfig& cfg, int n_classes) {
    std::vector<std::pair<std::string, std::string>> pairs;  // (wav, csv)
    const fs::path manifest = fs::path(data_dir) / "manifest.json";
    if (fs::exists(manifest)) {
        std::ifstream in(manifest);
        nlohmann::json j;
        in >> j;
        for (const auto& c : j.at("clips"))
            pairs.push_back({(fs::path(data_dir) / c.at("wav").get<std::string>()).string(),
                             (fs::path(data_dir) / c.at("csv").get<std::string>()).string()});
    } else {
        std::vector<fs::path> wavs;
        for (const auto& entry : fs::directory_iterator(data_dir))
            if (entry.path().extension() == ".wav") wavs.push_back(entry.path());
        std::sort(wavs.begin(), wavs.end());
        for (const auto& w : wavs) {
            fs::path csv = w;
            csv.replace_extension(".csv");
            if (!fs::exists(csv))
                throw FileError("no metadata csv next to " + w.string());
            pairs.push_back({w.string(), csv.string()});
        }
    }
    if (pairs.empty()) throw FileError("no clips found in " + data_dir);

    fs::create_directories(out_dir);
    nlohmann::json index{{"kind", "feature_index"},
                         {"n_classes", n_classes},
                         {"feature_config", feature_config_json(cfg)}};
    nlohmann::json index_clips = nlohmann::json::array();
    for (const auto& [wav_path, csv_path] : pairs) {
        DatasetClip clip;
        clip.name = fs::path(wav_path).stem().string();
        const FoaClip foa = foa_from_wav(wav_path);
        clip.features = extract_features(foa, cfg);
        clip.events = read_dcase_csv(csv_path);
        const std::int64_t label_frames = clip.features.label_frames(cfg);
        clip.target = encode_target(clip.events, label_frames, n_classes);
        const std::string cache_name = clip.name + ".feat";
        save_feature_cache((fs::path(out_dir) / cache_name).string(), clip, cfg, n_classes);
        index_clips.push_back({{"file", cache_name},
                               {"frames", clip.features.frames},
                               {"label_frames", label_frames}});
    }
    index["clips"] = index_clips;
    std::ofstream os(fs::path(out_dir) / "index.json");
    os << index.dump(2) << "\n";
    return static_cast<int>(pairs.size());
}

Dataset load_feature_dir(const std::string& dir) {
    const fs::path index_path = fs::path(dir) / "index.json";
    if (!fs::exists(index_path))
        throw FileError("no index.json in " + dir + " (run extract first)");
    std::ifstream in(index_path);
    nlohmann::json index;
    in >> index;
    Dataset ds;
    ds.cfg = feature_config_from_json(index.at("feature_config"));
    ds.n_classes = index.value("n_classes", 13);
    for (const auto& c : index.at("clips"))
        ds.clips.push_back(
            load_feature_cache((fs::path(dir) / c.at("file").get<std::string>()).string()));
    if (ds.clips.empty()) throw FileError("feature index lists no clips: " + dir);
    return ds;
}

}  // namespace seld
