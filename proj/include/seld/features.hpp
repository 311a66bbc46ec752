// FoA feature pipeline: STFT -> 64-band log-mel spectrograms of the four
// Ambisonic channels plus three energy-normalized intensity-vector channels,
// and alignment of frame-level metadata into multi-ACCDOA targets.
//
// Channel conventions: clips carry W,Y,Z,X (ACN order, SN3D scaling); the
// intensity channels are emitted in (Ix, Iy, Iz) order.
#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "seld/events.hpp"
#include "seld/loss.hpp"
#include "seld/tensor.hpp"

namespace seld {

struct FeatureConfig {
    int sample_rate = 24000;
    int hop = 480;        // 0.02 s
    int win = 960;        // 0.04 s, periodic Hann
    int nfft = 1024;
    int n_mels = 64;
    double mel_fmin_hz = 50.0;
    double mel_fmax_hz = 12000.0;
    double log_floor = 1e-8;
    double iv_eps = 1e-8;
    int label_hop = 5;       // label frames are 0.1 s = 5 feature frames
    int segment_frames = 250;  // 5 s of feature frames per training segment

    int n_bins() const { return nfft / 2 + 1; }
    int segment_label_frames() const { return segment_frames / label_hop; }
};

struct FoaClip {
    std::vector<std::vector<double>> channels;  // 4 x N, order W,Y,Z,X
    int sample_rate = 24000;

    std::int64_t n_samples() const { return channels.empty() ? 0 : static_cast<std::int64_t>(channels[0].size()); }
};

FoaClip foa_from_wav(const std::string& path);

// (channels, T, bins) complex spectrogram, reflection-padded so that
// T = ceil(N / hop) and frame t is centered at sample t * hop.
struct Spectrogram {
    std::int64_t frames = 0;
    std::int64_t bins = 0;
    std::vector<std::complex<double>> data;  // 4 * frames * bins

    std::complex<double>& at(int ch, std::int64_t t, std::int64_t b) {
        return data[static_cast<std::size_t>((ch * frames + t) * bins + b)];
    }
    const std::complex<double>& at(int ch, std::int64_t t, std::int64_t b) const {
        return data[static_cast<std::size_t>((ch * frames + t) * bins + b)];
    }
};

Spectrogram stft(const FoaClip& clip, const FeatureConfig& cfg = {});

// Triangular mel filterbank, HTK mel scale, area-normalized (each triangle
// integrates to 1 over frequency). band_lo/band_hi give the covered bin range
// per band (half-open).
struct MelFilterbank {
    int n_mels = 0;
    int n_bins = 0;
    std::vector<double> weights;  // n_mels * n_bins
    std::vector<int> band_lo, band_hi;

    double w(int band, int bin) const {
        return weights[static_cast<std::size_t>(band) * n_bins + bin];
    }
};

MelFilterbank make_mel_filterbank(const FeatureConfig& cfg = {});

// (7, T, n_mels) input features: log-mel of W,Y,Z,X then Ix,Iy,Iz.
struct FeatureClip {
    std::vector<float> data;
    std::int64_t frames = 0;
    int channels = 7;
    int mels = 64;

    float& at(int ch, std::int64_t t, int m) {
        return data[static_cast<std::size_t>((ch * frames + t) * mels + m)];
    }
    float at(int ch, std::int64_t t, int m) const {
        return data[static_cast<std::size_t>((ch * frames + t) * mels + m)];
    }
    std::int64_t label_frames(const FeatureConfig& cfg) const {
        return (frames + cfg.label_hop - 1) / cfg.label_hop;
    }
};

// (4, T, n_mels) log-mel; channels in clip order.
std::vector<double> logmel(const Spectrogram& spec, const MelFilterbank& fb,
                           const FeatureConfig& cfg = {});

// (3, T, n_mels) normalized intensity vectors aggregated onto the mel bands.
std::vector<double> intensity_vectors(const Spectrogram& spec, const MelFilterbank& fb,
                                      const FeatureConfig& cfg = {});

FeatureClip extract_features(const FoaClip& clip, const FeatureConfig& cfg = {});

// Dense multi-ACCDOA target (frames, 3 tracks, 3 axes, K).
struct TargetTensor {
    std::vector<float> data;
    std::int64_t frames = 0;
    int classes = 13;

    float& at(std::int64_t t, int track, int axis, int k) {
        return data[static_cast<std::size_t>(((t * 3 + track) * 3 + axis) * classes + k)];
    }
    float at(std::int64_t t, int track, int axis, int k) const {
        return data[static_cast<std::size_t>(((t * 3 + track) * 3 + axis) * classes + k)];
    }
};

TargetTensor encode_target(const EventList& events, std::int64_t n_frames, int n_classes);

// 5 s training segments; the last partial segment is zero-padded.
struct SegmentView {
    std::vector<float> features;  // (7, segment_frames, n_mels)
    std::vector<float> target;    // (segment_label_frames, 3, 3, K)
};

std::vector<SegmentView> segment_clip(const FeatureClip& features, const TargetTensor& target,
                                      const FeatureConfig& cfg = {});

// ---------------------------------------------------------------------------
// feature cache on disk
// ---------------------------------------------------------------------------

struct DatasetClip {
    std::string name;
    FeatureClip features;
    TargetTensor target;
    EventList events;
};

struct Dataset {
    FeatureConfig cfg;
    int n_classes = 13;
    std::vector<DatasetClip> clips;
};

void save_feature_cache(const std::string& path, const DatasetClip& clip,
                        const FeatureConfig& cfg, int n_classes);
DatasetClip load_feature_cache(const std::string& path);

// Extract every wav/csv pair in `data_dir` (via manifest.json when present,
// otherwise by scanning *.wav) into `out_dir`, writing one cache file per
// clip plus an index.json.
int extract_directory(const std::string& data_dir, const std::string& out_dir,
                      const FeatureConfig& cfg, int n_classes);

Dataset load_feature_dir(const std::string& dir);

}  // namespace seld
