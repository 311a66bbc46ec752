// Multi-ACCDOA decoding and the four SELD metrics (ER, F, LE, LR) with their
// aggregate score. Matching is per class and frame by minimum-total-angular-
// error assignment; error-rate bookkeeping aggregates substitutions,
// deletions, and insertions over 1 s segments.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "seld/events.hpp"

namespace seld {

struct DecodedEvent {
    std::int64_t frame = 0;
    int class_idx = 0;
    std::array<double, 3> dir{1.0, 0.0, 0.0};  // unit DoA
    double confidence = 0.0;                   // mean vector norm of merged tracks
};

using DecodedEvents = std::vector<DecodedEvent>;

struct DecodeOptions {
    double threshold = 0.5;    // activity: vector norm above this
    double merge_deg = 15.0;   // near-duplicate tracks closer than this merge
};

// pred: dense (T, 3 tracks, 3 axes, K) row-major.
DecodedEvents decode_multi_accdoa(const float* pred, std::int64_t frames, std::int64_t classes,
                                  const DecodeOptions& opts = {});
DecodedEvents decode_multi_accdoa(const double* pred, std::int64_t frames, std::int64_t classes,
                                  const DecodeOptions& opts = {});

// arccos of the clamped dot product, in degrees.
double angular_error_deg(const std::array<double, 3>& u, const std::array<double, 3>& v);

DecodedEvents decoded_from_events(const EventList& events);
EventList events_from_decoded(const DecodedEvents& decoded);

struct ClassCounts {
    std::int64_t tp = 0;       // location-dependent true positives
    std::int64_t fp = 0;
    std::int64_t fn = 0;
    std::int64_t matched = 0;  // class-matched pairs regardless of the angular gate
    std::int64_t n_ref = 0;
    std::int64_t n_pred = 0;
};

struct MetricsReport {
    double er = 0.0;
    double f = 1.0;
    double le_deg = 0.0;
    double lr = 1.0;
    double seld_score = 0.0;
    bool le_defined = false;   // false -> no matched pairs, le reported as 180
    std::int64_t substitutions = 0;
    std::int64_t deletions = 0;
    std::int64_t insertions = 0;
    std::int64_t n_ref = 0;
    std::vector<ClassCounts> per_class;

    std::string to_text() const;
    std::string to_json_string() const;
};

struct EvaluateOptions {
    double match_threshold_deg = 20.0;  // location-dependent TP gate
    std::int64_t segment_frames = 10;   // 1 s of 100 ms label frames
};

MetricsReport evaluate_seld(const DecodedEvents& pred, const EventList& ref, int n_classes,
                            const EvaluateOptions& opts = {});

// Streaming accumulator so multi-clip evaluation produces a single report.
class SeldEvaluator {
public:
    explicit SeldEvaluator(int n_classes, const EvaluateOptions& opts = {});
    void add_clip(const DecodedEvents& pred, const EventList& ref);
    MetricsReport report() const;

private:
    int n_classes_;
    EvaluateOptions opts_;
    std::vector<ClassCounts> per_class_;
    double le_sum_ = 0.0;
    std::int64_t le_pairs_ = 0;
    std::int64_t seg_s_ = 0, seg_d_ = 0, seg_i_ = 0, seg_n_ = 0;
};

}  // namespace seld
