#include "seld/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "json.hpp"

namespace seld {

// arccos of the clamped dot product, evaluated through atan2 of the cross
// product magnitude so the result stays accurate near 0 and 180 (plain acos
// loses ~1e-8 rad to rounding there). Bitwise-equal and antipodal inputs
// return exactly 0 and 180; FP contraction would otherwise leave ~1e-15
// residue in the cross product.
double angular_error_deg(const std::array<double, 3>& u, const std::array<double, 3>& v) {
    if (u[0] == v[0] && u[1] == v[1] && u[2] == v[2]) return 0.0;
    if (u[0] == -v[0] && u[1] == -v[1] && u[2] == -v[2]) return 180.0;
    const double dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    const double cx = u[1] * v[2] - u[2] * v[1];
    const double cy = u[2] * v[0] - u[0] * v[2];
    const double cz = u[0] * v[1] - u[1] * v[0];
    const double cross = std::sqrt(cx * cx + cy * cy + cz * cz);
    return std::atan2(cross, dot) * kRadToDeg;
}

namespace {

template <typename S>
DecodedEvents decode_impl(const S* pred, std::int64_t frames, std::int64_t classes,
                          const DecodeOptions& opts) {
    DecodedEvents out;
    const std::int64_t cell_stride = 3 * 3 * classes;
    for (std::int64_t t = 0; t < frames; ++t) {
        const S* base = pred + t * cell_stride;
        for (std::int64_t k = 0; k < classes; ++k) {
            // clusters of active tracks, merged when closer than merge_deg
            struct Cluster {
                std::array<double, 3> sum{0, 0, 0};
                double norm_sum = 0.0;
                int members = 0;
                std::array<double, 3> mean_dir{1, 0, 0};
            };
            std::vector<Cluster> clusters;
            for (int track = 0; track < 3; ++track) {
                const double x = static_cast<double>(base[(track * 3 + 0) * classes + k]);
                const double y = static_cast<double>(base[(track * 3 + 1) * classes + k]);
                const double z = static_cast<double>(base[(track * 3 + 2) * classes + k]);
                const double norm = std::sqrt(x * x + y * y + z * z);
                if (norm <= opts.threshold) continue;
                const std::array<double, 3> dir{x / norm, y / norm, z / norm};
                bool merged = false;
                for (auto& c : clusters) {
                    if (angular_error_deg(c.mean_dir, dir) < opts.merge_deg) {
                        c.sum[0] += dir[0];
                        c.sum[1] += dir[1];
                        c.sum[2] += dir[2];
                        c.norm_sum += norm;
                        c.members += 1;
                        const double n = std::sqrt(c.sum[0] * c.sum[0] + c.sum[1] * c.sum[1] +
                                                   c.sum[2] * c.sum[2]);
                        if (n > 0) c.mean_dir = {c.sum[0] / n, c.sum[1] / n, c.sum[2] / n};
                        merged = true;
                        break;
                    }
                }
                if (!merged) {
                    Cluster c;
                    c.sum = dir;
                    c.norm_sum = norm;
                    c.members = 1;
                    c.mean_dir = dir;
                    clusters.push_back(c);
                }
            }
            for (const auto& c : clusters) {
                DecodedEvent e;
                e.frame = t;
                e.class_idx = static_cast<int>(k);
                e.dir = c.mean_dir;
                e.confidence = c.norm_sum / c.members;
                out.push_back(e);
            }
        }
    }
    return out;
}

}  // namespace

DecodedEvents decode_multi_accdoa(const float* pred, std::int64_t frames, std::int64_t classes,
                                  const DecodeOptions& opts) {
    return decode_impl(pred, frames, classes, opts);
}

DecodedEvents decode_multi_accdoa(const double* pred, std::int64_t frames, std::int64_t classes,
                                  const DecodeOptions& opts) {
    return decode_impl(pred, frames, classes, opts);
}

DecodedEvents decoded_from_events(const EventList& events) {
    DecodedEvents out;
    out.reserve(events.size());
    for (const auto& e : events) {
        DecodedEvent d;
        d.frame = e.frame;
        d.class_idx = e.class_idx;
        d.dir = doa_to_unit(e.azimuth_deg, e.elevation_deg);
        d.confidence = 1.0;
        out.push_back(d);
    }
    return out;
}

EventList events_from_decoded(const DecodedEvents& decoded) {
    EventList out;
    out.reserve(decoded.size());
    std::map<std::pair<std::int64_t, int>, int> track_counter;
    for (const auto& d : decoded) {
        Event e;
        e.frame = d.frame;
        e.class_idx = d.class_idx;
        e.track = track_counter[{d.frame, d.class_idx}]++;
        e.azimuth_deg = unit_to_azimuth_deg(d.dir);
        e.elevation_deg = unit_to_elevation_deg(d.dir);
        out.push_back(e);
    }
    return out;
}

namespace {

// Minimum-total-angular-error assignment between <=3 predictions and <=3
// references: enumerate all injections of the smaller side into the larger.
struct Assignment {
    std::vector<std::pair<int, int>> pairs;  // (pred index, ref index)
    double total = 0.0;
};

void enumerate_assignments(const std::vector<std::array<double, 3>>& preds,
                           const std::vector<std::array<double, 3>>& refs, std::size_t depth,
                           std::vector<int>& ref_of_pred, std::vector<bool>& used,
                           Assignment& current, Assignment& best, bool& have_best) {
    const std::size_t n_pair = std::min(preds.size(), refs.size());
    if (current.pairs.size() == n_pair) {
        if (!have_best || current.total < best.total) {
            best = current;
            have_best = true;
        }
        return;
    }
    if (depth >= preds.size()) return;
    // either skip this prediction (only allowed if enough picks remain)
    const std::size_t remaining_preds = preds.size() - depth - 1;
    if (current.pairs.size() + remaining_preds >= n_pair)
        enumerate_assignments(preds, refs, depth + 1, ref_of_pred, used, current, best, have_best);
    for (std::size_t r = 0; r < refs.size(); ++r) {
        if (used[r]) continue;
        used[r] = true;
        const double err = angular_error_deg(preds[depth], refs[r]);
        current.pairs.push_back({static_cast<int>(depth), static_cast<int>(r)});
        current.total += err;
        enumerate_assignments(preds, refs, depth + 1, ref_of_pred, used, current, best, have_best);
        current.total -= err;
        current.pairs.pop_back();
        used[r] = false;
    }
}

Assignment best_assignment(const std::vector<std::array<double, 3>>& preds,
                           const std::vector<std::array<double, 3>>& refs) {
    Assignment best, current;
    bool have_best = false;
    std::vector<int> ref_of_pred(preds.size(), -1);
    std::vector<bool> used(refs.size(), false);
    enumerate_assignments(preds, refs, 0, ref_of_pred, used, current, best, have_best);
    return best;
}

}  // namespace

SeldEvaluator::SeldEvaluator(int n_classes, const EvaluateOptions& opts)
    : n_classes_(n_classes), opts_(opts), per_class_(static_cast<std::size_t>(n_classes)) {}

void SeldEvaluator::add_clip(const DecodedEvents& pred, const EventList& ref) {
    std::int64_t max_frame = -1;
    for (const auto& p : pred) max_frame = std::max(max_frame, p.frame);
    for (const auto& r : ref) max_frame = std::max(max_frame, r.frame);
    if (max_frame < 0) return;
    const std::int64_t n_frames = max_frame + 1;
    const std::int64_t n_segments = (n_frames + opts_.segment_frames - 1) / opts_.segment_frames;

    // bucket by (frame, class)
    std::map<std::pair<std::int64_t, int>, std::vector<std::array<double, 3>>> pred_by, ref_by;
    for (const auto& p : pred) {
        if (p.class_idx < 0 || p.class_idx >= n_classes_) continue;
        pred_by[{p.frame, p.class_idx}].push_back(p.dir);
    }
    for (const auto& r : ref) {
        if (r.class_idx < 0 || r.class_idx >= n_classes_) continue;
        ref_by[{r.frame, r.class_idx}].push_back(doa_to_unit(r.azimuth_deg, r.elevation_deg));
    }

    std::vector<std::int64_t> seg_fp(static_cast<std::size_t>(n_segments), 0);
    std::vector<std::int64_t> seg_fn(static_cast<std::size_t>(n_segments), 0);
    std::vector<std::int64_t> seg_nref(static_cast<std::size_t>(n_segments), 0);

    for (std::int64_t t = 0; t < n_frames; ++t) {
        const std::int64_t seg = t / opts_.segment_frames;
        for (int k = 0; k < n_classes_; ++k) {
            static const std::vector<std::array<double, 3>> kEmpty;
            auto pit = pred_by.find({t, k});
            auto rit = ref_by.find({t, k});
            const auto& ps = pit != pred_by.end() ? pit->second : kEmpty;
            const auto& rs = rit != ref_by.end() ? rit->second : kEmpty;
            if (ps.empty() && rs.empty()) continue;
            ClassCounts& cc = per_class_[static_cast<std::size_t>(k)];
            cc.n_pred += static_cast<std::int64_t>(ps.size());
            cc.n_ref += static_cast<std::int64_t>(rs.size());
            seg_nref[static_cast<std::size_t>(seg)] += static_cast<std::int64_t>(rs.size());

            Assignment a = best_assignment(ps, rs);
            std::int64_t frame_tp = 0;
            for (const auto& pr : a.pairs) {
                const double err = angular_error_deg(ps[static_cast<std::size_t>(pr.first)],
                                                     rs[static_cast<std::size_t>(pr.second)]);
                cc.matched += 1;
                le_sum_ += err;
                le_pairs_ += 1;
                if (err <= opts_.match_threshold_deg) frame_tp += 1;
            }
            const std::int64_t fp =
                static_cast<std::int64_t>(ps.size()) - frame_tp;  // unmatched or beyond the gate
            const std::int64_t fn = static_cast<std::int64_t>(rs.size()) - frame_tp;
            cc.tp += frame_tp;
            cc.fp += fp;
            cc.fn += fn;
            seg_fp[static_cast<std::size_t>(seg)] += fp;
            seg_fn[static_cast<std::size_t>(seg)] += fn;
        }
    }

    for (std::int64_t s = 0; s < n_segments; ++s) {
        const std::int64_t sub = std::min(seg_fn[static_cast<std::size_t>(s)],
                                          seg_fp[static_cast<std::size_t>(s)]);
        seg_s_ += sub;
        seg_d_ += seg_fn[static_cast<std::size_t>(s)] - sub;
        seg_i_ += seg_fp[static_cast<std::size_t>(s)] - sub;
        seg_n_ += seg_nref[static_cast<std::size_t>(s)];
    }
}

MetricsReport SeldEvaluator::report() const {
    MetricsReport r;
    r.per_class = per_class_;
    r.substitutions = seg_s_;
    r.deletions = seg_d_;
    r.insertions = seg_i_;
    r.n_ref = seg_n_;

    const std::int64_t errors = seg_s_ + seg_d_ + seg_i_;
    // with an empty reference the rate is driven directly by insertions
    r.er = seg_n_ > 0 ? static_cast<double>(errors) / static_cast<double>(seg_n_)
                      : static_cast<double>(errors);

    double f_sum = 0.0, lr_sum = 0.0;
    std::int64_t f_classes = 0, lr_classes = 0;
    for (const auto& cc : per_class_) {
        if (cc.n_ref == 0 && cc.n_pred == 0) continue;  // absent everywhere: excluded
        const double denom = static_cast<double>(2 * cc.tp + cc.fp + cc.fn);
        f_sum += denom > 0 ? 2.0 * static_cast<double>(cc.tp) / denom : 0.0;
        f_classes += 1;
        if (cc.n_ref > 0) {
            lr_sum += static_cast<double>(cc.matched) / static_cast<double>(cc.n_ref);
            lr_classes += 1;
        }
    }
    r.f = f_classes > 0 ? f_sum / static_cast<double>(f_classes) : 1.0;
    r.lr = lr_classes > 0 ? lr_sum / static_cast<double>(lr_classes) : 1.0;
    if (le_pairs_ > 0) {
        r.le_deg = le_sum_ / static_cast<double>(le_pairs_);
        r.le_defined = true;
    } else if (seg_n_ == 0 && r.insertions == 0) {
        // vacuous perfection: nothing to localize on either side
        r.le_deg = 0.0;
        r.le_defined = true;
    } else {
        r.le_deg = 180.0;
        r.le_defined = false;
    }
    r.seld_score = (r.er + (1.0 - r.f) + r.le_deg / 180.0 + (1.0 - r.lr)) / 4.0;
    return r;
}

MetricsReport evaluate_seld(const DecodedEvents& pred, const EventList& ref, int n_classes,
                            const EvaluateOptions& opts) {
    SeldEvaluator ev(n_classes, opts);
    ev.add_clip(pred, ref);
    return ev.report();
}

std::string MetricsReport::to_text() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << "ER:   " << er << "\n";
    os << "F:    " << f << "\n";
    os << "LE:   " << le_deg << (le_defined ? "" : "  (no matched pairs; reported as 180)") << "\n";
    os << "LR:   " << lr << "\n";
    os << "SELD: " << seld_score << "\n";
    os << "counts: S=" << substitutions << " D=" << deletions << " I=" << insertions
       << " Nref=" << n_ref << "\n";
    return os.str();
}

std::string MetricsReport::to_json_string() const {
    nlohmann::json j{{"ER", er},
                     {"F", f},
                     {"LE", le_deg},
                     {"LR", lr},
                     {"SELD_score", seld_score},
                     {"LE_defined", le_defined},
                     {"substitutions", substitutions},
                     {"deletions", deletions},
                     {"insertions", insertions},
                     {"n_ref", n_ref}};
    nlohmann::json classes = nlohmann::json::array();
    for (std::size_t k = 0; k < per_class.size(); ++k) {
        const auto& cc = per_class[k];
        if (cc.n_ref == 0 && cc.n_pred == 0) continue;
        classes.push_back({{"class", k},
                           {"TP", cc.tp},
                           {"FP", cc.fp},
                           {"FN", cc.fn},
                           {"matched", cc.matched},
                           {"n_ref", cc.n_ref},
                           {"n_pred", cc.n_pred}});
    }
    j["per_class"] = classes;
    return j.dump(2);
}

}  // namespace seld
