// Training engine: Adam optimizer, tri-stage learning-rate schedule, seeded
// shuffling and batching of 5 s segments, periodic evaluation, checkpointing.
// Fully reproducible for a fixed seed.
#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "seld/checkpoint.hpp"
#include "seld/features.hpp"
#include "seld/loss.hpp"
#include "seld/metrics.hpp"
#include "seld/model.hpp"
#include "seld/nn.hpp"

namespace seld {

struct TrainConfig {
    std::int64_t epochs = 500;
    std::int64_t batch_size = 32;
    double lr_peak = 0.001;
    double ramp_frac = 0.05;
    double hold_frac = 0.45;
    double decay_frac = 0.5;
    double final_lr_ratio = 0.01;  // cosine decays to lr_peak * ratio
    std::uint64_t seed = 1;
    std::int64_t eval_every = 25;
    double val_frac = 0.2;
    double grad_clip = 5.0;
    double decode_threshold = 0.5;
    std::string precision = "f32";

    void validate() const {
        const double sum = ramp_frac + hold_frac + decay_frac;
        if (std::abs(sum - 1.0) > 1e-9)
            throw ConfigError("tri-stage fractions must sum to 1, got " + std::to_string(sum));
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (val_frac < 0.0 || val_frac >= 1.0) throw ConfigError("val_frac must be in [0,1)");
        if (precision != "f32" && precision != "f64")
            throw ConfigError("precision must be f32 or f64");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"epochs", epochs},
                              {"batch_size", batch_size},
                              {"lr_peak", lr_peak},
                              {"ramp_frac", ramp_frac},
                              {"hold_frac", hold_frac},
                              {"decay_frac", decay_frac},
                              {"final_lr_ratio", final_lr_ratio},
                              {"seed", seed},
                              {"eval_every", eval_every},
                              {"val_frac", val_frac},
                              {"grad_clip", grad_clip},
                              {"decode_threshold", decode_threshold},
                              {"precision", precision}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr_peak = j.value("lr_peak", c.lr_peak);
        c.ramp_frac = j.value("ramp_frac", c.ramp_frac);
        c.hold_frac = j.value("hold_frac", c.hold_frac);
        c.decay_frac = j.value("decay_frac", c.decay_frac);
        c.final_lr_ratio = j.value("final_lr_ratio", c.final_lr_ratio);
        c.seed = j.value("seed", c.seed);
        c.eval_every = j.value("eval_every", c.eval_every);
        c.val_frac = j.value("val_frac", c.val_frac);
        c.grad_clip = j.value("grad_clip", c.grad_clip);
        c.decode_threshold = j.value("decode_threshold", c.decode_threshold);
        c.precision = j.value("precision", c.precision);
        c.validate();
        return c;
    }
};

// Tri-stage schedule over optimizer steps [0, total): linear ramp 0 -> peak,
// hold at peak, cosine decay to peak * final_lr_ratio (reached exactly at the
// final step).
inline double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg) {
    if (total_steps < 1) throw ConfigError("lr_at: total_steps must be >= 1");
    step = std::clamp<std::int64_t>(step, 0, total_steps - 1);
    const std::int64_t ramp = static_cast<std::int64_t>(
        std::llround(cfg.ramp_frac * static_cast<double>(total_steps)));
    const std::int64_t hold = static_cast<std::int64_t>(
        std::llround(cfg.hold_frac * static_cast<double>(total_steps)));
    const double low = cfg.lr_peak * cfg.final_lr_ratio;
    if (step < ramp)
        return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(ramp);
    if (step < ramp + hold) return cfg.lr_peak;
    const std::int64_t decay_start = ramp + hold;
    const std::int64_t decay_span = total_steps - 1 - decay_start;
    if (decay_span <= 0) return low;
    const double u = static_cast<double>(step - decay_start) / static_cast<double>(decay_span);
    return low + 0.5 * (cfg.lr_peak - low) * (1.0 + std::cos(M_PI * u));
}

// Standard Adam, beta = (0.9, 0.999), eps = 1e-8, bias-corrected.
template <typename T>
struct AdamOptimizer {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t t = 0;
    std::vector<std::vector<T>> m, v;

    void init(const std::vector<NamedTensor<T>>& params) {
        m.clear();
        v.clear();
        t = 0;
        for (const auto& p : params) {
            const std::size_t n = p.trainable ? static_cast<std::size_t>(p.tensor.numel()) : 0;
            m.emplace_back(n, T(0));
            v.emplace_back(n, T(0));
        }
    }

    void step(std::vector<NamedTensor<T>>& params, double lr) {
        if (m.size() != params.size()) throw ConfigError("adam: optimizer not initialized");
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            auto& p = params[pi];
            if (!p.trainable || !p.tensor.has_grad()) continue;
            const auto& g = p.tensor.grad();
            T* w = p.tensor.data();
            auto& mi = m[pi];
            auto& vi = v[pi];
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double gd = static_cast<double>(g[i]);
                const double md = beta1 * static_cast<double>(mi[i]) + (1.0 - beta1) * gd;
                const double vd = beta2 * static_cast<double>(vi[i]) + (1.0 - beta2) * gd * gd;
                mi[i] = static_cast<T>(md);
                vi[i] = static_cast<T>(vd);
                const double mhat = md / bc1;
                const double vhat = vd / bc2;
                w[i] = static_cast<T>(static_cast<double>(w[i]) -
                                      lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }
};

struct TrainAbort : std::runtime_error {
    explicit TrainAbort(const std::string& msg) : std::runtime_error(msg) {}
};

struct EpochRecord {
    std::int64_t epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::optional<MetricsReport> eval;
};

struct RunRecord {
    std::vector<EpochRecord> epochs;
    std::int64_t best_epoch = -1;
    double best_seld = std::numeric_limits<double>::infinity();
    std::int64_t n_params = 0;
    std::int64_t total_steps = 0;
};

namespace detail {

inline std::string fmt_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline nlohmann::json history_json(const RunRecord& rec) {
    nlohmann::json h = nlohmann::json::array();
    for (const auto& e : rec.epochs) {
        nlohmann::json row{{"epoch", e.epoch}, {"loss", e.loss}, {"lr", e.lr}};
        if (e.eval) {
            row["ER"] = e.eval->er;
            row["F"] = e.eval->f;
            row["LE"] = e.eval->le_deg;
            row["LR"] = e.eval->lr;
            row["SELD"] = e.eval->seld_score;
        }
        h.push_back(row);
    }
    return h;
}

}  // namespace detail

// One training segment materialized for batching.
struct TrainSegment {
    const DatasetClip* clip = nullptr;
    std::vector<float> features;  // (7, segment_frames, mels)
    std::vector<float> target;    // (label frames, 3, 3, K)
};

template <typename T>
struct SegmentBatcher {
    const FeatureConfig* cfg;
    int n_classes;
    std::int64_t seg_t, seg_l, mels;

    TensorT<T> features(const std::vector<const TrainSegment*>& batch) const {
        const std::int64_t b = static_cast<std::int64_t>(batch.size());
        std::vector<T> data(static_cast<std::size_t>(b * 7 * seg_t * mels));
        for (std::int64_t i = 0; i < b; ++i) {
            const auto& src = batch[static_cast<std::size_t>(i)]->features;
            T* dst = data.data() + i * 7 * seg_t * mels;
            for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<T>(src[j]);
        }
        return TensorT<T>::from({b, 7, seg_t, mels}, std::move(data));
    }

    ClassFrameTargets target_sets(const std::vector<const TrainSegment*>& batch) const {
        const std::int64_t b = static_cast<std::int64_t>(batch.size());
        std::vector<T> data(static_cast<std::size_t>(b * seg_l * 3 * 3 * n_classes));
        for (std::int64_t i = 0; i < b; ++i) {
            const auto& src = batch[static_cast<std::size_t>(i)]->target;
            T* dst = data.data() + i * seg_l * 3 * 3 * n_classes;
            for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<T>(src[j]);
        }
        TensorT<T> dense = TensorT<T>::from({b, seg_l, 3, 3, n_classes}, std::move(data));
        return target_sets_from_dense(dense);
    }
};

// Evaluate the model over whole clips: forward every segment in eval mode,
// stitch, crop the zero-padded tail, decode, and score against the metadata.
template <typename T>
MetricsReport evaluate_model(CstFormer<T>& model, const Dataset& data,
                             const std::vector<std::size_t>& clip_indices, double threshold,
                             std::int64_t max_batch = 16) {
    NoGradGuard ng;
    SeldEvaluator evaluator(data.n_classes);
    const std::int64_t seg_t = data.cfg.segment_frames;
    const std::int64_t seg_l = data.cfg.segment_label_frames();
    const std::int64_t out_w = 3 * 3 * data.n_classes;
    DecodeOptions dopts;
    dopts.threshold = threshold;
    for (std::size_t ci : clip_indices) {
        const DatasetClip& clip = data.clips[ci];
        const auto segments = segment_clip(clip.features, clip.target, data.cfg);
        const std::int64_t true_frames = clip.target.frames;
        std::vector<float> stitched(static_cast<std::size_t>(true_frames * out_w), 0.0f);
        for (std::size_t s0 = 0; s0 < segments.size();
             s0 += static_cast<std::size_t>(max_batch)) {
            const std::size_t s1 = std::min(segments.size(), s0 + static_cast<std::size_t>(max_batch));
            const std::int64_t b = static_cast<std::int64_t>(s1 - s0);
            std::vector<T> data_in(static_cast<std::size_t>(b * 7 * seg_t * clip.features.mels));
            for (std::int64_t i = 0; i < b; ++i) {
                const auto& src = segments[s0 + static_cast<std::size_t>(i)].features;
                T* dst = data_in.data() + i * 7 * seg_t * clip.features.mels;
                for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<T>(src[j]);
            }
            TensorT<T> x = TensorT<T>::from({b, 7, seg_t, clip.features.mels}, std::move(data_in));
            TensorT<T> y = model.forward(x, /*training=*/false);
            for (std::int64_t i = 0; i < b; ++i) {
                const std::int64_t seg_idx = static_cast<std::int64_t>(s0) + i;
                for (std::int64_t t = 0; t < seg_l; ++t) {
                    const std::int64_t frame = seg_idx * seg_l + t;
                    if (frame >= true_frames) break;
                    const T* src = y.data() + (i * seg_l + t) * out_w;
                    float* dst = stitched.data() + frame * out_w;
                    for (std::int64_t j = 0; j < out_w; ++j) dst[j] = static_cast<float>(src[j]);
                }
            }
        }
        DecodedEvents pred =
            decode_multi_accdoa(stitched.data(), true_frames, data.n_classes, dopts);
        evaluator.add_clip(pred, clip.events);
    }
    return evaluator.report();
}

// Full training run. Writes metrics.csv, log.txt, config.json, checkpoints/
// under out_dir (unless out_dir is empty, for in-memory runs).
template <typename T>
RunRecord train_model(const ModelConfig& mcfg, const TrainConfig& tcfg, const Dataset& data,
                      const std::string& out_dir, std::ostream& log) {
    mcfg.validate();
    tcfg.validate();
    if (data.clips.empty()) throw ConfigError("train: dataset is empty");

    namespace fsys = std::filesystem;
    std::ofstream metrics_csv;
    if (!out_dir.empty()) {
        fsys::create_directories(out_dir);
        fsys::create_directories(fsys::path(out_dir) / "checkpoints");
        std::ofstream cfg_os(fsys::path(out_dir) / "config.json");
        nlohmann::json cfg_json{{"model", mcfg.to_json()}, {"train", tcfg.to_json()}};
        cfg_os << cfg_json.dump(2) << "\n";
        metrics_csv.open(fsys::path(out_dir) / "metrics.csv");
        metrics_csv << "epoch,loss,lr,ER,F,LE,LR,SELD\n";
    }

    // clip-level split
    std::vector<std::size_t> clip_order(data.clips.size());
    for (std::size_t i = 0; i < clip_order.size(); ++i) clip_order[i] = i;
    CounterRng split_rng(tcfg.seed, 0x5D117);
    split_rng.shuffle(clip_order.begin(), clip_order.end());
    std::size_t n_val = static_cast<std::size_t>(
        std::llround(tcfg.val_frac * static_cast<double>(data.clips.size())));
    if (tcfg.val_frac > 0.0 && n_val == 0 && data.clips.size() > 1) n_val = 1;
    std::vector<std::size_t> val_clips(clip_order.begin(), clip_order.begin() + n_val);
    std::vector<std::size_t> train_clips(clip_order.begin() + n_val, clip_order.end());
    if (train_clips.empty()) throw ConfigError("train: no clips left for training after split");
    std::sort(val_clips.begin(), val_clips.end());
    std::sort(train_clips.begin(), train_clips.end());
    const std::vector<std::size_t>& eval_clips = val_clips.empty() ? train_clips : val_clips;

    // materialize segments
    std::vector<TrainSegment> segments;
    for (std::size_t ci : train_clips) {
        const DatasetClip& clip = data.clips[ci];
        auto views = segment_clip(clip.features, clip.target, data.cfg);
        for (auto& v : views) {
            TrainSegment seg;
            seg.clip = &clip;
            seg.features = std::move(v.features);
            seg.target = std::move(v.target);
            segments.push_back(std::move(seg));
        }
    }
    const std::int64_t n_segments = static_cast<std::int64_t>(segments.size());
    const std::int64_t steps_per_epoch = (n_segments + tcfg.batch_size - 1) / tcfg.batch_size;
    const std::int64_t total_steps = steps_per_epoch * tcfg.epochs;

    CstFormer<T> model(mcfg, tcfg.seed);
    auto params = model.named_tensors();
    AdamOptimizer<T> adam;
    adam.init(params);

    RunRecord rec;
    rec.n_params = count_trainable(params);
    rec.total_steps = total_steps;
    log << "model: variant=" << to_string(mcfg.variant) << " cmt=" << (mcfg.use_cmt ? "on" : "off")
        << " pooling=" << to_string(mcfg.pooling) << " params=" << rec.n_params << "\n";
    log << "data: " << data.clips.size() << " clips, " << n_segments << " train segments, "
        << eval_clips.size() << (val_clips.empty() ? " eval clips (training split)" : " val clips")
        << ", " << steps_per_epoch << " steps/epoch, " << total_steps << " total steps\n";

    SegmentBatcher<T> batcher{&data.cfg, data.n_classes, data.cfg.segment_frames,
                              data.cfg.segment_label_frames(), data.clips[0].features.mels};

    CounterRng shuffle_rng(tcfg.seed, 0xBA7C4);
    std::vector<std::size_t> order(segments.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::int64_t global_step = 0;
    for (std::int64_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order.begin(), order.end());
        double loss_sum = 0.0;
        double last_lr = 0.0;
        for (std::int64_t b0 = 0; b0 < n_segments; b0 += tcfg.batch_size) {
            const std::int64_t b1 = std::min(n_segments, b0 + tcfg.batch_size);
            std::vector<const TrainSegment*> batch;
            for (std::int64_t i = b0; i < b1; ++i)
                batch.push_back(&segments[order[static_cast<std::size_t>(i)]]);
            TensorT<T> x = batcher.features(batch);
            x.set_requires_grad(false);
            ClassFrameTargets targets = batcher.target_sets(batch);

            TensorT<T> out = model.forward(x, /*training=*/true);
            TensorT<T> pred = reshape(out, {static_cast<std::int64_t>(batch.size()),
                                            batcher.seg_l, 3, 3, data.n_classes});
            TensorT<T> loss = adpit_loss(pred, targets);
            const double loss_v = static_cast<double>(loss.item());
            const double lr = lr_at(global_step, total_steps, tcfg);
            if (!std::isfinite(loss_v)) {
                std::string msg = "non-finite loss at epoch " + std::to_string(epoch) +
                                  ", batch " + std::to_string(b0 / tcfg.batch_size) +
                                  ", lr " + detail::fmt_g(lr);
                log << "ABORT: " << msg << "\n";
                throw TrainAbort(msg);
            }
            zero_all_grads(params);
            loss.backward();
            const double gnorm = grad_global_norm(params);
            if (!std::isfinite(gnorm)) {
                std::string msg = "non-finite gradient norm at epoch " + std::to_string(epoch) +
                                  ", batch " + std::to_string(b0 / tcfg.batch_size) + ", lr " +
                                  detail::fmt_g(lr) + ", loss " + detail::fmt_g(loss_v);
                log << "ABORT: " << msg << "\n";
                throw TrainAbort(msg);
            }
            if (tcfg.grad_clip > 0.0) clip_grad_norm(params, tcfg.grad_clip);
            adam.step(params, lr);
            last_lr = lr;
            ++global_step;
            loss_sum += loss_v * static_cast<double>(batch.size());
        }
        const double epoch_loss = loss_sum / static_cast<double>(n_segments);

        EpochRecord er;
        er.epoch = epoch;
        er.loss = epoch_loss;
        er.lr = last_lr;
        const bool do_eval = tcfg.eval_every > 0 &&
                             ((epoch + 1) % tcfg.eval_every == 0 || epoch + 1 == tcfg.epochs);
        if (do_eval) {
            er.eval = evaluate_model(model, data, eval_clips, tcfg.decode_threshold);
            if (er.eval->seld_score < rec.best_seld) {
                rec.best_seld = er.eval->seld_score;
                rec.best_epoch = epoch;
                if (!out_dir.empty()) {
                    rec.epochs.push_back(er);  // include the current epoch in the history
                    save_checkpoint((fsys::path(out_dir) / "checkpoints" / "best.ckpt").string(),
                                    model, epoch, detail::history_json(rec));
                    rec.epochs.pop_back();
                }
            }
        }
        rec.epochs.push_back(er);

        if (metrics_csv.is_open()) {
            metrics_csv << epoch << "," << detail::fmt_g(epoch_loss) << ","
                        << detail::fmt_g(last_lr);
            if (er.eval)
                metrics_csv << "," << detail::fmt_g(er.eval->er) << "," << detail::fmt_g(er.eval->f)
                            << "," << detail::fmt_g(er.eval->le_deg) << ","
                            << detail::fmt_g(er.eval->lr) << ","
                            << detail::fmt_g(er.eval->seld_score);
            else
                metrics_csv << ",,,,,";
            metrics_csv << "\n";
        }
        log << "epoch " << epoch << " loss " << detail::fmt_g(epoch_loss) << " lr "
            << detail::fmt_g(last_lr);
        if (er.eval) log << " SELD " << detail::fmt_g(er.eval->seld_score);
        log << "\n";
    }

    if (!out_dir.empty())
        save_checkpoint((fsys::path(out_dir) / "checkpoints" / "last.ckpt").string(), model,
                        tcfg.epochs - 1, detail::history_json(rec));
    return rec;
}

}  // namespace seld
