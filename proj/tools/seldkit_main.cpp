// seldkit: command-line front end for the SELD toolkit.
//   synth     generate a labeled synthetic FoA dataset (wav + csv + manifest)
//   extract   convert wav/csv pairs into feature caches
//   train     train a model on extracted features
//   evaluate  score a prediction csv against a reference csv
//   infer     run a checkpoint over a wav file and emit a prediction csv
//   selftest  run the fast invariant suite
//
// Exit codes: 0 success, 1 user error, 2 internal invariant violation.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <streambuf>

#include "CLI11.hpp"
#include "json.hpp"
#include "seld/checkpoint.hpp"
#include "seld/csv.hpp"
#include "seld/features.hpp"
#include "seld/metrics.hpp"
#include "seld/selftest.hpp"
#include "seld/wav.hpp"
#include "seld/synth.hpp"
#include "seld/train.hpp"

namespace fs = std::filesystem;
using namespace seld;

namespace {

// mirrors everything written to the run log onto stdout
class TeeBuf : public std::streambuf {
public:
    TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

protected:
    int overflow(int c) override {
        if (c == EOF) return !EOF;
        const int r1 = a_->sputc(static_cast<char>(c));
        const int r2 = b_->sputc(static_cast<char>(c));
        return (r1 == EOF || r2 == EOF) ? EOF : c;
    }
    int sync() override {
        const int r1 = a_->pubsync();
        const int r2 = b_->pubsync();
        return (r1 == 0 && r2 == 0) ? 0 : -1;
    }

private:
    std::streambuf* a_;
    std::streambuf* b_;
};

int cmd_synth(const std::string& out_dir, int clips, std::uint64_t seed,
              const std::string& overlap, double duration, int classes, double noise_snr,
              bool with_noise) {
    MakeDatasetOptions opts;
    opts.n_clips = clips;
    opts.seed = seed;
    opts.duration_s = duration;
    opts.profile = OverlapProfile::from_string(overlap, classes);
    if (with_noise) opts.noise_snr_db = noise_snr;
    make_dataset(out_dir, opts);
    std::cout << "wrote " << clips << " clips (overlap " << overlap << ", seed " << seed
              << ") to " << out_dir << "\n";
    return 0;
}

int cmd_extract(const std::string& data_dir, const std::string& out_dir, int classes) {
    FeatureConfig cfg;
    const int n = extract_directory(data_dir, out_dir, cfg, classes);
    std::cout << "extracted " << n << " clips to " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out_dir,
              const std::string& config_path, const std::string& variant, int cmt_flag,
              const std::string& pooling, std::int64_t epochs, std::int64_t batch,
              std::uint64_t seed, std::int64_t eval_every, double val_frac, double lr_peak,
              double dropout) {
    ModelConfig mcfg;
    TrainConfig tcfg;
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw seld::FileError("cannot open config file: " + config_path);
        nlohmann::json j;
        in >> j;
        if (j.contains("model")) mcfg = ModelConfig::from_json(j.at("model"));
        if (j.contains("train")) tcfg = TrainConfig::from_json(j.at("train"));
    }
    if (!variant.empty()) mcfg.variant = variant_from_string(variant);
    if (cmt_flag >= 0) mcfg.use_cmt = cmt_flag != 0;
    if (!pooling.empty()) mcfg.pooling = pooling_from_string(pooling);
    if (epochs > 0) tcfg.epochs = epochs;
    if (batch > 0) tcfg.batch_size = batch;
    if (seed > 0) tcfg.seed = seed;
    if (eval_every >= 0) tcfg.eval_every = eval_every;
    if (val_frac >= 0.0) tcfg.val_frac = val_frac;
    if (lr_peak > 0.0) tcfg.lr_peak = lr_peak;
    if (dropout >= 0.0) mcfg.dropout = dropout;

    Dataset data = load_feature_dir(data_dir);
    mcfg.n_classes = data.n_classes;
    mcfg.freq_bins = data.clips[0].features.mels;

    fs::create_directories(out_dir);
    std::ofstream log_file(fs::path(out_dir) / "log.txt");
    TeeBuf tee(std::cout.rdbuf(), log_file.rdbuf());
    std::ostream log(&tee);

    RunRecord rec;
    if (tcfg.precision == "f64")
        rec = train_model<double>(mcfg, tcfg, data, out_dir, log);
    else
        rec = train_model<float>(mcfg, tcfg, data, out_dir, log);

    log << "done: best epoch " << rec.best_epoch << " SELD " << rec.best_seld << "\n";
    log.flush();
    return 0;
}

int cmd_evaluate(const std::string& pred_path, const std::string& ref_path, int classes,
                 const std::string& out_path) {
    const EventList pred = read_dcase_csv(pred_path);
    const EventList ref = read_dcase_csv(ref_path);
    const MetricsReport report = evaluate_seld(decoded_from_events(pred), ref, classes);
    std::cout << report.to_text();
    if (!out_path.empty()) {
        std::ofstream os(out_path);
        os << report.to_json_string() << "\n";
        if (!os) throw seld::FileError("cannot write report to " + out_path);
    }
    return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& wav_path,
              const std::string& out_path, double threshold) {
    CheckpointInfo info;
    CstFormer<float> model = load_checkpoint<float>(ckpt_path, &info);
    const FeatureConfig fcfg;
    const FoaClip clip = foa_from_wav(wav_path);
    FeatureClip features = extract_features(clip, fcfg);
    const std::int64_t label_frames = features.label_frames(fcfg);
    TargetTensor dummy;  // segment_clip also slices targets; infer has none
    dummy.frames = label_frames;
    dummy.classes = static_cast<int>(info.config.n_classes);
    dummy.data.assign(static_cast<std::size_t>(label_frames) * 9 * info.config.n_classes, 0.0f);

    Dataset single;
    single.cfg = fcfg;
    single.n_classes = static_cast<int>(info.config.n_classes);
    DatasetClip dc;
    dc.name = fs::path(wav_path).stem().string();
    dc.features = std::move(features);
    dc.target = std::move(dummy);
    single.clips.push_back(std::move(dc));

    // reuse the evaluation batching path to produce stitched predictions
    NoGradGuard ng;
    const auto segments = segment_clip(single.clips[0].features, single.clips[0].target, fcfg);
    const std::int64_t seg_t = fcfg.segment_frames, seg_l = fcfg.segment_label_frames();
    const std::int64_t out_w = 9 * info.config.n_classes;
    std::vector<float> stitched(static_cast<std::size_t>(label_frames * out_w), 0.0f);
    for (std::size_t s = 0; s < segments.size(); ++s) {
        std::vector<float> buf(segments[s].features.begin(), segments[s].features.end());
        TensorF x = TensorF::from({1, 7, seg_t, single.clips[0].features.mels}, std::move(buf));
        TensorF y = model.forward(x, false);
        for (std::int64_t t = 0; t < seg_l; ++t) {
            const std::int64_t frame = static_cast<std::int64_t>(s) * seg_l + t;
            if (frame >= label_frames) break;
            std::memcpy(stitched.data() + frame * out_w, y.data() + t * out_w,
                        static_cast<std::size_t>(out_w) * sizeof(float));
        }
    }
    DecodeOptions dopts;
    dopts.threshold = threshold;
    const DecodedEvents decoded =
        decode_multi_accdoa(stitched.data(), label_frames, info.config.n_classes, dopts);
    write_dcase_csv(out_path, events_from_decoded(decoded));
    std::cout << "wrote " << decoded.size() << " event-frames to " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"seldkit: sound event localization and detection toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic FoA dataset");
    std::string synth_out;
    int synth_clips = 8;
    std::uint64_t synth_seed = 1;
    std::string synth_overlap = "ov2";
    double synth_duration = 5.0;
    int synth_classes = 13;
    double synth_noise_snr = 20.0;
    bool synth_with_noise = false;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--clips", synth_clips, "number of clips");
    synth->add_option("--seed", synth_seed, "random seed");
    synth->add_option("--overlap", synth_overlap, "overlap profile: mono|ov2|ov3");
    synth->add_option("--duration", synth_duration, "clip duration in seconds");
    synth->add_option("--classes", synth_classes, "number of classes");
    synth->add_option("--noise-snr", synth_noise_snr, "diffuse noise SNR in dB")
        ->each([&](const std::string&) { synth_with_noise = true; });

    // extract
    auto* extract = app.add_subcommand("extract", "extract features from wav/csv pairs");
    std::string extract_data, extract_out;
    int extract_classes = 13;
    extract->add_option("--data", extract_data, "dataset directory (wav + csv)")->required();
    extract->add_option("--out", extract_out, "output feature directory")->required();
    extract->add_option("--classes", extract_classes, "number of classes");

    // train
    auto* train = app.add_subcommand("train", "train a model on extracted features");
    std::string train_data, train_out, train_config, train_variant, train_pooling;
    int train_cmt = -1;
    std::int64_t train_epochs = -1, train_batch = -1, train_eval_every = -1;
    std::uint64_t train_seed = 0;
    double train_val_frac = -1.0, train_lr = -1.0, train_dropout = -1.0;
    train->add_option("--data", train_data, "feature directory from extract")->required();
    train->add_option("--out", train_out, "run output directory")->required();
    train->add_option("--config", train_config, "json config file (model/train)");
    train->add_option("--variant", train_variant, "dst|dca|ule");
    train->add_option("--cmt", train_cmt, "1 = LPU+IRFFN on, 0 = attention only");
    train->add_option("--pooling", train_pooling, "front|middle");
    train->add_option("--epochs", train_epochs, "training epochs");
    train->add_option("--batch", train_batch, "batch size");
    train->add_option("--seed", train_seed, "random seed");
    train->add_option("--eval-every", train_eval_every, "evaluate every N epochs");
    train->add_option("--val-frac", train_val_frac, "validation clip fraction");
    train->add_option("--lr", train_lr, "peak learning rate");
    train->add_option("--dropout", train_dropout, "dropout rate");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "score a prediction csv against a reference");
    std::string eval_pred, eval_ref, eval_out;
    int eval_classes = 13;
    evaluate->add_option("--pred", eval_pred, "prediction csv")->required();
    evaluate->add_option("--ref", eval_ref, "reference csv")->required();
    evaluate->add_option("--classes", eval_classes, "number of classes");
    evaluate->add_option("--out", eval_out, "write the report as json");

    // infer
    auto* infer = app.add_subcommand("infer", "run a checkpoint over a wav file");
    std::string infer_ckpt, infer_wav, infer_out;
    double infer_threshold = 0.5;
    infer->add_option("--checkpoint", infer_ckpt, "model checkpoint")->required();
    infer->add_option("--wav", infer_wav, "input FoA wav")->required();
    infer->add_option("--out", infer_out, "output prediction csv")->required();
    infer->add_option("--threshold", infer_threshold, "decode activity threshold");

    // selftest
    auto* selftest = app.add_subcommand("selftest", "run the fast invariant suite");
    std::string inject_fault;
    selftest->add_option("--inject-fault", inject_fault,
                         "debug: perturb a backward kernel (gradcheck)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed())
            return cmd_synth(synth_out, synth_clips, synth_seed, synth_overlap, synth_duration,
                             synth_classes, synth_noise_snr, synth_with_noise);
        if (extract->parsed()) return cmd_extract(extract_data, extract_out, extract_classes);
        if (train->parsed())
            return cmd_train(train_data, train_out, train_config, train_variant, train_cmt,
                             train_pooling, train_epochs, train_batch, train_seed, train_eval_every,
                             train_val_frac, train_lr, train_dropout);
        if (evaluate->parsed()) return cmd_evaluate(eval_pred, eval_ref, eval_classes, eval_out);
        if (infer->parsed()) return cmd_infer(infer_ckpt, infer_wav, infer_out, infer_threshold);
        if (selftest->parsed()) {
            if (!inject_fault.empty() && inject_fault != "gradcheck")
                throw ConfigError("unknown fault kind: " + inject_fault);
            const int failed = run_selftest(std::cout, inject_fault == "gradcheck");
            return failed == 0 ? 0 : 2;
        }
    } catch (const seld::FileError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const CapacityError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ArchiveError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const TrainAbort& e) {
        std::cerr << "internal: training aborted: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
