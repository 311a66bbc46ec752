#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "seld/archive.hpp"
#include "seld/checkpoint.hpp"
#include "seld/csv.hpp"
#include "seld/features.hpp"
#include "seld/model.hpp"
#include "seld/wav.hpp"

using namespace seld;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    return fs::temp_directory_path() / ("seldkit_io_" + name);
}

}  // namespace

TEST_CASE("wav: float32 round trip is bit-exact") {
    CounterRng rng(1);
    std::vector<std::vector<double>> channels(4, std::vector<double>(4800));
    for (auto& ch : channels)
        for (auto& v : ch) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    const fs::path p = temp_file("roundtrip.wav");
    write_wav_float32(p.string(), channels, 24000);
    WavData back = read_wav(p.string());
    CHECK(back.sample_rate == 24000);
    REQUIRE(back.channels.size() == 4);
    for (int c = 0; c < 4; ++c)
        for (std::size_t i = 0; i < channels[0].size(); ++i)
            REQUIRE(back.channels[static_cast<std::size_t>(c)][i] ==
                    channels[static_cast<std::size_t>(c)][i]);
    fs::remove(p);
}

TEST_CASE("wav: PCM16 decoding matches the scaling convention") {
    // hand-build a tiny PCM16 mono wav
    const fs::path p = temp_file("pcm16.wav");
    {
        std::ofstream os(p, std::ios::binary);
        auto w32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
        auto w16 = [&](std::uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); };
        os.write("RIFF", 4);
        w32(36 + 8);
        os.write("WAVE", 4);
        os.write("fmt ", 4);
        w32(16);
        w16(1);
        w16(1);
        w32(24000);
        w32(48000);
        w16(2);
        w16(16);
        os.write("data", 4);
        w32(8);
        const std::int16_t samples[4] = {0, 16384, -16384, 32767};
        os.write(reinterpret_cast<const char*>(samples), 8);
    }
    WavData wav = read_wav(p.string());
    REQUIRE(wav.channels.size() == 1);
    CHECK(wav.channels[0][0] == doctest::Approx(0.0));
    CHECK(wav.channels[0][1] == doctest::Approx(0.5));
    CHECK(wav.channels[0][2] == doctest::Approx(-0.5));
    CHECK(wav.channels[0][3] == doctest::Approx(32767.0 / 32768.0));
    fs::remove(p);
}

TEST_CASE("wav: unsupported and corrupt files raise FileError") {
    const fs::path p = temp_file("garbage.wav");
    std::ofstream(p) << "this is not a wav";
    CHECK_THROWS_AS(read_wav(p.string()), FileError);
    CHECK_THROWS_AS(read_wav("/nonexistent/file.wav"), FileError);
    fs::remove(p);
}

TEST_CASE("csv: integer-degree round trip") {
    EventList events = {{0, 1, 0, -180.0, -90.0}, {5, 12, 2, 179.0, 90.0}, {7, 3, 1, 0.0, 45.0}};
    const fs::path p = temp_file("events.csv");
    write_dcase_csv(p.string(), events);
    EventList back = read_dcase_csv(p.string());
    REQUIRE(back.size() == events.size());
    for (std::size_t i = 0; i < events.size(); ++i) {
        CHECK(back[i].frame == events[i].frame);
        CHECK(back[i].class_idx == events[i].class_idx);
        CHECK(back[i].track == events[i].track);
        CHECK(back[i].azimuth_deg == events[i].azimuth_deg);
        CHECK(back[i].elevation_deg == events[i].elevation_deg);
    }
    fs::remove(p);
}

TEST_CASE("csv: malformed rows raise FileError with the line number") {
    const fs::path p = temp_file("bad.csv");
    std::ofstream(p) << "1,2,3,4,5\nnot,a,valid,row,at all\n";
    CHECK_THROWS_WITH(read_dcase_csv(p.string()), doctest::Contains(":2"));
    fs::remove(p);
}

TEST_CASE("archive: bit-exact round trip for f32 and f64 payloads") {
    CounterRng rng(2);
    Archive a;
    a.meta_json = R"({"kind":"test","note":"payload integrity"})";
    TensorF tf = TensorF::rand_normal({3, 4, 5}, rng);
    TensorD td = TensorD::rand_normal({7}, rng);
    a.entries.push_back(ArchiveEntry::from_tensor("alpha", tf, true));
    a.entries.push_back(ArchiveEntry::from_tensor("beta", td, false));
    const fs::path p = temp_file("archive.bin");
    write_archive(p.string(), a);
    Archive b = read_archive(p.string());
    CHECK(b.meta_json == a.meta_json);
    REQUIRE(b.entries.size() == 2);
    TensorF tf2 = b.find("alpha")->to_tensor<float>();
    TensorD td2 = b.find("beta")->to_tensor<double>();
    CHECK(tf2.shape() == tf.shape());
    CHECK(tf2.vec() == tf.vec());
    CHECK(td2.vec() == td.vec());
    CHECK(b.entries[0].trainable);
    CHECK_FALSE(b.entries[1].trainable);
    fs::remove(p);
}

TEST_CASE("archive: truncation and corruption fail the checksum") {
    CounterRng rng(3);
    Archive a;
    a.meta_json = "{}";
    a.entries.push_back(ArchiveEntry::from_tensor("w", TensorF::rand_normal({64}, rng), true));
    const fs::path p = temp_file("truncated.bin");
    write_archive(p.string(), a);

    // truncate
    const auto full_size = fs::file_size(p);
    fs::resize_file(p, full_size - 17);
    CHECK_THROWS_AS(read_archive(p.string()), ArchiveError);

    // corrupt one payload byte
    write_archive(p.string(), a);
    {
        std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(full_size / 2));
        char c;
        f.seekg(static_cast<std::streamoff>(full_size / 2));
        f.get(c);
        f.seekp(static_cast<std::streamoff>(full_size / 2));
        f.put(static_cast<char>(c ^ 0x40));
    }
    CHECK_THROWS_WITH(read_archive(p.string()), doctest::Contains("checksum"));
    fs::remove(p);
}

TEST_CASE("checkpoint: save -> load reproduces every tensor bit-exactly") {
    ModelConfig cfg;
    cfg.variant = Variant::Ule;
    cfg.conv_filters = 16;
    cfg.heads = 2;
    cfg.patch_t = 5;
    cfg.patch_f = 2;
    cfg.input_channels = 7;
    cfg.n_classes = 4;
    cfg.fc_hidden = 8;
    CstFormer<float> model(cfg, 77);
    // push the model away from init so buffers are nontrivial
    CounterRng rng(4);
    TensorF x = TensorF::rand_normal({1, 7, 50, 64}, rng);
    (void)model.forward(x, true);

    const fs::path p = temp_file("model.ckpt");
    save_checkpoint(p.string(), model, 42);

    CheckpointInfo info;
    CstFormer<float> loaded = load_checkpoint<float>(p.string(), &info);
    CHECK(info.epoch == 42);
    CHECK(info.config.variant == Variant::Ule);
    CHECK(info.config.conv_filters == 16);

    auto a = model.named_tensors();
    auto b = loaded.named_tensors();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].name == b[i].name);
        REQUIRE(a[i].tensor.vec() == b[i].tensor.vec());
    }

    // identical outputs after reload
    TensorF y1 = model.forward(x, false);
    TensorF y2 = loaded.forward(x, false);
    CHECK(y1.vec() == y2.vec());
    fs::remove(p);
}

TEST_CASE("checkpoint: shape mismatches are reported by tensor name") {
    ModelConfig cfg;
    cfg.conv_filters = 16;
    cfg.heads = 2;
    cfg.n_classes = 4;
    cfg.fc_hidden = 8;
    CstFormer<float> model(cfg, 1);
    const fs::path p = temp_file("mismatch.ckpt");
    save_checkpoint(p.string(), model, 0);

    ModelConfig other = cfg;
    other.fc_hidden = 16;
    CstFormer<float> victim(other, 1);
    Archive a = read_archive(p.string());
    CHECK_THROWS_WITH(load_checkpoint_weights(a, victim), doctest::Contains("head.fc1"));
    fs::remove(p);
}

TEST_CASE("feature cache: save -> load round trip preserves data and events") {
    const FeatureConfig cfg;
    DatasetClip clip;
    clip.name = "unit";
    clip.features.frames = 250;
    clip.features.channels = 7;
    clip.features.mels = 64;
    CounterRng rng(5);
    clip.features.data.resize(static_cast<std::size_t>(7) * 250 * 64);
    for (auto& v : clip.features.data) v = static_cast<float>(rng.uniform(-4.0, 4.0));
    clip.events = {{0, 1, 0, 30.0, -10.0}, {4, 2, 0, -90.0, 20.0}};
    clip.target = encode_target(clip.events, 50, 13);

    const fs::path p = temp_file("clip.feat");
    save_feature_cache(p.string(), clip, cfg, 13);
    DatasetClip back = load_feature_cache(p.string());
    CHECK(back.name == "unit");
    CHECK(back.features.data == clip.features.data);
    CHECK(back.target.data == clip.target.data);
    REQUIRE(back.events.size() == clip.events.size());
    CHECK(back.events[1].azimuth_deg == clip.events[1].azimuth_deg);
    fs::remove(p);
}
