// Minimal multichannel WAV reader/writer. Reads PCM 16/24-bit and float32;
// writes float32. Samples are returned per channel as doubles in [-1, 1]
// (PCM) or verbatim (float).
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace seld {

struct WavData {
    int sample_rate = 0;
    std::vector<std::vector<double>> channels;
};

struct FileError : std::runtime_error {
    explicit FileError(const std::string& msg) : std::runtime_error(msg) {}
};

WavData read_wav(const std::string& path);
void write_wav_float32(const std::string& path, const std::vector<std::vector<double>>& channels,
                       int sample_rate);

}  // namespace seld
