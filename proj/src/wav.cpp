#include "seld/wav.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace seld {

namespace {

std::uint32_t rd_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t rd_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void wr_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void wr_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

WavData read_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileError("cannot open wav file: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        throw FileError("not a RIFF/WAVE file: " + path);

    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t sample_rate = 0;
    std::size_t data_off = 0, data_len = 0;
    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
        const std::uint32_t len = rd_u32(bytes.data() + pos + 4);
        const std::size_t body = pos + 8;
        if (std::memcmp(id, "fmt ", 4) == 0 && body + 16 <= bytes.size()) {
            format = rd_u16(bytes.data() + body);
            channels = rd_u16(bytes.data() + body + 2);
            sample_rate = rd_u32(bytes.data() + body + 4);
            bits = rd_u16(bytes.data() + body + 14);
            if (format == 0xFFFE && len >= 40)  // WAVE_FORMAT_EXTENSIBLE: subformat GUID
                format = rd_u16(bytes.data() + body + 24);
        } else if (std::memcmp(id, "data", 4) == 0) {
            data_off = body;
            data_len = std::min<std::size_t>(len, bytes.size() - body);
        }
        pos = body + len + (len & 1);
    }
    if (channels == 0 || sample_rate == 0 || data_off == 0)
        throw FileError("wav missing fmt or data chunk: " + path);

    const std::size_t bytes_per_sample = bits / 8;
    if (bytes_per_sample == 0) throw FileError("wav has zero sample width: " + path);
    const std::size_t n_frames = data_len / (bytes_per_sample * channels);

    WavData out;
    out.sample_rate = static_cast<int>(sample_rate);
    out.channels.assign(channels, std::vector<double>(n_frames));
    const unsigned char* d = bytes.data() + data_off;

    if (format == 1 && bits == 16) {
        for (std::size_t i = 0; i < n_frames; ++i)
            for (std::uint16_t c = 0; c < channels; ++c) {
                const unsigned char* s = d + (i * channels + c) * 2;
                const std::int16_t v = static_cast<std::int16_t>(s[0] | (s[1] << 8));
                out.channels[c][i] = static_cast<double>(v) / 32768.0;
            }
    } else if (format == 1 && bits == 24) {
        for (std::size_t i = 0; i < n_frames; ++i)
            for (std::uint16_t c = 0; c < channels; ++c) {
                const unsigned char* s = d + (i * channels + c) * 3;
                std::int32_t v = s[0] | (s[1] << 8) | (s[2] << 16);
                if (v & 0x800000) v |= static_cast<std::int32_t>(0xFF000000);
                out.channels[c][i] = static_cast<double>(v) / 8388608.0;
            }
    } else if (format == 3 && bits == 32) {
        for (std::size_t i = 0; i < n_frames; ++i)
            for (std::uint16_t c = 0; c < channels; ++c) {
                float f;
                std::memcpy(&f, d + (i * channels + c) * 4, 4);
                out.channels[c][i] = static_cast<double>(f);
            }
    } else {
        throw FileError("unsupported wav encoding (format " + std::to_string(format) + ", " +
                        std::to_string(bits) + " bit): " + path);
    }
    return out;
}

void write_wav_float32(const std::string& path, const std::vector<std::vector<double>>& channels,
                       int sample_rate) {
    if (channels.empty()) throw FileError("write_wav_float32: no channels");
    const std::size_t n_frames = channels[0].size();
    for (const auto& c : channels)
        if (c.size() != n_frames) throw FileError("write_wav_float32: channel length mismatch");
    const std::uint16_t n_ch = static_cast<std::uint16_t>(channels.size());
    const std::uint32_t data_len = static_cast<std::uint32_t>(n_frames * n_ch * 4);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw FileError("cannot create wav file: " + path);
    os.write("RIFF", 4);
    wr_u32(os, 4 + (8 + 16) + (8 + 4) + (8 + data_len));
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    wr_u32(os, 16);
    wr_u16(os, 3);  // IEEE float
    wr_u16(os, n_ch);
    wr_u32(os, static_cast<std::uint32_t>(sample_rate));
    wr_u32(os, static_cast<std::uint32_t>(sample_rate) * n_ch * 4);
    wr_u16(os, static_cast<std::uint16_t>(n_ch * 4));
    wr_u16(os, 32);
    os.write("fact", 4);
    wr_u32(os, 4);
    wr_u32(os, static_cast<std::uint32_t>(n_frames));
    os.write("data", 4);
    wr_u32(os, data_len);
    std::vector<char> buf(static_cast<std::size_t>(n_ch) * 4);
    for (std::size_t i = 0; i < n_frames; ++i) {
        for (std::uint16_t c = 0; c < n_ch; ++c) {
            const float f = static_cast<float>(channels[c][i]);
            std::memcpy(buf.data() + c * 4, &f, 4);
        }
        os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
    if (!os) throw FileError("failed writing wav file: " + path);
}

}  // namespace seld
