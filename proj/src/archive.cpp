#include "seld/archive.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace seld {

namespace {

constexpr char kMagic[8] = {'S', 'E', 'L', 'D', 'A', 'R', 'C', '1'};
constexpr std::uint32_t kFormatVersion = 1;

const std::array<std::uint32_t, 256>& crc_table() {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int b = 0; b < 8; ++b) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    return table;
}

struct Writer {
    std::vector<char> buf;

    void bytes(const void* p, std::size_t n) {
        const char* c = static_cast<const char*>(p);
        buf.insert(buf.end(), c, c + n);
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v) {
        const unsigned char b[2] = {static_cast<unsigned char>(v),
                                    static_cast<unsigned char>(v >> 8)};
        bytes(b, 2);
    }
    void u32(std::uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        bytes(b, 4);
    }
    void u64(std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        bytes(b, 8);
    }
};

struct Reader {
    const unsigned char* p;
    std::size_t len;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > len) throw ArchiveError("archive truncated");
    }
    void bytes(void* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, p + pos, n);
        pos += n;
    }
    std::uint8_t u8() {
        need(1);
        return p[pos++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(p[pos] | (p[pos + 1] << 8));
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
};

}  // namespace

std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed) {
    const auto& table = crc_table();
    std::uint32_t c = seed ^ 0xFFFFFFFFu;
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

void write_archive(const std::string& path, const Archive& archive) {
    Writer w;
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(archive.meta_json.size()));
    w.bytes(archive.meta_json.data(), archive.meta_json.size());
    w.u32(static_cast<std::uint32_t>(archive.entries.size()));
    for (const auto& e : archive.entries) {
        w.u16(static_cast<std::uint16_t>(e.name.size()));
        w.bytes(e.name.data(), e.name.size());
        w.u8(static_cast<std::uint8_t>(e.dtype));
        w.u8(e.trainable ? 1 : 0);
        w.u32(static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) w.u64(static_cast<std::uint64_t>(d));
        w.u64(static_cast<std::uint64_t>(e.payload.size()));
        w.bytes(e.payload.data(), e.payload.size());
    }
    const std::uint32_t crc = crc32(w.buf.data(), w.buf.size());

    std::ofstream os(path, std::ios::binary);
    if (!os) throw ArchiveError("cannot create archive: " + path);
    os.write(kMagic, 8);
    os.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
    unsigned char cb[4];
    for (int i = 0; i < 4; ++i) cb[i] = static_cast<unsigned char>(crc >> (8 * i));
    os.write(reinterpret_cast<const char*>(cb), 4);
    if (!os) throw ArchiveError("failed writing archive: " + path);
}

Archive read_archive(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArchiveError("cannot open archive: " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw ArchiveError("not a seld archive: " + path);
    const std::size_t body_len = bytes.size() - 12;
    const unsigned char* body = reinterpret_cast<const unsigned char*>(bytes.data()) + 8;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i)
        stored |= static_cast<std::uint32_t>(
                      static_cast<unsigned char>(bytes[bytes.size() - 4 + i]))
                  << (8 * i);
    if (crc32(body, body_len) != stored)
        throw ArchiveError("archive checksum mismatch (truncated or corrupt): " + path);

    Reader r{body, body_len};
    const std::uint32_t version = r.u32();
    if (version != kFormatVersion)
        throw ArchiveError("unsupported archive version " + std::to_string(version) + ": " + path);
    Archive out;
    const std::uint32_t meta_len = r.u32();
    out.meta_json.resize(meta_len);
    r.bytes(out.meta_json.data(), meta_len);
    const std::uint32_t n_entries = r.u32();
    out.entries.reserve(n_entries);
    for (std::uint32_t i = 0; i < n_entries; ++i) {
        ArchiveEntry e;
        const std::uint16_t name_len = r.u16();
        e.name.resize(name_len);
        r.bytes(e.name.data(), name_len);
        const std::uint8_t dt = r.u8();
        if (dt > 1) throw ArchiveError("archive entry '" + e.name + "': unknown dtype");
        e.dtype = static_cast<ArchiveDType>(dt);
        e.trainable = (r.u8() & 1) != 0;
        const std::uint32_t ndim = r.u32();
        e.shape.resize(ndim);
        for (std::uint32_t d = 0; d < ndim; ++d) e.shape[d] = static_cast<std::int64_t>(r.u64());
        const std::uint64_t payload_len = r.u64();
        e.payload.resize(payload_len);
        r.bytes(e.payload.data(), payload_len);
        out.entries.push_back(std::move(e));
    }
    return out;
}

}  // namespace seld
