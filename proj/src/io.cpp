#include "nava/io.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace nava {

void ByteWriter::u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    u64(bits);
}

void ByteWriter::str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
}

void ByteWriter::tensor(const Tensor& t) {
    u32(static_cast<uint32_t>(t.rank()));
    for (int64_t e : t.shape()) u32(static_cast<uint32_t>(e));
    for (double v : t.values()) f64(v);
}

void ByteWriter::raw(const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
}

void ByteReader::need(size_t n) {
    if (pos_ + n > buf_.size())
        throw IoError("truncated data: need " + std::to_string(n) +
                      " bytes, have " + std::to_string(buf_.size() - pos_));
}

uint8_t ByteReader::u8() {
    need(1);
    return buf_[pos_++];
}

uint32_t ByteReader::u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf_[pos_++]) << (8 * i);
    return v;
}

uint64_t ByteReader::u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf_[pos_++]) << (8 * i);
    return v;
}

double ByteReader::f64() {
    const uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

std::string ByteReader::str() {
    const uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
}

Tensor ByteReader::tensor() {
    const uint32_t rank = u32();
    if (rank == 0 || rank > 8) throw IoError("tensor block: bad rank");
    Shape shape(rank);
    int64_t numel = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<int64_t>(u32());
        if (shape[i] <= 0) throw IoError("tensor block: bad extent");
        numel *= shape[i];
    }
    std::vector<double> vals(static_cast<size_t>(numel));
    for (double& v : vals) v = f64();
    return Tensor(std::move(shape), std::move(vals));
}

uint32_t crc32_bytes(const uint8_t* data, size_t n) {
    return static_cast<uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(data),
                static_cast<uInt>(n)));
}

void write_file_with_crc(const std::string& path, const std::string& magic,
                         const ByteWriter& payload) {
    if (magic.size() != 8) throw IoError("file magic must be 8 bytes");
    const uint32_t crc =
        crc32_bytes(payload.bytes().data(), payload.bytes().size());
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open for writing: " + tmp);
        f.write(magic.data(), 8);
        f.write(reinterpret_cast<const char*>(payload.bytes().data()),
                static_cast<std::streamsize>(payload.bytes().size()));
        uint8_t tail[4];
        for (int i = 0; i < 4; ++i) tail[i] = static_cast<uint8_t>(crc >> (8 * i));
        f.write(reinterpret_cast<const char*>(tail), 4);
        if (!f) throw IoError("write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed: " + path + ": " + ec.message());
}

ByteReader read_file_with_crc(const std::string& path,
                              const std::string& magic) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<uint8_t> all((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
    if (all.size() < 12) throw IoError("file too short: " + path);
    if (std::memcmp(all.data(), magic.data(), 8) != 0) {
        std::string found(reinterpret_cast<const char*>(all.data()), 8);
        throw IoError("format/version mismatch in " + path + ": expected '" +
                      magic + "', found '" + found + "'");
    }
    const size_t payload_len = all.size() - 12;
    uint32_t stored = 0;
    for (int i = 0; i < 4; ++i)
        stored |= static_cast<uint32_t>(all[all.size() - 4 + i]) << (8 * i);
    const uint32_t computed = crc32_bytes(all.data() + 8, payload_len);
    if (stored != computed)
        throw IoError("checksum mismatch in " + path +
                      " (file is truncated or corrupt)");
    return ByteReader(
        std::vector<uint8_t>(all.begin() + 8, all.end() - 4));
}

void write_tensor_container(const std::string& path, const std::string& magic,
                            const TensorContainer& c) {
    ByteWriter w;
    w.u32(c.version);
    w.str(c.config_text);
    w.u32(static_cast<uint32_t>(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        w.str(name);
        w.tensor(t);
    }
    write_file_with_crc(path, magic, w);
}

TensorContainer read_tensor_container(const std::string& path,
                                      const std::string& magic,
                                      uint32_t expected_version) {
    ByteReader r = read_file_with_crc(path, magic);
    TensorContainer c;
    c.version = r.u32();
    if (c.version != expected_version)
        throw IoError("unsupported container version " +
                      std::to_string(c.version) + " in " + path);
    c.config_text = r.str();
    const uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        Tensor t = r.tensor();
        if (!c.tensors.emplace(std::move(name), std::move(t)).second)
            throw IoError("duplicate tensor name in " + path);
    }
    if (!r.done()) throw IoError("trailing bytes after payload in " + path);
    return c;
}

}  // namespace nava
