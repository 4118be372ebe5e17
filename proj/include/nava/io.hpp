#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nava/errors.hpp"
#include "nava/tensor.hpp"

namespace nava {

// Little-endian byte buffer used by every persisted artifact. Files are
// laid out as: 8-byte magic, payload, trailing CRC32 of the payload.
class ByteWriter {
 public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u32(uint32_t v);
    void u64(uint64_t v);
    void f64(double v);
    void str(const std::string& s);  // u32 length + bytes
    void tensor(const Tensor& t);    // u32 rank, u32 extents, f64 payload
    void raw(const void* p, size_t n);

    const std::vector<uint8_t>& bytes() const { return buf_; }

 private:
    std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
    explicit ByteReader(std::vector<uint8_t> bytes) : buf_(std::move(bytes)) {}

    uint8_t u8();
    uint32_t u32();
    uint64_t u64();
    double f64();
    std::string str();
    Tensor tensor();

    size_t remaining() const { return buf_.size() - pos_; }
    bool done() const { return pos_ == buf_.size(); }

 private:
    void need(size_t n);
    std::vector<uint8_t> buf_;
    size_t pos_ = 0;
};

uint32_t crc32_bytes(const uint8_t* data, size_t n);

// Writes magic (exactly 8 bytes) + payload + CRC32(payload) atomically via
// a temp file rename.
void write_file_with_crc(const std::string& path, const std::string& magic,
                         const ByteWriter& payload);

// Verifies magic and CRC; returns a reader over the payload.
ByteReader read_file_with_crc(const std::string& path,
                              const std::string& magic);

// Generic named-tensor container shared by checkpoints, train states and
// sample files: u32 version, config text, u32 tensor count, per tensor
// (name, rank, extents, f64 payload).
struct TensorContainer {
    uint32_t version = 1;
    std::string config_text;
    std::map<std::string, Tensor> tensors;
};

void write_tensor_container(const std::string& path, const std::string& magic,
                            const TensorContainer& c);
TensorContainer read_tensor_container(const std::string& path,
                                      const std::string& magic,
                                      uint32_t expected_version);

}  // namespace nava
