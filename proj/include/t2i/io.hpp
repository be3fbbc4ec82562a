#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "t2i/common.hpp"
#include "t2i/tensor.hpp"

namespace t2i {

// Little-endian binary primitives with a running FNV-1a checksum, so whole
// files can carry a trailing integrity word.
struct BinWriter {
    std::ofstream os;
    Fnv1a sum;

    explicit BinWriter(const std::string& path) : os(path, std::ios::binary) {
        if (!os) throw io_error("cannot open for write: " + path);
    }
    void bytes(const void* p, size_t n) {
        os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        sum.update(p, n);
    }
    void u8(uint8_t v) { bytes(&v, 1); }
    void u32(uint32_t v) { bytes(&v, 4); }
    void u64(uint64_t v) { bytes(&v, 8); }
    void f32s(const float* p, size_t n) { bytes(p, n * 4); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    // Writes the checksum of everything so far; call last.
    void finish() {
        uint64_t d = sum.digest();
        os.write(reinterpret_cast<const char*>(&d), 8);
        os.flush();
        if (!os) throw io_error("write failure");
    }
};

struct BinReader {
    std::ifstream is;
    Fnv1a sum;
    std::string path;

    explicit BinReader(const std::string& p) : is(p, std::ios::binary), path(p) {
        if (!is) throw io_error("cannot open for read: " + p);
    }
    void bytes(void* p, size_t n) {
        is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (is.gcount() != static_cast<std::streamsize>(n))
            throw io_error("truncated file: " + path);
        sum.update(p, n);
    }
    uint8_t u8() { uint8_t v; bytes(&v, 1); return v; }
    uint32_t u32() { uint32_t v; bytes(&v, 4); return v; }
    uint64_t u64() { uint64_t v; bytes(&v, 8); return v; }
    void f32s(float* p, size_t n) { bytes(p, n * 4); }
    std::string str(uint32_t max_len = 1u << 24) {
        uint32_t n = u32();
        if (n > max_len) throw parse_error("string too long in " + path);
        std::string s(n, '\0');
        if (n) bytes(s.data(), n);
        return s;
    }
    // Validates the trailing checksum; call after the last payload read.
    void expect_checksum() {
        uint64_t want = sum.digest();
        uint64_t got;
        is.read(reinterpret_cast<char*>(&got), 8);
        if (is.gcount() != 8) throw io_error("missing checksum: " + path);
        if (got != want) throw integrity_error("checksum mismatch: " + path);
        // Nothing may follow.
        char junk;
        if (is.read(&junk, 1)) throw parse_error("trailing bytes after checksum: " + path);
    }
};

// Shared tensor section: name, dtype byte (0 = f32), rank, dims, payload.
inline void write_tensor_section(BinWriter& w, const std::string& name, const Tensor& t) {
    w.str(name);
    w.u8(0);
    w.u8(static_cast<uint8_t>(t.rank()));
    for (int64_t i = 0; i < t.rank(); i++) w.u64(static_cast<uint64_t>(t.dim(i)));
    w.f32s(t.data(), static_cast<size_t>(t.numel()));
}

inline std::pair<std::string, Tensor> read_tensor_section(BinReader& r) {
    std::string name = r.str(4096);
    uint8_t dtype = r.u8();
    if (dtype != 0) throw parse_error("unsupported dtype in " + r.path);
    uint8_t rank = r.u8();
    Shape shape;
    for (uint8_t i = 0; i < rank; i++) {
        uint64_t d = r.u64();
        if (d > (1ull << 32)) throw parse_error("absurd dimension in " + r.path);
        shape.push_back(static_cast<int64_t>(d));
    }
    Tensor t = Tensor::zeros(shape);
    r.f32s(t.data(), static_cast<size_t>(t.numel()));
    return {name, t};
}

// Checkpoint container: magic, version, run-config text, named tensor
// sections, trailing checksum. Load-then-save reproduces the bytes exactly
// (section order is preserved).
struct Checkpoint {
    static constexpr uint32_t kVersion = 1;
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& get(const std::string& name) const {
        for (auto& [n, t] : tensors)
            if (n == name) return t;
        throw parse_error("checkpoint is missing tensor: " + name);
    }

    void save(const std::string& path) const {
        BinWriter w(path);
        w.bytes("TXE1", 4);
        w.u32(kVersion);
        w.str(config_text);
        w.u32(static_cast<uint32_t>(tensors.size()));
        for (auto& [name, t] : tensors) write_tensor_section(w, name, t);
        w.finish();
    }

    static Checkpoint load(const std::string& path) {
        BinReader r(path);
        char magic[4];
        r.bytes(magic, 4);
        if (std::memcmp(magic, "TXE1", 4) != 0) throw parse_error("bad checkpoint magic: " + path);
        uint32_t ver = r.u32();
        if (ver != kVersion) throw parse_error("unsupported checkpoint version in " + path);
        Checkpoint c;
        c.config_text = r.str();
        uint32_t n = r.u32();
        for (uint32_t i = 0; i < n; i++) c.tensors.push_back(read_tensor_section(r));
        r.expect_checksum();
        return c;
    }
};

}  // namespace t2i
