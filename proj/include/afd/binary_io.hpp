#pragma once

// Little-endian encoding helpers shared by the corpus and checkpoint formats.

#include "afd/tensor.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace afd::io {

static_assert(std::endian::native == std::endian::little, "serialisation assumes a little-endian host");

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buffer_.insert(buffer_.end(), c, c + n);
    }
    void u32(std::uint32_t v) { bytes(&v, sizeof v); }
    void u64(std::uint64_t v) { bytes(&v, sizeof v); }
    void f32(float v) { bytes(&v, sizeof v); }
    void f64(double v) { bytes(&v, sizeof v); }
    void text(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    const std::string& buffer() const { return buffer_; }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + path.string() + " for writing");
        out.write(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
        if (!out) throw IoError("failed writing " + path.string());
    }

private:
    std::string buffer_;
};

class Reader {
public:
    Reader(std::string data, std::string origin) : data_(std::move(data)), origin_(std::move(origin)) {}

    static Reader load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open " + path.string());
        std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return Reader(std::move(data), path.string());
    }

    void bytes(void* p, std::size_t n) {
        if (pos_ + n > data_.size()) throw IoError(origin_ + ": unexpected end of file at byte " + std::to_string(pos_));
        std::memcpy(p, data_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    float f32() { return get<float>(); }
    double f64() { return get<double>(); }
    std::string text(std::size_t limit = 1u << 20) {
        const auto n = u32();
        if (n > limit) throw IoError(origin_ + ": implausible string length " + std::to_string(n));
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    bool at_end() const { return pos_ == data_.size(); }
    const std::string& origin() const { return origin_; }

private:
    template <class T>
    T get() {
        T v;
        bytes(&v, sizeof v);
        return v;
    }

    std::string data_;
    std::string origin_;
    std::size_t pos_ = 0;
};

}  // namespace afd::io
