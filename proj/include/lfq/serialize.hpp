#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "lfq/tensor.hpp"

// Little-endian binary framing shared by checkpoints, activation spills and
// packed weight files.
namespace lfq::io {

class Writer {
   public:
    void bytes(const void* p, std::size_t n);
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f32(float v);
    void f32s(std::span<const float> v);
    void str(std::string_view s) { bytes(s.data(), s.size()); }

    // u16 name length, name, u8 rank, u32 extents, raw floats.
    void tensor(std::string_view name, const Tensor& t);

    const std::vector<std::uint8_t>& buffer() const { return buf_; }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

   private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
   public:
    // `what` names the source in error messages.
    Reader(std::span<const std::uint8_t> data, std::string what) : data_(data), what_(std::move(what)) {}

    void bytes(void* p, std::size_t n);
    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    float f32();
    std::vector<float> f32s(std::size_t n);
    std::string str(std::size_t n);

    // Reads one framed tensor and checks its name.
    Tensor tensor(std::string_view expected_name);
    // Same, returning whatever name was stored.
    std::pair<std::string, Tensor> any_tensor();

    void expect_magic(std::string_view magic);
    std::size_t remaining() const { return data_.size() - pos_; }
    bool at_end() const { return pos_ == data_.size(); }
    void expect_end();

   private:
    void need(std::size_t n);

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
    std::string what_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);

}  // namespace lfq::io
