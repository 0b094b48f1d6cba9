#include "lfq/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "lfq/error.hpp"

namespace lfq::io {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

void Writer::bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
}

void Writer::u16(std::uint16_t v) { bytes(&v, sizeof v); }
void Writer::u32(std::uint32_t v) { bytes(&v, sizeof v); }
void Writer::f32(float v) { bytes(&v, sizeof v); }
void Writer::f32s(std::span<const float> v) { bytes(v.data(), v.size() * sizeof(float)); }

void Writer::tensor(std::string_view name, const Tensor& t) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw ContractError("tensor name too long");
    if (t.rank() > std::numeric_limits<std::uint8_t>::max()) throw ContractError("tensor rank too large");
    u16(static_cast<std::uint16_t>(name.size()));
    str(name);
    u8(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) {
        if (e > std::numeric_limits<std::uint32_t>::max()) throw ContractError("tensor extent too large");
        u32(static_cast<std::uint32_t>(e));
    }
    f32s(t.data());
}

void Reader::need(std::size_t n) {
    if (remaining() < n) {
        throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_) + " (needed " + std::to_string(n) +
                          ", have " + std::to_string(remaining()) + ")");
    }
}

void Reader::bytes(void* p, std::size_t n) {
    need(n);
    if (n) std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
}

std::uint8_t Reader::u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
}

std::uint16_t Reader::u16() {
    std::uint16_t v;
    bytes(&v, sizeof v);
    return v;
}

std::uint32_t Reader::u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
}

float Reader::f32() {
    float v;
    bytes(&v, sizeof v);
    return v;
}

std::vector<float> Reader::f32s(std::size_t n) {
    if (n > remaining() / sizeof(float)) need(n * sizeof(float));
    std::vector<float> v(n);
    bytes(v.data(), n * sizeof(float));
    return v;
}

std::string Reader::str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
}

std::pair<std::string, Tensor> Reader::any_tensor() {
    std::string name = str(u16());
    const std::size_t rank = u8();
    Shape shape(rank);
    for (auto& e : shape) e = u32();
    std::size_t n = 1;
    for (auto e : shape) {
        if (e != 0 && n > remaining() / e) need(remaining() + 1);
        n *= e;
    }
    auto values = f32s(n);
    try {
        return {std::move(name), Tensor::from(std::move(shape), std::move(values))};
    } catch (const NumericError&) {
        throw FormatError(what_ + ": tensor '" + name + "' holds non-finite values");
    }
}

Tensor Reader::tensor(std::string_view expected_name) {
    auto [name, t] = any_tensor();
    if (name != expected_name) {
        throw FormatError(what_ + ": expected tensor '" + std::string(expected_name) + "', found '" + name + "'");
    }
    return t;
}

void Reader::expect_magic(std::string_view magic) {
    if (remaining() < magic.size()) {
        throw FormatError(what_ + ": truncated before magic (" + std::to_string(remaining()) + " bytes)");
    }
    if (str(magic.size()) != magic) throw FormatError(what_ + ": bad magic, expected '" + std::string(magic) + "'");
}

void Reader::expect_end() {
    if (!at_end()) throw FormatError(what_ + ": " + std::to_string(remaining()) + " trailing bytes");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace lfq::io
