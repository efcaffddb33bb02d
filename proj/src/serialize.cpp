#include "pano/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "pano/errors.hpp"

namespace pano {

namespace {

constexpr char kTensorMagic[5] = {'P', 'S', 'F', 'K', '1'};
constexpr char kCkptMagic[5] = {'P', 'S', 'F', 'C', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("unexpected end of stream reading u32");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

float get_f32(std::istream& is) {
    const std::uint32_t v = get_u32(is);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kTensorMagic, 5);
    const auto& shape = t.shape();
    put_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (int e : shape) put_u32(os, static_cast<std::uint32_t>(e));
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(float)));
    } else {
        for (float v : t.data()) put_f32(os, v);
    }
    if (!os) throw IoError("failed to write tensor");
}

Tensor read_tensor(std::istream& is) {
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, kTensorMagic, 5) != 0)
        throw IoError("bad tensor magic, expected PSFK1");
    const std::uint32_t rank = get_u32(is);
    if (rank > 8) throw IoError("implausible tensor rank " + std::to_string(rank));
    std::vector<int> shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
        e = static_cast<int>(get_u32(is));
        if (e <= 0) throw IoError("non-positive tensor extent");
        n *= static_cast<std::size_t>(e);
    }
    std::vector<float> data(n);
    if constexpr (std::endian::native == std::endian::little) {
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(float)));
        if (!is) throw IoError("unexpected end of stream reading tensor payload");
    } else {
        for (auto& v : data) v = get_f32(is);
    }
    return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tensor_file(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_tensor(os, t);
}

Tensor load_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    return read_tensor(is);
}

void save_checkpoint(const std::string& path, const NamedTensors& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kCkptMagic, 5);
    put_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, tensor] : params) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(os, tensor);
    }
    if (!os) throw IoError("failed to write checkpoint " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, kCkptMagic, 5) != 0)
        throw IoError(path + ": bad checkpoint magic, expected PSFC1");
    const std::uint32_t count = get_u32(is);
    NamedTensors out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = get_u32(is);
        if (len > 4096) throw IoError("implausible parameter name length");
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw IoError("unexpected end of stream reading parameter name");
        out.emplace_back(std::move(name), read_tensor(is));
    }
    return out;
}

}  // namespace pano
