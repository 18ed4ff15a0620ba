#include "cvr/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace cvr {

namespace {

void validate_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > kMaxRank)
        throw Error("tensor rank must be in [1, 6], got " + std::to_string(shape.size()));
    for (auto e : shape)
        if (e < 1) throw Error("tensor extents must be >= 1: " + shape_str(shape));
}

static_assert(std::endian::native == std::endian::little, "tensor I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw Error("truncated tensor record");
    return v;
}

constexpr std::array<char, 4> kMagic = {'C', 'V', 'T', '1'};

void write_header(std::ostream& os, const Shape& shape, DType tag) {
    os.write(kMagic.data(), kMagic.size());
    put<uint8_t>(os, static_cast<uint8_t>(shape.size()));
    for (auto e : shape) put<uint32_t>(os, static_cast<uint32_t>(e));
    put<uint8_t>(os, static_cast<uint8_t>(tag));
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
        throw Error("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                    shape_str(shape_));
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != static_cast<int64_t>(data_.size()))
        throw Error("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

Tensor& Tensor::operator+=(const Tensor& other) {
    if (!same_shape(other)) throw Error("shape mismatch in +=: " + shape_str(shape_) + " vs " + shape_str(other.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(float s) {
    for (auto& v : data_) v *= s;
    return *this;
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void write_tensor(std::ostream& os, const Tensor& t) {
    write_header(os, t.shape(), DType::F32);
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
}

void write_tensor(std::ostream& os, const QuantizedTensor& q) {
    write_header(os, q.shape, DType::U8);
    put<float>(os, q.scale);
    put<float>(os, q.zero_point);
    os.write(reinterpret_cast<const char*>(q.codes.data()), static_cast<std::streamsize>(q.codes.size()));
}

DType read_tensor_any(std::istream& is, Tensor* f32, QuantizedTensor* u8) {
    std::array<char, 4> magic{};
    if (!is.read(magic.data(), magic.size())) throw Error("truncated tensor header");
    if (magic != kMagic) throw Error("bad tensor magic (expected CVT1)");
    auto rank = get<uint8_t>(is);
    if (rank < 1 || rank > kMaxRank) throw Error("malformed header: rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) {
        e = get<uint32_t>(is);
        if (e < 1) throw Error("malformed header: zero extent");
    }
    auto tag = get<uint8_t>(is);
    auto n = static_cast<std::size_t>(shape_numel(shape));
    if (tag == static_cast<uint8_t>(DType::F32)) {
        if (!f32) throw Error("unexpected f32 tensor record");
        std::vector<float> data(n);
        if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(float))))
            throw Error("truncated tensor payload");
        *f32 = Tensor(std::move(shape), std::move(data));
        return DType::F32;
    }
    if (tag == static_cast<uint8_t>(DType::U8)) {
        if (!u8) throw Error("unexpected u8 tensor record");
        QuantizedTensor q;
        q.shape = std::move(shape);
        q.scale = get<float>(is);
        q.zero_point = get<float>(is);
        q.codes.resize(n);
        if (!is.read(reinterpret_cast<char*>(q.codes.data()), static_cast<std::streamsize>(n)))
            throw Error("truncated tensor payload");
        *u8 = std::move(q);
        return DType::U8;
    }
    throw Error("malformed header: unknown dtype tag " + std::to_string(tag));
}

Tensor read_tensor(std::istream& is) {
    Tensor t;
    read_tensor_any(is, &t, nullptr);
    return t;
}

QuantizedTensor read_quantized(std::istream& is) {
    QuantizedTensor q;
    read_tensor_any(is, nullptr, &q);
    return q;
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open for writing: " + path);
    write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open: " + path);
    try {
        return read_tensor(is);
    } catch (const Error& e) {
        throw Error(path + ": " + e.what());
    }
}

}  // namespace cvr
