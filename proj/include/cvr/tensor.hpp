#pragma once

#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvr {

/// Raised for every shape, format, or numerical contract violation in the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

constexpr std::size_t kMaxRank = 6;

/// Dense row-major float32 array with up to six axes (last axis fastest).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    int64_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    /// Same buffer viewed under a new shape with identical element count.
    Tensor reshaped(Shape shape) const;

    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(float s);
    void fill(float v);

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

private:
    Shape shape_;
    std::vector<float> data_;
};

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

/// 8-bit affine-quantized tensor: value = code * scale + zero_point.
struct QuantizedTensor {
    Shape shape;
    std::vector<uint8_t> codes;
    float scale = 1.0f;
    float zero_point = 0.0f;
};

// Binary format: "CVT1", u8 rank, u32 extents (LE), u8 dtype tag
// (0 = f32, 1 = u8 followed by f32 scale and f32 zero point), raw payload.
enum class DType : uint8_t { F32 = 0, U8 = 1 };

void write_tensor(std::ostream& os, const Tensor& t);
void write_tensor(std::ostream& os, const QuantizedTensor& q);

/// Reads one record; exactly one of the two outputs is filled according to the dtype tag.
DType read_tensor_any(std::istream& is, Tensor* f32, QuantizedTensor* u8);
Tensor read_tensor(std::istream& is);
QuantizedTensor read_quantized(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace cvr
