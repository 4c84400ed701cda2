#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace rnb {

/// Dense row-major grid of doubles. Carries attention maps, edge maps and
/// masks, and doubles as a (rows x channels) matrix for per-location
/// feature tensors.
class ScalarField {
 public:
  ScalarField() = default;
  ScalarField(int height, int width, double fill = 0.0);
  ScalarField(int height, int width, std::vector<double> values);

  static ScalarField scalar(double v) { return ScalarField(1, 1, v); }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool same_shape(const ScalarField& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_;
  }

  double& at(int h, int w) { return values_[static_cast<std::size_t>(h) * width_ + w]; }
  double at(int h, int w) const { return values_[static_cast<std::size_t>(h) * width_ + w]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  double sum() const noexcept;
  double min() const noexcept;
  double max() const noexcept;
  bool all_finite() const noexcept;

  /// Same values, new shape; the element count must match.
  ScalarField reshaped(int height, int width) const;

  friend bool operator==(const ScalarField&, const ScalarField&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> values_;
};

/// A field whose entries are exactly 0 or 1.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width, bool fill = false);
  /// Throws ValidationError if any value is not exactly 0 or 1.
  explicit BinaryMask(const ScalarField& f);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return bits_.size(); }

  bool at(int h, int w) const { return bits_[static_cast<std::size_t>(h) * width_ + w] != 0; }
  void set(int h, int w, bool on) { bits_[static_cast<std::size_t>(h) * width_ + w] = on ? 1 : 0; }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }

  std::size_t count() const noexcept;
  BinaryMask complement() const;
  ScalarField to_field() const;
  std::uint64_t hash() const noexcept;

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Axis-aligned box in normalized image coordinates.
struct NormBox {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 1.0;
  double y1 = 1.0;

  /// Validates 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1.
  static NormBox make(double x0, double y0, double x1, double y1);
};

// Pixel (h, w) is inside iff its center lies in [x0,x1) x [y0,y1).
BinaryMask rasterize_box(const NormBox& box, int height, int width);

ScalarField bilinear_upsample(const ScalarField& f, int out_h, int out_w);
ScalarField bilinear_upsample_adjoint(const ScalarField& g, int in_h, int in_w);

ScalarField avg_pool2(const ScalarField& f);
ScalarField avg_pool2_adjoint(const ScalarField& g);

// Channel-layout variants: `f` holds (height*width) rows of `channels`
// columns; spatial resampling is applied independently per channel.
ScalarField bilinear_upsample_channels(const ScalarField& f, int height, int width, int out_h,
                                       int out_w);
ScalarField bilinear_upsample_channels_adjoint(const ScalarField& g, int in_h, int in_w,
                                               int out_h, int out_w);
ScalarField avg_pool2_channels(const ScalarField& f, int height, int width);
ScalarField avg_pool2_channels_adjoint(const ScalarField& g, int height, int width);

inline constexpr double kSobelEps = 1e-12;

// Horizontal / vertical Sobel responses with replicate padding.
ScalarField sobel_x(const ScalarField& f);
ScalarField sobel_y(const ScalarField& f);
ScalarField sobel_x_adjoint(const ScalarField& g);
ScalarField sobel_y_adjoint(const ScalarField& g);

// sqrt(Gx^2 + Gy^2 + kSobelEps)
ScalarField sobel_edges(const ScalarField& f);

inline constexpr double kDegenerateRange = 1e-12;

ScalarField minmax_normalize(const ScalarField& f);

// Sum(f*m)/Sum(m), or 0 when the mask is empty.
double masked_mean(const ScalarField& f, const BinaryMask& m);

}  // namespace rnb
