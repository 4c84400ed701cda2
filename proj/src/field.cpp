#include "rnb/field.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "rnb/error.hpp"

namespace rnb {

const char* errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::DegenerateBox: return "DegenerateBox";
    case Errc::OddShape: return "OddShape";
    case Errc::TooSmall: return "TooSmall";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonScalarLoss: return "NonScalarLoss";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::ZeroUnion: return "ZeroUnion";
    case Errc::NonFiniteGradient: return "NonFiniteGradient";
    case Errc::ParseError: return "ParseError";
    case Errc::ValidationError: return "ValidationError";
    case Errc::MissingRun: return "MissingRun";
    case Errc::UnknownParam: return "UnknownParam";
    case Errc::Io: return "IoError";
  }
  return "Error";
}

namespace {

void require_positive_shape(int height, int width) {
  if (height < 1 || width < 1) {
    std::ostringstream os;
    os << "field shape must be positive, got " << height << "x" << width;
    throw Error(Errc::ShapeMismatch, os.str());
  }
}

// One output sample of a 1-D linear resampler: out = w0*in[i0] + w1*in[i1].
struct Tap {
  int i0;
  int i1;
  double w0;
  double w1;
};

// align_corners=false: output center o+0.5 maps to (o+0.5)*in/out in input
// pixel units, clamped to the first/last input center.
std::vector<Tap> linear_taps(int in, int out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const double frac = src - i0;
    taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - frac, frac};
  }
  return taps;
}

int clamp_index(int i, int n) { return std::clamp(i, 0, n - 1); }

constexpr int kSobelX[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
constexpr int kSobelY[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};

void require_sobel_shape(const ScalarField& f) {
  if (f.height() < 3 || f.width() < 3) {
    std::ostringstream os;
    os << "Sobel needs at least 3x3, got " << f.height() << "x" << f.width();
    throw Error(Errc::TooSmall, os.str());
  }
}

ScalarField correlate3(const ScalarField& f, const int (&k)[3][3]) {
  require_sobel_shape(f);
  ScalarField out(f.height(), f.width());
  for (int h = 0; h < f.height(); ++h) {
    for (int w = 0; w < f.width(); ++w) {
      double acc = 0.0;
      for (int dh = -1; dh <= 1; ++dh) {
        for (int dw = -1; dw <= 1; ++dw) {
          const int kv = k[dh + 1][dw + 1];
          if (kv == 0) continue;
          acc += kv * f.at(clamp_index(h + dh, f.height()), clamp_index(w + dw, f.width()));
        }
      }
      out.at(h, w) = acc;
    }
  }
  return out;
}

ScalarField correlate3_adjoint(const ScalarField& g, const int (&k)[3][3]) {
  require_sobel_shape(g);
  ScalarField out(g.height(), g.width());
  for (int h = 0; h < g.height(); ++h) {
    for (int w = 0; w < g.width(); ++w) {
      const double gv = g.at(h, w);
      for (int dh = -1; dh <= 1; ++dh) {
        for (int dw = -1; dw <= 1; ++dw) {
          const int kv = k[dh + 1][dw + 1];
          if (kv == 0) continue;
          out.at(clamp_index(h + dh, g.height()), clamp_index(w + dw, g.width())) += kv * gv;
        }
      }
    }
  }
  return out;
}

}  // namespace

ScalarField::ScalarField(int height, int width, double fill)
    : height_(height), width_(width) {
  require_positive_shape(height, width);
  values_.assign(static_cast<std::size_t>(height) * width, fill);
}

ScalarField::ScalarField(int height, int width, std::vector<double> values)
    : height_(height), width_(width), values_(std::move(values)) {
  require_positive_shape(height, width);
  if (values_.size() != static_cast<std::size_t>(height) * width) {
    throw Error(Errc::ShapeMismatch, "value count does not match height*width");
  }
}

double ScalarField::sum() const noexcept {
  double s = 0.0;
  for (double v : values_) s += v;
  return s;
}

double ScalarField::min() const noexcept { return *std::min_element(values_.begin(), values_.end()); }

double ScalarField::max() const noexcept { return *std::max_element(values_.begin(), values_.end()); }

bool ScalarField::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

ScalarField ScalarField::reshaped(int height, int width) const {
  return ScalarField(height, width, values_);
}

BinaryMask::BinaryMask(int height, int width, bool fill) : height_(height), width_(width) {
  require_positive_shape(height, width);
  bits_.assign(static_cast<std::size_t>(height) * width, fill ? 1 : 0);
}

BinaryMask::BinaryMask(const ScalarField& f) : height_(f.height()), width_(f.width()) {
  bits_.resize(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f[i] == 0.0) {
      bits_[i] = 0;
    } else if (f[i] == 1.0) {
      bits_[i] = 1;
    } else {
      throw Error(Errc::ValidationError, "binary mask values must be exactly 0 or 1");
    }
  }
}

std::size_t BinaryMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

BinaryMask BinaryMask::complement() const {
  BinaryMask out = *this;
  for (auto& b : out.bits_) b = b ? 0 : 1;
  return out;
}

ScalarField BinaryMask::to_field() const {
  std::vector<double> v(bits_.begin(), bits_.end());
  return ScalarField(height_, width_, std::move(v));
}

std::uint64_t BinaryMask::hash() const noexcept {
  // FNV-1a over shape and bits.
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t x) {
    h ^= x;
    h *= 1099511628211ULL;
  };
  mix(static_cast<std::uint64_t>(height_));
  mix(static_cast<std::uint64_t>(width_));
  for (auto b : bits_) mix(b);
  return h;
}

NormBox NormBox::make(double x0, double y0, double x1, double y1) {
  const bool ok = 0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0;
  if (!ok) {
    std::ostringstream os;
    os << "box [" << x0 << "," << y0 << "," << x1 << "," << y1
       << "] violates 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1";
    throw Error(Errc::ValidationError, os.str());
  }
  return NormBox{x0, y0, x1, y1};
}

BinaryMask rasterize_box(const NormBox& box, int height, int width) {
  BinaryMask m(height, width);
  std::size_t on = 0;
  for (int h = 0; h < height; ++h) {
    const double cy = (h + 0.5) / height;
    if (cy < box.y0 || cy >= box.y1) continue;
    for (int w = 0; w < width; ++w) {
      const double cx = (w + 0.5) / width;
      if (cx >= box.x0 && cx < box.x1) {
        m.set(h, w, true);
        ++on;
      }
    }
  }
  if (on == 0) {
    std::ostringstream os;
    os << "box [" << box.x0 << "," << box.y0 << "," << box.x1 << "," << box.y1
       << "] covers no pixel center at " << height << "x" << width;
    throw Error(Errc::DegenerateBox, os.str());
  }
  return m;
}

ScalarField bilinear_upsample_channels(const ScalarField& f, int height, int width, int out_h,
                                       int out_w) {
  if (f.height() != height * width) {
    throw Error(Errc::ShapeMismatch, "upsample: row count is not height*width");
  }
  if (out_h < height || out_w < width) {
    throw Error(Errc::ShapeMismatch, "upsample: output smaller than input");
  }
  const int channels = f.width();
  const auto th = linear_taps(height, out_h);
  const auto tw = linear_taps(width, out_w);
  ScalarField out(out_h * out_w, channels);
  for (int oh = 0; oh < out_h; ++oh) {
    const Tap& a = th[static_cast<std::size_t>(oh)];
    for (int ow = 0; ow < out_w; ++ow) {
      const Tap& b = tw[static_cast<std::size_t>(ow)];
      const int r00 = a.i0 * width + b.i0;
      const int r01 = a.i0 * width + b.i1;
      const int r10 = a.i1 * width + b.i0;
      const int r11 = a.i1 * width + b.i1;
      const int ro = oh * out_w + ow;
      for (int c = 0; c < channels; ++c) {
        out.at(ro, c) = a.w0 * (b.w0 * f.at(r00, c) + b.w1 * f.at(r01, c)) +
                        a.w1 * (b.w0 * f.at(r10, c) + b.w1 * f.at(r11, c));
      }
    }
  }
  return out;
}

ScalarField bilinear_upsample_channels_adjoint(const ScalarField& g, int in_h, int in_w,
                                               int out_h, int out_w) {
  if (g.height() != out_h * out_w) {
    throw Error(Errc::ShapeMismatch, "upsample adjoint: row count is not out_h*out_w");
  }
  const int channels = g.width();
  const auto th = linear_taps(in_h, out_h);
  const auto tw = linear_taps(in_w, out_w);
  ScalarField out(in_h * in_w, channels);
  for (int oh = 0; oh < out_h; ++oh) {
    const Tap& a = th[static_cast<std::size_t>(oh)];
    for (int ow = 0; ow < out_w; ++ow) {
      const Tap& b = tw[static_cast<std::size_t>(ow)];
      const int ro = oh * out_w + ow;
      for (int c = 0; c < channels; ++c) {
        const double gv = g.at(ro, c);
        out.at(a.i0 * in_w + b.i0, c) += a.w0 * b.w0 * gv;
        out.at(a.i0 * in_w + b.i1, c) += a.w0 * b.w1 * gv;
        out.at(a.i1 * in_w + b.i0, c) += a.w1 * b.w0 * gv;
        out.at(a.i1 * in_w + b.i1, c) += a.w1 * b.w1 * gv;
      }
    }
  }
  return out;
}

ScalarField bilinear_upsample(const ScalarField& f, int out_h, int out_w) {
  return bilinear_upsample_channels(f.reshaped(f.size(), 1), f.height(), f.width(), out_h, out_w)
      .reshaped(out_h, out_w);
}

ScalarField bilinear_upsample_adjoint(const ScalarField& g, int in_h, int in_w) {
  return bilinear_upsample_channels_adjoint(g.reshaped(g.size(), 1), in_h, in_w, g.height(),
                                            g.width())
      .reshaped(in_h, in_w);
}

ScalarField avg_pool2_channels(const ScalarField& f, int height, int width) {
  if (height % 2 != 0 || width % 2 != 0) {
    std::ostringstream os;
    os << "avg_pool2 needs even dimensions, got " << height << "x" << width;
    throw Error(Errc::OddShape, os.str());
  }
  if (f.height() != height * width) {
    throw Error(Errc::ShapeMismatch, "avg_pool2: row count is not height*width");
  }
  const int channels = f.width();
  const int oh_n = height / 2;
  const int ow_n = width / 2;
  ScalarField out(oh_n * ow_n, channels);
  for (int oh = 0; oh < oh_n; ++oh) {
    for (int ow = 0; ow < ow_n; ++ow) {
      const int r00 = (2 * oh) * width + 2 * ow;
      const int r10 = r00 + width;
      for (int c = 0; c < channels; ++c) {
        out.at(oh * ow_n + ow, c) =
            0.25 * (f.at(r00, c) + f.at(r00 + 1, c) + f.at(r10, c) + f.at(r10 + 1, c));
      }
    }
  }
  return out;
}

ScalarField avg_pool2_channels_adjoint(const ScalarField& g, int height, int width) {
  if (height % 2 != 0 || width % 2 != 0) {
    throw Error(Errc::OddShape, "avg_pool2 adjoint needs even dimensions");
  }
  const int channels = g.width();
  const int ow_n = width / 2;
  ScalarField out(height * width, channels);
  for (int h = 0; h < height; ++h) {
    for (int w = 0; w < width; ++w) {
      const int src = (h / 2) * ow_n + w / 2;
      for (int c = 0; c < channels; ++c) out.at(h * width + w, c) = 0.25 * g.at(src, c);
    }
  }
  return out;
}

ScalarField avg_pool2(const ScalarField& f) {
  return avg_pool2_channels(f.reshaped(f.size(), 1), f.height(), f.width())
      .reshaped(f.height() / 2, f.width() / 2);
}

ScalarField avg_pool2_adjoint(const ScalarField& g) {
  const int h = g.height() * 2;
  const int w = g.width() * 2;
  return avg_pool2_channels_adjoint(g.reshaped(g.size(), 1), h, w).reshaped(h, w);
}

ScalarField sobel_x(const ScalarField& f) { return correlate3(f, kSobelX); }
ScalarField sobel_y(const ScalarField& f) { return correlate3(f, kSobelY); }
ScalarField sobel_x_adjoint(const ScalarField& g) { return correlate3_adjoint(g, kSobelX); }
ScalarField sobel_y_adjoint(const ScalarField& g) { return correlate3_adjoint(g, kSobelY); }

ScalarField sobel_edges(const ScalarField& f) {
  const ScalarField gx = sobel_x(f);
  const ScalarField gy = sobel_y(f);
  ScalarField out(f.height(), f.width());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i] + kSobelEps);
  }
  return out;
}

ScalarField minmax_normalize(const ScalarField& f) {
  const double lo = f.min();
  const double range = f.max() - lo;
  ScalarField out(f.height(), f.width());
  if (range < kDegenerateRange) return out;
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = (f[i] - lo) / range;
  return out;
}

double masked_mean(const ScalarField& f, const BinaryMask& m) {
  if (f.height() != m.height() || f.width() != m.width()) {
    throw Error(Errc::ShapeMismatch, "masked_mean: field and mask shapes differ");
  }
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (m[i]) {
      s += f[i];
      ++n;
    }
  }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

}  // namespace rnb
