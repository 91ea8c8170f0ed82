#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace cart {

// Real-valued raster, row-major and channel-interleaved, nominal range [0,1].
// Intermediate results (detail factors, residuals) may leave the range.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;  // 1 or 3
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c) : height(h), width(w), channels(c), data(static_cast<size_t>(h) * w * c, 0.0f) {}

  static Image constant(int h, int w, int c, float v) {
    Image img(h, w, c);
    std::fill(img.data.begin(), img.data.end(), v);
    return img;
  }

  float& at(int y, int x, int c) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }

  size_t size() const { return data.size(); }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

// Reads a PNG, PPM (P6) or PGM (P5/P2) file, detected by magic bytes.
// Byte values are mapped to [0,1] by division by 255.
Image load_image(const std::filesystem::path& path);

// Writes PNG (.png), PPM (.ppm, 3 channels) or PGM (.pgm, 1 channel) chosen
// by extension. Values are clamped to [0,1] and quantized round(v*255) with
// ties away from zero.
void save_image(const Image& img, const std::filesystem::path& path);

// Lossless float32 sidecar, for detail factors and cached decompositions.
Image load_image_raw(const std::filesystem::path& path);
void save_image_raw(const Image& img, const std::filesystem::path& path);

// Corner-aligned bilinear resampling; endpoints map to endpoints. Returns a
// bit-identical copy when the size is unchanged. Size-1 axes sample the
// source center.
Image resize_bilinear(const Image& img, int new_h, int new_w);

// Shared kernel for channel-interleaved buffers; also used for feature maps.
void resize_bilinear_buffer(const float* src, int h, int w, int c, float* dst, int oh, int ow);

// Per-pixel helpers used across modules.
Image image_add(const Image& a, const Image& b);
Image image_sub(const Image& a, const Image& b);
float image_max_abs_diff(const Image& a, const Image& b);
double image_mse(const Image& a, const Image& b);

}  // namespace cart
