#include "cart/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cart/errors.hpp"

namespace cart {

namespace {

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFoundError("cannot open file: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

unsigned char quantize_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(c * 255.0f));
}

// --- PNM (PPM/PGM) ---

struct PnmCursor {
  const unsigned char* p;
  const unsigned char* end;
};

// Skips whitespace and '#' comments, then parses a non-negative integer.
int pnm_next_int(PnmCursor& c) {
  while (c.p < c.end) {
    if (std::isspace(*c.p)) {
      ++c.p;
    } else if (*c.p == '#') {
      while (c.p < c.end && *c.p != '\n') ++c.p;
    } else {
      break;
    }
  }
  if (c.p >= c.end || !std::isdigit(*c.p)) throw MalformedInputError("malformed PNM header");
  long v = 0;
  while (c.p < c.end && std::isdigit(*c.p)) {
    v = v * 10 + (*c.p - '0');
    if (v > 1'000'000'000) throw MalformedInputError("PNM header value out of range");
    ++c.p;
  }
  return static_cast<int>(v);
}

Image load_pnm(const std::vector<unsigned char>& bytes) {
  PnmCursor c{bytes.data(), bytes.data() + bytes.size()};
  if (bytes.size() < 2) throw MalformedInputError("truncated PNM file");
  const char kind = static_cast<char>(bytes[1]);
  c.p += 2;
  const int channels = (kind == '6') ? 3 : 1;
  const bool ascii = (kind == '2');

  const int w = pnm_next_int(c);
  const int h = pnm_next_int(c);
  const int maxval = pnm_next_int(c);
  if (w < 1 || h < 1) throw MalformedInputError("invalid PNM dimensions");
  if (maxval != 255) throw UnsupportedFormatError("unsupported PNM bit depth (maxval " + std::to_string(maxval) + ")");

  Image img(h, w, channels);
  const size_t n = img.size();
  if (ascii) {
    for (size_t i = 0; i < n; ++i) {
      const int v = pnm_next_int(c);
      if (v > maxval) throw MalformedInputError("PGM sample exceeds maxval");
      img.data[i] = static_cast<float>(v) / 255.0f;
    }
  } else {
    if (c.p >= c.end) throw MalformedInputError("truncated PNM file");
    ++c.p;  // single whitespace byte after maxval
    if (static_cast<size_t>(c.end - c.p) < n) throw MalformedInputError("truncated PNM payload");
    for (size_t i = 0; i < n; ++i) img.data[i] = static_cast<float>(c.p[i]) / 255.0f;
  }
  return img;
}

void save_pnm(const Image& img, const std::filesystem::path& path, bool color) {
  if (color && img.channels != 3) throw ShapeError("PPM requires 3 channels, image has " + std::to_string(img.channels));
  if (!color && img.channels != 1) throw ShapeError("PGM requires 1 channel, image has " + std::to_string(img.channels));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileNotFoundError("cannot write file: " + path.string());
  out << (color ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(img.width) * img.channels);
  for (int y = 0; y < img.height; ++y) {
    const float* src = img.data.data() + static_cast<size_t>(y) * img.width * img.channels;
    for (size_t i = 0; i < row.size(); ++i) row[i] = quantize_byte(src[i]);
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw Error("write failed: " + path.string());
}

// --- PNG ---

struct PngReadCtx {
  const unsigned char* p;
  size_t remaining;
};

void png_mem_read(png_structp png, png_bytep out, png_size_t len) {
  auto* ctx = static_cast<PngReadCtx*>(png_get_io_ptr(png));
  if (len > ctx->remaining) {
    png_error(png, "unexpected end of PNG data");
    return;
  }
  std::memcpy(out, ctx->p, len);
  ctx->p += len;
  ctx->remaining -= len;
}

Image load_png(const std::vector<unsigned char>& bytes) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error("libpng init failed");
  }

  // Plain buffers only past this point; longjmp must not skip destructors.
  std::vector<unsigned char> pixels;
  std::vector<png_bytep> rows;
  int h = 0, w = 0, channels = 0;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw MalformedInputError("malformed PNG file");
  }

  PngReadCtx ctx{bytes.data(), bytes.size()};
  png_set_read_fn(png, &ctx, png_mem_read);
  png_read_info(png, info);

  const png_uint_32 width = png_get_image_width(png, info);
  const png_uint_32 height = png_get_image_height(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);

  if (bit_depth == 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw UnsupportedFormatError("unsupported PNG bit depth: 16");
  }
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);

  channels = png_get_channels(png, info);
  if (channels == 4) channels = 3;  // alpha already stripped
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw UnsupportedFormatError("unsupported PNG channel count: " + std::to_string(channels));
  }
  h = static_cast<int>(height);
  w = static_cast<int>(width);

  const size_t stride = png_get_rowbytes(png, info);
  pixels.resize(stride * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(h, w, channels);
  for (int y = 0; y < h; ++y) {
    const unsigned char* src = pixels.data() + static_cast<size_t>(y) * stride;
    float* dst = img.data.data() + static_cast<size_t>(y) * w * channels;
    for (int i = 0; i < w * channels; ++i) dst[i] = static_cast<float>(src[i]) / 255.0f;
  }
  return img;
}

void save_png(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) {
    throw ShapeError("PNG writer supports 1 or 3 channels, image has " + std::to_string(img.channels));
  }
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw FileNotFoundError("cannot write file: " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw Error("libpng init failed");
  }

  std::vector<unsigned char> bytes(img.size());
  std::vector<png_bytep> rows(img.height);
  for (size_t i = 0; i < img.size(); ++i) bytes[i] = quantize_byte(img.data[i]);
  const size_t stride = static_cast<size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y) rows[y] = bytes.data() + y * stride;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error("PNG write failed: " + path.string());
  }

  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width, img.height, 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

constexpr char kRawMagic[8] = {'C', 'A', 'R', 'T', 'R', 'A', 'W', 'F'};

}  // namespace

Image load_image(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), "\x89PNG\r\n\x1a\n", 8) == 0) return load_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '2' || bytes[1] == '5' || bytes[1] == '6')) return load_pnm(bytes);
  throw MalformedInputError("unrecognized image format: " + path.string());
}

void save_image(const Image& img, const std::filesystem::path& path) {
  if (img.height < 1 || img.width < 1) throw ShapeError("cannot save empty image");
  const auto ext = path.extension().string();
  if (ext == ".png") {
    save_png(img, path);
  } else if (ext == ".ppm") {
    save_pnm(img, path, /*color=*/true);
  } else if (ext == ".pgm") {
    save_pnm(img, path, /*color=*/false);
  } else {
    throw UnsupportedFormatError("unsupported image extension: " + ext);
  }
}

Image load_image_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFoundError("cannot open file: " + path.string());
  char magic[8];
  std::uint32_t h = 0, w = 0, c = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&h), 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&c), 4);
  if (!in || std::memcmp(magic, kRawMagic, 8) != 0) throw MalformedInputError("malformed raw image header: " + path.string());
  if (h < 1 || w < 1 || (c != 1 && c != 3)) throw MalformedInputError("invalid raw image dimensions");
  Image img(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
  in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.size() * sizeof(float)));
  if (!in) throw MalformedInputError("truncated raw image payload: " + path.string());
  return img;
}

void save_image_raw(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileNotFoundError("cannot write file: " + path.string());
  const std::uint32_t h = static_cast<std::uint32_t>(img.height);
  const std::uint32_t w = static_cast<std::uint32_t>(img.width);
  const std::uint32_t c = static_cast<std::uint32_t>(img.channels);
  out.write(kRawMagic, 8);
  out.write(reinterpret_cast<const char*>(&h), 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&c), 4);
  out.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.size() * sizeof(float)));
  if (!out) throw Error("write failed: " + path.string());
}

void resize_bilinear_buffer(const float* src, int h, int w, int c, float* dst, int oh, int ow) {
  // Corner-aligned: sample position for output index i is i*(in-1)/(out-1).
  // A size-1 output axis samples the source center.
  auto src_pos = [](int out_i, int in_n, int out_n) -> double {
    if (out_n == 1) return 0.5 * (in_n - 1);
    return static_cast<double>(out_i) * (in_n - 1) / (out_n - 1);
  };
  for (int oy = 0; oy < oh; ++oy) {
    const double fy = src_pos(oy, h, oh);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const float wy = static_cast<float>(fy - y0);
    for (int ox = 0; ox < ow; ++ox) {
      const double fx = src_pos(ox, w, ow);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const float wx = static_cast<float>(fx - x0);
      const float* p00 = src + (static_cast<size_t>(y0) * w + x0) * c;
      const float* p01 = src + (static_cast<size_t>(y0) * w + x1) * c;
      const float* p10 = src + (static_cast<size_t>(y1) * w + x0) * c;
      const float* p11 = src + (static_cast<size_t>(y1) * w + x1) * c;
      float* out = dst + (static_cast<size_t>(oy) * ow + ox) * c;
      for (int ch = 0; ch < c; ++ch) {
        const float top = p00[ch] + wx * (p01[ch] - p00[ch]);
        const float bot = p10[ch] + wx * (p11[ch] - p10[ch]);
        out[ch] = top + wy * (bot - top);
      }
    }
  }
}

Image resize_bilinear(const Image& img, int new_h, int new_w) {
  if (new_h < 1 || new_w < 1) throw ShapeError("resize target must be at least 1x1");
  if (new_h == img.height && new_w == img.width) return img;
  Image out(new_h, new_w, img.channels);
  resize_bilinear_buffer(img.data.data(), img.height, img.width, img.channels, out.data.data(), new_h, new_w);
  return out;
}

Image image_add(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeError("image_add shape mismatch");
  Image out = a;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i];
  return out;
}

Image image_sub(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeError("image_sub shape mismatch");
  Image out = a;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] -= b.data[i];
  return out;
}

float image_max_abs_diff(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeError("image_max_abs_diff shape mismatch");
  float m = 0.0f;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

double image_mse(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeError("image_mse shape mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

}  // namespace cart
