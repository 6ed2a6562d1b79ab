#include "rotir/image_io.h"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>

namespace rotir {

double srgb_to_linear(double s) {
  if (s <= 0.04045) return s / 12.92;
  return std::pow((s + 0.055) / 1.055, 2.4);
}

double linear_to_srgb(double l) {
  if (l <= 0.0031308) return l * 12.92;
  return 1.055 * std::pow(l, 1.0 / 2.4) - 0.055;
}

uint8_t linear_to_srgb8(double linear) {
  const double s = linear_to_srgb(clamp(linear, 0.0, 1.0));
  return static_cast<uint8_t>(clamp(std::floor(s * 255.0 + 0.5), 0.0, 255.0));
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void io_fail(const std::string& path, const std::string& what) {
  throw std::runtime_error("image i/o: " + what + ": " + path);
}

}  // namespace

ImageBuffer load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) io_fail(path, "cannot open");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) io_fail(path, "png init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    io_fail(path, "png init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    io_fail(path, "png decode error");
  }

  png_init_io(png, fp.get());
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);

  const int nch = png_get_channels(png, info);
  std::vector<uint8_t> row(static_cast<size_t>(w) * nch);

  const int out_ch = (nch == 2) ? 1 : nch;  // gray+alpha folded to gray
  ImageBuffer img(static_cast<int>(w), static_cast<int>(h), out_ch == 2 ? 1 : out_ch);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x) {
      const uint8_t* px = &row[static_cast<size_t>(x) * nch];
      switch (nch) {
        case 1:
        case 2:
          img.at(x, y, 0) = srgb8_to_linear(px[0]);
          break;
        case 3:
          for (int c = 0; c < 3; ++c) img.at(x, y, c) = srgb8_to_linear(px[c]);
          break;
        case 4:
          for (int c = 0; c < 3; ++c) img.at(x, y, c) = srgb8_to_linear(px[c]);
          img.at(x, y, 3) = px[3] / 255.0;
          break;
        default:
          png_destroy_read_struct(&png, &info, nullptr);
          io_fail(path, "unsupported channel count");
      }
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void save_png(const std::string& path, const ImageBuffer& img) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) io_fail(path, "cannot open for write");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) io_fail(path, "png init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    io_fail(path, "png init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    io_fail(path, "png encode error");
  }

  const int ch = img.channels();
  const int type = ch == 1   ? PNG_COLOR_TYPE_GRAY
                   : ch == 3 ? PNG_COLOR_TYPE_RGB
                             : PNG_COLOR_TYPE_RGBA;
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width(), img.height(), 8, type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<uint8_t> row(static_cast<size_t>(img.width()) * ch);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      uint8_t* px = &row[static_cast<size_t>(x) * ch];
      for (int c = 0; c < std::min(ch, 3); ++c) px[c] = linear_to_srgb8(img.at(x, y, c));
      if (ch == 4) {
        px[3] = static_cast<uint8_t>(clamp(std::floor(img.at(x, y, 3) * 255.0 + 0.5), 0.0, 255.0));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

namespace {

// PFM scanlines run bottom-to-top; a negative scale marks little-endian data.
ImageBuffer load_pfm_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) io_fail(path, "cannot open");
  std::string magic;
  f >> magic;
  if (magic != "PF" && magic != "Pf") io_fail(path, "not a PFM file");
  const int channels = (magic == "PF") ? 3 : 1;
  int w = 0, h = 0;
  double scale = 0;
  f >> w >> h >> scale;
  if (w <= 0 || h <= 0 || scale == 0) io_fail(path, "bad PFM header");
  f.get();  // single whitespace after header
  if (scale > 0) io_fail(path, "big-endian PFM unsupported");

  ImageBuffer img(w, h, channels);
  std::vector<float> row(static_cast<size_t>(w) * channels);
  for (int y = h - 1; y >= 0; --y) {
    f.read(reinterpret_cast<char*>(row.data()), row.size() * sizeof(float));
    if (!f) io_fail(path, "truncated PFM");
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) img.at(x, y, c) = row[static_cast<size_t>(x) * channels + c];
  }
  return img;
}

void save_pfm_file(const std::string& path, const ImageBuffer& img, bool color) {
  std::ofstream f(path, std::ios::binary);
  if (!f) io_fail(path, "cannot open for write");
  const int channels = color ? 3 : 1;
  f << (color ? "PF" : "Pf") << "\n" << img.width() << " " << img.height() << "\n-1.0\n";
  std::vector<float> row(static_cast<size_t>(img.width()) * channels);
  for (int y = img.height() - 1; y >= 0; --y) {
    for (int x = 0; x < img.width(); ++x) {
      if (color) {
        const Vec3 v = img.rgb(x, y);
        row[static_cast<size_t>(x) * 3 + 0] = static_cast<float>(v.x);
        row[static_cast<size_t>(x) * 3 + 1] = static_cast<float>(v.y);
        row[static_cast<size_t>(x) * 3 + 2] = static_cast<float>(v.z);
      } else {
        row[x] = static_cast<float>(img.at(x, y, 0));
      }
    }
    f.write(reinterpret_cast<const char*>(row.data()), row.size() * sizeof(float));
  }
  if (!f) io_fail(path, "write failed");
}

std::string alpha_sibling(const std::string& path) {
  std::filesystem::path p(path);
  p.replace_filename(p.stem().string() + "_alpha.pfm");
  return p.string();
}

}  // namespace

ImageBuffer load_pfm(const std::string& path) { return load_pfm_file(path); }

void save_pfm(const std::string& path, const ImageBuffer& img) {
  if (img.channels() == 1) {
    save_pfm_file(path, img, false);
    return;
  }
  save_pfm_file(path, img, true);
  if (img.channels() == 4) {
    ImageBuffer alpha(img.width(), img.height(), 1);
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) alpha.at(x, y, 0) = img.at(x, y, 3);
    save_pfm_file(alpha_sibling(path), alpha, false);
  }
}

ImageBuffer load_image(const std::string& path) {
  const std::string ext = std::filesystem::path(path).extension().string();
  if (ext == ".png") return load_png(path);
  if (ext == ".pfm") {
    ImageBuffer img = load_pfm_file(path);
    const std::string apath = alpha_sibling(path);
    if (img.channels() == 3 && std::filesystem::exists(apath)) {
      ImageBuffer alpha = load_pfm_file(apath);
      if (alpha.width() != img.width() || alpha.height() != img.height()) {
        io_fail(apath, "alpha size mismatch");
      }
      ImageBuffer out(img.width(), img.height(), 4);
      for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
          out.set_rgb(x, y, img.rgb(x, y));
          out.at(x, y, 3) = alpha.at(x, y, 0);
        }
      return out;
    }
    return img;
  }
  io_fail(path, "unsupported extension");
}

void save_image(const std::string& path, const ImageBuffer& img) {
  const std::string ext = std::filesystem::path(path).extension().string();
  if (ext == ".png") {
    save_png(path, img);
  } else if (ext == ".pfm") {
    save_pfm(path, img);
  } else {
    io_fail(path, "unsupported extension");
  }
}

}  // namespace rotir
