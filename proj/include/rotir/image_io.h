#pragma once

#include <string>

#include "rotir/image.h"

namespace rotir {

// Standard sRGB transfer (IEC 61966-2-1).
double srgb_to_linear(double srgb);
double linear_to_srgb(double linear);
inline double srgb8_to_linear(uint8_t v) { return srgb_to_linear(v / 255.0); }
uint8_t linear_to_srgb8(double linear);

// 8-bit PNG, sRGB-encoded on disk; converted to/from linear on load/save.
// Alpha, when present, is stored linearly.
ImageBuffer load_png(const std::string& path);
void save_png(const std::string& path, const ImageBuffer& img);

// PFM, linear float32, 1 or 3 channels. 4-channel buffers are saved as a
// color PFM plus a "<stem>_alpha.pfm" grayscale mask alongside.
ImageBuffer load_pfm(const std::string& path);
void save_pfm(const std::string& path, const ImageBuffer& img);

// Dispatch on extension (.png / .pfm). For .pfm with a sibling _alpha.pfm the
// mask is merged back in as a 4th channel.
ImageBuffer load_image(const std::string& path);
void save_image(const std::string& path, const ImageBuffer& img);

}  // namespace rotir
