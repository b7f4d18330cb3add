/*
 * Copyright 2026 The fsvlm Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "fsvlm/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fsvlm/error.hpp"

namespace fsvlm {

Image::Image(int w, int h, std::uint8_t fill)
    : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

Image read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot read PNG '" + path.string() + "': " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  Image out(static_cast<int>(png.width), static_cast<int>(png.height));
  if (!png_image_finish_read(&png, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw IoError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.empty()) throw IoError("refusing to write empty image to " + path.string());
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path.string() + "': " + png.message);
  }
}

Image resize(const Image& src, int width, int height) {
  if (src.width == width && src.height == height) return src;
  Image out(width, height);
  const double sx = static_cast<double>(src.width) / width;
  const double sy = static_cast<double>(src.height) / height;
  for (int y = 0; y < height; ++y) {
    // Source footprint of the destination pixel; when upsampling the
    // footprint is narrower than one source pixel and this degrades to
    // nearest-with-blend, which is fine for the harness.
    const double y0 = y * sy, y1 = (y + 1) * sy;
    for (int x = 0; x < width; ++x) {
      const double x0 = x * sx, x1 = (x + 1) * sx;
      double acc[3] = {0, 0, 0};
      double total = 0;
      for (int yy = static_cast<int>(std::floor(y0)); yy < static_cast<int>(std::ceil(y1)); ++yy) {
        const double wy = std::min<double>(yy + 1, y1) - std::max<double>(yy, y0);
        if (wy <= 0) continue;
        const int cy = std::clamp(yy, 0, src.height - 1);
        for (int xx = static_cast<int>(std::floor(x0)); xx < static_cast<int>(std::ceil(x1)); ++xx) {
          const double wx = std::min<double>(xx + 1, x1) - std::max<double>(xx, x0);
          if (wx <= 0) continue;
          const int cx = std::clamp(xx, 0, src.width - 1);
          const auto* p = src.at(cx, cy);
          const double w = wx * wy;
          for (int c = 0; c < 3; ++c) acc[c] += w * p[c];
          total += w;
        }
      }
      auto* q = out.at(x, y);
      for (int c = 0; c < 3; ++c) {
        q[c] = static_cast<std::uint8_t>(std::clamp(std::lround(acc[c] / total), 0L, 255L));
      }
    }
  }
  return out;
}

Image crop_with_fill(const Image& src, int x0, int y0, int w, int h, std::uint8_t fill) {
  Image out(w, h, fill);
  for (int y = 0; y < h; ++y) {
    const int sy = y0 + y;
    if (sy < 0 || sy >= src.height) continue;
    for (int x = 0; x < w; ++x) {
      const int sx = x0 + x;
      if (sx < 0 || sx >= src.width) continue;
      std::memcpy(out.at(x, y), src.at(sx, sy), 3);
    }
  }
  return out;
}

}  // namespace fsvlm
