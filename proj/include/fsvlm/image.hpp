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

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace fsvlm {

// Interleaved 8-bit RGB raster, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // width * height * 3

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0);

  std::uint8_t* at(int x, int y) { return &pixels[3 * (static_cast<std::size_t>(y) * width + x)]; }
  const std::uint8_t* at(int x, int y) const {
    return &pixels[3 * (static_cast<std::size_t>(y) * width + x)];
  }
  bool empty() const { return pixels.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

// Area-weighted resampling to an arbitrary target size.
Image resize(const Image& src, int width, int height);

// Copies src[x0, x0+w) x [y0, y0+h) into a new image; pixels that fall
// outside src take `fill`.
Image crop_with_fill(const Image& src, int x0, int y0, int w, int h, std::uint8_t fill = 255);

}  // namespace fsvlm
