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

#include <cstdio>
#include <string>
#include <string_view>
#include <vector>

namespace fsvlm::svg {

// Fixed-precision number formatting keeps figure bytes reproducible.
inline std::string num(double v, int precision = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v == 0.0 ? 0.0 : v);
  return buf;
}

inline std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline const std::string& palette(std::size_t i) {
  static const std::vector<std::string> colors{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                               "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return colors[i % colors.size()];
}

class Document {
 public:
  Document(double width, double height) : width_(width), height_(height) {}

  void metadata(const std::string& text) { meta_ = text; }
  void add(const std::string& element) { body_ += element + "\n"; }
  void text(double x, double y, std::string_view s, int size = 12, std::string_view anchor = "start") {
    add("<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" font-size=\"" + std::to_string(size) +
        "\" font-family=\"sans-serif\" text-anchor=\"" + std::string(anchor) + "\">" + escape(s) + "</text>");
  }
  void line(double x1, double y1, double x2, double y2, std::string_view stroke, double width = 1) {
    add("<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) + "\" y2=\"" + num(y2) +
        "\" stroke=\"" + std::string(stroke) + "\" stroke-width=\"" + num(width) + "\"/>");
  }
  void rect(double x, double y, double w, double h, std::string_view fill, std::string_view stroke = "none") {
    add("<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(w) + "\" height=\"" + num(h) +
        "\" fill=\"" + std::string(fill) + "\" stroke=\"" + std::string(stroke) + "\"/>");
  }
  void circle(double x, double y, double r, std::string_view fill, double opacity = 1) {
    add("<circle cx=\"" + num(x) + "\" cy=\"" + num(y) + "\" r=\"" + num(r) + "\" fill=\"" + std::string(fill) +
        "\" fill-opacity=\"" + num(opacity) + "\"/>");
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, std::string_view stroke, double width = 1.5) {
    std::string p;
    for (const auto& [x, y] : pts) p += num(x) + "," + num(y) + " ";
    if (!p.empty()) p.pop_back();
    add("<polyline points=\"" + p + "\" fill=\"none\" stroke=\"" + std::string(stroke) + "\" stroke-width=\"" +
        num(width) + "\"/>");
  }

  std::string str() const {
    std::string out = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                      num(width_, 0) + "\" height=\"" + num(height_, 0) + "\" viewBox=\"0 0 " + num(width_, 0) + " " +
                      num(height_, 0) + "\">\n";
    if (!meta_.empty()) out += "<metadata>" + escape(meta_) + "</metadata>\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    return out + body_ + "</svg>\n";
  }

 private:
  double width_, height_;
  std::string meta_;
  std::string body_;
};

}  // namespace fsvlm::svg
