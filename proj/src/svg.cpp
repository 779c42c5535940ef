#include "adapterlab/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace adapterlab {

Svg::Svg(double width, double height) : width_(width), height_(height) { body_.precision(6); }

void Svg::rect(double x, double y, double w, double h, std::string_view fill,
               std::string_view stroke) {
  body_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h
        << "\" fill=\"" << fill << "\" stroke=\"" << stroke << "\"/>\n";
}

void Svg::line(double x1, double y1, double x2, double y2, std::string_view stroke, double width) {
  body_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2
        << "\" stroke=\"" << stroke << "\" stroke-width=\"" << width << "\"/>\n";
}

void Svg::circle(double cx, double cy, double r, std::string_view fill) {
  body_ << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"" << r << "\" fill=\"" << fill
        << "\"/>\n";
}

void Svg::text(double x, double y, std::string_view content, double size, std::string_view anchor,
               double rotate) {
  body_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size
        << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\"";
  if (rotate != 0.0) body_ << " transform=\"rotate(" << rotate << ' ' << x << ' ' << y << ")\"";
  body_ << '>' << xml_escape(content) << "</text>\n";
}

std::string Svg::str() const {
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width_ << "\" height=\""
      << height_ << "\" viewBox=\"0 0 " << width_ << ' ' << height_ << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n"
      << body_.str() << "</svg>\n";
  return out.str();
}

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string ramp_color(double t) {
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
  auto mix = [t](int a, int b) { return static_cast<int>(std::lround(a + (b - a) * t)); };
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", mix(0xf7, 0x08), mix(0xfb, 0x30), mix(0xff, 0x6b));
  return buf;
}

}  // namespace adapterlab
