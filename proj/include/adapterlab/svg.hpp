#pragma once

#include <sstream>
#include <string>
#include <string_view>

namespace adapterlab {

/// Tiny append-only SVG writer for charts.
class Svg {
 public:
  Svg(double width, double height);

  void rect(double x, double y, double w, double h, std::string_view fill,
            std::string_view stroke = "none");
  void line(double x1, double y1, double x2, double y2, std::string_view stroke = "#000",
            double width = 1.0);
  void circle(double cx, double cy, double r, std::string_view fill);
  /// anchor: start | middle | end. rotate in degrees about (x, y).
  void text(double x, double y, std::string_view content, double size = 11.0,
            std::string_view anchor = "start", double rotate = 0.0);

  std::string str() const;

 private:
  double width_, height_;
  std::ostringstream body_;
};

std::string xml_escape(std::string_view s);

/// Sequential white-to-blue ramp for t in [0, 1].
std::string ramp_color(double t);

}  // namespace adapterlab
