#pragma once

#include <string>
#include <string_view>

namespace mcbias::svg {

std::string escape(std::string_view text);

// Minimal SVG writer. Coordinates are printed with two decimals so output
// is byte-stable.
class Document {
 public:
  Document(double width, double height);

  void rect(double x, double y, double w, double h, std::string_view fill,
            std::string_view stroke = "none", double stroke_width = 1.0);
  void line(double x1, double y1, double x2, double y2, std::string_view stroke,
            double width = 1.0, std::string_view dash = {});
  // anchor: start | middle | end
  void text(double x, double y, std::string_view content, double size = 11.0,
            std::string_view anchor = "start", double rotate = 0.0,
            std::string_view weight = "normal");
  void title(std::string_view content);

  std::string str() const;

 private:
  double width_;
  double height_;
  std::string body_;
};

// Diverging blue-white-red colour for t in [-1, 1].
std::string diverging(double t);

}  // namespace mcbias::svg
