#include "mcbias/svg.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace mcbias::svg {

std::string escape(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

namespace {

// Avoids "-0.00" so that equal geometry prints identically.
double tidy(double v) { return std::abs(v) < 0.005 ? 0.0 : v; }

}  // namespace

Document::Document(double width, double height) : width_(width), height_(height) {}

void Document::rect(double x, double y, double w, double h, std::string_view fill,
                    std::string_view stroke, double stroke_width) {
  body_ += fmt::format(
      "<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"{}\"", tidy(x),
      tidy(y), tidy(std::max(w, 0.0)), tidy(std::max(h, 0.0)), fill);
  if (stroke != "none")
    body_ += fmt::format(" stroke=\"{}\" stroke-width=\"{:.2f}\"", stroke, stroke_width);
  body_ += "/>\n";
}

void Document::line(double x1, double y1, double x2, double y2, std::string_view stroke,
                    double width, std::string_view dash) {
  body_ += fmt::format(
      "<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"{}\" "
      "stroke-width=\"{:.2f}\"",
      tidy(x1), tidy(y1), tidy(x2), tidy(y2), stroke, width);
  if (!dash.empty()) body_ += fmt::format(" stroke-dasharray=\"{}\"", dash);
  body_ += "/>\n";
}

void Document::text(double x, double y, std::string_view content, double size,
                    std::string_view anchor, double rotate, std::string_view weight) {
  body_ += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" font-size=\"{:.1f}\"", tidy(x), tidy(y),
                       size);
  if (anchor != "start") body_ += fmt::format(" text-anchor=\"{}\"", anchor);
  if (weight != "normal") body_ += fmt::format(" font-weight=\"{}\"", weight);
  if (rotate != 0.0)
    body_ += fmt::format(" transform=\"rotate({:.1f} {:.2f} {:.2f})\"", rotate, tidy(x), tidy(y));
  body_ += fmt::format(">{}</text>\n", escape(content));
}

void Document::title(std::string_view content) {
  text(width_ / 2.0, 20.0, content, 14.0, "middle", 0.0, "bold");
}

std::string Document::str() const {
  return fmt::format(
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" "
      "viewBox=\"0 0 {:.0f} {:.0f}\" font-family=\"Helvetica, Arial, sans-serif\">\n"
      "<rect x=\"0\" y=\"0\" width=\"{:.0f}\" height=\"{:.0f}\" fill=\"#ffffff\"/>\n"
      "{}</svg>\n",
      width_, height_, width_, height_, width_, height_, body_);
}

std::string diverging(double t) {
  t = std::clamp(t, -1.0, 1.0);
  // white at 0, #2166ac at -1, #b2182b at +1
  const double lo[3] = {33, 102, 172};
  const double hi[3] = {178, 24, 43};
  const double* end = t < 0 ? lo : hi;
  const double a = std::abs(t);
  int rgb[3];
  for (int i = 0; i < 3; ++i)
    rgb[i] = static_cast<int>(std::lround(255.0 + (end[i] - 255.0) * a));
  return fmt::format("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2]);
}

}  // namespace mcbias::svg
