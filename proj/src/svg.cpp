#include "kloc/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace kloc {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
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

struct Rgb {
  int r, g, b;
};

Rgb site_hue(Site s) {
  switch (s) {
    case Site::Hidden: return {42, 77, 171};   // blue
    case Site::MlpOut: return {26, 122, 62};   // green
    case Site::AttnOut: return {178, 34, 52};  // red
    default: return {80, 80, 80};
  }
}

std::string lerp_color(Rgb hue, double t) {
  t = std::clamp(t, 0.0, 1.0);
  int r = static_cast<int>(std::lround(255 + (hue.r - 255) * t));
  int g = static_cast<int>(std::lround(255 + (hue.g - 255) * t));
  int b = static_cast<int>(std::lround(255 + (hue.b - 255) * t));
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace

std::string emit_heatmap_svg(const TraceGrid& grid, const std::string& title,
                             const std::map<std::string, std::string>& metadata) {
  require(!grid.aie.empty() && grid.L >= 1, Error::Kind::Report, "heatmap: empty grid");

  std::vector<Bucket> buckets;
  for (Bucket b : all_buckets())
    if (grid.aie.count(b)) buckets.push_back(b);

  double lo = grid.aie.begin()->second[0], hi = lo;
  for (const auto& [b, vals] : grid.aie) {
    for (double v : vals) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  bool flat = !(hi > lo);

  const int cell_w = 34, cell_h = 26;
  const int left = 150, top = 56, bottom = 46;
  int width = left + grid.L * cell_w + 20;
  int height = top + static_cast<int>(buckets.size()) * cell_h + bottom;

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  for (const auto& [k, v] : metadata) os << "<!-- " << xml_escape(k) << ": " << xml_escape(v) << " -->\n";
  os << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"22\" font-family=\"sans-serif\" font-size=\"14\" font-weight=\"bold\">"
     << xml_escape(title) << "</text>\n";

  Rgb hue = site_hue(grid.site);
  for (size_t r = 0; r < buckets.size(); ++r) {
    int y = top + static_cast<int>(r) * cell_h;
    os << "<text x=\"" << left - 8 << "\" y=\"" << y + cell_h / 2 + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << bucket_name(buckets[r])
       << "</text>\n";
    const auto& vals = grid.aie.at(buckets[r]);
    for (int l = 0; l < grid.L; ++l) {
      double t = flat ? 0.5 : (vals[l] - lo) / (hi - lo);
      os << "<rect class=\"cell\" x=\"" << left + l * cell_w << "\" y=\"" << y << "\" width=\"" << cell_w
         << "\" height=\"" << cell_h << "\" fill=\"" << lerp_color(hue, t)
         << "\" stroke=\"#e0e0e0\" stroke-width=\"1\"><title>" << bucket_name(buckets[r]) << " layer " << l + 1
         << ": " << fmt(vals[l]) << "</title></rect>\n";
    }
  }
  for (int l = 0; l < grid.L; ++l) {
    os << "<text x=\"" << left + l * cell_w + cell_w / 2 << "\" y=\"" << top - 8
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << l + 1 << "</text>\n";
  }
  os << "<text x=\"" << left << "\" y=\"" << top - 26
     << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#555\">layer</text>\n";

  int legend_y = top + static_cast<int>(buckets.size()) * cell_h + 24;
  os << "<text x=\"" << left << "\" y=\"" << legend_y << "\" font-family=\"sans-serif\" font-size=\"11\">scale: min="
     << fmt(lo) << " max=" << fmt(hi) << "</text>\n";
  if (flat) {
    os << "<text x=\"" << left << "\" y=\"" << legend_y + 16
       << "\" class=\"warning\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#b22\">"
       << "warning: all cells equal; flat color scale</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace kloc
