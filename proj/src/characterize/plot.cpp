#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>

#include "pemvc/characterize.hpp"
#include "pemvc/errors.hpp"
#include "pemvc/text.hpp"

namespace pemvc::characterize {
namespace {

constexpr std::array<const char*, 8> kPalette{"#1b9e77", "#d95f02", "#7570b3", "#e7298a",
                                              "#66a61e", "#e6ab02", "#a6761d", "#666666"};

std::string escape(const std::string& s) {
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

// Round-number tick spacing for a span.
double tick_step(double span) {
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (raw <= m * mag) return m * mag;
  return 10.0 * mag;
}

}  // namespace

void write_curves_svg(const std::filesystem::path& path, std::span<const Characterization> items,
                      const std::string& title) {
  if (items.empty()) throw DataError("nothing to plot");
  double jmin = std::numeric_limits<double>::infinity(), jmax = -jmin, vmin = jmin, vmax = -jmin;
  for (const auto& it : items) {
    for (const auto* c : {&it.measured, &it.predicted}) {
      for (double x : c->j) jmin = std::min(jmin, x), jmax = std::max(jmax, x);
      for (double y : c->v) vmin = std::min(vmin, y), vmax = std::max(vmax, y);
    }
  }
  if (!(jmax > jmin)) jmax = jmin + 1;
  if (!(vmax > vmin)) vmax = vmin + 0.1;
  const double vpad = 0.05 * (vmax - vmin);
  vmin -= vpad;
  vmax += vpad;

  const double W = 720, H = 480, left = 70, right = 170, top = 40, bottom = 55;
  const double pw = W - left - right, ph = H - top - bottom;
  auto sx = [&](double x) { return left + (x - jmin) / (jmax - jmin) * pw; };
  auto sy = [&](double y) { return top + (1.0 - (y - vmin) / (vmax - vmin)) * ph; };
  auto num = [](double v) { return format_fixed(v, 2); };

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << num(left + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
      << "</text>\n";
  out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";

  const double jt = tick_step(jmax - jmin);
  for (double x = std::ceil(jmin / jt) * jt; x <= jmax + 1e-12; x += jt) {
    out << "<line x1=\"" << num(sx(x)) << "\" y1=\"" << num(top + ph) << "\" x2=\"" << num(sx(x)) << "\" y2=\""
        << num(top + ph + 5) << "\" stroke=\"black\"/>";
    out << "<text x=\"" << num(sx(x)) << "\" y=\"" << num(top + ph + 18) << "\" text-anchor=\"middle\">"
        << format_double(std::round(x / jt) * jt) << "</text>\n";
  }
  const double vt = tick_step(vmax - vmin);
  for (double y = std::ceil(vmin / vt) * vt; y <= vmax + 1e-12; y += vt) {
    out << "<line x1=\"" << num(left - 5) << "\" y1=\"" << num(sy(y)) << "\" x2=\"" << num(left) << "\" y2=\""
        << num(sy(y)) << "\" stroke=\"black\"/>";
    out << "<text x=\"" << num(left - 8) << "\" y=\"" << num(sy(y) + 4) << "\" text-anchor=\"end\">"
        << format_fixed(y, 2) << "</text>\n";
  }
  out << "<text x=\"" << num(left + pw / 2) << "\" y=\"" << num(H - 12)
      << "\" text-anchor=\"middle\">current density (A/cm&#178;)</text>\n";
  out << "<text transform=\"translate(18," << num(top + ph / 2)
      << ") rotate(-90)\" text-anchor=\"middle\">cell voltage (V)</text>\n";

  for (std::size_t i = 0; i < items.size(); ++i) {
    const char* colour = kPalette[i % kPalette.size()];
    for (const auto* c : {&items[i].measured, &items[i].predicted}) {
      out << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\"";
      if (c->source == CurveSource::predicted) out << " stroke-dasharray=\"5,3\"";
      out << " points=\"";
      for (std::size_t k = 0; k < c->j.size(); ++k) out << (k ? " " : "") << num(sx(c->j[k])) << ',' << num(sy(c->v[k]));
      out << "\"/>\n";
    }
    const double ly = top + 14 + 16 * static_cast<double>(i);
    out << "<line x1=\"" << num(left + pw + 12) << "\" y1=\"" << num(ly - 4) << "\" x2=\"" << num(left + pw + 36)
        << "\" y2=\"" << num(ly - 4) << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>";
    out << "<text x=\"" << num(left + pw + 42) << "\" y=\"" << num(ly) << "\">N = " << items[i].measured.cycle_index
        << "</text>\n";
  }
  const double ly = top + 14 + 16 * static_cast<double>(items.size()) + 10;
  out << "<text x=\"" << num(left + pw + 12) << "\" y=\"" << num(ly) << "\">solid: measured</text>\n";
  out << "<text x=\"" << num(left + pw + 12) << "\" y=\"" << num(ly + 16) << "\">dashed: predicted</text>\n";
  out << "</svg>\n";
}

}  // namespace pemvc::characterize
