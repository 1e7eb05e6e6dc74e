#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "metadiff/em_oracle.hpp"

namespace metadiff {

inline constexpr double kPlotFloorDb = -40.0;

/// 20 log10(v), floored at -40 dB (also for v = 0).
inline double to_db(double linear) {
  if (!(linear > 0.0)) return kPlotFloorDb;
  return std::max(kPlotFloorDb, 20.0 * std::log10(linear));
}

struct PlotCurve {
  std::string label;
  Spectrum spectrum;
};

/// SVG figure: 2-18 GHz on x, |S11| in dB on y (0 to -40), dashed -10 dB guide.
inline std::string comparison_svg(const Spectrum& target, const std::vector<PlotCurve>& generated,
                                  const std::string& title = "") {
  constexpr double W = 720, H = 420, L = 70, R = 20, T = 40, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  auto sx = [&](double f) { return L + (f - kFreqStartGHz) / (kFreqStopGHz - kFreqStartGHz) * pw; };
  auto sy = [&](double db) { return T + (0.0 - db) / (0.0 - kPlotFloorDb) * ph; };
  static const char* palette[] = {"#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  for (int f = 2; f <= 18; f += 2) {
    os << "<line x1=\"" << sx(f) << "\" y1=\"" << T << "\" x2=\"" << sx(f) << "\" y2=\"" << T + ph
       << "\" stroke=\"#eee\"/>\n";
    os << "<text x=\"" << sx(f) << "\" y=\"" << T + ph + 18 << "\" text-anchor=\"middle\">" << f << "</text>\n";
  }
  for (int db = 0; db >= -40; db -= 10) {
    os << "<line x1=\"" << L << "\" y1=\"" << sy(db) << "\" x2=\"" << L + pw << "\" y2=\"" << sy(db)
       << "\" stroke=\"#eee\"/>\n";
    os << "<text x=\"" << L - 8 << "\" y=\"" << sy(db) + 4 << "\" text-anchor=\"end\">" << db << "</text>\n";
  }
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">Frequency (GHz)</text>\n";
  os << "<text transform=\"translate(18," << T + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">|S11| (dB)</text>\n";
  os << "<line class=\"guide\" x1=\"" << L << "\" y1=\"" << sy(-10) << "\" x2=\"" << L + pw << "\" y2=\"" << sy(-10)
     << "\" stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n";

  auto polyline = [&](const Spectrum& s, const std::string& color, const std::string& cls, double width) {
    os << "<polyline class=\"" << cls << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"" << width
       << "\" points=\"";
    for (int i = 0; i < kSpectrumPoints; ++i) os << (i ? " " : "") << sx(frequency_ghz(i)) << ',' << sy(to_db(s[i]));
    os << "\"/>\n";
  };
  polyline(target, "black", "target", 2.0);
  for (std::size_t k = 0; k < generated.size(); ++k) polyline(generated[k].spectrum, palette[k % 8], "generated", 1.2);

  double ly = T + 14;
  auto legend = [&](const std::string& label, const std::string& color) {
    os << "<line x1=\"" << L + pw - 150 << "\" y1=\"" << ly << "\" x2=\"" << L + pw - 126 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << L + pw - 120 << "\" y=\"" << ly + 4 << "\">" << label << "</text>\n";
    ly += 16;
  };
  legend("target", "black");
  for (std::size_t k = 0; k < generated.size(); ++k)
    legend(generated[k].label.empty() ? "generated " + std::to_string(k + 1) : generated[k].label, palette[k % 8]);
  os << "</svg>\n";
  return os.str();
}

inline void plot_comparison(const Spectrum& target, const std::vector<PlotCurve>& generated,
                            const std::filesystem::path& out, const std::string& title = "") {
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write figure " + out.string());
  f << comparison_svg(target, generated, title);
  if (!f) throw std::runtime_error("write failed: " + out.string());
}

}  // namespace metadiff
