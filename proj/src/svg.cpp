#include "mrsim/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace mrsim {

namespace {

constexpr double kW = 720, kH = 440, kL = 80, kR = 170, kT = 40, kB = 60;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else if (c == '&') out += "&amp;";
        else out += c;
    }
    return out;
}

}  // namespace

std::string render_svg(const PlotSpec& spec) {
    auto tx = [&](double v) { return spec.logx ? std::log10(v) : v; };
    auto ty = [&](double v) { return spec.logy ? std::log10(v) : v; };
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : spec.series)
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            const double a = tx(s.x[i]), b = ty(s.y[i]);
            if (!std::isfinite(a) || !std::isfinite(b)) continue;
            x0 = std::min(x0, a);
            x1 = std::max(x1, a);
            y0 = std::min(y0, b);
            y1 = std::max(y1, b);
        }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 - x0 <= 0) x1 = x0 + 1;
    if (y1 - y0 <= 0) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    const double pw = kW - kL - kR, ph = kH - kT - kB;
    auto px = [&](double a) { return kL + (a - x0) / (x1 - x0) * pw; };
    auto py = [&](double b) { return kT + ph - (b - y0) / (y1 - y0) * ph; };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
      << kW << ' ' << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << num(kL + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << escape(spec.title)
      << "</text>\n";
    o << "<rect x=\"" << num(kL) << "\" y=\"" << num(kT) << "\" width=\"" << num(pw) << "\" height=\"" << num(ph)
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double a = x0 + (x1 - x0) * k / 4.0, b = y0 + (y1 - y0) * k / 4.0;
        const double va = spec.logx ? std::pow(10.0, a) : a, vb = spec.logy ? std::pow(10.0, b) : b;
        o << "<line x1=\"" << num(px(a)) << "\" y1=\"" << num(kT) << "\" x2=\"" << num(px(a)) << "\" y2=\""
          << num(kT + ph) << "\" stroke=\"#ddd\"/>\n";
        o << "<line x1=\"" << num(kL) << "\" y1=\"" << num(py(b)) << "\" x2=\"" << num(kL + pw) << "\" y2=\""
          << num(py(b)) << "\" stroke=\"#ddd\"/>\n";
        o << "<text x=\"" << num(px(a)) << "\" y=\"" << num(kT + ph + 16) << "\" text-anchor=\"middle\">" << label(va)
          << "</text>\n";
        o << "<text x=\"" << num(kL - 6) << "\" y=\"" << num(py(b) + 4) << "\" text-anchor=\"end\">" << label(vb)
          << "</text>\n";
    }
    o << "<text x=\"" << num(kL + pw / 2) << "\" y=\"" << num(kH - 16) << "\" text-anchor=\"middle\">"
      << escape(spec.xlabel) << (spec.logx ? " (log)" : "") << "</text>\n";
    o << "<text x=\"18\" y=\"" << num(kT + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << num(kT + ph / 2) << ")\">" << escape(spec.ylabel) << (spec.logy ? " (log)" : "") << "</text>\n";
    for (std::size_t s = 0; s < spec.series.size(); ++s) {
        const auto& ser = spec.series[s];
        const char* color = kColors[s % 6];
        o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.6\" points=\"";
        for (std::size_t i = 0; i < ser.x.size() && i < ser.y.size(); ++i) {
            const double a = tx(ser.x[i]), b = ty(ser.y[i]);
            if (!std::isfinite(a) || !std::isfinite(b)) continue;
            o << num(px(a)) << ',' << num(py(b)) << ' ';
        }
        o << "\"/>\n";
        if (ser.markers)
            for (std::size_t i = 0; i < ser.x.size() && i < ser.y.size(); ++i) {
                const double a = tx(ser.x[i]), b = ty(ser.y[i]);
                if (!std::isfinite(a) || !std::isfinite(b)) continue;
                o << "<circle cx=\"" << num(px(a)) << "\" cy=\"" << num(py(b)) << "\" r=\"3\" fill=\"" << color
                  << "\"/>\n";
            }
        const double ly = kT + 14 + 18.0 * static_cast<double>(s);
        o << "<line x1=\"" << num(kL + pw + 12) << "\" y1=\"" << num(ly - 4) << "\" x2=\"" << num(kL + pw + 32)
          << "\" y2=\"" << num(ly - 4) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        o << "<text x=\"" << num(kL + pw + 38) << "\" y=\"" << num(ly) << "\">" << escape(ser.name) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

}  // namespace mrsim
