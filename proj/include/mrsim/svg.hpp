#pragma once

#include <string>
#include <vector>

namespace mrsim {

struct PlotSeries {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
    bool markers = false;
};

struct PlotSpec {
    std::string title;
    std::string xlabel;
    std::string ylabel;
    bool logx = false;
    bool logy = false;
    std::vector<PlotSeries> series;
};

/// Static line plot as a standalone SVG document.
std::string render_svg(const PlotSpec& spec);

}  // namespace mrsim
