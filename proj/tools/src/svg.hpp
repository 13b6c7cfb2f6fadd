#pragma once

#include <string>
#include <vector>

namespace vcdm::cli {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

struct LinePlot {
    std::string title;
    std::string x_label;
    std::string y_label;
    bool log_x = false;
    std::vector<Series> series;
};

// Static SVG line chart with markers, axes, ticks and a legend.
std::string render_svg(const LinePlot& plot, int width = 640, int height = 400);

}  // namespace vcdm::cli
