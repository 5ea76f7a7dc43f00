#pragma once

#include "magslam/csv.hpp"
#include "magslam/types.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

namespace magslam {

/// One polyline (or marker series) of a 2-D plot.
struct PlotSeries {
    std::string name;
    std::string color = "#000000";
    bool dashed = false;
    bool markers = false;  // draw triangles at points instead of a line
    std::vector<Vec2> points;
};

/// Self-contained SVG with axes implied by the data bounding box.
inline void write_svg(const std::string& path, const std::vector<PlotSeries>& series,
                      int width_px = 640, int height_px = 480) {
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series) {
        for (const auto& p : s.points) {
            xmin = std::min(xmin, p.x());
            xmax = std::max(xmax, p.x());
            ymin = std::min(ymin, p.y());
            ymax = std::max(ymax, p.y());
        }
    }
    if (!(xmin <= xmax)) {
        xmin = ymin = 0.0;
        xmax = ymax = 1.0;
    }
    const double padx = std::max(1e-12, 0.05 * (xmax - xmin));
    const double pady = std::max(1e-12, 0.05 * (ymax - ymin));
    xmin -= padx; xmax += padx; ymin -= pady; ymax += pady;
    const double margin = 40.0;
    const double sx = (width_px - 2 * margin) / (xmax - xmin);
    const double sy = (height_px - 2 * margin) / (ymax - ymin);
    auto X = [&](double x) { return margin + (x - xmin) * sx; };
    auto Y = [&](double y) { return height_px - margin - (y - ymin) * sy; };  // y up

    std::ofstream out(path);
    if (!out) throw InputError("cannot write file: " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width_px << "\" height=\""
        << height_px << "\" viewBox=\"0 0 " << width_px << " " << height_px << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    int legend_y = 20;
    for (const auto& s : series) {
        if (s.points.empty()) continue;
        if (s.markers) {
            for (const auto& p : s.points) {
                const double cx = X(p.x()), cy = Y(p.y());
                out << "<polygon points=\"" << fmt_double(cx) << "," << fmt_double(cy - 4) << " "
                    << fmt_double(cx - 4) << "," << fmt_double(cy + 3) << " " << fmt_double(cx + 4)
                    << "," << fmt_double(cy + 3) << "\" fill=\"" << s.color << "\"/>\n";
            }
        } else {
            out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\"";
            if (s.dashed) out << " stroke-dasharray=\"6,4\"";
            out << " points=\"";
            for (const auto& p : s.points)
                out << fmt_double(X(p.x())) << "," << fmt_double(Y(p.y())) << " ";
            out << "\"/>\n";
        }
        out << "<text x=\"" << (width_px - 180) << "\" y=\"" << legend_y << "\" fill=\"" << s.color
            << "\" font-size=\"13\">" << s.name << "</text>\n";
        legend_y += 16;
    }
    out << "</svg>\n";
}

}  // namespace magslam
