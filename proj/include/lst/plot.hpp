#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lst::plot {

struct Series {
    std::string name;
    std::vector<double> x, y;  // equal length; non-finite points are skipped
};

// Minimal self-contained SVG line chart: axes, min/max tick labels, one
// polyline per series, legend in the top-right corner.
std::string render_svg(const std::vector<Series>& series, const std::string& title,
                       const std::string& x_label, const std::string& y_label);

struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;  // non-numeric cells parse as NaN

    std::int64_t column(const std::string& name) const;  // -1 when missing
};

Csv parse_csv(const std::string& text);
Csv read_csv(const std::string& path);

// Renders y columns against the x column of a metrics CSV into an SVG file.
void plot_csv(const std::string& csv_path, const std::string& x_col,
              const std::vector<std::string>& y_cols, const std::string& out_path,
              const std::string& title);

}  // namespace lst::plot
