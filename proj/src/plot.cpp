#include "lst/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "lst/error.hpp"

namespace lst::plot {

namespace {

constexpr double kW = 960.0, kH = 540.0;
constexpr double kLeft = 70.0, kRight = 30.0, kTop = 50.0, kBottom = 55.0;

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", v);
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

std::string render_svg(const std::vector<Series>& series, const std::string& title,
                       const std::string& x_label, const std::string& y_label) {
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size()) throw ContractError("series x/y lengths differ: " + s.name);
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    }
    if (!(xmin <= xmax)) throw ContractError("nothing to plot");
    if (xmax == xmin) xmax = xmin + 1.0;
    if (ymax == ymin) ymax = ymin + 1.0;

    const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
    auto sx = [&](double v) { return kLeft + (v - xmin) / (xmax - xmin) * pw; };
    auto sy = [&](double v) { return kTop + ph - (v - ymin) / (ymax - ymin) * ph; };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
        << "\" viewBox=\"0 0 " << kW << ' ' << kH << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << kW / 2 << "\" y=\"28\" text-anchor=\"middle\" font-size=\"16\" "
           "font-family=\"sans-serif\">"
        << escape(title) << "</text>\n";

    // axes + min/max ticks
    svg << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw
        << "\" y2=\"" << kTop + ph << "\" stroke=\"black\"/>\n"
        << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
        << kTop + ph << "\" stroke=\"black\"/>\n";
    auto tick = [&](double px, double py, const std::string& text, const char* anchor) {
        svg << "<text x=\"" << px << "\" y=\"" << py << "\" text-anchor=\"" << anchor
            << "\" font-size=\"11\" font-family=\"sans-serif\">" << text << "</text>\n";
    };
    tick(kLeft, kTop + ph + 16, num(xmin), "middle");
    tick(kLeft + pw, kTop + ph + 16, num(xmax), "middle");
    tick(kLeft - 6, kTop + ph + 4, num(ymin), "end");
    tick(kLeft - 6, kTop + 4, num(ymax), "end");
    tick(kLeft + pw / 2, kH - 14, escape(x_label), "middle");
    svg << "<text x=\"16\" y=\"" << kTop + ph / 2
        << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\" "
           "transform=\"rotate(-90 16 "
        << kTop + ph / 2 << ")\">" << escape(y_label) << "</text>\n";

    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = kColors[s % (sizeof kColors / sizeof kColors[0])];
        std::ostringstream pts;
        for (std::size_t i = 0; i < series[s].x.size(); ++i) {
            if (!std::isfinite(series[s].x[i]) || !std::isfinite(series[s].y[i])) continue;
            pts << num(sx(series[s].x[i])) << ',' << num(sy(series[s].y[i])) << ' ';
        }
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\""
            << pts.str() << "\"/>\n";
        const double ly = kTop + 14.0 + 16.0 * static_cast<double>(s);
        svg << "<line x1=\"" << kLeft + pw - 110 << "\" y1=\"" << ly - 4 << "\" x2=\""
            << kLeft + pw - 90 << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color
            << "\" stroke-width=\"2\"/>\n";
        tick(kLeft + pw - 84, ly, escape(series[s].name), "start");
    }
    svg << "</svg>\n";
    return svg.str();
}

std::int64_t Csv::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<std::int64_t>(i);
    return -1;
}

Csv parse_csv(const std::string& text) {
    Csv csv;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw IoError("csv is empty");
    std::istringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) csv.header.push_back(cell);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) {
            try {
                std::size_t used = 0;
                const double v = std::stod(cell, &used);
                row.push_back(used == cell.size() ? v : std::nan(""));
            } catch (const std::exception&) {
                row.push_back(std::nan(""));
            }
        }
        row.resize(csv.header.size(), std::nan(""));
        csv.rows.push_back(std::move(row));
    }
    return csv;
}

Csv read_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_csv(ss.str());
}

void plot_csv(const std::string& csv_path, const std::string& x_col,
              const std::vector<std::string>& y_cols, const std::string& out_path,
              const std::string& title) {
    const Csv csv = read_csv(csv_path);
    const std::int64_t xi = csv.column(x_col);
    if (xi < 0) throw ConfigError("csv has no column '" + x_col + "'", "plot.x");
    if (y_cols.empty()) throw ConfigError("no y columns requested", "plot.y");
    std::vector<Series> series;
    for (const auto& name : y_cols) {
        const std::int64_t yi = csv.column(name);
        if (yi < 0) throw ConfigError("csv has no column '" + name + "'", "plot.y");
        Series s;
        s.name = name;
        for (const auto& row : csv.rows) {
            s.x.push_back(row[xi]);
            s.y.push_back(row[yi]);
        }
        series.push_back(std::move(s));
    }
    std::ofstream f(out_path, std::ios::trunc);
    if (!f) throw IoError("cannot open " + out_path);
    f << render_svg(series, title, x_col, y_cols.size() == 1 ? y_cols[0] : "value");
    if (!f) throw IoError("failed writing " + out_path);
}

}  // namespace lst::plot
