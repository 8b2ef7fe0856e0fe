#pragma once

// Per-layer neuron histograms with CSV and SVG renderings.

#include <cstdio>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "knlab/core.hpp"

namespace knlab {

struct LayerHistogram {
    std::string label;
    std::vector<long> counts;
    std::vector<double> percent; // sums to 100 unless empty
    bool empty = true;
};

/// Counts every occurrence (a neuron listed in two sets counts twice).
inline LayerHistogram layer_distribution(const std::vector<std::set<NeuronId>>& sets, int n_layers,
                                         const std::string& label) {
    if (n_layers < 1) throw PreconditionError("layer_distribution: n_layers must be >= 1");
    LayerHistogram h;
    h.label = label;
    h.counts.assign(static_cast<std::size_t>(n_layers), 0);
    h.percent.assign(static_cast<std::size_t>(n_layers), 0.0);
    long total = 0;
    for (const auto& s : sets)
        for (auto id : s) {
            if (id.layer < 0 || id.layer >= n_layers)
                throw PreconditionError("layer_distribution: " + to_string(id) + " outside " + std::to_string(n_layers) +
                                        " layers");
            ++h.counts[static_cast<std::size_t>(id.layer)];
            ++total;
        }
    h.empty = total == 0;
    if (!h.empty)
        for (std::size_t l = 0; l < h.counts.size(); ++l)
            h.percent[l] = 100.0 * static_cast<double>(h.counts[l]) / static_cast<double>(total);
    return h;
}

inline std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string to_csv(const LayerHistogram& h) {
    std::ostringstream os;
    os << "label,layer,count,percent\n";
    for (std::size_t l = 0; l < h.counts.size(); ++l)
        os << h.label << ',' << l << ',' << h.counts[l] << ',' << fixed(h.percent[l], 4) << '\n';
    return os.str();
}

inline std::string xml_escape(const std::string& s) {
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

/// Bar chart: layers on x, percentage of neurons on y (0..100).
inline std::string to_svg(const LayerHistogram& h) {
    const int n = static_cast<int>(h.counts.size());
    const int left = 50, bottom = 40, top = 30, plot_h = 200, bar_w = 36, gap = 12;
    const int width = left + n * (bar_w + gap) + gap + 10;
    const int height = top + plot_h + bottom;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "  <text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << xml_escape(h.label)
       << (h.empty ? " (no neurons)" : "") << "</text>\n";
    const int y0 = top + plot_h;
    for (int tick = 0; tick <= 100; tick += 25) {
        const int y = y0 - tick * plot_h / 100;
        os << "  <line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << width - 10 << "\" y2=\"" << y
           << "\" stroke=\"#ddd\"/>\n";
        os << "  <text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << tick << "%</text>\n";
    }
    for (int l = 0; l < n; ++l) {
        const double pct = h.percent[static_cast<std::size_t>(l)];
        const double bh = pct * plot_h / 100.0;
        const int x = left + gap + l * (bar_w + gap);
        os << "  <rect x=\"" << x << "\" y=\"" << fixed(y0 - bh, 2) << "\" width=\"" << bar_w << "\" height=\""
           << fixed(bh, 2) << "\" fill=\"#4a7ab7\"><title>layer " << l << ": " << fixed(pct, 2)
           << "%</title></rect>\n";
        os << "  <text x=\"" << x + bar_w / 2 << "\" y=\"" << y0 + 15 << "\" text-anchor=\"middle\">" << l
           << "</text>\n";
    }
    os << "  <line x1=\"" << left << "\" y1=\"" << y0 << "\" x2=\"" << width - 10 << "\" y2=\"" << y0
       << "\" stroke=\"#333\"/>\n";
    os << "  <text x=\"" << left + (width - left) / 2 << "\" y=\"" << height - 6
       << "\" text-anchor=\"middle\">layer</text>\n";
    os << "</svg>\n";
    return os.str();
}

} // namespace knlab
