#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "semail/png.hpp"

namespace semail::viz {

// RGB8 canvas helpers for inspection artifacts.
struct Canvas {
    int width = 0, height = 0;
    std::vector<std::uint8_t> rgb;

    Canvas(int w, int h, std::uint8_t fill = 24) : width(w), height(h) {
        rgb.assign(static_cast<std::size_t>(w) * h * 3, fill);
    }

    void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        if (x < 0 || y < 0 || x >= width || y >= height) return;
        std::uint8_t* p = rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
        p[0] = r;
        p[1] = g;
        p[2] = b;
    }

    // paste an hw x hw float image, channels = 3 (RGB) or 1 (grayscale)
    template <class T>
    void paste(const std::vector<T>& img, int hw, int channels, int x0, int y0) {
        for (int y = 0; y < hw; ++y)
            for (int x = 0; x < hw; ++x) {
                auto q = [&](int c) {
                    const double v = static_cast<double>(
                        img[(static_cast<std::size_t>(y) * hw + x) * channels +
                            (channels == 3 ? c : 0)]);
                    return static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
                };
                set(x0 + x, y0 + y, q(0), q(1), q(2));
            }
    }

    void border(int x0, int y0, int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        for (int x = x0; x < x0 + w; ++x) {
            set(x, y0, r, g, b);
            set(x, y0 + h - 1, r, g, b);
        }
        for (int y = y0; y < y0 + h; ++y) {
            set(x0, y, r, g, b);
            set(x0 + w - 1, y, r, g, b);
        }
    }

    void save(const std::string& path) const { write_png(path, rgb.data(), width, height); }
};

// One row per sample with columns [o, o_hat, o_hat_plus, o_hat_minus, M];
// expert rows get a red border, agent rows green.
template <class T>
struct PanelRow {
    std::vector<T> o;           // [hw*hw*3]
    std::vector<T> o_hat;
    std::vector<T> o_hat_plus;
    std::vector<T> o_hat_minus; // may be empty (joint mode)
    std::vector<T> mask;        // [hw*hw], may be empty
    bool expert = false;
};

template <class T>
inline void save_reconstruction_panel(const std::vector<PanelRow<T>>& rows, int hw,
                                      const std::string& path) {
    const int cols = 5, pad = 2;
    const int cell = hw + 2 * pad;
    Canvas canvas(cols * cell, static_cast<int>(rows.size()) * cell);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const int y0 = static_cast<int>(r) * cell;
        const auto& row = rows[r];
        const std::vector<const std::vector<T>*> imgs = {&row.o, &row.o_hat, &row.o_hat_plus,
                                                         &row.o_hat_minus, &row.mask};
        for (int c = 0; c < cols; ++c) {
            const int x0 = c * cell;
            if (!imgs[c]->empty()) canvas.paste(*imgs[c], hw, c == 4 ? 1 : 3, x0 + pad, y0 + pad);
            if (row.expert) canvas.border(x0, y0, cell, cell, 220, 40, 40);
            else canvas.border(x0, y0, cell, cell, 40, 200, 60);
        }
    }
    canvas.save(path);
}

// simple line plot of a series in [0,1] (values clamped), e.g. the
// discriminator's expert-probability on agent rollouts over iterations
inline void save_series_plot(const std::vector<double>& series, const std::string& path,
                             double lo = 0.0, double hi = 1.0) {
    const int w = 640, h = 240, margin = 8;
    Canvas canvas(w, h, 16);
    // reference line at 0.5 if in range
    if (lo < 0.5 && hi > 0.5) {
        const int yref = h - margin -
                         static_cast<int>((0.5 - lo) / (hi - lo) * (h - 2 * margin));
        for (int x = margin; x < w - margin; x += 3) canvas.set(x, yref, 90, 90, 90);
    }
    if (series.empty()) {
        canvas.save(path);
        return;
    }
    const std::size_t n = series.size();
    int px = -1, py = -1;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = std::clamp(series[i], lo, hi);
        const int x = margin + static_cast<int>(static_cast<double>(i) / std::max<std::size_t>(1, n - 1) *
                                                (w - 2 * margin));
        const int y = h - margin - static_cast<int>((v - lo) / (hi - lo) * (h - 2 * margin));
        if (px >= 0) {
            const int steps = std::max(std::abs(x - px), std::abs(y - py)) + 1;
            for (int s = 0; s <= steps; ++s)
                canvas.set(px + (x - px) * s / steps, py + (y - py) * s / steps, 80, 180, 255);
        }
        px = x;
        py = y;
    }
    canvas.save(path);
}

// intersection-over-union of a thresholded mask against a binary reference
template <class T>
inline double mask_iou(const std::vector<T>& mask, const std::vector<std::uint8_t>& truth,
                       double threshold = 0.5) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const bool a = static_cast<double>(mask[i]) >= threshold;
        const bool b = truth[i] != 0;
        inter += (a && b) ? 1 : 0;
        uni += (a || b) ? 1 : 0;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// side-by-side frame grid (e.g. environment rollouts)
template <class T>
inline void save_frame_grid(const std::vector<std::vector<T>>& frames, int hw,
                            const std::string& path, int per_row = 8) {
    if (frames.empty()) return;
    const int pad = 2, cell = hw + pad;
    const int rows = (static_cast<int>(frames.size()) + per_row - 1) / per_row;
    Canvas canvas(per_row * cell + pad, rows * cell + pad);
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const int r = static_cast<int>(i) / per_row, c = static_cast<int>(i) % per_row;
        canvas.paste(frames[i], hw, 3, pad + c * cell, pad + r * cell);
    }
    canvas.save(path);
}

} // namespace semail::viz
