#pragma once

#include <filesystem>
#include <span>
#include <vector>

namespace vcdm {

// Planar (C, H, W) image with values nominally in [0, 1].
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(int c, int h, int w, double fill = 0.0)
        : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c) * h * w, fill) {}

    std::size_t size() const { return pixels.size(); }
    double& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    bool operator==(const Image& other) const = default;
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

// Tiles images into a grid of ceil(sqrt(n)) columns and as many rows as
// needed; empty cells stay black.
Image make_grid(std::span<const Image> images);

// Bilinear resize with edge clamping.
Image resize_bilinear(const Image& image, int height, int width);

// Renders 2-D points as a white-on-black scatter plot over [lo, hi]^2.
Image scatter_plot(std::span<const double> points_xy, int size, double lo, double hi);

}  // namespace vcdm
