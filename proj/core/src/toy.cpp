#include "vcdm/toy.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "vcdm/errors.hpp"

namespace vcdm::toy {

Matrix ring_centers(const RingConfig& cfg) {
    Matrix c(cfg.modes, 2);
    for (int m = 0; m < cfg.modes; ++m) {
        const double a = 2.0 * std::numbers::pi * m / cfg.modes;
        c(m, 0) = cfg.radius * std::cos(a);
        c(m, 1) = cfg.radius * std::sin(a);
    }
    return c;
}

RingData make_ring(int n, const RingConfig& cfg, Rng& rng) {
    if (n < 0 || cfg.modes < 1) throw InvalidArgument("make_ring needs n >= 0 and at least one mode");
    const Matrix centers = ring_centers(cfg);
    RingData d;
    d.x.resize(n, 2);
    d.y.resize(n, cfg.y_dim());
    d.mode.resize(n);
    for (int i = 0; i < n; ++i) {
        const int m = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.modes)));
        const double z0 = rng.normal(), z1 = rng.normal();
        d.mode[i] = m;
        d.x(i, 0) = centers(m, 0) + cfg.spread * z0;
        d.x(i, 1) = centers(m, 1) + cfg.spread * z1;
        for (int k = 0; k < cfg.modes; ++k) d.y(i, k) = (k == m ? 1.0 : 0.0) + cfg.onehot_noise * rng.normal();
        d.y(i, cfg.modes) = cfg.offset_scale * (z0 + cfg.offset_noise * rng.normal());
        d.y(i, cfg.modes + 1) = cfg.offset_scale * (z1 + cfg.offset_noise * rng.normal());
    }
    return d;
}

int nearest_mode(const RingConfig& cfg, double x, double y) {
    const Matrix centers = ring_centers(cfg);
    int best = 0;
    double best_d = INFINITY;
    for (int m = 0; m < cfg.modes; ++m) {
        const double dx = x - centers(m, 0), dy = y - centers(m, 1);
        const double d = dx * dx + dy * dy;
        if (d < best_d) {
            best_d = d;
            best = m;
        }
    }
    return best;
}

std::vector<Image> make_disc_images(int n, int resolution, int classes, Rng& rng, std::vector<int>* labels) {
    if (classes < 1 || resolution < 4) throw InvalidArgument("make_disc_images needs classes >= 1, resolution >= 4");
    std::vector<Image> out;
    out.reserve(static_cast<std::size_t>(n));
    if (labels) labels->clear();
    for (int i = 0; i < n; ++i) {
        const int cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
        const double hue = 2.0 * std::numbers::pi * cls / classes;
        const double rgb[3] = {0.5 + 0.45 * std::cos(hue), 0.5 + 0.45 * std::cos(hue - 2.094),
                               0.5 + 0.45 * std::cos(hue + 2.094)};
        const double cx = resolution * (0.3 + 0.4 * rng.uniform());
        const double cy = resolution * (0.3 + 0.4 * rng.uniform());
        const double r = resolution * (0.15 + 0.15 * rng.uniform());
        const double gx = 0.2 * rng.uniform(), gy = 0.2 * rng.uniform();
        Image img(3, resolution, resolution);
        for (int y = 0; y < resolution; ++y) {
            for (int x = 0; x < resolution; ++x) {
                const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
                const double inside = 1.0 / (1.0 + std::exp((d - r) * 2.0));
                const double bg = 0.1 + gx * x / resolution + gy * y / resolution;
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = inside * rgb[c] + (1.0 - inside) * bg;
            }
        }
        out.push_back(std::move(img));
        if (labels) labels->push_back(cls);
    }
    return out;
}

data_aug::DatasetManifest write_disc_dataset(const std::filesystem::path& dir, int n, int resolution, int classes,
                                             std::uint64_t seed, int reference_every) {
    std::filesystem::create_directories(dir / "images");
    Rng rng(seed);
    std::vector<int> labels;
    const auto images = make_disc_images(n, resolution, classes, rng, &labels);
    data_aug::DatasetManifest m;
    m.base_dir = dir;
    for (int i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "images/%06d.png", i);
        write_png(dir / name, images[static_cast<std::size_t>(i)]);
        data_aug::ManifestRow row;
        row.path = name;
        row.channels = 3;
        row.height = row.width = resolution;
        row.class_label = labels[static_cast<std::size_t>(i)];
        row.split = (reference_every > 0 && i % reference_every == reference_every - 1) ? data_aug::Split::kReference
                                                                                         : data_aug::Split::kTrain;
        m.rows.push_back(row);
    }
    m.save(dir / "manifest.jsonl");
    return m;
}

}  // namespace vcdm::toy
