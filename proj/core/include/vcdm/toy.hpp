#pragma once

#include <filesystem>
#include <vector>

#include "vcdm/data_aug.hpp"
#include "vcdm/image.hpp"
#include "vcdm/random.hpp"
#include "vcdm/types.hpp"

// Synthetic datasets used by tests, benchmarks and the end-to-end toys.
namespace vcdm::toy {

// Mixture of Gaussians on a ring, with a paired embedding per point.
// The embedding concatenates a noisy one-hot of the mode with a noisy copy
// of the point's standardized offset from its mode centre, so it carries
// strictly more information than the mode id alone.
struct RingConfig {
    int modes = 8;
    double radius = 2.0;
    double spread = 0.2;          // per-coordinate std within a mode
    double onehot_noise = 0.05;
    double offset_scale = 0.3;    // weight of the offset block in y
    double offset_noise = 0.3;    // noise on the offset, in standardized units

    int y_dim() const { return modes + 2; }
};

struct RingData {
    Matrix x;                // n x 2
    Matrix y;                // n x y_dim
    std::vector<int> mode;   // n
};

Matrix ring_centers(const RingConfig& cfg);
RingData make_ring(int n, const RingConfig& cfg, Rng& rng);
// Index of the closest mode centre.
int nearest_mode(const RingConfig& cfg, double x, double y);

// Small procedural RGB images: a soft coloured disc whose hue is set by the
// class, at a random position and radius over a dim gradient background.
std::vector<Image> make_disc_images(int n, int resolution, int classes, Rng& rng, std::vector<int>* labels);

// Writes make_disc_images output as PNGs plus a manifest. Every
// reference_every-th image goes to the reference split (0 disables).
data_aug::DatasetManifest write_disc_dataset(const std::filesystem::path& dir, int n, int resolution, int classes,
                                             std::uint64_t seed, int reference_every = 5);

}  // namespace vcdm::toy
