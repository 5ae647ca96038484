#pragma once

#include "unetsharp/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace unetsharp {

/// Malformed or incomplete dataset on disk.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One image/mask pair. Image values are intensities in [0, 1], [C,H,W];
/// the mask is {0,1}, [1,H,W].
struct Sample {
    std::string id;
    Tensor<float> image;
    Tensor<float> mask;
    int presence = 0;
};

using Dataset = std::vector<Sample>;

/// Images normalized for the network plus their masks and labels.
struct SampleBatch {
    Tensor<float> images;     ///< [N,C,H,W]
    Tensor<float> masks;      ///< [N,1,H,W]
    std::vector<int> presence;
    std::vector<std::string> ids;
};

/// 1 iff the mask has a positive pixel.
int presence_of(const Tensor<float>& mask);

struct SynthOptions {
    int count = 100;
    Index size = 64;
    double empty_fraction = 0.3;
    std::uint64_t seed = 0;
};

/// Grayscale images of 1-5 soft-edged elliptical blobs over textured noise,
/// with exact masks. round(count * empty_fraction) samples have no blob;
/// every other mask covers 1%..40% of the image.
Dataset synth_generate(const SynthOptions& options);

/// Writes images/<id>.png and masks/<id>.png under `dir`.
void write_dataset(const Dataset& data, const std::filesystem::path& dir);

/// Reads dir/images/*.png with matching dir/masks/*.png; masks are
/// binarized at 128. `channels` selects grayscale (1) or RGB (3) images.
Dataset load_dataset(const std::filesystem::path& dir, Index channels = 1);

/// Deterministic train/validation split by seeded shuffle.
std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double val_fraction, std::uint64_t seed);

/// Independent stream for (seed, a, b, c).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

Sample rotate90(const Sample& s, int quarter_turns);
Sample flip(const Sample& s, bool horizontal);

struct AugmentOptions {
    bool enabled = true;
    double brightness = 0.1;
    double contrast = 0.2;
    double hue = 0.05;
    double saturation = 0.2;
};

/// Random rotate-by-90k and flips applied to image and mask jointly, then
/// an image-only photometric jitter (brightness/contrast, or HSV for RGB).
Sample augment(const Sample& s, std::mt19937_64& rng, const AugmentOptions& options = {});

inline constexpr float kNormMean = 0.5f;
inline constexpr float kNormStd = 0.25f;

/// Fixed per-channel normalization applied to every network input.
Tensor<float> normalize(const Tensor<float>& image);

/// Stacks samples `indices` of `data`, normalizing each image.
SampleBatch make_batch(const Dataset& data, const std::vector<std::size_t>& indices);
SampleBatch make_batch(const std::vector<Sample>& samples);

} // namespace unetsharp
