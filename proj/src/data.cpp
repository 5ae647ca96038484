#include "unetsharp/data.hpp"

#include "unetsharp/png_io.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace unetsharp {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

double uniform(std::mt19937_64& rng, double lo, double hi)
{
    return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

double normal(std::mt19937_64& rng)
{
    // Box-Muller on the raw stream, independent of the standard library's
    // distribution implementations.
    const double u1 = 1.0 - static_cast<double>(rng() >> 11) * 0x1.0p-53;
    const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
}

struct Blob {
    double cx, cy, a, b, angle, contrast;
};

// Normalized elliptical radius of (x, y) for blob e; 1 on the boundary.
double radius(const Blob& e, double x, double y)
{
    const double dx = x - e.cx, dy = y - e.cy;
    const double c = std::cos(e.angle), s = std::sin(e.angle);
    const double u = (c * dx + s * dy) / e.a;
    const double v = (-s * dx + c * dy) / e.b;
    return std::sqrt(u * u + v * v);
}

Sample synth_one(std::mt19937_64& rng, Index size, bool empty, const std::string& id)
{
    const double scale = static_cast<double>(size) / 64.0;
    std::vector<double> img(static_cast<std::size_t>(size * size));

    const double base = uniform(rng, 0.25, 0.40);
    struct Grating {
        double amp, fx, fy, phase;
    };
    std::vector<Grating> gratings;
    for (int g = 0; g < 3; ++g) {
        const double freq = uniform(rng, 1.0, 4.0) * 2.0 * kPi / static_cast<double>(size);
        const double theta = uniform(rng, 0.0, kPi);
        gratings.push_back({uniform(rng, 0.02, 0.05), freq * std::cos(theta), freq * std::sin(theta),
            uniform(rng, 0.0, 2.0 * kPi)});
    }
    constexpr int coarse = 8;
    std::vector<double> grid((coarse + 1) * (coarse + 1));
    for (double& v : grid) v = uniform(rng, -0.05, 0.05);
    const double cell = static_cast<double>(size) / coarse;
    for (Index y = 0; y < size; ++y) {
        for (Index x = 0; x < size; ++x) {
            double v = base;
            for (const auto& g : gratings) v += g.amp * std::sin(g.fx * x + g.fy * y + g.phase);
            const double gx = x / cell, gy = y / cell;
            const int ix = std::min(coarse - 1, static_cast<int>(gx)), iy = std::min(coarse - 1, static_cast<int>(gy));
            const double tx = gx - ix, ty = gy - iy;
            const auto at = [&](int r, int c) { return grid[static_cast<std::size_t>(r * (coarse + 1) + c)]; };
            v += (1 - ty) * ((1 - tx) * at(iy, ix) + tx * at(iy, ix + 1))
                + ty * ((1 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
            v += 0.03 * normal(rng);
            img[static_cast<std::size_t>(y * size + x)] = v;
        }
    }

    std::vector<float> mask(static_cast<std::size_t>(size * size), 0.0f);
    if (!empty) {
        const double total = static_cast<double>(size * size);
        std::vector<Blob> blobs;
        for (int attempt = 0;; ++attempt) {
            blobs.clear();
            const int k = 1 + static_cast<int>(rng() % 5);
            for (int i = 0; i < k; ++i) {
                Blob e;
                e.a = uniform(rng, 4.0, 12.0) * scale;
                e.b = uniform(rng, 4.0, 12.0) * scale;
                e.cx = uniform(rng, 0.1, 0.9) * static_cast<double>(size);
                e.cy = uniform(rng, 0.1, 0.9) * static_cast<double>(size);
                e.angle = uniform(rng, 0.0, kPi);
                e.contrast = uniform(rng, 0.25, 0.45);
                blobs.push_back(e);
            }
            Index area = 0;
            for (Index y = 0; y < size; ++y) {
                for (Index x = 0; x < size; ++x) {
                    for (const auto& e : blobs) {
                        if (radius(e, x, y) <= 1.0) {
                            ++area;
                            break;
                        }
                    }
                }
            }
            const double frac = static_cast<double>(area) / total;
            if (frac >= 0.01 && frac <= 0.40) break;
            if (attempt > 1000) throw std::logic_error("synth: could not place blobs");
        }
        for (Index y = 0; y < size; ++y) {
            for (Index x = 0; x < size; ++x) {
                double lift = 0.0;
                bool inside = false;
                for (const auto& e : blobs) {
                    const double r = radius(e, x, y);
                    inside = inside || r <= 1.0;
                    const double dist = (r - 1.0) * std::min(e.a, e.b);
                    lift = std::max(lift, e.contrast / (1.0 + std::exp(dist / 0.7)));
                }
                img[static_cast<std::size_t>(y * size + x)] += lift;
                mask[static_cast<std::size_t>(y * size + x)] = inside ? 1.0f : 0.0f;
            }
        }
    }

    Sample s;
    s.id = id;
    s.image = Tensor<float>({1, size, size});
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double q = std::round(std::clamp(img[i], 0.0, 1.0) * 255.0);
        s.image[static_cast<Index>(i)] = static_cast<float>(q / 255.0);
    }
    s.mask = Tensor<float>({1, size, size}, mask);
    s.presence = presence_of(s.mask);
    return s;
}

Tensor<float> remap(const Tensor<float>& t, Index out_h, Index out_w, const std::function<std::pair<Index, Index>(Index, Index)>& src)
{
    const Index c = t.dim(0), w = t.dim(2);
    Tensor<float> out({c, out_h, out_w});
    for (Index ch = 0; ch < c; ++ch) {
        for (Index y = 0; y < out_h; ++y) {
            for (Index x = 0; x < out_w; ++x) {
                const auto [sy, sx] = src(y, x);
                out[(ch * out_h + y) * out_w + x] = t[(ch * t.dim(1) + sy) * w + sx];
            }
        }
    }
    return out;
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v)
{
    const float mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
    v = mx;
    s = mx > 0 ? d / mx : 0.0f;
    if (d <= 0) {
        h = 0;
    } else if (mx == r) {
        h = std::fmod((g - b) / d + 6.0f, 6.0f);
    } else if (mx == g) {
        h = (b - r) / d + 2.0f;
    } else {
        h = (r - g) / d + 4.0f;
    }
    h /= 6.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b)
{
    const float hh = std::fmod(h, 1.0f) * 6.0f;
    const int i = static_cast<int>(hh) % 6;
    const float f = hh - static_cast<float>(static_cast<int>(hh));
    const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
    }
}

} // namespace

int presence_of(const Tensor<float>& mask)
{
    return (mask.array() > 0.5f).any() ? 1 : 0;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c)
{
    return splitmix64(splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b) ^ c);
}

Dataset synth_generate(const SynthOptions& o)
{
    if (o.size <= 0 || o.size % 16 != 0) throw ArgumentError("synth: size must be a positive multiple of 16");
    if (o.count < 0) throw ArgumentError("synth: count must be non-negative");
    if (!(o.empty_fraction >= 0.0 && o.empty_fraction <= 1.0)) throw ArgumentError("synth: empty fraction must lie in [0,1]");

    const auto n_empty = static_cast<std::size_t>(std::llround(o.count * o.empty_fraction));
    std::vector<std::size_t> order(static_cast<std::size_t>(o.count));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 pick(derive_seed(o.seed, 0xE3F7));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[pick() % i]);
    std::vector<bool> empty(order.size(), false);
    for (std::size_t i = 0; i < n_empty; ++i) empty[order[i]] = true;

    Dataset out;
    for (int i = 0; i < o.count; ++i) {
        std::mt19937_64 rng(derive_seed(o.seed, 1, static_cast<std::uint64_t>(i)));
        char id[32];
        std::snprintf(id, sizeof id, "synth_%05d", i);
        out.push_back(synth_one(rng, o.size, empty[static_cast<std::size_t>(i)], id));
    }
    return out;
}

void write_dataset(const Dataset& data, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "masks");
    for (const Sample& s : data) {
        const Index c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
        Image8 img{w, h, static_cast<int>(c), std::vector<std::uint8_t>(static_cast<std::size_t>(c * h * w))};
        for (Index y = 0; y < h; ++y) {
            for (Index x = 0; x < w; ++x) {
                for (Index ch = 0; ch < c; ++ch) {
                    const float v = std::clamp(s.image[(ch * h + y) * w + x], 0.0f, 1.0f);
                    img.pixels[static_cast<std::size_t>((y * w + x) * c + ch)] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
                }
            }
        }
        write_png(dir / "images" / (s.id + ".png"), img);
        Image8 m{w, h, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w))};
        for (Index i = 0; i < h * w; ++i) m.pixels[static_cast<std::size_t>(i)] = s.mask[i] > 0.5f ? 255 : 0;
        write_png(dir / "masks" / (s.id + ".png"), m);
    }
}

Dataset load_dataset(const std::filesystem::path& dir, Index channels)
{
    if (channels != 1 && channels != 3) throw ArgumentError("load: channels must be 1 or 3");
    const auto images_dir = dir / "images", masks_dir = dir / "masks";
    if (!std::filesystem::is_directory(images_dir) || !std::filesystem::is_directory(masks_dir)) {
        throw DataError("dataset " + dir.string() + " needs images/ and masks/ subdirectories");
    }
    const auto stems = [](const std::filesystem::path& p) {
        std::map<std::string, std::filesystem::path> out;
        for (const auto& e : std::filesystem::directory_iterator(p)) {
            if (e.is_regular_file() && e.path().extension() == ".png") out.emplace(e.path().stem().string(), e.path());
        }
        return out;
    };
    const auto images = stems(images_dir), masks = stems(masks_dir);
    for (const auto& [stem, path] : masks) {
        if (!images.count(stem)) throw DataError("dataset: mask '" + stem + "' has no image");
    }
    Dataset out;
    for (const auto& [stem, path] : images) {
        auto mit = masks.find(stem);
        if (mit == masks.end()) throw DataError("dataset: image '" + stem + "' has no mask");
        const Image8 img = read_png(path, static_cast<int>(channels));
        const Image8 m = read_png(mit->second, 1);
        if (img.width != m.width || img.height != m.height) {
            throw DataError("dataset: '" + stem + "' image is " + std::to_string(img.width) + "x"
                            + std::to_string(img.height) + " but mask is " + std::to_string(m.width) + "x"
                            + std::to_string(m.height));
        }
        Sample s;
        s.id = stem;
        const Index h = img.height, w = img.width;
        s.image = Tensor<float>({channels, h, w});
        for (Index y = 0; y < h; ++y) {
            for (Index x = 0; x < w; ++x) {
                for (Index ch = 0; ch < channels; ++ch) {
                    s.image[(ch * h + y) * w + x] = img.pixels[static_cast<std::size_t>((y * w + x) * channels + ch)] / 255.0f;
                }
            }
        }
        s.mask = Tensor<float>({1, h, w});
        for (Index i = 0; i < h * w; ++i) s.mask[i] = m.pixels[static_cast<std::size_t>(i)] >= 128 ? 1.0f : 0.0f;
        s.presence = presence_of(s.mask);
        out.push_back(std::move(s));
    }
    return out;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double val_fraction, std::uint64_t seed)
{
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ArgumentError("split: validation fraction must lie in [0,1)");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, 0x5B117));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(data.size()) * val_fraction));
    std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    Dataset train, val;
    for (auto i : train_idx) train.push_back(data[i]);
    for (auto i : val_idx) val.push_back(data[i]);
    return {std::move(train), std::move(val)};
}

Sample rotate90(const Sample& s, int quarter_turns)
{
    Sample out = s;
    const int k = ((quarter_turns % 4) + 4) % 4;
    for (int t = 0; t < k; ++t) {
        const Index h = out.image.dim(1), w = out.image.dim(2);
        // Counter-clockwise: out(y, x) = in(x, w-1-y), output is w x h.
        const auto src = [w](Index y, Index x) { return std::pair<Index, Index>{x, w - 1 - y}; };
        out.image = remap(out.image, w, h, src);
        out.mask = remap(out.mask, w, h, src);
    }
    return out;
}

Sample flip(const Sample& s, bool horizontal)
{
    Sample out = s;
    const Index h = s.image.dim(1), w = s.image.dim(2);
    const auto src = [&](Index y, Index x) {
        return horizontal ? std::pair<Index, Index>{y, w - 1 - x} : std::pair<Index, Index>{h - 1 - y, x};
    };
    out.image = remap(s.image, h, w, src);
    out.mask = remap(s.mask, h, w, src);
    return out;
}

Sample augment(const Sample& s, std::mt19937_64& rng, const AugmentOptions& o)
{
    if (!o.enabled) return s;
    Sample out = rotate90(s, static_cast<int>(rng() % 4));
    if (uniform(rng, 0, 1) < 0.5) out = flip(out, true);
    if (uniform(rng, 0, 1) < 0.5) out = flip(out, false);

    const Index c = out.image.dim(0), plane = out.image.dim(1) * out.image.dim(2);
    const bool use_hsv = c == 3 && uniform(rng, 0, 1) < 0.5;
    if (use_hsv) {
        const float dh = static_cast<float>(uniform(rng, -o.hue, o.hue));
        const float ds = static_cast<float>(uniform(rng, 1 - o.saturation, 1 + o.saturation));
        const float dv = static_cast<float>(uniform(rng, 1 - o.brightness, 1 + o.brightness));
        float* p = out.image.data();
        for (Index i = 0; i < plane; ++i) {
            float h, sat, v;
            rgb_to_hsv(p[i], p[plane + i], p[2 * plane + i], h, sat, v);
            h = std::fmod(h + dh + 1.0f, 1.0f);
            sat = std::clamp(sat * ds, 0.0f, 1.0f);
            v = std::clamp(v * dv, 0.0f, 1.0f);
            hsv_to_rgb(h, sat, v, p[i], p[plane + i], p[2 * plane + i]);
        }
    } else {
        const float gain = static_cast<float>(uniform(rng, 1 - o.contrast, 1 + o.contrast));
        const float shift = static_cast<float>(uniform(rng, -o.brightness, o.brightness));
        out.image.array() = (out.image.array() - 0.5f) * gain + 0.5f + shift;
    }
    return out;
}

Tensor<float> normalize(const Tensor<float>& image)
{
    Tensor<float> out(image.shape());
    out.array() = (image.array() - kNormMean) / kNormStd;
    return out;
}

SampleBatch make_batch(const std::vector<Sample>& samples)
{
    if (samples.empty()) throw ArgumentError("make_batch: no samples");
    const Shape& is = samples[0].image.shape();
    const Index n = static_cast<Index>(samples.size());
    SampleBatch b;
    b.images = Tensor<float>({n, is[0], is[1], is[2]});
    b.masks = Tensor<float>({n, 1, is[1], is[2]});
    const Index isz = numel(is), msz = is[1] * is[2];
    for (Index i = 0; i < n; ++i) {
        const Sample& s = samples[static_cast<std::size_t>(i)];
        if (s.image.shape() != is) throw DataError("make_batch: sample '" + s.id + "' has a different shape");
        const Tensor<float> norm = normalize(s.image);
        std::copy_n(norm.data(), isz, b.images.data() + i * isz);
        std::copy_n(s.mask.data(), msz, b.masks.data() + i * msz);
        b.presence.push_back(s.presence);
        b.ids.push_back(s.id);
    }
    return b;
}

SampleBatch make_batch(const Dataset& data, const std::vector<std::size_t>& indices)
{
    std::vector<Sample> picked;
    for (auto i : indices) picked.push_back(data.at(i));
    return make_batch(picked);
}

} // namespace unetsharp
