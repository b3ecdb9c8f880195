#include "maskrestore/degrade.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "maskrestore/rng.hpp"

namespace maskrestore {

namespace {

constexpr double kPi = std::numbers::pi;

struct Rgb {
    double r, g, b;
    double operator[](std::size_t c) const { return c == 0 ? r : (c == 1 ? g : b); }
};

Rgb random_color(Rng& rng) { return {rng.uniform(), rng.uniform(), rng.uniform()}; }

struct Polygon {
    std::vector<std::pair<double, double>> pts;  // counter-clockwise

    bool contains(double x, double y) const {
        for (std::size_t i = 0; i < pts.size(); ++i) {
            const auto& [x0, y0] = pts[i];
            const auto& [x1, y1] = pts[(i + 1) % pts.size()];
            if ((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) < 0.0) return false;
        }
        return true;
    }
};

// Points on a circle at sorted random angles form a convex polygon.
Polygon random_polygon(Rng& rng, double size) {
    const double cx = rng.uniform(0.1, 0.9) * size, cy = rng.uniform(0.1, 0.9) * size;
    const double radius = rng.uniform(size / 8.0, size / 3.0);
    const std::size_t n = 3 + rng.index(4);
    std::vector<double> angles(n);
    for (auto& a : angles) a = rng.uniform(0.0, 2.0 * kPi);
    std::sort(angles.begin(), angles.end());
    Polygon poly;
    for (double a : angles) poly.pts.emplace_back(cx + radius * std::cos(a), cy + radius * std::sin(a));
    return poly;
}

struct Wave {
    double kx, ky, phase, amplitude;
    Rgb tint;

    double at(double x, double y) const { return amplitude * std::sin(kx * x + ky * y + phase); }
};

Wave random_wave(Rng& rng, double period_lo, double period_hi, double amp_lo, double amp_hi) {
    const double period = rng.uniform(period_lo, period_hi);
    const double theta = rng.uniform(0.0, kPi);
    const double k = 2.0 * kPi / period;
    Wave w{k * std::cos(theta), k * std::sin(theta), rng.uniform(0.0, 2.0 * kPi), rng.uniform(amp_lo, amp_hi), {}};
    w.tint = {rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0)};
    return w;
}

std::size_t reflect(long i, std::size_t n) {
    const long m = static_cast<long>(n);
    if (m == 1) return 0;
    while (i < 0 || i >= m) {
        if (i < 0) i = -i;
        if (i >= m) i = 2 * (m - 1) - i;
    }
    return static_cast<std::size_t>(i);
}

void check_range(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

// Annex K base tables (natural row-major order).
constexpr std::array<int, 64> kLumaTable = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,  14, 13, 16, 24, 40,  57,
    69, 56, 14, 17, 22,  29,  51,  87,  80, 62, 18, 22, 37,  56,  68,  109, 103, 77, 24, 35, 55, 64,
    81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
constexpr std::array<int, 64> kChromaTable = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99,
    99, 99, 47, 66, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

struct DctBasis {
    std::array<double, 64> c{};  // c[u*8 + x] = a(u) cos((2x+1)u pi / 16)
    DctBasis() {
        for (int u = 0; u < 8; ++u) {
            const double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
            for (int x = 0; x < 8; ++x) c[u * 8 + x] = a * std::cos((2 * x + 1) * u * kPi / 16.0);
        }
    }
};

const DctBasis& dct_basis() {
    static const DctBasis basis;
    return basis;
}

void dct8x8(const double* in, double* out) {
    const auto& c = dct_basis().c;
    double tmp[64];
    for (int y = 0; y < 8; ++y)
        for (int u = 0; u < 8; ++u) {
            double s = 0.0;
            for (int x = 0; x < 8; ++x) s += c[u * 8 + x] * in[y * 8 + x];
            tmp[y * 8 + u] = s;
        }
    for (int v = 0; v < 8; ++v)
        for (int u = 0; u < 8; ++u) {
            double s = 0.0;
            for (int y = 0; y < 8; ++y) s += c[v * 8 + y] * tmp[y * 8 + u];
            out[v * 8 + u] = s;
        }
}

void idct8x8(const double* in, double* out) {
    const auto& c = dct_basis().c;
    double tmp[64];
    for (int v = 0; v < 8; ++v)
        for (int x = 0; x < 8; ++x) {
            double s = 0.0;
            for (int u = 0; u < 8; ++u) s += c[u * 8 + x] * in[v * 8 + u];
            tmp[v * 8 + x] = s;
        }
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            double s = 0.0;
            for (int v = 0; v < 8; ++v) s += c[v * 8 + y] * tmp[v * 8 + x];
            out[y * 8 + x] = s;
        }
}

}  // namespace

std::string kind_name(DegradationKind kind) {
    switch (kind) {
        case DegradationKind::gaussian_noise: return "gaussian_noise";
        case DegradationKind::gaussian_blur: return "gaussian_blur";
        case DegradationKind::jpeg: return "jpeg";
        case DegradationKind::pepper: return "pepper";
        case DegradationKind::speckle: return "speckle";
        case DegradationKind::poisson: return "poisson";
    }
    return "unknown";
}

DegradationKind parse_kind(const std::string& name) {
    for (auto k : {DegradationKind::gaussian_noise, DegradationKind::gaussian_blur, DegradationKind::jpeg,
                   DegradationKind::pepper, DegradationKind::speckle, DegradationKind::poisson})
        if (kind_name(k) == name) return k;
    throw std::invalid_argument("unknown degradation kind: " + name);
}

DegradationSampler DegradationSampler::training_range(DegradationKind kind) {
    switch (kind) {
        case DegradationKind::gaussian_noise: return {kind, 1e-3, 50.0};
        case DegradationKind::gaussian_blur: return {kind, 0.1, 3.1};
        case DegradationKind::jpeg: return {kind, 20.0, 90.0};
        case DegradationKind::pepper: return {kind, 0.01, 0.1};
        case DegradationKind::speckle: return {kind, 0.05, 0.3};
        case DegradationKind::poisson: return {kind, 10.0, 255.0};
    }
    throw std::invalid_argument("unknown degradation kind");
}

DegradationSampler DegradationSampler::test_level(DegradationKind kind) {
    switch (kind) {
        case DegradationKind::gaussian_noise: return fixed(kind, 25.0);
        case DegradationKind::gaussian_blur: return fixed(kind, 1.6);
        case DegradationKind::jpeg: return fixed(kind, 30.0);
        case DegradationKind::pepper: return fixed(kind, 0.05);
        case DegradationKind::speckle: return fixed(kind, 0.2);
        case DegradationKind::poisson: return fixed(kind, 60.0);
    }
    throw std::invalid_argument("unknown degradation kind");
}

// ---------------------------------------------------------------- generators

Image gen_clean(std::uint64_t seed, std::size_t size) {
    if (size == 0 || size % 8 != 0) throw std::invalid_argument("clean image size must be a positive multiple of 8");
    Rng rng(seed, Stream::clean_image);
    const double n = static_cast<double>(size);
    Image im(3, size, size);

    const Rgb c0 = random_color(rng), c1 = random_color(rng);
    const double theta = rng.uniform(0.0, 2.0 * kPi);
    const double gx = std::cos(theta), gy = std::sin(theta);

    const std::size_t n_poly = 2 + rng.index(3);
    std::vector<Polygon> polys;
    std::vector<Rgb> fills;
    for (std::size_t p = 0; p < n_poly; ++p) {
        polys.push_back(random_polygon(rng, n));
        fills.push_back(random_color(rng));
    }
    // Low band: ~1-2 cycles per image. Mid band: 8-12 px. High band: 2.5-3.5 px,
    // confined to one polygon so texture density varies across the image.
    const Wave low = random_wave(rng, n / 2.0, n, 0.08, 0.15);
    const Wave mid = random_wave(rng, 8.0, 12.0, 0.05, 0.10);
    const Wave high = random_wave(rng, 2.5, 3.5, 0.10, 0.18);
    const std::size_t textured = rng.index(n_poly);

    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double fx = static_cast<double>(x) + 0.5, fy = static_cast<double>(y) + 0.5;
            const double t = std::clamp(0.5 + ((fx / n - 0.5) * gx + (fy / n - 0.5) * gy), 0.0, 1.0);
            Rgb px{c0.r + (c1.r - c0.r) * t, c0.g + (c1.g - c0.g) * t, c0.b + (c1.b - c0.b) * t};
            bool in_textured = false;
            for (std::size_t p = 0; p < n_poly; ++p)
                if (polys[p].contains(fx, fy)) {
                    px = fills[p];
                    in_textured = p == textured;
                }
            const double lv = low.at(fx, fy), mv = mid.at(fx, fy);
            const double hv = in_textured ? high.at(fx, fy) : 0.0;
            for (std::size_t c = 0; c < 3; ++c)
                im.at(c, y, x) = px[c] + lv * low.tint[c] + mv * mid.tint[c] + hv * high.tint[c];
        }
    clip_unit(im);
    return im;
}

Image gen_texture(std::size_t texture_class, std::uint64_t seed, std::size_t size) {
    if (texture_class >= kTextureClasses) throw std::invalid_argument("texture class out of range");
    Rng rng(seed, Stream::clean_image, texture_class + 100);
    const Rgb a = random_color(rng), b = random_color(rng);
    const double n = static_cast<double>(size);
    const double period = rng.uniform(4.0, 10.0);
    const double phase = rng.uniform(0.0, 2.0 * kPi);
    const double k = 2.0 * kPi / period;
    const double jitter = rng.uniform(-0.15, 0.15);
    const double cx = rng.uniform(0.3, 0.7) * n, cy = rng.uniform(0.3, 0.7) * n;
    std::array<Wave, 3> blobs{random_wave(rng, n / 3.0, n, 1.0, 1.0), random_wave(rng, n / 3.0, n, 1.0, 1.0),
                              random_wave(rng, n / 3.0, n, 1.0, 1.0)};
    Image im(3, size, size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double fx = static_cast<double>(x) + 0.5, fy = static_cast<double>(y) + 0.5;
            double t = 0.0;
            switch (texture_class) {
                case 0: t = std::sin(k * (fy + jitter * fx) + phase); break;                     // horizontal stripes
                case 1: t = std::sin(k * (fx + jitter * fy) + phase); break;                     // vertical stripes
                case 2: t = std::sin(k * (fx + fy) / std::sqrt(2.0) + phase); break;             // diagonal stripes
                case 3: t = std::sin(k * fx + phase) * std::sin(k * fy + phase) > 0 ? 1 : -1; break;  // checkerboard
                case 4: t = std::sin(k * std::hypot(fx - cx, fy - cy) + phase); break;           // rings
                case 5: {                                                                        // dots
                    const double dx = std::fmod(fx + phase, period) - period / 2;
                    const double dy = std::fmod(fy + phase, period) - period / 2;
                    t = std::hypot(dx, dy) < period / 4 ? 1.0 : -1.0;
                    break;
                }
                case 6: t = std::tanh(2.0 * (blobs[0].at(fx, fy) + blobs[1].at(fx, fy) + blobs[2].at(fx, fy))); break;
                case 7: t = std::sin(k * fx + phase) + std::sin(k * 0.5 * fy) > 0 ? 1 : -1; break;  // bricks
            }
            const double w = 0.5 + 0.5 * t;
            for (std::size_t c = 0; c < 3; ++c) im.at(c, y, x) = a[c] * w + b[c] * (1.0 - w);
        }
    clip_unit(im);
    return im;
}

// ---------------------------------------------------------------- degradations

Image add_gaussian_noise(const Image& image, double sigma, std::uint64_t seed) {
    check_range(sigma > 0.0 && sigma <= 50.0, "gaussian noise sigma must lie in (0,50], got " + std::to_string(sigma));
    Rng rng(seed, Stream::degradation);
    Image out = image;
    for (auto& v : out.pixels) v += rng.normal() * sigma / 255.0;
    clip_unit(out);
    return out;
}

std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
    check_range(size % 2 == 1, "blur kernel size must be odd, got " + std::to_string(size));
    check_range(sigma > 0.0, "blur sigma must be positive");
    std::vector<double> k(size);
    const double r = static_cast<double>(size / 2);
    double total = 0.0;
    for (std::size_t i = 0; i < size; ++i) {
        const double d = static_cast<double>(i) - r;
        k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        total += k[i];
    }
    for (auto& v : k) v /= total;
    return k;
}

Image gaussian_blur(const Image& image, double sigma, std::size_t kernel_size) {
    check_range(kernel_size % 2 == 1, "blur kernel size must be odd, got " + std::to_string(kernel_size));
    check_range(sigma >= 0.1 && sigma <= 3.1, "blur sigma must lie in [0.1,3.1], got " + std::to_string(sigma));
    const auto k = gaussian_kernel(kernel_size, sigma);
    const long r = static_cast<long>(kernel_size / 2);
    Image tmp = image, out = image;
    for (std::size_t c = 0; c < image.channels; ++c) {
        for (std::size_t y = 0; y < image.height; ++y)
            for (std::size_t x = 0; x < image.width; ++x) {
                double s = 0.0;
                for (long d = -r; d <= r; ++d)
                    s += k[static_cast<std::size_t>(d + r)] * image.at(c, y, reflect(static_cast<long>(x) + d, image.width));
                tmp.at(c, y, x) = s;
            }
        for (std::size_t y = 0; y < image.height; ++y)
            for (std::size_t x = 0; x < image.width; ++x) {
                double s = 0.0;
                for (long d = -r; d <= r; ++d)
                    s += k[static_cast<std::size_t>(d + r)] * tmp.at(c, reflect(static_cast<long>(y) + d, image.height), x);
                out.at(c, y, x) = s;
            }
    }
    clip_unit(out);
    return out;
}

std::vector<int> jpeg_quant_table(bool chroma, int quality) {
    check_range(quality >= 1 && quality <= 100, "JPEG quality must lie in [1,100], got " + std::to_string(quality));
    const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    const auto& base = chroma ? kChromaTable : kLumaTable;
    std::vector<int> table(64);
    for (int i = 0; i < 64; ++i) table[i] = std::clamp((base[i] * scale + 50) / 100, 1, 255);
    return table;
}

Image jpeg_artifact(const Image& image, int quality) {
    if (image.channels != 3) throw std::invalid_argument("jpeg_artifact expects an RGB image");
    if (image.height % 8 != 0 || image.width % 8 != 0)
        throw std::invalid_argument("jpeg_artifact expects dimensions divisible by 8");
    const auto luma = jpeg_quant_table(false, quality);
    const auto chroma = jpeg_quant_table(true, quality);
    const std::size_t plane = image.plane();
    std::vector<double> ycc(3 * plane);
    for (std::size_t i = 0; i < plane; ++i) {
        const double r = image.pixels[i] * 255.0, g = image.pixels[plane + i] * 255.0,
                     b = image.pixels[2 * plane + i] * 255.0;
        ycc[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        ycc[plane + i] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
        ycc[2 * plane + i] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
    }
    double block[64], coef[64];
    for (std::size_t c = 0; c < 3; ++c) {
        const auto& table = c == 0 ? luma : chroma;
        double* ch = ycc.data() + c * plane;
        for (std::size_t by = 0; by < image.height; by += 8)
            for (std::size_t bx = 0; bx < image.width; bx += 8) {
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x) block[y * 8 + x] = ch[(by + y) * image.width + bx + x] - 128.0;
                dct8x8(block, coef);
                for (int i = 0; i < 64; ++i) coef[i] = std::round(coef[i] / table[i]) * table[i];
                idct8x8(coef, block);
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x) ch[(by + y) * image.width + bx + x] = block[y * 8 + x] + 128.0;
            }
    }
    Image out(3, image.height, image.width);
    for (std::size_t i = 0; i < plane; ++i) {
        const double y = ycc[i], cb = ycc[plane + i] - 128.0, cr = ycc[2 * plane + i] - 128.0;
        out.pixels[i] = (y + 1.402 * cr) / 255.0;
        out.pixels[plane + i] = (y - 0.344136 * cb - 0.714136 * cr) / 255.0;
        out.pixels[2 * plane + i] = (y + 1.772 * cb) / 255.0;
    }
    clip_unit(out);
    return out;
}

Image ood_noise(const Image& image, DegradationKind kind, double param, std::uint64_t seed) {
    Rng rng(seed, Stream::degradation);
    Image out = image;
    switch (kind) {
        case DegradationKind::pepper: {
            check_range(param > 0.0 && param <= 0.5, "pepper density must lie in (0,0.5], got " + std::to_string(param));
            for (std::size_t i = 0; i < image.plane(); ++i) {
                const double u = rng.uniform();
                const double v = rng.uniform();
                if (u < param)
                    for (std::size_t c = 0; c < image.channels; ++c) out.pixels[c * image.plane() + i] = v < 0.5 ? 0.0 : 1.0;
            }
            break;
        }
        case DegradationKind::poisson: {
            check_range(param >= 10.0 && param <= 255.0, "poisson peak must lie in [10,255], got " + std::to_string(param));
            for (auto& v : out.pixels) {
                const double mean = std::max(v, 0.0) * param;
                v = mean > 0.0 ? static_cast<double>(std::poisson_distribution<long>(mean)(rng.engine())) / param : 0.0;
            }
            break;
        }
        case DegradationKind::speckle: {
            check_range(param > 0.0 && param <= 1.0, "speckle sigma must lie in (0,1], got " + std::to_string(param));
            for (auto& v : out.pixels) v *= 1.0 + rng.normal() * param;
            break;
        }
        default: throw std::invalid_argument("ood_noise: unsupported kind " + kind_name(kind));
    }
    clip_unit(out);
    return out;
}

Image degrade(const Image& image, const DegradationSpec& spec) {
    switch (spec.kind) {
        case DegradationKind::gaussian_noise: return add_gaussian_noise(image, spec.param, spec.seed);
        case DegradationKind::gaussian_blur: return gaussian_blur(image, spec.param);
        case DegradationKind::jpeg: return jpeg_artifact(image, static_cast<int>(std::lround(spec.param)));
        default: return ood_noise(image, spec.kind, spec.param, spec.seed);
    }
}

std::vector<ImagePair> make_pair_batch(std::span<const std::uint64_t> seeds, std::span<const DegradationSampler> mix,
                                       std::size_t size) {
    if (mix.empty()) throw std::invalid_argument("degradation mix is empty");
    std::vector<ImagePair> pairs(seeds.size());
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(seeds.size()); ++i) {
        const std::uint64_t seed = seeds[static_cast<std::size_t>(i)];
        Rng pick(seed, Stream::degradation_kind);
        const DegradationSampler& sampler = mix[pick.index(mix.size())];
        double param = sampler.lo == sampler.hi ? sampler.lo : pick.uniform(sampler.lo, sampler.hi);
        if (sampler.kind == DegradationKind::jpeg) param = std::round(param);
        ImagePair& pair = pairs[static_cast<std::size_t>(i)];
        pair.clean = gen_clean(seed, size);
        pair.spec = {sampler.kind, param, seed};
        pair.degraded = degrade(pair.clean, pair.spec);
    }
    return pairs;
}

void write_dataset(const std::filesystem::path& dir, std::span<const ImagePair> pairs) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
    manifest << "# clean degraded kind param seed\n";
    manifest.precision(17);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "pair_%05zu", i);
        const std::string clean = std::string(stem) + "_clean.ppm";
        const std::string degraded = std::string(stem) + "_degraded.ppm";
        write_pnm(dir / clean, pairs[i].clean);
        write_pnm(dir / degraded, pairs[i].degraded);
        manifest << clean << ' ' << degraded << ' ' << kind_name(pairs[i].spec.kind) << ' ' << pairs[i].spec.param << ' '
                 << pairs[i].spec.seed << '\n';
    }
    if (!manifest) throw std::runtime_error("failed writing dataset manifest in " + dir.string());
}

std::vector<ImagePair> read_dataset(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) throw std::runtime_error("dataset manifest not found: " + (dir / "manifest.txt").string());
    std::vector<ImagePair> pairs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        std::string clean, degraded, kind;
        ImagePair pair;
        if (!(is >> clean >> degraded >> kind >> pair.spec.param >> pair.spec.seed))
            throw std::runtime_error((dir / "manifest.txt").string() + ":" + std::to_string(line_no) +
                                     ": malformed manifest line");
        pair.spec.kind = parse_kind(kind);
        pair.clean = read_pnm(dir / clean);
        pair.degraded = read_pnm(dir / degraded);
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

}  // namespace maskrestore
