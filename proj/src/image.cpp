#include "maskrestore/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace maskrestore {

void clip_unit(Image& image) {
    for (auto& v : image.pixels) v = std::clamp(v, 0.0, 1.0);
}

void write_pnm(const std::filesystem::path& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3)
        throw std::invalid_argument("write_pnm: only 1 or 3 channels supported, got " +
                                    std::to_string(image.channels));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
    std::vector<unsigned char> bytes(image.pixels.size());
    std::size_t k = 0;
    for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x)
            for (std::size_t c = 0; c < image.channels; ++c)
                bytes[k++] = static_cast<unsigned char>(std::lround(std::clamp(image.at(c, y, x), 0.0, 1.0) * 255.0));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

namespace {

std::size_t read_header_int(std::istream& in, const std::filesystem::path& path) {
    std::string token;
    while (in >> token) {
        if (token[0] == '#') {
            std::getline(in, token);
            continue;
        }
        try {
            return static_cast<std::size_t>(std::stoul(token));
        } catch (const std::exception&) {
            break;
        }
    }
    throw std::runtime_error("malformed PNM header in " + path.string());
}

}  // namespace

Image read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string magic;
    in >> magic;
    std::size_t channels = 0;
    if (magic == "P6")
        channels = 3;
    else if (magic == "P5")
        channels = 1;
    else
        throw std::runtime_error(path.string() + " is not a binary P5/P6 file");
    const std::size_t w = read_header_int(in, path);
    const std::size_t h = read_header_int(in, path);
    const std::size_t maxval = read_header_int(in, path);
    if (maxval != 255) throw std::runtime_error(path.string() + ": only 8-bit maxval 255 supported");
    in.get();
    std::vector<unsigned char> bytes(w * h * channels);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw std::runtime_error(path.string() + ": truncated pixel data");
    Image image(channels, h, w);
    std::size_t k = 0;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < channels; ++c) image.at(c, y, x) = bytes[k++] / 255.0;
    return image;
}

template <typename T>
Tensor<T> to_tensor(const Image& image) {
    std::vector<T> v(image.pixels.begin(), image.pixels.end());
    return Tensor<T>::from({image.channels, image.height, image.width}, std::move(v));
}

template <typename T>
Tensor<T> to_batch(std::span<const Image> images) {
    if (images.empty()) throw std::invalid_argument("to_batch: empty image list");
    const Image& first = images.front();
    std::vector<T> v;
    v.reserve(images.size() * first.pixels.size());
    for (const auto& im : images) {
        if (!im.same_shape(first)) throw ShapeError("to_batch: images differ in shape");
        v.insert(v.end(), im.pixels.begin(), im.pixels.end());
    }
    return Tensor<T>::from({images.size(), first.channels, first.height, first.width}, std::move(v));
}

template <typename T>
Image to_image(const Tensor<T>& tensor, std::size_t n) {
    const bool batched = tensor.rank() == 4;
    if (!batched && tensor.rank() != 3) throw ShapeError("to_image expects rank 3 or 4, got " + to_string(tensor.shape()));
    const std::size_t off = batched ? 1 : 0;
    Image image(tensor.dim(off), tensor.dim(off + 1), tensor.dim(off + 2));
    const std::size_t count = image.pixels.size();
    if (batched && n >= tensor.dim(0)) throw ShapeError("to_image index out of range");
    const auto data = tensor.data();
    for (std::size_t k = 0; k < count; ++k) image.pixels[k] = static_cast<double>(data[n * count + k]);
    return image;
}

template Tensor<float> to_tensor<float>(const Image&);
template Tensor<double> to_tensor<double>(const Image&);
template Tensor<float> to_batch<float>(std::span<const Image>);
template Tensor<double> to_batch<double>(std::span<const Image>);
template Image to_image<float>(const Tensor<float>&, std::size_t);
template Image to_image<double>(const Tensor<double>&, std::size_t);

}  // namespace maskrestore
