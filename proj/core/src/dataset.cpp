#include "embattr/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace embattr {

namespace {

std::uint32_t read_be32(std::ifstream& is, const std::string& path) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("idx '" + path + "': truncated header");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

void write_be32(std::ofstream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Tensor Dataset::image(int i) const {
    int one = i;
    return batch(std::span<const int>(&one, 1));
}

Tensor Dataset::batch(std::span<const int> idx) const {
    const std::int64_t b = static_cast<std::int64_t>(idx.size());
    const std::int64_t px = static_cast<std::int64_t>(rows) * cols;
    std::vector<double> v(static_cast<std::size_t>(b * px));
    for (std::int64_t j = 0; j < b; ++j) {
        const int i = idx[static_cast<std::size_t>(j)];
        if (i < 0 || i >= count)
            throw std::out_of_range("Dataset::batch: index " + std::to_string(i) + " out of range " +
                                    std::to_string(count));
        const std::uint8_t* src = pixels.data() + static_cast<std::size_t>(i) * px;
        double* dst = v.data() + j * px;
        for (std::int64_t k = 0; k < px; ++k) dst[k] = static_cast<double>(src[k]) / 255.0;
    }
    return Tensor::from({b, 1, rows, cols}, std::move(v));
}

std::vector<int> Dataset::batch_labels(std::span<const int> idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) out[j] = labels[static_cast<std::size_t>(idx[j])];
    return out;
}

Dataset Dataset::subset(int offset, int n) const {
    if (offset < 0 || offset + n > count)
        throw std::out_of_range("Dataset::subset: range exceeds dataset of " + std::to_string(count));
    Dataset d;
    d.count = n;
    d.rows = rows;
    d.cols = cols;
    const std::size_t px = static_cast<std::size_t>(rows) * cols;
    d.pixels.assign(pixels.begin() + static_cast<std::ptrdiff_t>(offset * px),
                    pixels.begin() + static_cast<std::ptrdiff_t>((offset + n) * px));
    d.labels.assign(labels.begin() + offset, labels.begin() + offset + n);
    return d;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    Dataset d;
    {
        std::ifstream is(images_path, std::ios::binary);
        if (!is) throw std::runtime_error("idx '" + images_path + "': cannot open");
        const std::uint32_t magic = read_be32(is, images_path);
        if (magic != 2051)
            throw std::runtime_error("idx '" + images_path + "': bad image magic " +
                                     std::to_string(magic) + ", expected 2051");
        d.count = static_cast<int>(read_be32(is, images_path));
        d.rows = static_cast<int>(read_be32(is, images_path));
        d.cols = static_cast<int>(read_be32(is, images_path));
        d.pixels.resize(static_cast<std::size_t>(d.count) * d.rows * d.cols);
        is.read(reinterpret_cast<char*>(d.pixels.data()),
                static_cast<std::streamsize>(d.pixels.size()));
        if (!is) throw std::runtime_error("idx '" + images_path + "': truncated pixel data");
    }
    {
        std::ifstream is(labels_path, std::ios::binary);
        if (!is) throw std::runtime_error("idx '" + labels_path + "': cannot open");
        const std::uint32_t magic = read_be32(is, labels_path);
        if (magic != 2049)
            throw std::runtime_error("idx '" + labels_path + "': bad label magic " +
                                     std::to_string(magic) + ", expected 2049");
        const int n = static_cast<int>(read_be32(is, labels_path));
        if (n != d.count)
            throw std::runtime_error("idx: image count " + std::to_string(d.count) +
                                     " does not match label count " + std::to_string(n));
        d.labels.resize(static_cast<std::size_t>(n));
        is.read(reinterpret_cast<char*>(d.labels.data()), n);
        if (!is) throw std::runtime_error("idx '" + labels_path + "': truncated label data");
        for (std::size_t i = 0; i < d.labels.size(); ++i)
            if (d.labels[i] > 9)
                throw std::runtime_error("idx '" + labels_path + "': label " +
                                         std::to_string(int(d.labels[i])) + " at index " +
                                         std::to_string(i) + " out of range 0-9");
    }
    return d;
}

void save_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
    {
        std::ofstream os(images_path, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("idx '" + images_path + "': cannot open for writing");
        write_be32(os, 2051);
        write_be32(os, static_cast<std::uint32_t>(d.count));
        write_be32(os, static_cast<std::uint32_t>(d.rows));
        write_be32(os, static_cast<std::uint32_t>(d.cols));
        os.write(reinterpret_cast<const char*>(d.pixels.data()),
                 static_cast<std::streamsize>(d.pixels.size()));
        if (!os) throw std::runtime_error("idx '" + images_path + "': write failed");
    }
    {
        std::ofstream os(labels_path, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("idx '" + labels_path + "': cannot open for writing");
        write_be32(os, 2049);
        write_be32(os, static_cast<std::uint32_t>(d.count));
        os.write(reinterpret_cast<const char*>(d.labels.data()),
                 static_cast<std::streamsize>(d.labels.size()));
        if (!os) throw std::runtime_error("idx '" + labels_path + "': write failed");
    }
}

MnistPaths mnist_paths(const std::string& dir) {
    return {dir + "/train-images-idx3-ubyte", dir + "/train-labels-idx1-ubyte",
            dir + "/t10k-images-idx3-ubyte", dir + "/t10k-labels-idx1-ubyte"};
}

bool mnist_present(const std::string& dir) {
    const MnistPaths p = mnist_paths(dir);
    namespace fs = std::filesystem;
    return fs::exists(p.train_images) && fs::exists(p.train_labels) && fs::exists(p.test_images) &&
           fs::exists(p.test_labels);
}

}  // namespace embattr
