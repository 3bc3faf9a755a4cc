#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "embattr/tensor.hpp"

namespace embattr {

// Image/label pairs in IDX convention: pixels stored as bytes, exposed as
// [0,1] floats (byte / 255). Labels are digits 0-9.
struct Dataset {
    int count = 0;
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major
    std::vector<std::uint8_t> labels;  // count

    Tensor image(int i) const;                       // [1,1,rows,cols]
    Tensor batch(std::span<const int> idx) const;    // [B,1,rows,cols]
    std::vector<int> batch_labels(std::span<const int> idx) const;
    Dataset subset(int offset, int n) const;
};

// IDX files: image magic 2051, label magic 2049, big-endian headers.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path);

// Resolves the four conventional filenames under a directory
// (train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-...).
struct MnistPaths {
    std::string train_images, train_labels, test_images, test_labels;
};
MnistPaths mnist_paths(const std::string& dir);
bool mnist_present(const std::string& dir);

}  // namespace embattr
