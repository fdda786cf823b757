#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace dppkit {

/// Grayscale images scaled to [0, 1] with integer class labels.
struct Dataset {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> pixels;  // size() * rows * cols, image-major
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return rows * cols; }
  /// First n items (all of them when n is 0 or larger than the set).
  Dataset head(std::size_t n) const;
  /// Row-major [size x classes] 0/1 encoding of the labels.
  std::vector<float> one_hot(std::size_t classes = 10) const;
};

class IdxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
Dataset load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

struct MnistSplit {
  Dataset train;
  Dataset test;
};

/// Loads the four canonical file names (train-images-idx3-ubyte, ...) from a
/// directory; a trailing ".gz" is not supported.
MnistSplit load_mnist_dir(const std::filesystem::path& dir);

}  // namespace dppkit
