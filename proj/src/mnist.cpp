#include "dppkit/mnist.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>

namespace dppkit {

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class IdxReader {
 public:
  IdxReader(const std::filesystem::path& path) : path_(path), bytes_(read_file(path)) {}

  std::uint32_t u32() {
    need(4);
    const std::uint32_t v = (std::uint32_t{bytes_[pos_]} << 24) | (std::uint32_t{bytes_[pos_ + 1]} << 16) |
                            (std::uint32_t{bytes_[pos_ + 2]} << 8) | std::uint32_t{bytes_[pos_ + 3]};
    pos_ += 4;
    return v;
  }

  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  void expect_magic(std::uint32_t magic) {
    const std::uint32_t got = u32();
    if (got != magic) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "bad IDX magic 0x%08x (expected 0x%08x)", got, magic);
      throw IdxError(path_.string() + ": " + buf);
    }
  }

 private:
  void need(std::size_t n) {
    if (bytes_.size() - pos_ < n) {
      throw IdxError(path_.string() + ": truncated at byte offset " + std::to_string(bytes_.size()) +
                     " (needed " + std::to_string(pos_ + n) + " bytes)");
    }
  }

  std::filesystem::path path_;
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Dataset Dataset::head(std::size_t n) const {
  if (n == 0 || n >= size()) return *this;
  Dataset out;
  out.rows = rows;
  out.cols = cols;
  out.pixels.assign(pixels.begin(), pixels.begin() + static_cast<std::ptrdiff_t>(n * image_size()));
  out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

std::vector<float> Dataset::one_hot(std::size_t classes) const {
  std::vector<float> out(size() * classes, 0.0f);
  for (std::size_t i = 0; i < size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw std::out_of_range("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(classes) + ")");
    }
    out[i * classes + static_cast<std::size_t>(labels[i])] = 1.0f;
  }
  return out;
}

Dataset load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  IdxReader img(images);
  img.expect_magic(0x00000803);
  const std::size_t count = img.u32();
  Dataset data;
  data.rows = img.u32();
  data.cols = img.u32();
  if (data.rows == 0 || data.cols == 0) throw IdxError(images.string() + ": empty image dimensions");
  const std::uint8_t* px = img.take(count * data.rows * data.cols);
  data.pixels.resize(count * data.rows * data.cols);
  std::transform(px, px + data.pixels.size(), data.pixels.begin(),
                 [](std::uint8_t b) { return static_cast<float>(b) / 255.0f; });

  IdxReader lab(labels);
  lab.expect_magic(0x00000801);
  const std::size_t label_count = lab.u32();
  if (label_count != count) {
    throw IdxError("image/label count mismatch: " + std::to_string(count) + " images, " +
                   std::to_string(label_count) + " labels");
  }
  const std::uint8_t* lb = lab.take(count);
  data.labels.assign(lb, lb + count);
  for (int l : data.labels)
    if (l > 9) throw IdxError(labels.string() + ": label " + std::to_string(l) + " outside 0-9");
  return data;
}

MnistSplit load_mnist_dir(const std::filesystem::path& dir) {
  return {load_mnist_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"),
          load_mnist_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte")};
}

}  // namespace dppkit
