#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "dppkit/dpp_mask.hpp"
#include "dppkit/network.hpp"
#include "dppkit/quant.hpp"

namespace dppkit {

/// Storage accounting of a structured-sparse model.
///
/// V counts stored scalars per layer: 2S (Fine), S + K*N_out (Medium) and
/// S (Coarse). Indices are accounted at the value width b, so
/// r = P * 32 / (V * b).
struct CompressionReport {
  std::size_t dense_params = 0;   // P
  std::size_t active = 0;         // S
  unsigned bits = 32;             // b
  std::size_t stored_values = 0;  // V

  double rate() const;
  double remaining() const { return static_cast<double>(active) / static_cast<double>(dense_params); }
};

/// Single-granularity rate from (P, S, b): Fine P*32/(2S*b), Medium
/// P*32/((S + K*N_out)*b), Coarse P*32/(S*b).
double compression_rate(std::size_t dense_params, std::size_t active, unsigned bits, Granularity level,
                        std::size_t k = 0, std::size_t n_out = 0);

/// Sums the per-layer P, S and V counts over layer geometries.
CompressionReport compression_report(std::span<const MaskGeometry> layers, unsigned bits);

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-layer export input. `weights` are the weights the model computes
/// with (quantized when bits < 32), full shape; `mask` is the frozen hard
/// draw over the effective logits.
struct ExportLayer {
  LayerSpec spec;
  GranularitySpec pruning;
  std::vector<float> weights;
  std::vector<float> bias;
  std::vector<std::uint8_t> mask;
};

/// One decoded layer. `spec.dims` are the stored (possibly shrunk) dims,
/// `original` the dims the accounting refers to.
struct SparseLayerInfo {
  LayerDims original;
  GranularitySpec pruning;
  std::size_t file_bytes = 0;
  std::size_t index_width = 0;
};

struct SparseModel {
  unsigned bits = 32;
  DenseModel model;
  std::vector<SparseLayerInfo> info;

  CompressionReport report() const;
};

/// Serializes a frozen model. Layout: "DPPS", u16 version, u8 architecture,
/// u8 bits, u32 layer count, then one length-prefixed record per layer with
/// bit-packed index and value streams (little-endian throughout).
///
/// Coarse layers drop their pruned filters; the constant activation each
/// dropped filter would emit is folded into the next layer's bias and the
/// matching input rows of that layer are dropped.
std::vector<std::uint8_t> export_model(Architecture arch, unsigned bits, std::span<const ExportLayer> layers);

SparseModel import_model(std::span<const std::uint8_t> bytes);

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

/// Append-only LSB-first bit packer.
class BitWriter {
 public:
  void put(std::uint64_t value, unsigned width);
  /// Pads to a byte boundary and returns the packed bytes.
  std::vector<std::uint8_t> finish();

 private:
  std::vector<std::uint8_t> bytes_;
  std::uint64_t acc_ = 0;
  unsigned filled_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint64_t get(unsigned width);

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t bit_ = 0;
};

/// Bits needed to store any value in [0, n); at least 1.
unsigned bit_width(std::size_t n);

}  // namespace dppkit
