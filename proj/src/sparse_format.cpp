#include "dppkit/sparse_format.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

namespace dppkit {

namespace {

constexpr char kMagic[4] = {'D', 'P', 'P', 'S'};
constexpr std::uint16_t kVersion = 1;

std::string layer_tag(std::size_t l) { return "layer " + std::to_string(l) + ": "; }

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::span<const std::uint8_t> data) { bytes.insert(bytes.end(), data.begin(), data.end()); }

  std::vector<std::uint8_t> bytes;

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> raw(std::size_t n) {
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{bytes_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("truncated model at byte offset " + std::to_string(bytes_.size()) + " (needed " +
                        std::to_string(pos_ + n) + ")");
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::size_t packed_bytes(std::size_t count, unsigned width) { return (count * width + 7) / 8; }

struct ValueCodec {
  QuantSpec spec;

  void put(BitWriter& out, float v) const {
    if (spec.full_precision()) {
      out.put(std::bit_cast<std::uint32_t>(v), 32);
      return;
    }
    const std::uint32_t code = spec.code_of(v);
    if (spec.value_of(code) != v) {
      throw FormatError("weight " + std::to_string(v) + " is not on the " + std::to_string(spec.bits()) +
                        "-bit grid");
    }
    out.put(code, spec.bits());
  }

  float get(BitReader& in) const {
    if (spec.full_precision()) return std::bit_cast<float>(static_cast<std::uint32_t>(in.get(32)));
    return spec.value_of(static_cast<std::uint32_t>(in.get(spec.bits())));
  }
};

// Weight (i, r, o) of a [n_in x area x n_out] array.
std::size_t at(const LayerDims& d, std::size_t i, std::size_t r, std::size_t o) {
  return (i * d.kernel_area() + r) * d.n_out + o;
}

// Working copy of one layer while physical shrinkage is applied.
struct Staged {
  LayerSpec spec;  // original dims
  GranularitySpec pruning;
  std::vector<float> weights;  // masked, original shape
  std::vector<float> bias;
  std::vector<std::uint8_t> full_mask;
  std::vector<std::size_t> kept_in;   // original input rows that survive
  std::vector<std::size_t> kept_out;  // original outputs that survive
};

}  // namespace

void BitWriter::put(std::uint64_t value, unsigned width) {
  for (unsigned b = 0; b < width; ++b) {
    acc_ |= ((value >> b) & 1u) << filled_;
    if (++filled_ == 8) {
      bytes_.push_back(static_cast<std::uint8_t>(acc_));
      acc_ = 0;
      filled_ = 0;
    }
  }
}

std::vector<std::uint8_t> BitWriter::finish() {
  if (filled_) bytes_.push_back(static_cast<std::uint8_t>(acc_));
  acc_ = 0;
  filled_ = 0;
  return std::move(bytes_);
}

std::uint64_t BitReader::get(unsigned width) {
  if (bit_ + width > bytes_.size() * 8) throw FormatError("bit stream exhausted");
  std::uint64_t v = 0;
  for (unsigned b = 0; b < width; ++b, ++bit_) {
    v |= std::uint64_t{(bytes_[bit_ / 8] >> (bit_ % 8)) & 1u} << b;
  }
  return v;
}

unsigned bit_width(std::size_t n) {
  unsigned w = 1;
  while (n > (std::size_t{1} << w)) ++w;
  return w;
}

double CompressionReport::rate() const {
  return static_cast<double>(dense_params) * 32.0 / (static_cast<double>(stored_values) * bits);
}

double compression_rate(std::size_t dense_params, std::size_t active, unsigned bits, Granularity level,
                        std::size_t k, std::size_t n_out) {
  std::size_t stored = active;
  if (level == Granularity::Fine) stored = 2 * active;
  if (level == Granularity::Medium) stored = active + k * n_out;
  return CompressionReport{dense_params, active, bits, stored}.rate();
}

CompressionReport compression_report(std::span<const MaskGeometry> layers, unsigned bits) {
  CompressionReport r;
  r.bits = bits;
  for (const auto& g : layers) {
    r.dense_params += g.dims().weight_count();
    r.active += g.active_weights();
    r.stored_values += g.stored_values();
  }
  return r;
}

CompressionReport SparseModel::report() const {
  std::vector<MaskGeometry> geos;
  for (std::size_t l = 0; l < info.size(); ++l) geos.emplace_back(model.layers[l].kind, info[l].original, info[l].pruning);
  return compression_report(geos, bits);
}

std::vector<std::uint8_t> export_model(Architecture arch, unsigned bits, std::span<const ExportLayer> layers) {
  const ValueCodec codec{QuantSpec(bits)};
  if (layers.empty()) throw FormatError("model has no layers");

  std::vector<Staged> staged;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& in = layers[l];
    MaskGeometry geo(in.spec.kind, in.spec.dims, in.pruning);
    if (in.weights.size() != geo.dims().weight_count() || in.bias.size() != in.spec.dims.n_out) {
      throw FormatError(layer_tag(l) + "weight or bias size does not match its dims");
    }
    if (in.mask.size() != geo.effective_size()) throw FormatError(layer_tag(l) + "mask size does not match geometry");
    const auto& layout = geo.layout();
    for (std::size_t d = 0; d < layout.distributions(); ++d) {
      std::size_t on = 0;
      for (std::size_t c = 0; c < layout.classes; ++c) on += in.mask[layout.index(d, c)] != 0;
      if (on != geo.k()) {
        throw FormatError(layer_tag(l) + "mask popcount " + std::to_string(on) + " in distribution " +
                          std::to_string(d) + " does not equal K = " + std::to_string(geo.k()));
      }
    }
    Staged s{in.spec, in.pruning, in.weights, in.bias, expand_hard_mask(in.mask, geo), {}, {}};
    for (std::size_t w = 0; w < s.weights.size(); ++w)
      if (!s.full_mask[w]) s.weights[w] = 0.0f;
    for (std::size_t i = 0; i < in.spec.dims.n_in; ++i) s.kept_in.push_back(i);
    for (std::size_t o = 0; o < in.spec.dims.n_out; ++o) {
      if (in.pruning.level != Granularity::Coarse || in.mask[o]) s.kept_out.push_back(o);
    }
    staged.push_back(std::move(s));
  }

  // Coarse shrinkage: drop filters, fold their constant output forward.
  for (std::size_t l = 0; l < staged.size(); ++l) {
    auto& cur = staged[l];
    if (cur.pruning.level != Granularity::Coarse || cur.kept_out.size() == cur.spec.dims.n_out) continue;
    if (l + 1 == staged.size()) throw FormatError(layer_tag(l) + "Coarse pruning of the output layer is not exportable");
    auto& next = staged[l + 1];
    const LayerDims& nd = next.spec.dims;
    if (nd.n_in % cur.spec.dims.n_out != 0) throw FormatError(layer_tag(l + 1) + "input count is not a multiple of the previous outputs");
    const std::size_t per_channel = nd.n_in / cur.spec.dims.n_out;
    std::vector<char> alive(cur.spec.dims.n_out, 0);
    for (auto o : cur.kept_out) alive[o] = 1;
    std::vector<std::size_t> kept_rows;
    for (std::size_t r = 0; r < nd.n_in; ++r) {
      const std::size_t channel = r / per_channel;
      if (alive[channel]) {
        kept_rows.push_back(r);
        continue;
      }
      float constant = cur.bias[channel];
      if (cur.spec.relu) constant = std::max(constant, 0.0f);
      for (std::size_t o = 0; o < nd.n_out; ++o) {
        float kernel_sum = 0.0f;
        for (std::size_t q = 0; q < nd.kernel_area(); ++q) kernel_sum += next.weights[at(nd, r, q, o)];
        next.bias[o] += constant * kernel_sum;
      }
    }
    next.kept_in = std::move(kept_rows);
  }

  ByteWriter out;
  out.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kMagic), 4));
  out.u16(kVersion);
  out.u8(static_cast<std::uint8_t>(arch));
  out.u8(static_cast<std::uint8_t>(bits));
  out.u32(static_cast<std::uint32_t>(staged.size()));

  for (std::size_t l = 0; l < staged.size(); ++l) {
    const auto& s = staged[l];
    const LayerDims& d = s.spec.dims;
    const std::size_t area = d.kernel_area();
    const std::size_t k = s.pruning.k;
    BitWriter counts, indices, values;
    std::size_t n_counts = 0, n_indices = 0, n_values = 0;
    unsigned index_width = 0, count_width = 0;

    const bool per_kernel = s.spec.kind == LayerKind::Convolutional && s.pruning.level == Granularity::Fine;
    if (s.pruning.level == Granularity::Coarse) {
      for (auto i : s.kept_in)
        for (std::size_t q = 0; q < area; ++q)
          for (auto o : s.kept_out) {
            codec.put(values, s.weights[at(d, i, q, o)]);
            ++n_values;
          }
    } else if (per_kernel) {
      index_width = bit_width(area);
      for (auto i : s.kept_in)
        for (auto o : s.kept_out)
          for (std::size_t q = 0; q < area; ++q) {
            if (!s.full_mask[at(d, i, q, o)]) continue;
            indices.put(q, index_width);
            codec.put(values, s.weights[at(d, i, q, o)]);
            ++n_indices;
            ++n_values;
          }
    } else {
      // K of the (surviving) inputs per output, values for whole kernels.
      index_width = bit_width(s.kept_in.size());
      std::vector<std::size_t> taken(s.kept_out.size(), 0);
      for (std::size_t oo = 0; oo < s.kept_out.size(); ++oo) {
        const std::size_t o = s.kept_out[oo];
        for (std::size_t ii = 0; ii < s.kept_in.size(); ++ii) {
          const std::size_t i = s.kept_in[ii];
          if (!s.full_mask[at(d, i, 0, o)]) continue;
          indices.put(ii, index_width);
          ++n_indices;
          ++taken[oo];
          for (std::size_t q = 0; q < area; ++q) {
            codec.put(values, s.weights[at(d, i, q, o)]);
            ++n_values;
          }
        }
      }
      if (std::any_of(taken.begin(), taken.end(), [&](std::size_t t) { return t != k; })) {
        count_width = bit_width(k + 1);
        for (auto t : taken) counts.put(t, count_width);
        n_counts = taken.size();
      }
    }

    const auto count_bytes = counts.finish();
    const auto index_bytes = indices.finish();
    const auto value_bytes = values.finish();
    ByteWriter rec;
    rec.u8(static_cast<std::uint8_t>(s.spec.kind));
    rec.u8(static_cast<std::uint8_t>(s.pruning.level));
    rec.u8(s.spec.relu ? 1 : 0);
    rec.u8(s.spec.pool ? 1 : 0);
    rec.u32(static_cast<std::uint32_t>(d.n_in));
    rec.u32(static_cast<std::uint32_t>(d.kernel_h));
    rec.u32(static_cast<std::uint32_t>(d.kernel_w));
    rec.u32(static_cast<std::uint32_t>(d.n_out));
    rec.u32(static_cast<std::uint32_t>(k));
    rec.u32(static_cast<std::uint32_t>(s.kept_in.size()));
    rec.u32(static_cast<std::uint32_t>(s.kept_out.size()));
    rec.u8(static_cast<std::uint8_t>(index_width));
    rec.u8(static_cast<std::uint8_t>(count_width));
    rec.u64(n_counts);
    rec.u64(n_indices);
    rec.u64(n_values);
    rec.raw(count_bytes);
    rec.raw(index_bytes);
    rec.raw(value_bytes);
    for (auto o : s.kept_out) rec.f32(s.bias[o]);
    out.u32(static_cast<std::uint32_t>(rec.bytes.size()));
    out.raw(rec.bytes);
  }
  return std::move(out.bytes);
}

SparseModel import_model(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  auto magic = in.raw(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw FormatError("not a .dpps model (bad magic)");
  const auto version = in.u16();
  if (version != kVersion) throw FormatError("unsupported .dpps version " + std::to_string(version));
  const auto arch = in.u8();
  if (arch > static_cast<std::uint8_t>(Architecture::LeNet5Caffe)) throw FormatError("unknown architecture id " + std::to_string(arch));
  SparseModel result;
  result.bits = in.u8();
  QuantSpec spec = [&] {
    try {
      return QuantSpec(result.bits);
    } catch (const std::invalid_argument& e) {
      throw FormatError(e.what());
    }
  }();
  const ValueCodec codec{spec};
  result.model.arch = static_cast<Architecture>(arch);
  const std::uint32_t layer_count = in.u32();
  if (layer_count == 0 || layer_count > 64) throw FormatError("implausible layer count " + std::to_string(layer_count));

  for (std::uint32_t l = 0; l < layer_count; ++l) {
    const std::uint32_t length = in.u32();
    const std::size_t start = in.position();
    if (length > in.remaining()) throw FormatError(layer_tag(l) + "record runs past the end of the file");
    LayerSpec ls;
    const auto kind = in.u8(), level = in.u8();
    if (kind > 1 || level > 2) throw FormatError(layer_tag(l) + "bad layer kind or granularity tag");
    ls.kind = static_cast<LayerKind>(kind);
    ls.relu = in.u8() != 0;
    ls.pool = in.u8() != 0;
    LayerDims original;
    original.n_in = in.u32();
    original.kernel_h = in.u32();
    original.kernel_w = in.u32();
    original.n_out = in.u32();
    GranularitySpec pruning{static_cast<Granularity>(level), in.u32()};
    try {
      MaskGeometry check(ls.kind, original, pruning);
    } catch (const std::invalid_argument& e) {
      throw FormatError(layer_tag(l) + e.what());
    }
    ls.dims = original;
    ls.dims.n_in = in.u32();
    ls.dims.n_out = in.u32();
    if (ls.dims.n_in == 0 || ls.dims.n_in > original.n_in || ls.dims.n_out == 0 || ls.dims.n_out > original.n_out) {
      throw FormatError(layer_tag(l) + "stored dims exceed the original dims");
    }
    const unsigned index_width = in.u8();
    const unsigned count_width = in.u8();
    const std::uint64_t n_counts = in.u64(), n_indices = in.u64(), n_values = in.u64();
    if (index_width > 32 || count_width > 32 || n_values > ls.dims.weight_count() || n_indices > n_values ||
        n_counts > ls.dims.n_out) {
      throw FormatError(layer_tag(l) + "inconsistent stream header");
    }
    BitReader counts(in.raw(packed_bytes(n_counts, count_width)));
    BitReader indices(in.raw(packed_bytes(n_indices, index_width)));
    BitReader values(in.raw(packed_bytes(n_values, spec.full_precision() ? 32 : spec.bits())));

    const LayerDims& d = ls.dims;
    const std::size_t area = d.kernel_area();
    Tensor w({ls.kind == LayerKind::FullyConnected ? Shape{d.n_in, d.n_out} : Shape{d.n_in, d.kernel_h, d.kernel_w, d.n_out}});
    auto wv = w.values();
    std::size_t used_indices = 0, used_values = 0;
    auto next_index = [&](std::size_t bound) {
      if (used_indices++ >= n_indices) throw FormatError(layer_tag(l) + "index stream too short");
      const auto v = indices.get(index_width);
      if (v >= bound) throw FormatError(layer_tag(l) + "index " + std::to_string(v) + " out of range");
      return static_cast<std::size_t>(v);
    };
    auto next_value = [&]() {
      if (used_values++ >= n_values) throw FormatError(layer_tag(l) + "value stream too short");
      return codec.get(values);
    };

    if (pruning.level == Granularity::Coarse) {
      for (auto& v : wv) v = next_value();
    } else if (ls.kind == LayerKind::Convolutional && pruning.level == Granularity::Fine) {
      for (std::size_t i = 0; i < d.n_in; ++i)
        for (std::size_t o = 0; o < d.n_out; ++o)
          for (std::size_t j = 0; j < pruning.k; ++j) wv[at(d, i, next_index(area), o)] = next_value();
    } else {
      if (n_counts != 0 && n_counts != d.n_out) throw FormatError(layer_tag(l) + "count stream length mismatch");
      for (std::size_t o = 0; o < d.n_out; ++o) {
        const std::size_t take = n_counts ? static_cast<std::size_t>(counts.get(count_width)) : pruning.k;
        if (take > pruning.k) throw FormatError(layer_tag(l) + "per-output count exceeds K");
        for (std::size_t j = 0; j < take; ++j) {
          const std::size_t i = next_index(d.n_in);
          for (std::size_t q = 0; q < area; ++q) wv[at(d, i, q, o)] = next_value();
        }
      }
    }
    if (used_indices != n_indices || used_values != n_values) {
      throw FormatError(layer_tag(l) + "stream lengths do not match the layer structure");
    }
    Tensor bias({d.n_out});
    for (auto& b : bias.values()) b = in.f32();
    if (in.position() - start != length) throw FormatError(layer_tag(l) + "record length mismatch");

    result.info.push_back({original, pruning, length + 4, index_width});
    result.model.layers.push_back(ls);
    result.model.weights.push_back(std::move(w));
    result.model.biases.push_back(std::move(bias));
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after the last layer record");
  return result;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace dppkit
