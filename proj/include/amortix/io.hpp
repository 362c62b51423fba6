#pragma once

#include "amortix/masking.hpp"
#include "amortix/mlp.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace amortix {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void f64(double v) { bytes(&v, 8); }
  const std::vector<unsigned char>& data() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> b, std::string what) : buf_(std::move(b)), what_(std::move(what)) {}
  void bytes(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw FormatError(what_ + ": truncated");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::vector<unsigned char> buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model checkpoints: "AMX1", u32 layer count, u32 widths[layers + 1], u8 head,
// then per layer the row-major weight followed by the bias, all f64 LE.

inline constexpr char kCheckpointMagic[4] = {'A', 'M', 'X', '1'};

inline std::vector<unsigned char> encode_checkpoint(const Mlp& net) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  const auto widths = net.widths();
  w.u32(static_cast<std::uint32_t>(widths.size() - 1));
  for (int v : widths) w.u32(static_cast<std::uint32_t>(v));
  w.u8(static_cast<std::uint8_t>(net.head()));
  for (const auto& layer : net.layers()) {
    w.bytes(layer.weight.data(), static_cast<std::size_t>(layer.weight.size()) * 8);
    w.bytes(layer.bias.data(), static_cast<std::size_t>(layer.bias.size()) * 8);
  }
  return w.data();
}

inline Mlp decode_checkpoint(std::vector<unsigned char> bytes) {
  detail::ByteReader r(std::move(bytes), "checkpoint");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("checkpoint: bad magic");
  const std::uint32_t layers = r.u32();
  if (layers == 0 || layers > 64) throw FormatError("checkpoint: implausible layer count");
  std::vector<int> widths;
  for (std::uint32_t i = 0; i <= layers; ++i) {
    const std::uint32_t v = r.u32();
    if (v == 0 || v > (1U << 24)) throw FormatError("checkpoint: implausible width");
    widths.push_back(static_cast<int>(v));
  }
  const std::uint8_t head = r.u8();
  if (head > static_cast<std::uint8_t>(Head::Sigmoid)) throw FormatError("checkpoint: unknown head");
  Mlp net(widths, static_cast<Head>(head));
  for (auto& layer : net.layers()) {
    r.bytes(layer.weight.data(), static_cast<std::size_t>(layer.weight.size()) * 8);
    r.bytes(layer.bias.data(), static_cast<std::size_t>(layer.bias.size()) * 8);
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return net;
}

inline void save_checkpoint(const Mlp& net, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(net));
}

inline Mlp load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(detail::read_file(path)); }

/// Text sidecar next to a checkpoint: key=value lines.
inline void write_sidecar(const std::filesystem::path& path, const std::map<std::string, std::string>& kv) {
  std::ofstream out(path);
  for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
}

inline std::map<std::string, std::string> read_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

// ---------------------------------------------------------------------------
// Masks: CSV (one 0/1 row per instance) and "AMSK", u32 rows, u32 cols, packed bits.

inline void write_masks_csv(const Matrix& masks, const std::filesystem::path& path) {
  std::ofstream out(path);
  for (Eigen::Index j = 0; j < masks.cols(); ++j) out << (j ? "," : "") << 's' << j + 1;
  out << '\n';
  for (Eigen::Index i = 0; i < masks.rows(); ++i) {
    for (Eigen::Index j = 0; j < masks.cols(); ++j) out << (j ? "," : "") << (masks(i, j) > 0.5 ? '1' : '0');
    out << '\n';
  }
}

inline Matrix read_masks_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  const auto cols = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ',') + 1);
  std::vector<double> vals;
  Eigen::Index rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Eigen::Index c = 0;
    for (char ch : line) {
      if (ch == '0' || ch == '1') {
        vals.push_back(ch == '1');
        ++c;
      } else if (ch != ',' && ch != '\r') {
        throw FormatError("mask csv: non-binary entry");
      }
    }
    if (c != cols) throw FormatError("mask csv: ragged row");
    ++rows;
  }
  Matrix m(rows, cols);
  std::copy(vals.begin(), vals.end(), m.data());
  return m;
}

inline constexpr char kMaskMagic[4] = {'A', 'M', 'S', 'K'};

inline std::vector<unsigned char> encode_masks_binary(const Matrix& masks) {
  detail::ByteWriter w;
  w.bytes(kMaskMagic, 4);
  w.u32(static_cast<std::uint32_t>(masks.rows()));
  w.u32(static_cast<std::uint32_t>(masks.cols()));
  std::uint8_t acc = 0;
  int nbits = 0;
  for (Eigen::Index i = 0; i < masks.size(); ++i) {
    if (masks.data()[i] > 0.5) acc |= static_cast<std::uint8_t>(1U << nbits);
    if (++nbits == 8) {
      w.u8(acc);
      acc = 0;
      nbits = 0;
    }
  }
  if (nbits) w.u8(acc);
  return w.data();
}

inline Matrix decode_masks_binary(std::vector<unsigned char> bytes) {
  detail::ByteReader r(std::move(bytes), "mask file");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMaskMagic, 4) != 0) throw FormatError("mask file: bad magic");
  const auto rows = static_cast<Eigen::Index>(r.u32());
  const auto cols = static_cast<Eigen::Index>(r.u32());
  Matrix m(rows, cols);
  std::uint8_t byte = 0;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (i % 8 == 0) byte = r.u8();
    m.data()[i] = (byte >> (i % 8)) & 1U;
  }
  if (!r.done()) throw FormatError("mask file: trailing bytes");
  return m;
}

// ---------------------------------------------------------------------------
// Images

/// Binary PGM (P5, maxval 255) from intensities in [0, 1].
inline std::vector<unsigned char> encode_pgm(const Matrix& image) {
  std::ostringstream header;
  header << "P5\n" << image.cols() << ' ' << image.rows() << "\n255\n";
  const std::string h = header.str();
  std::vector<unsigned char> out(h.begin(), h.end());
  for (Eigen::Index i = 0; i < image.rows(); ++i)
    for (Eigen::Index j = 0; j < image.cols(); ++j)
      out.push_back(static_cast<unsigned char>(std::lround(std::clamp(image(i, j), 0.0, 1.0) * 255.0)));
  return out;
}

/// Digit with selected pixels forced to full intensity.
inline Matrix overlay_selection(std::span<const double> pixels, const Matrix& mask_row, int rows, int cols) {
  Matrix img(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const auto j = static_cast<std::size_t>(r * cols + c);
      img(r, c) = mask_row(0, static_cast<Eigen::Index>(j)) > 0.5 ? 1.0 : pixels[j];
    }
  return img;
}

}  // namespace amortix
