#include "saan/pnm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace saan {

std::uint8_t quantize_unit(double v) {
  if (!(v >= 0.0)) v = 0.0;  // NaN lands here too
  if (v > 1.0) v = 1.0;
  return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

std::string encode_pnm(const Tensor<float>& image) {
  if (image.ndim() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw DimensionError("image must be [1,H,W] or [3,H,W], got " + to_string(image.shape()));
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::string out = (c == 3 ? "P6\n" : "P5\n") + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + static_cast<std::size_t>(c * h * w));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index k = 0; k < c; ++k)
        out[header + static_cast<std::size_t>((y * w + x) * c + k)] =
            static_cast<char>(quantize_unit(image[(k * h + y) * w + x]));
  return out;
}

namespace {

class HeaderReader {
 public:
  HeaderReader(const std::string& bytes, const std::string& what) : bytes_(bytes), what_(what) {}

  [[noreturn]] void fail(const std::string& message) const {
    throw FormatError(what_ + ": " + message + " at byte offset " + std::to_string(pos_));
  }

  void skip_space() {
    while (pos_ < bytes_.size()) {
      const char ch = bytes_[pos_];
      if (ch == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  long number(const char* field) {
    skip_space();
    const std::size_t start = pos_;
    long v = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > (1L << 24)) fail(std::string(field) + " too large");
      ++pos_;
    }
    if (pos_ == start) fail(std::string("expected ") + field);
    return v;
  }

  std::size_t pos_ = 0;
  const std::string& bytes_;
  const std::string& what_;
};

}  // namespace

Tensor<float> decode_pnm(const std::string& bytes, const std::string& what) {
  HeaderReader r(bytes, what);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    r.fail("bad magic (expected P5 or P6)");
  const Index c = bytes[1] == '6' ? 3 : 1;
  r.pos_ = 2;
  const long w = r.number("width");
  const long h = r.number("height");
  const long maxval = r.number("maxval");
  if (w <= 0 || h <= 0) r.fail("zero image dimension");
  if (maxval != 255) r.fail("unsupported maxval " + std::to_string(maxval));
  if (r.pos_ >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[r.pos_])))
    r.fail("missing whitespace after maxval");
  ++r.pos_;
  const std::size_t payload = static_cast<std::size_t>(c * h * w);
  if (bytes.size() - r.pos_ < payload)
    r.fail("truncated payload: need " + std::to_string(payload) + " bytes, have " +
           std::to_string(bytes.size() - r.pos_));
  Tensor<float> image(Shape{c, h, w});
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + r.pos_);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index k = 0; k < c; ++k) image[(k * h + y) * w + x] = static_cast<float>(p[(y * w + x) * c + k]) / 255.0f;
  return image;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw FormatError("read failure on " + path.string());
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw FormatError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("cannot write " + path.string());
}

void write_image(const std::filesystem::path& path, const Tensor<float>& image) {
  write_file(path, encode_pnm(image));
}

Tensor<float> read_image(const std::filesystem::path& path) { return decode_pnm(read_file(path), path.string()); }

}  // namespace saan
