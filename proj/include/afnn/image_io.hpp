#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

// Binary netpbm codecs: P6 (RGB) and P5 (gray), 8-bit only.

namespace afnn {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;           ///< 3 for P6, 1 for P5
  std::vector<std::uint8_t> pixels;   ///< interleaved, row-major
};

namespace detail {

inline std::size_t read_header_field(std::istream& in, const std::string& what) {
  char c;
  for (;;) {
    if (!in.get(c)) throw ImageIoError(what + ": truncated header");
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      break;
    }
  }
  std::size_t v = 0;
  bool any = false;
  while (std::isdigit(static_cast<unsigned char>(c))) {
    v = v * 10 + static_cast<std::size_t>(c - '0');
    any = true;
    if (!in.get(c)) break;
  }
  // The single whitespace byte after the last field has been consumed here.
  if (!any) throw ImageIoError(what + ": malformed header");
  return v;
}

}  // namespace detail

inline RawImage read_netpbm(std::istream& in, const std::string& what = "image") {
  char magic[2];
  if (!in.read(magic, 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw ImageIoError(what + ": not a binary PGM/PPM file");
  }
  RawImage img;
  img.channels = magic[1] == '6' ? 3 : 1;
  img.width = detail::read_header_field(in, what);
  img.height = detail::read_header_field(in, what);
  const std::size_t maxval = detail::read_header_field(in, what);
  if (maxval != 255) throw ImageIoError(what + ": only 8-bit (maxval 255) images are supported");
  if (img.width == 0 || img.height == 0) throw ImageIoError(what + ": zero-sized image");
  img.pixels.resize(img.width * img.height * img.channels);
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()))) {
    throw ImageIoError(what + ": truncated pixel data");
  }
  return img;
}

inline RawImage load_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError("cannot open " + path.string());
  return read_netpbm(in, path.string());
}

inline void write_netpbm(std::ostream& out, const RawImage& img) {
  if (img.channels != 1 && img.channels != 3) throw ImageIoError("write_netpbm: channels must be 1 or 3");
  if (img.pixels.size() != img.width * img.height * img.channels) {
    throw ImageIoError("write_netpbm: pixel count does not match dims");
  }
  out << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

inline void save_netpbm(const std::filesystem::path& path, const RawImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageIoError("cannot write " + path.string());
  write_netpbm(out, img);
  if (!out) throw ImageIoError("write failed: " + path.string());
}

}  // namespace afnn
