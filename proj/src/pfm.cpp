#include "pmrl/pfm.hpp"

#include <fstream>
#include <stdexcept>

namespace pmrl::io {

PfmParseError::PfmParseError(const std::string& path, std::size_t off,
                             const std::string& what)
    : std::runtime_error("PFM parse error in " + path + " at byte " +
                         std::to_string(off) + ": " + what),
      offset(off) {}

void write_pfm(const std::string& path, const FloatImage& img) {
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("write_pfm: channels must be 1 or 3");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write PFM: " + path);
  os << (img.channels == 1 ? "Pf" : "PF") << "\n"
     << img.width << " " << img.height << "\n"
     << "-1.0\n";
  // Bottom-to-top row order.
  for (int y = img.height - 1; y >= 0; --y)
    os.write(reinterpret_cast<const char*>(
                 &img.data[static_cast<std::size_t>(y) * img.width *
                           img.channels]),
             static_cast<std::streamsize>(sizeof(float) * img.width *
                                          img.channels));
  if (!os) throw std::runtime_error("write failure on PFM: " + path);
}

FloatImage read_pfm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read PFM: " + path);

  auto offset = [&is]() -> std::size_t {
    auto p = is.tellg();
    return p < 0 ? 0 : static_cast<std::size_t>(p);
  };
  auto next_token = [&]() -> std::string {
    std::string tok;
    if (!(is >> tok)) throw PfmParseError(path, offset(), "unexpected EOF");
    return tok;
  };

  const std::string magic = next_token();
  FloatImage img;
  if (magic == "Pf")
    img.channels = 1;
  else if (magic == "PF")
    img.channels = 3;
  else
    throw PfmParseError(path, 0, "bad magic '" + magic + "'");

  try {
    img.width = std::stoi(next_token());
    img.height = std::stoi(next_token());
  } catch (const std::logic_error&) {
    throw PfmParseError(path, offset(), "bad dimensions");
  }
  if (img.width <= 0 || img.height <= 0)
    throw PfmParseError(path, offset(), "non-positive dimensions");

  double scale = 0.0;
  try {
    scale = std::stod(next_token());
  } catch (const std::logic_error&) {
    throw PfmParseError(path, offset(), "bad scale");
  }
  if (scale >= 0.0)
    throw PfmParseError(path, offset(), "big-endian PFM not supported");

  is.get();  // single whitespace after scale
  img.data.resize(static_cast<std::size_t>(img.width) * img.height *
                  img.channels);
  for (int y = img.height - 1; y >= 0; --y) {
    const std::size_t row_off = offset();
    is.read(reinterpret_cast<char*>(
                &img.data[static_cast<std::size_t>(y) * img.width *
                          img.channels]),
            static_cast<std::streamsize>(sizeof(float) * img.width *
                                         img.channels));
    if (!is)
      throw PfmParseError(path, row_off, "truncated pixel data (row " +
                                             std::to_string(y) + ")");
  }
  return img;
}

}  // namespace pmrl::io
