// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

namespace omni {

namespace fs = std::filesystem;
using std::int64_t;

namespace {

unsigned quantize(double v, unsigned maxval) {
  return static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * maxval));
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::string& path, const Image& img, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw ContractError("png bit depth must be 8 or 16");
  if (img.channels != 1 && img.channels != 3) throw ContractError("png supports 1 or 3 channels");
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot write '" + path + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: '" + path + "'");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), bit_depth,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int64_t row_samples = img.width * img.channels;
  const unsigned maxval = bit_depth == 8 ? 255u : 65535u;
  std::vector<png_byte> row(static_cast<std::size_t>(row_samples * (bit_depth / 8)));
  for (int64_t y = 0; y < img.height; ++y) {
    for (int64_t i = 0; i < row_samples; ++i) {
      const unsigned q = quantize(img.data[y * row_samples + i], maxval);
      if (bit_depth == 8) {
        row[i] = static_cast<png_byte>(q);
      } else {
        row[2 * i] = static_cast<png_byte>(q >> 8);
        row[2 * i + 1] = static_cast<png_byte>(q & 0xff);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot read '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png read failed: '" + path + "'");
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  Image img;
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int type = png_get_color_type(png, info);
  img.channels = (type & PNG_COLOR_MASK_COLOR) ? 3 : 1;
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> raw(rowbytes * static_cast<std::size_t>(img.height));
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int64_t y = 0; y < img.height; ++y) rows[y] = raw.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  const int64_t n = img.height * img.width * img.channels;
  img.data.resize(static_cast<std::size_t>(n));
  for (int64_t y = 0; y < img.height; ++y) {
    const png_byte* r = rows[y];
    for (int64_t i = 0; i < img.width * img.channels; ++i) {
      img.data[y * img.width * img.channels + i] =
          depth == 16 ? ((r[2 * i] << 8) | r[2 * i + 1]) / 65535.0 : r[i] / 255.0;
    }
  }
  return img;
}

void write_pgm(const std::string& path, const Image& img, int bit_depth) {
  if (img.channels != 1) throw ContractError("pgm holds a single channel");
  if (bit_depth != 8 && bit_depth != 16) throw ContractError("pgm bit depth must be 8 or 16");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path + "'");
  const unsigned maxval = bit_depth == 8 ? 255u : 65535u;
  f << "P5\n" << img.width << " " << img.height << "\n" << maxval << "\n";
  for (double v : img.data) {
    const unsigned q = quantize(v, maxval);
    if (bit_depth == 16) f.put(static_cast<char>(q >> 8));
    f.put(static_cast<char>(q & 0xff));
  }
  if (!f) throw IoError("pgm write failed: '" + path + "'");
}

Image read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read '" + path + "'");
  auto token = [&]() {
    std::string t;
    while (f >> t) {
      if (t[0] != '#') return t;
      std::string rest;
      std::getline(f, rest);
    }
    throw IoError("truncated pgm header: '" + path + "'");
  };
  if (token() != "P5") throw IoError("'" + path + "' is not a binary pgm");
  Image img;
  img.width = std::stoll(token());
  img.height = std::stoll(token());
  const long maxval = std::stol(token());
  f.get();
  if (maxval < 1 || maxval > 65535) throw IoError("bad pgm maxval in '" + path + "'");
  img.data.resize(static_cast<std::size_t>(img.width * img.height));
  for (auto& v : img.data) {
    unsigned q = static_cast<unsigned char>(f.get());
    if (maxval > 255) q = (q << 8) | static_cast<unsigned char>(f.get());
    v = static_cast<double>(q) / static_cast<double>(maxval);
  }
  if (!f) throw IoError("truncated pgm payload: '" + path + "'");
  return img;
}

Image read_image(const std::string& path) {
  const auto ext = fs::path(path).extension().string();
  if (ext == ".png") return read_png(path);
  if (ext == ".pgm") return read_pgm(path);
  throw IoError("unsupported image type '" + path + "'");
}

void write_bundle(const std::string& dir, const Bundle& b, const std::string& format) {
  const Tensor& t = b.tensor;
  if (t.rank() != 5 || t.dim(0) != 1 || t.dim(2) != b.u * b.v)
    throw ShapeError("bundle tensor must be (1, C, U*V, H, W), got " + shape_str(t.shape()));
  const bool png = format == "png8" || format == "png16";
  const bool pgm = format == "pgm8" || format == "pgm16";
  if (!png && !pgm) throw ConfigError("unknown bundle format '" + format + "'");
  const int depth = format.ends_with("16") ? 16 : 8;
  const int64_t C = t.dim(1), A = t.dim(2), H = t.dim(3), W = t.dim(4);
  if (pgm && C != 1) throw ConfigError("pgm bundles hold luminance only");
  fs::create_directories(dir);
  const Tensor d = t.to(DType::F64);
  const auto x = d.data<double>();
  std::ostringstream man;
  KeyValues head{{"angular_u", std::to_string(b.u)}, {"angular_v", std::to_string(b.v)},
                 {"channels", std::to_string(C)},    {"format", format},
                 {"height", std::to_string(H)},      {"width", std::to_string(W)}};
  for (const auto& [k, v] : b.meta) head["meta." + k] = v;
  man << format_key_values(head);
  for (int64_t u = 0; u < b.u; ++u) {
    for (int64_t v = 0; v < b.v; ++v) {
      const int64_t a = u * b.v + v;
      char name[64];
      std::snprintf(name, sizeof name, "view_%02lld_%02lld.%s", static_cast<long long>(u),
                    static_cast<long long>(v), png ? "png" : "pgm");
      Image img{H, W, C, std::vector<double>(static_cast<std::size_t>(H * W * C))};
      for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < H * W; ++i) img.data[i * C + c] = x[(c * A + a) * H * W + i];
      const std::string path = (fs::path(dir) / name).string();
      if (png)
        write_png(path, img, depth);
      else
        write_pgm(path, img, depth);
      man << "view " << u << " " << v << " " << name << "\n";
    }
  }
  std::ofstream f(fs::path(dir) / "manifest.txt");
  if (!f) throw IoError("cannot write bundle manifest in '" + dir + "'");
  f << man.str();
}

Bundle read_bundle(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.txt";
  std::ifstream f(mpath);
  if (!f) throw IoError("no manifest.txt in '" + dir + "'");
  std::string line, kv_text;
  std::vector<std::tuple<int64_t, int64_t, std::string>> views;
  while (std::getline(f, line)) {
    if (line.rfind("view ", 0) == 0) {
      std::istringstream in(line.substr(5));
      int64_t u, v;
      std::string name;
      if (!(in >> u >> v >> name)) throw IoError("malformed view line '" + line + "' in " + mpath.string());
      views.emplace_back(u, v, name);
    } else {
      kv_text += line + "\n";
    }
  }
  const KeyValues kv = parse_key_values(kv_text, mpath.string());
  Bundle b;
  int64_t C = 0, H = 0, W = 0;
  for (const auto& [k, v] : kv) {
    if (k == "angular_u") b.u = parse_int(k, v);
    else if (k == "angular_v") b.v = parse_int(k, v);
    else if (k == "channels") C = parse_int(k, v);
    else if (k == "height") H = parse_int(k, v);
    else if (k == "width") W = parse_int(k, v);
    else if (k.rfind("meta.", 0) == 0) b.meta[k.substr(5)] = v;
    else if (k != "format") throw IoError("unknown manifest key '" + k + "' in " + mpath.string());
  }
  const int64_t A = b.u * b.v;
  if (A < 1 || C < 1 || H < 1 || W < 1) throw IoError("incomplete manifest " + mpath.string());
  if (static_cast<int64_t>(views.size()) != A)
    throw IoError("manifest lists " + std::to_string(views.size()) + " views, expected " + std::to_string(A));
  std::vector<double> x(static_cast<std::size_t>(C * A * H * W), 0.0);
  std::vector<bool> seen(static_cast<std::size_t>(A), false);
  for (const auto& [u, v, name] : views) {
    if (u < 0 || u >= b.u || v < 0 || v >= b.v) throw IoError("view index out of range: " + name);
    const int64_t a = u * b.v + v;
    if (seen[a]) throw IoError("duplicate view " + std::to_string(u) + "," + std::to_string(v));
    seen[a] = true;
    const Image img = read_image((fs::path(dir) / name).string());
    if (img.height != H || img.width != W || img.channels != C)
      throw IoError("view '" + name + "' does not match the manifest extents");
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < H * W; ++i) x[(c * A + a) * H * W + i] = img.data[i * C + c];
  }
  b.tensor = Tensor::from_vector({1, C, A, H, W}, x, DType::F64);
  return b;
}

}  // namespace omni
