#pragma once

// Image ingestion: binary PGM/PPM (P5/P6) and raw float blobs
//   "STMF" | C u32 | H u32 | W u32 | C*H*W little-endian f32 (already normalised)
// Netpbm images are scaled to [0,1], resized to the model input and
// normalised with per-channel mean/std.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "stm/tensor.hpp"

namespace stm {

struct ImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Normalization {
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
};

namespace detail {

inline std::string pnm_token(std::istream& is) {
  std::string tok;
  char ch;
  while (is.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(is, skip);
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      tok.push_back(ch);
      break;
    }
  }
  while (is.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) tok.push_back(ch);
  return tok;
}

inline std::size_t pnm_number(std::istream& is, const std::string& path) {
  const auto t = pnm_token(is);
  try {
    std::size_t used = 0;
    const auto v = std::stoul(t, &used);
    if (used != t.size()) throw std::invalid_argument(t);
    return v;
  } catch (const std::exception&) {
    throw ImageError(path + ": malformed header field '" + t + "'");
  }
}

}  // namespace detail

// [C, H, W] with values in [0, 1]; C = 1 for P5, 3 for P6.
inline Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageError("cannot open " + path.string());
  const auto magic = detail::pnm_token(is);
  if (magic != "P5" && magic != "P6") throw ImageError(path.string() + ": not a binary PGM/PPM");
  const std::size_t C = magic == "P5" ? 1 : 3;
  const auto W = detail::pnm_number(is, path.string());
  const auto H = detail::pnm_number(is, path.string());
  const auto maxval = detail::pnm_number(is, path.string());
  if (W == 0 || H == 0 || maxval == 0 || maxval > 65535) throw ImageError(path.string() + ": bad header");
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(W * H * C * bytes);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw ImageError(path.string() + ": truncated pixel data");
  Tensor out({C, H, W});
  for (std::size_t i = 0; i < H * W; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t k = (i * C + c) * bytes;
      const unsigned v = bytes == 2 ? (raw[k] << 8 | raw[k + 1]) : raw[k];
      out[c * H * W + i] = static_cast<float>(v) / static_cast<float>(maxval);
    }
  return out;
}

inline void write_pnm(const std::filesystem::path& path, const Tensor& img) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (C != 1 && C != 3) throw ImageError("write_pnm: need 1 or 3 channels");
  std::ofstream os(path, std::ios::binary);
  os << (C == 1 ? "P5" : "P6") << '\n' << W << ' ' << H << "\n255\n";
  for (std::size_t i = 0; i < H * W; ++i)
    for (std::size_t c = 0; c < C; ++c)
      os.put(static_cast<char>(std::lround(std::clamp(img[c * H * W + i], 0.0f, 1.0f) * 255.0f)));
  if (!os) throw ImageError("cannot write " + path.string());
}

inline Tensor read_blob(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageError("cannot open " + path.string());
  char magic[4];
  std::uint32_t dims[3];
  if (!is.read(magic, 4) || std::memcmp(magic, "STMF", 4) != 0) throw ImageError(path.string() + ": bad blob magic");
  if (!is.read(reinterpret_cast<char*>(dims), sizeof dims)) throw ImageError(path.string() + ": truncated header");
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw ImageError(path.string() + ": zero extent");
  Tensor t({dims[0], dims[1], dims[2]});
  if (!is.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(float))))
    throw ImageError(path.string() + ": truncated payload");
  return t;
}

inline void write_blob(const std::filesystem::path& path, const Tensor& img) {
  std::ofstream os(path, std::ios::binary);
  os.write("STMF", 4);
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(img.dim(0)), static_cast<std::uint32_t>(img.dim(1)),
                                 static_cast<std::uint32_t>(img.dim(2))};
  os.write(reinterpret_cast<const char*>(dims), sizeof dims);
  os.write(reinterpret_cast<const char*>(img.data().data()), static_cast<std::streamsize>(img.numel() * sizeof(float)));
  if (!os) throw ImageError("cannot write " + path.string());
}

// Bilinear resize with half-pixel centres and edge clamping.
inline Tensor resize_bilinear(const Tensor& img, std::size_t H, std::size_t W) {
  const std::size_t C = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h == H && w == W) return img;
  Tensor out({C, H, W});
  for (std::size_t y = 0; y < H; ++y) {
    const double sy = std::clamp((y + 0.5) * h / H - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < W; ++x) {
      const double sx = std::clamp((x + 0.5) * w / W - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const float* p = img.data().data() + c * h * w;
        out[(c * H + y) * W + x] = static_cast<float>((1 - fy) * ((1 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1]) +
                                                      fy * ((1 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1]));
      }
    }
  }
  return out;
}

// [0,1] image -> normalised [channels, side, side]. Grey images are
// replicated across channels.
inline Tensor prepare_image(const Tensor& img01, std::size_t channels, std::size_t side, const Normalization& norm) {
  Tensor r = resize_bilinear(img01, side, side);
  const std::size_t C = r.dim(0);
  if (C != 1 && C != channels) throw ImageError("image has " + std::to_string(C) + " channels, model expects " + std::to_string(channels));
  Tensor out({channels, side, side});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < side * side; ++i) {
      const float v = r[(C == 1 ? 0 : c) * side * side + i];
      out[c * side * side + i] = c < 3 ? (v - norm.mean[c]) / norm.std[c] : v;
    }
  return out;
}

struct ImageSet {
  std::vector<std::string> names;
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;  // filled only when every image is labelled
};

// Loads *.pgm, *.ppm and *.stmf files in name order. An optional labels.csv
// (filename,label per line) supplies class labels.
inline ImageSet load_image_dir(const std::filesystem::path& dir, std::size_t channels, std::size_t side,
                               const Normalization& norm) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ImageError(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm" || ext == ".stmf")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ImageError("no images in " + dir.string());
  ImageSet set;
  for (const auto& f : files) {
    set.names.push_back(f.filename().string());
    if (f.extension() == ".stmf") {
      Tensor t = read_blob(f);
      if (t.dim(0) != channels || t.dim(1) != side || t.dim(2) != side)
        throw ImageError(f.string() + ": blob shape " + to_string(t.shape()) + " does not match the model input");
      set.images.push_back(std::move(t));
    } else {
      set.images.push_back(prepare_image(read_pnm(f), channels, side, norm));
    }
  }
  if (fs::exists(dir / "labels.csv")) {
    std::map<std::string, std::size_t> lab;
    std::ifstream is(dir / "labels.csv");
    std::string line;
    while (std::getline(is, line)) {
      const auto comma = line.find(',');
      if (comma == std::string::npos) continue;
      try {
        lab[line.substr(0, comma)] = std::stoul(line.substr(comma + 1));
      } catch (const std::exception&) {
        throw ImageError("labels.csv: bad line '" + line + "'");
      }
    }
    for (const auto& n : set.names) {
      auto it = lab.find(n);
      if (it == lab.end()) throw ImageError("labels.csv has no entry for " + n);
      set.labels.push_back(it->second);
    }
  }
  return set;
}

// Seeded uniform [0,1) noise, normalised like a real image.
inline std::vector<Tensor> noise_images(std::size_t n, std::size_t channels, std::size_t side, std::uint64_t seed,
                                        const Normalization& norm) {
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor img({channels, side, side});
    for (auto& v : img.data()) v = u(eng);
    out.push_back(prepare_image(img, channels, side, norm));
  }
  return out;
}

}  // namespace stm
