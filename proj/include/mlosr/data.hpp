#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mlosr/binary_io.hpp"
#include "mlosr/error.hpp"
#include "mlosr/random.hpp"
#include "mlosr/tensor.hpp"

namespace mlosr {

/// Label used for samples of classes unseen during training.
inline constexpr int kUnknownLabel = -1;

/// Images as M x C x H x W plus one label per image.
///
/// Loaders return raw intensities in [0, 255]; after preprocess() values lie
/// in [-1, 1]. Test sets of unknown classes carry kUnknownLabel.
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

  std::size_t num_classes() const {
    int mx = -1;
    for (int l : labels) mx = std::max(mx, l);
    return std::max<std::size_t>(class_names.size(), static_cast<std::size_t>(mx + 1));
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset d;
    d.images = images.gather_rows(rows);
    d.labels.reserve(rows.size());
    for (std::size_t r : rows) d.labels.push_back(labels.at(r));
    d.class_names = class_names;
    return d;
  }

  bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------------------
// IDX

namespace detail {

inline std::uint32_t read_be32(std::istream& is, const std::string& path) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  if (is.gcount() != 4) throw ParseError(path + ": truncated IDX header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

inline std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex;
  os.width(8);
  os.fill('0');
  os << v;
  return os.str();
}

inline std::vector<unsigned char> read_payload(std::istream& is, std::size_t n, const std::string& path) {
  std::vector<unsigned char> buf(n);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw ParseError(path + ": truncated payload, expected " + std::to_string(n) + " bytes, got " +
                  std::to_string(is.gcount()));
  }
  return buf;
}

}  // namespace detail

/// Reads a big-endian IDX image/label file pair (magic 0x00000803 and
/// 0x00000801). Pixel values are returned unnormalized.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot open " + images_path);
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("cannot open " + labels_path);

  const std::uint32_t img_magic = detail::read_be32(img, images_path);
  if (img_magic != 0x00000803u) {
    throw ParseError(images_path + ": bad IDX magic " + detail::hex32(img_magic) + ", expected 0x00000803");
  }
  const std::uint32_t n = detail::read_be32(img, images_path);
  const std::uint32_t rows = detail::read_be32(img, images_path);
  const std::uint32_t cols = detail::read_be32(img, images_path);
  if (n == 0 || rows == 0 || cols == 0) throw ParseError(images_path + ": IDX header has a zero dimension");

  const std::uint32_t lab_magic = detail::read_be32(lab, labels_path);
  if (lab_magic != 0x00000801u) {
    throw ParseError(labels_path + ": bad IDX magic " + detail::hex32(lab_magic) + ", expected 0x00000801");
  }
  const std::uint32_t nl = detail::read_be32(lab, labels_path);
  if (nl != n) {
    throw ParseError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
  }

  const std::size_t px = std::size_t{rows} * cols;
  const auto pixels = detail::read_payload(img, std::size_t{n} * px, images_path);
  const auto labels = detail::read_payload(lab, n, labels_path);

  Dataset d;
  d.images = Tensor(Shape{n, 1, rows, cols}, std::vector<double>(pixels.begin(), pixels.end()));
  d.labels.assign(labels.begin(), labels.end());
  const int k = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  for (int c = 0; c < k; ++c) d.class_names.push_back(std::to_string(c));
  return d;
}

// ---------------------------------------------------------------------------
// Netpbm

struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<double> pixels;  // C x H x W, values 0..255
};

namespace detail {

inline std::size_t read_pnm_int(std::istream& is, const std::string& path) {
  int ch = is.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = is.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = is.get();
  }
  if (ch == EOF || !std::isdigit(ch)) throw ParseError(path + ": malformed Netpbm header");
  std::size_t v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + static_cast<std::size_t>(ch - '0');
    ch = is.get();
  }
  return v;  // the single whitespace after the last header field is consumed
}

}  // namespace detail

/// Reads a binary P5 (grayscale) or P6 (RGB) file with maxval <= 255.
inline Image read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image " + path);
  char magic[2] = {0, 0};
  is.read(magic, 2);
  if (is.gcount() != 2 || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw ParseError(path + ": not a binary P5/P6 Netpbm file");
  }
  Image im;
  im.channels = magic[1] == '5' ? 1 : 3;
  im.width = detail::read_pnm_int(is, path);
  im.height = detail::read_pnm_int(is, path);
  const std::size_t maxval = detail::read_pnm_int(is, path);
  if (im.width == 0 || im.height == 0) throw ParseError(path + ": zero image dimension");
  if (maxval == 0 || maxval > 255) throw ParseError(path + ": unsupported maxval " + std::to_string(maxval));
  const auto raw = detail::read_payload(is, im.channels * im.width * im.height, path);
  im.pixels.resize(raw.size());
  // interleaved RGB -> planar
  const double scale = 255.0 / static_cast<double>(maxval);
  const std::size_t hw = im.width * im.height;
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < im.channels; ++c) im.pixels[c * hw + i] = raw[i * im.channels + c] * scale;
  return im;
}

/// Writes a single-channel image as P5. Values are taken as bytes after
/// rounding and clamping to [0, 255].
inline void write_pgm(const std::string& path, std::size_t height, std::size_t width, std::span<const double> pixels) {
  if (pixels.size() != height * width) throw DimensionError("write_pgm: pixel count does not match size");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : pixels) {
    const double b = std::clamp(std::round(v), 0.0, 255.0);
    os.put(static_cast<char>(static_cast<unsigned char>(b)));
  }
  if (!os) throw IoError("write failed for " + path);
}

inline std::vector<double> bilinear_resize(std::span<const double> src, std::size_t channels, std::size_t h,
                                           std::size_t w, std::size_t out_h, std::size_t out_w);

/// One subdirectory per class, ordered by name; .pgm/.ppm/.pnm files within
/// each, ordered by name. Grayscale images are replicated to three channels
/// when the directory mixes P5 and P6. Differing image sizes are an error
/// unless `resize_to` {H, W} is given.
inline Dataset load_image_dir(const std::string& root,
                              std::optional<std::pair<std::size_t, std::size_t>> resize_to = std::nullopt) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("image root is not a directory: " + root);
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw IoError("no class directories under " + root);

  std::vector<Image> images;
  std::vector<int> labels;
  Dataset d;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[c])) {
      if (!e.is_regular_file()) continue;
      const auto ext = e.path().extension().string();
      if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") files.push_back(e.path());
    }
    if (files.empty()) throw IoError("class directory has no images: " + class_dirs[c].string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      Image im = read_pnm(f.string());
      if (resize_to) {
        im.pixels = bilinear_resize(im.pixels, im.channels, im.height, im.width, resize_to->first, resize_to->second);
        im.height = resize_to->first;
        im.width = resize_to->second;
      }
      images.push_back(std::move(im));
      labels.push_back(static_cast<int>(c));
    }
    d.class_names.push_back(class_dirs[c].filename().string());
  }

  std::size_t channels = 1;
  for (const auto& im : images) {
    channels = std::max(channels, im.channels);
    if (im.height != images[0].height || im.width != images[0].width) {
      throw IoError("inconsistent image sizes under " + root + " (" + std::to_string(images[0].height) + "x" +
                    std::to_string(images[0].width) + " vs " + std::to_string(im.height) + "x" +
                    std::to_string(im.width) + "); enable resizing");
    }
  }
  const std::size_t h = images[0].height, w = images[0].width, hw = h * w;
  std::vector<double> all;
  all.reserve(images.size() * channels * hw);
  for (const auto& im : images) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t src = im.channels == 1 ? 0 : c;
      all.insert(all.end(), im.pixels.begin() + static_cast<std::ptrdiff_t>(src * hw),
                 im.pixels.begin() + static_cast<std::ptrdiff_t>((src + 1) * hw));
    }
  }
  d.images = Tensor(Shape{images.size(), channels, h, w}, std::move(all));
  d.labels = std::move(labels);
  return d;
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Bilinear resampling with half-pixel centers, edge-clamped. Planar C x H x W.
inline std::vector<double> bilinear_resize(std::span<const double> src, std::size_t channels, std::size_t h,
                                           std::size_t w, std::size_t out_h, std::size_t out_w) {
  std::vector<double> out(channels * out_h * out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = src.data() + c * h * w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
      const std::size_t y0 = static_cast<std::size_t>(fy);
      const std::size_t y1 = std::min(y0 + 1, h - 1);
      const double ay = fy - static_cast<double>(y0);
      for (std::size_t x = 0; x < out_w; ++x) {
        const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
        const std::size_t x0 = static_cast<std::size_t>(fx);
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        const double ax = fx - static_cast<double>(x0);
        const double top = plane[y0 * w + x0] * (1 - ax) + plane[y0 * w + x1] * ax;
        const double bot = plane[y1 * w + x0] * (1 - ax) + plane[y1 * w + x1] * ax;
        out[(c * out_h + y) * out_w + x] = top * (1 - ay) + bot * ay;
      }
    }
  }
  return out;
}

inline double byte_to_unit(double v) { return v / 127.5 - 1.0; }
inline double unit_to_byte(double v) { return std::clamp(std::round((v + 1.0) * 127.5), 0.0, 255.0); }

/// Optional luminance grayscale (0.299 R + 0.587 G + 0.114 B), bilinear
/// resize to target {H, W}, then the linear map 0 -> -1, 255 -> +1.
inline Dataset preprocess(const Dataset& d, std::pair<std::size_t, std::size_t> target, bool grayscale) {
  if (target.first == 0 || target.second == 0) throw ValidationError("preprocess: target size must be positive");
  const Shape s = d.sample_shape();
  if (s.size() != 3) throw DimensionError("preprocess expects image samples, got " + shape_string(s));
  const std::size_t c = s[0], h = s[1], w = s[2], hw = h * w;
  const std::size_t out_c = grayscale ? 1 : c;
  if (grayscale && c != 1 && c != 3) throw DimensionError("grayscale conversion needs 1 or 3 channels");
  const std::size_t out_vol = out_c * target.first * target.second;

  std::vector<double> all;
  all.reserve(d.size() * out_vol);
  std::vector<double> plane;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double* px = d.images.data().data() + i * c * hw;
    if (grayscale && c == 3) {
      plane.assign(hw, 0.0);
      for (std::size_t k = 0; k < hw; ++k) plane[k] = 0.299 * px[k] + 0.587 * px[hw + k] + 0.114 * px[2 * hw + k];
    } else {
      plane.assign(px, px + c * hw);
    }
    std::vector<double> r = bilinear_resize(plane, out_c, h, w, target.first, target.second);
    for (double v : r) all.push_back(std::clamp(byte_to_unit(v), -1.0, 1.0));
  }
  Dataset out;
  out.images = Tensor(Shape{d.size(), out_c, target.first, target.second}, std::move(all));
  out.labels = d.labels;
  out.class_names = d.class_names;
  return out;
}

// ---------------------------------------------------------------------------
// Open-set splits

/// Known/unknown class partition. `relabel` maps original ids of known
/// classes onto 0..K-1 in the order of `known_classes`.
struct OpenSetSplit {
  std::vector<int> known_classes;
  std::vector<int> unknown_classes;
  std::map<int, int> relabel;
  std::uint64_t seed = 0;

  std::size_t num_known() const { return known_classes.size(); }
  std::size_t num_unknown() const { return unknown_classes.size(); }
};

struct SplitOptions {
  std::size_t n_known = 0;
  std::optional<std::size_t> n_unknown;  // default: every remaining class
  double train_fraction = 0.8;
  std::optional<std::size_t> max_train_per_class;
  std::optional<std::size_t> max_test_per_class;
  std::uint64_t seed = 0;
};

struct SplitData {
  OpenSetSplit split;
  Dataset train_known;
  Dataset test_known;
  Dataset test_unknown;
};

namespace detail {

inline std::map<int, std::vector<std::size_t>> rows_by_class(const Dataset& d) {
  std::map<int, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < d.size(); ++i) out[d.labels[i]].push_back(i);
  return out;
}

inline OpenSetSplit choose_classes(const std::vector<int>& classes, const SplitOptions& opt) {
  if (opt.n_known == 0 || opt.n_known >= classes.size()) {
    throw ValidationError("sample_split: n_known=" + std::to_string(opt.n_known) + " must be in [1, " +
                          std::to_string(classes.size()) + ")");
  }
  const std::size_t rest = classes.size() - opt.n_known;
  const std::size_t n_unknown = opt.n_unknown.value_or(rest);
  if (n_unknown > rest) {
    throw ValidationError("sample_split: " + std::to_string(n_unknown) + " unknown classes requested but only " +
                          std::to_string(rest) + " remain");
  }
  std::vector<int> order = classes;
  Rng rng(mix_seed(opt.seed, 11));
  rng.shuffle(std::span<int>(order));
  OpenSetSplit s;
  s.seed = opt.seed;
  s.known_classes.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(opt.n_known));
  s.unknown_classes.assign(order.begin() + static_cast<std::ptrdiff_t>(opt.n_known),
                           order.begin() + static_cast<std::ptrdiff_t>(opt.n_known + n_unknown));
  std::sort(s.known_classes.begin(), s.known_classes.end());
  std::sort(s.unknown_classes.begin(), s.unknown_classes.end());
  for (std::size_t i = 0; i < s.known_classes.size(); ++i) s.relabel[s.known_classes[i]] = static_cast<int>(i);
  return s;
}

inline Dataset relabeled(const Dataset& d, std::span<const std::size_t> rows, const OpenSetSplit& s) {
  Dataset out = d.subset(rows);
  for (int& l : out.labels) {
    auto it = s.relabel.find(l);
    l = it == s.relabel.end() ? kUnknownLabel : it->second;
  }
  out.class_names.clear();
  for (int c : s.known_classes) {
    out.class_names.push_back(static_cast<std::size_t>(c) < d.class_names.size() ? d.class_names[c]
                                                                                 : std::to_string(c));
  }
  return out;
}

inline std::vector<int> class_ids(const std::map<int, std::vector<std::size_t>>& by_class) {
  std::vector<int> ids;
  for (const auto& [c, rows] : by_class) ids.push_back(c);
  return ids;
}

}  // namespace detail

/// Samples known classes uniformly without replacement, relabels them
/// 0..K-1 and partitions each known class into train/test rows. Unknown
/// classes only ever appear in test_unknown (labelled kUnknownLabel).
inline SplitData sample_split(const Dataset& d, const SplitOptions& opt) {
  if (opt.train_fraction <= 0.0 || opt.train_fraction >= 1.0) {
    throw ValidationError("sample_split: train_fraction must be in (0, 1)");
  }
  const auto by_class = detail::rows_by_class(d);
  SplitData out;
  out.split = detail::choose_classes(detail::class_ids(by_class), opt);

  Rng rng(mix_seed(opt.seed, 12));
  std::vector<std::size_t> train_rows, test_rows, unknown_rows;
  for (int c : out.split.known_classes) {
    std::vector<std::size_t> rows = by_class.at(c);
    rng.shuffle(std::span<std::size_t>(rows));
    std::size_t n_train = static_cast<std::size_t>(std::llround(opt.train_fraction * static_cast<double>(rows.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, rows.size() > 1 ? rows.size() - 1 : 1);
    std::size_t take_train = std::min(n_train, opt.max_train_per_class.value_or(n_train));
    std::size_t take_test = std::min(rows.size() - n_train, opt.max_test_per_class.value_or(rows.size()));
    train_rows.insert(train_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(take_train));
    test_rows.insert(test_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_train),
                     rows.begin() + static_cast<std::ptrdiff_t>(n_train + take_test));
  }
  for (int c : out.split.unknown_classes) {
    std::vector<std::size_t> rows = by_class.at(c);
    rng.shuffle(std::span<std::size_t>(rows));
    const std::size_t take = std::min(rows.size(), opt.max_test_per_class.value_or(rows.size()));
    unknown_rows.insert(unknown_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(test_rows.begin(), test_rows.end());
  std::sort(unknown_rows.begin(), unknown_rows.end());
  out.train_known = detail::relabeled(d, train_rows, out.split);
  out.test_known = detail::relabeled(d, test_rows, out.split);
  if (!unknown_rows.empty()) out.test_unknown = detail::relabeled(d, unknown_rows, out.split);
  return out;
}

/// Variant for datasets with an official train/test partition: known
/// classes are drawn from `train`, their samples from `train` form the
/// training set and their samples from `test` the known test set.
inline SplitData sample_split(const Dataset& train, const Dataset& test, const SplitOptions& opt) {
  const auto by_class = detail::rows_by_class(train);
  const auto test_by_class = detail::rows_by_class(test);
  SplitData out;
  out.split = detail::choose_classes(detail::class_ids(by_class), opt);
  Rng rng(mix_seed(opt.seed, 12));
  std::vector<std::size_t> train_rows, test_rows, unknown_rows;
  auto take = [&rng](std::vector<std::size_t> rows, std::optional<std::size_t> cap, std::vector<std::size_t>& dst) {
    rng.shuffle(std::span<std::size_t>(rows));
    const std::size_t n = std::min(rows.size(), cap.value_or(rows.size()));
    dst.insert(dst.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n));
  };
  for (int c : out.split.known_classes) {
    take(by_class.at(c), opt.max_train_per_class, train_rows);
    if (auto it = test_by_class.find(c); it != test_by_class.end()) take(it->second, opt.max_test_per_class, test_rows);
  }
  for (int c : out.split.unknown_classes)
    if (auto it = test_by_class.find(c); it != test_by_class.end()) take(it->second, opt.max_test_per_class, unknown_rows);
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(test_rows.begin(), test_rows.end());
  std::sort(unknown_rows.begin(), unknown_rows.end());
  out.train_known = detail::relabeled(train, train_rows, out.split);
  if (!test_rows.empty()) out.test_known = detail::relabeled(test, test_rows, out.split);
  if (!unknown_rows.empty()) out.test_unknown = detail::relabeled(test, unknown_rows, out.split);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticConfig {
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 100;
  std::size_t image_size = 32;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

/// One oriented bar plus one Gaussian blob per class, on a dark background.
/// Bar angle cycles fastest with the class id and the blob position moves
/// on a ring, so every class id up to 10 * ring positions is distinct.
/// Samples add seeded Gaussian noise with standard deviation `noise`.
inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.num_classes == 0 || cfg.samples_per_class == 0 || cfg.image_size < 4) {
    throw ValidationError("synthetic config needs positive class/sample counts and image_size >= 4");
  }
  if (cfg.noise < 0.0) throw ValidationError("synthetic noise must be nonnegative");
  const std::size_t s = cfg.image_size;
  const double half = static_cast<double>(s) / 2.0;
  constexpr std::size_t kAngles = 10;

  std::vector<std::vector<double>> templates(cfg.num_classes, std::vector<double>(s * s));
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    const double angle = std::numbers::pi * static_cast<double>(c % kAngles) / kAngles;
    const std::size_t ring = c / kAngles;
    const double blob_angle = 2.0 * std::numbers::pi * (static_cast<double>(ring) * 0.618034);
    const double blob_r = half * (0.35 + 0.1 * static_cast<double>(ring % 3));
    const double bx = half + blob_r * std::cos(blob_angle), by = half + blob_r * std::sin(blob_angle);
    const double thickness = static_cast<double>(s) / 16.0 + 0.5;
    const double blob_sigma = static_cast<double>(s) / 10.0;
    const double dx = std::cos(angle), dy = std::sin(angle);
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double px = static_cast<double>(x) + 0.5 - half, py = static_cast<double>(y) + 0.5 - half;
        const double dist = std::abs(px * dy - py * dx);
        const double along = std::abs(px * dx + py * dy);
        double v = (dist < thickness && along < 0.8 * half) ? 1.6 : 0.0;
        const double gx = static_cast<double>(x) + 0.5 - bx, gy = static_cast<double>(y) + 0.5 - by;
        v += 1.6 * std::exp(-(gx * gx + gy * gy) / (2.0 * blob_sigma * blob_sigma));
        templates[c][y * s + x] = std::clamp(-1.0 + v, -1.0, 1.0);
      }
    }
  }

  Rng rng(cfg.seed);
  Dataset d;
  std::vector<double> all;
  all.reserve(cfg.num_classes * cfg.samples_per_class * s * s);
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    d.class_names.push_back("class" + std::to_string(c));
    for (std::size_t i = 0; i < cfg.samples_per_class; ++i) {
      for (double t : templates[c]) all.push_back(std::clamp(t + cfg.noise * rng.normal(), -1.0, 1.0));
      d.labels.push_back(static_cast<int>(c));
    }
  }
  d.images = Tensor(Shape{d.labels.size(), 1, s, s}, std::move(all));
  return d;
}

// ---------------------------------------------------------------------------
// Dataset cache: "MLOSRDST" | u32 version | tensor | u64 n + i64 labels |
// u32 count + names

inline constexpr std::string_view kDatasetMagic = "MLOSRDST";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(std::ostream& os, const Dataset& d) {
  os.write(kDatasetMagic.data(), static_cast<std::streamsize>(kDatasetMagic.size()));
  binary::write_u32(os, kDatasetVersion);
  binary::write_tensor(os, d.images);
  binary::write_u64(os, d.labels.size());
  for (int l : d.labels) binary::write_u64(os, static_cast<std::uint64_t>(static_cast<std::int64_t>(l)));
  binary::write_u32(os, static_cast<std::uint32_t>(d.class_names.size()));
  for (const auto& n : d.class_names) binary::write_string(os, n);
}

inline Dataset load_dataset(std::istream& is) {
  binary::expect_magic(is, kDatasetMagic, "dataset cache");
  const std::uint32_t v = binary::read_u32(is, "dataset version");
  if (v != kDatasetVersion) throw ParseError("unsupported dataset cache version " + std::to_string(v));
  Dataset d;
  d.images = binary::read_tensor(is, "dataset images");
  const std::uint64_t n = binary::read_u64(is, "label count");
  if (d.images.rank() == 0 || n != d.images.dim(0)) throw ParseError("dataset cache label count mismatch");
  d.labels.resize(n);
  for (int& l : d.labels) l = static_cast<int>(static_cast<std::int64_t>(binary::read_u64(is, "label")));
  const std::uint32_t names = binary::read_u32(is, "class name count");
  for (std::uint32_t i = 0; i < names; ++i) d.class_names.push_back(binary::read_string(is, "class name"));
  return d;
}

}  // namespace mlosr
