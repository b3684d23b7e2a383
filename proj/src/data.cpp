#include "exitnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "exitnet/error.hpp"
#include "exitnet/rng.hpp"

namespace exitnet {
namespace {

// All shapes live on centered coordinates u,v in [-0.5, 0.5]; s is the
// per-sample half-extent. Class order: disc, ring, plus, horizontal bars,
// vertical bars, square outline, triangle, diagonal cross, checkerboard,
// diagonal stripe.
bool shape_hit(std::size_t cls, double u, double v, double s) {
  auto inbox = [&](double lim) { return std::fabs(u) <= lim * s && std::fabs(v) <= lim * s; };
  switch (cls) {
    case 0:
      return u * u + v * v <= 0.64 * s * s;
    case 1: {
      double r2 = u * u + v * v;
      return r2 <= 0.64 * s * s && r2 >= 0.2025 * s * s;
    }
    case 2:
      return (std::fabs(u) <= 0.2 * s && std::fabs(v) <= 0.8 * s) ||
             (std::fabs(v) <= 0.2 * s && std::fabs(u) <= 0.8 * s);
    case 3: {
      if (!inbox(0.8)) return false;
      double f = (v + 0.5) / (0.5 * s);
      return f - std::floor(f) < 0.5;
    }
    case 4: {
      if (!inbox(0.8)) return false;
      double f = (u + 0.5) / (0.5 * s);
      return f - std::floor(f) < 0.5;
    }
    case 5: {
      double m = std::max(std::fabs(u), std::fabs(v));
      return m >= 0.55 * s && m <= 0.8 * s;
    }
    case 6:
      return v >= -0.8 * s && v <= 0.8 * s && std::fabs(u) <= (v + 0.8 * s) * 0.5;
    case 7:
      return inbox(0.8) && (std::fabs(u - v) <= 0.2 * s || std::fabs(u + v) <= 0.2 * s);
    case 8: {
      if (!inbox(0.85)) return false;
      double q = 0.6 * s;
      long a = static_cast<long>(std::floor((u + 0.5) / q));
      long b = static_cast<long>(std::floor((v + 0.5) / q));
      return ((a + b) & 1) == 0;
    }
    default:
      return inbox(0.9) && std::fabs(u + v) <= 0.3 * s;
  }
}

}  // namespace

Tensor Dataset::batch(const std::vector<std::size_t>& idx) const {
  if (idx.empty()) throw ContractError("Dataset::batch: empty index list");
  std::vector<double> out(idx.size() * sample_numel());
  for (std::size_t b = 0; b < idx.size(); ++b) {
    if (idx[b] >= size())
      throw ContractError("Dataset::batch: index " + std::to_string(idx[b]) + " out of range");
    std::copy_n(images.begin() + idx[b] * sample_numel(), sample_numel(),
                out.begin() + b * sample_numel());
  }
  return Tensor::from_data({idx.size(), channels, height, width}, std::move(out));
}

Tensor Dataset::image(std::size_t i) const { return batch({i}); }

Dataset make_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t channels,
                       std::size_t height, std::size_t width, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("synthetic data: need at least 2 classes");
  if (num_classes > 10)
    throw ConfigError("synthetic data: only 10 shape classes are defined, got " +
                      std::to_string(num_classes));
  if (per_class == 0 || channels == 0 || height == 0 || width == 0)
    throw ConfigError("synthetic data: sizes must be positive");

  Dataset d;
  d.num_classes = num_classes;
  d.channels = channels;
  d.height = height;
  d.width = width;
  d.images.reserve(num_classes * per_class * d.sample_numel());
  d.labels.reserve(num_classes * per_class);

  Rng rng(seed);
  std::vector<double> pattern(height * width);
  for (std::size_t cls = 0; cls < num_classes; ++cls) {
    for (std::size_t n = 0; n < per_class; ++n) {
      double jx = rng.uniform(-0.06, 0.06);
      double jy = rng.uniform(-0.06, 0.06);
      double s = rng.uniform(0.30, 0.42);
      double amp = rng.uniform(0.7, 1.0);
      for (std::size_t r = 0; r < height; ++r)
        for (std::size_t c = 0; c < width; ++c) {
          double u = (c + 0.5) / width - 0.5 - jx;
          double v = (r + 0.5) / height - 0.5 - jy;
          pattern[r * width + c] = shape_hit(cls, u, v, s) ? amp : 0.0;
        }
      for (std::size_t ch = 0; ch < channels; ++ch)
        for (double p : pattern) d.images.push_back(p + rng.normal(0.0, 0.12));
      d.labels.push_back(cls);
    }
  }
  return d;
}

std::pair<double, double> standardize(Dataset& d) {
  if (d.images.empty()) throw ContractError("standardize: empty dataset");
  double mean = 0.0;
  for (double v : d.images) mean += v;
  mean /= static_cast<double>(d.images.size());
  double var = 0.0;
  for (double v : d.images) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d.images.size());
  double sd = std::sqrt(var);
  if (sd < 1e-12) throw ContractError("standardize: dataset has no variance");
  for (double& v : d.images) v = (v - mean) / sd;
  return {mean, sd};
}

std::pair<Dataset, Dataset> stratified_split(const Dataset& d, double fraction,
                                             std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0)
    throw ContractError("stratified_split: fraction must lie in [0,1]");

  std::vector<std::vector<std::size_t>> by_class(d.num_classes);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.labels[i] >= d.num_classes)
      throw ContractError("stratified_split: label " + std::to_string(d.labels[i]) +
                          " outside the declared " + std::to_string(d.num_classes) + " classes");
    by_class[d.labels[i]].push_back(i);
  }

  Rng rng(seed);
  auto shell = [&d] {
    Dataset out;
    out.num_classes = d.num_classes;
    out.channels = d.channels;
    out.height = d.height;
    out.width = d.width;
    return out;
  };
  Dataset a = shell(), b = shell();
  auto append = [&d](Dataset& dst, std::size_t i) {
    dst.images.insert(dst.images.end(), d.images.begin() + i * d.sample_numel(),
                      d.images.begin() + (i + 1) * d.sample_numel());
    dst.labels.push_back(d.labels[i]);
  };
  for (auto& idx : by_class) {
    rng.shuffle(idx);
    auto take = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(idx.size())));
    for (std::size_t j = 0; j < idx.size(); ++j) append(j < take ? a : b, idx[j]);
  }
  return {std::move(a), std::move(b)};
}

namespace {

struct IdxReader {
  std::string name;
  std::vector<unsigned char> bytes;
  std::size_t pos = 0;

  explicit IdxReader(const std::string& file) : name(file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + file + "'");
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  void need(std::size_t n, const char* what) {
    if (pos + n > bytes.size())
      throw FormatError("'" + name + "' truncated at byte " + std::to_string(bytes.size()) +
                        " reading " + what);
  }

  std::uint32_t u32_be(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes[pos++];
    return v;
  }

  void expect_magic(std::uint32_t want, const char* kind) {
    std::uint32_t got = u32_be("magic");
    if (got != want) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "0x%08x, expected 0x%08x", got, want);
      throw FormatError("'" + name + "': bad " + kind + " magic at byte 0: " + buf);
    }
  }

  void done() {
    if (pos != bytes.size())
      throw FormatError("'" + name + "': " + std::to_string(bytes.size() - pos) +
                        " trailing bytes after byte " + std::to_string(pos));
  }
};

}  // namespace

Dataset load_idx(const std::string& images_file, const std::string& labels_file) {
  IdxReader img(images_file);
  img.expect_magic(0x00000803u, "image");
  std::uint32_t n = img.u32_be("image count");
  std::uint32_t rows = img.u32_be("row count");
  std::uint32_t cols = img.u32_be("column count");
  img.need(static_cast<std::size_t>(n) * rows * cols, "pixel data");

  IdxReader lab(labels_file);
  lab.expect_magic(0x00000801u, "label");
  std::uint32_t ln = lab.u32_be("label count");
  if (ln != n)
    throw FormatError("'" + images_file + "' carries " + std::to_string(n) +
                      " samples but '" + labels_file + "' carries " + std::to_string(ln));
  lab.need(ln, "label data");
  if (n == 0) throw FormatError("'" + images_file + "': empty dataset");

  Dataset d;
  d.channels = 1;
  d.height = rows;
  d.width = cols;
  d.images.resize(static_cast<std::size_t>(n) * rows * cols);
  for (auto& v : d.images) v = img.bytes[img.pos++] / 255.0;
  d.labels.resize(n);
  std::size_t top = 0;
  for (auto& l : d.labels) {
    l = lab.bytes[lab.pos++];
    top = std::max(top, l);
  }
  d.num_classes = top + 1;
  img.done();
  lab.done();
  return d;
}

}  // namespace exitnet
