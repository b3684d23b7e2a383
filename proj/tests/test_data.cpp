#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "exitnet/data.hpp"
#include "exitnet/error.hpp"

using namespace exitnet;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(std::string p) : path(std::move(p)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

void put_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// two 3x2 images with pixel values 0..5 and 250..255, labels 1 and 0
void write_idx_pair(const std::string& img_path, const std::string& lab_path) {
  std::vector<unsigned char> img;
  put_u32_be(img, 0x00000803u);
  put_u32_be(img, 2);
  put_u32_be(img, 3);
  put_u32_be(img, 2);
  for (unsigned v = 0; v < 6; ++v) img.push_back(static_cast<unsigned char>(v));
  for (unsigned v = 250; v < 256; ++v) img.push_back(static_cast<unsigned char>(v));
  write_file(img_path, img);

  std::vector<unsigned char> lab;
  put_u32_be(lab, 0x00000801u);
  put_u32_be(lab, 2);
  lab.push_back(1);
  lab.push_back(0);
  write_file(lab_path, lab);
}

// mean image per class on raw pixels, then nearest-centroid classification
double centroid_accuracy(const Dataset& d) {
  std::size_t n = d.sample_numel();
  std::vector<std::vector<double>> centroid(d.num_classes, std::vector<double>(n, 0.0));
  std::vector<std::size_t> count(d.num_classes, 0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < n; ++j) centroid[d.labels[i]][j] += d.images[i * n + j];
    ++count[d.labels[i]];
  }
  for (std::size_t c = 0; c < d.num_classes; ++c)
    for (auto& v : centroid[c]) v /= static_cast<double>(count[c]);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    double best = 0.0;
    std::size_t best_c = 0;
    for (std::size_t c = 0; c < d.num_classes; ++c) {
      double dist = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double diff = d.images[i * n + j] - centroid[c][j];
        dist += diff * diff;
      }
      if (c == 0 || dist < best) {
        best = dist;
        best_c = c;
      }
    }
    hits += best_c == d.labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(d.size());
}

}  // namespace

TEST_CASE("synthetic generation is shaped, balanced and deterministic") {
  Dataset d = make_synthetic(10, 12, 1, 24, 24, 5);
  CHECK(d.size() == 120);
  CHECK(d.images.size() == 120u * 24 * 24);
  std::vector<std::size_t> per_class(10, 0);
  for (auto l : d.labels) ++per_class[l];
  for (auto c : per_class) CHECK(c == 12);

  Dataset again = make_synthetic(10, 12, 1, 24, 24, 5);
  CHECK(d.images == again.images);
  CHECK(d.labels == again.labels);
  Dataset other = make_synthetic(10, 12, 1, 24, 24, 6);
  CHECK(d.images != other.images);
}

TEST_CASE("the ten shape classes are linearly separated well past chance") {
  Dataset d = make_synthetic(10, 30, 1, 32, 32, 11);
  CHECK(centroid_accuracy(d) > 0.85);
}

TEST_CASE("synthetic generation rejects impossible requests") {
  CHECK_THROWS_AS(make_synthetic(11, 1, 1, 8, 8, 0), ConfigError);
  CHECK_THROWS_AS(make_synthetic(1, 1, 1, 8, 8, 0), ConfigError);
  CHECK_THROWS_AS(make_synthetic(4, 0, 1, 8, 8, 0), ConfigError);
  CHECK_THROWS_AS(make_synthetic(4, 1, 1, 0, 8, 0), ConfigError);
}

TEST_CASE("multi-channel synthetic images share the shape but not the noise") {
  Dataset d = make_synthetic(2, 3, 3, 16, 16, 7);
  CHECK(d.images.size() == 6u * 3 * 16 * 16);
  // channels differ pointwise (independent noise) but correlate strongly
  const double* a = d.images.data();
  const double* b = a + 16 * 16;
  double dot = 0.0, na = 0.0, nb = 0.0;
  bool identical = true;
  for (std::size_t i = 0; i < 16 * 16; ++i) {
    identical = identical && a[i] == b[i];
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  CHECK(!identical);
  CHECK(dot / std::sqrt(na * nb) > 0.5);
}

TEST_CASE("standardize whitens and reports the original statistics") {
  Dataset d = make_synthetic(4, 20, 1, 16, 16, 3);
  auto [mean, sd] = standardize(d);
  CHECK(sd > 0.0);
  CHECK(mean > 0.0);  // shapes add positive mass over the background
  double m2 = 0.0, v2 = 0.0;
  for (double v : d.images) m2 += v;
  m2 /= static_cast<double>(d.images.size());
  for (double v : d.images) v2 += (v - m2) * (v - m2);
  v2 /= static_cast<double>(d.images.size());
  CHECK(std::fabs(m2) < 1e-12);
  CHECK(std::fabs(v2 - 1.0) < 1e-12);

  Dataset flat;
  flat.num_classes = 2;
  flat.channels = flat.height = flat.width = 1;
  flat.images = {0.5, 0.5};
  flat.labels = {0, 1};
  CHECK_THROWS_AS(standardize(flat), ContractError);
}

TEST_CASE("stratified split keeps the class balance on both sides") {
  Dataset d = make_synthetic(8, 100, 1, 8, 8, 9);
  auto [train, eval] = stratified_split(d, 0.5, 17);
  CHECK(train.size() == 400);
  CHECK(eval.size() == 400);
  std::vector<std::size_t> ta(8, 0), ea(8, 0);
  for (auto l : train.labels) ++ta[l];
  for (auto l : eval.labels) ++ea[l];
  for (std::size_t c = 0; c < 8; ++c) {
    CHECK(ta[c] == 50);
    CHECK(ea[c] == 50);
  }

  // disjoint and complete: every sample vector appears exactly once
  auto key = [&](const Dataset& ds, std::size_t i) {
    return std::vector<double>(ds.images.begin() + i * ds.sample_numel(),
                               ds.images.begin() + (i + 1) * ds.sample_numel());
  };
  std::set<std::vector<double>> seen;
  for (std::size_t i = 0; i < train.size(); ++i) CHECK(seen.insert(key(train, i)).second);
  for (std::size_t i = 0; i < eval.size(); ++i) CHECK(seen.insert(key(eval, i)).second);
  CHECK(seen.size() == 800);

  // uneven fraction rounds per class
  auto [small, rest] = stratified_split(d, 0.25, 17);
  CHECK(small.size() == 200);
  CHECK(rest.size() == 600);

  CHECK_THROWS_AS(stratified_split(d, 1.5, 0), ContractError);
}

TEST_CASE("batch gathers samples bitwise") {
  Dataset d = make_synthetic(3, 4, 2, 8, 8, 21);
  Tensor b = d.batch({5, 0, 11});
  CHECK(b.shape() == std::vector<std::size_t>{3, 2, 8, 8});
  Tensor one = d.image(5);
  CHECK(one.shape() == std::vector<std::size_t>{1, 2, 8, 8});
  for (std::size_t j = 0; j < d.sample_numel(); ++j) {
    CHECK(b.data()[j] == one.data()[j]);
    CHECK(b.data()[j] == d.images[5 * d.sample_numel() + j]);
  }
  CHECK_THROWS_AS(d.batch({12}), ContractError);
  CHECK_THROWS_AS(d.batch({}), ContractError);
}

TEST_CASE("idx pairs load with scaling and class discovery") {
  TempFile img("idx_img.bin"), lab("idx_lab.bin");
  write_idx_pair(img.path, lab.path);
  Dataset d = load_idx(img.path, lab.path);
  CHECK(d.size() == 2);
  CHECK(d.channels == 1);
  CHECK(d.height == 3);
  CHECK(d.width == 2);
  CHECK(d.num_classes == 2);
  CHECK(d.labels == std::vector<std::size_t>{1, 0});
  CHECK(d.images[0] == 0.0);
  CHECK(d.images[5] == doctest::Approx(5.0 / 255.0));
  CHECK(d.images[11] == 1.0);
}

TEST_CASE("idx loading failures carry the file and byte position") {
  TempFile img("idx_img2.bin"), lab("idx_lab2.bin");
  write_idx_pair(img.path, lab.path);

  SUBCASE("missing file") {
    CHECK_THROWS_WITH_AS(load_idx("no_such_file.bin", lab.path),
                         "cannot open 'no_such_file.bin'", FormatError);
  }
  SUBCASE("wrong image magic") {
    std::vector<unsigned char> bad;
    put_u32_be(bad, 0x00000801u);
    put_u32_be(bad, 0);
    put_u32_be(bad, 0);
    put_u32_be(bad, 0);
    write_file(img.path, bad);
    try {
      load_idx(img.path, lab.path);
      CHECK(false);
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("bad image magic at byte 0") != std::string::npos);
      CHECK(std::string(e.what()).find("0x00000803") != std::string::npos);
    }
  }
  SUBCASE("truncated pixel data") {
    std::vector<unsigned char> bad;
    put_u32_be(bad, 0x00000803u);
    put_u32_be(bad, 2);
    put_u32_be(bad, 3);
    put_u32_be(bad, 2);
    bad.push_back(0);  // 1 of 12 pixels
    write_file(img.path, bad);
    try {
      load_idx(img.path, lab.path);
      CHECK(false);
    } catch (const FormatError& e) {
      std::string msg = e.what();
      CHECK(msg.find("truncated at byte 17") != std::string::npos);
      CHECK(msg.find("pixel data") != std::string::npos);
    }
  }
  SUBCASE("count mismatch") {
    std::vector<unsigned char> bad;
    put_u32_be(bad, 0x00000801u);
    put_u32_be(bad, 3);
    bad.push_back(0);
    bad.push_back(1);
    bad.push_back(0);
    write_file(lab.path, bad);
    CHECK_THROWS_AS(load_idx(img.path, lab.path), FormatError);
  }
  SUBCASE("trailing bytes") {
    std::vector<unsigned char> lab_bytes;
    put_u32_be(lab_bytes, 0x00000801u);
    put_u32_be(lab_bytes, 2);
    lab_bytes.push_back(0);
    lab_bytes.push_back(1);
    lab_bytes.push_back(9);
    write_file(lab.path, lab_bytes);
    CHECK_THROWS_AS(load_idx(img.path, lab.path), FormatError);
  }
}
