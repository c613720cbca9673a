#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <vector>

#include "optlens/dataio.hpp"
#include "optlens/error.hpp"
#include "support/helpers.hpp"

using namespace optlens;
using testsupport::TmpDir;

namespace {

void write_pair(const TmpDir& d, int64_t n, bool gzip, uint64_t seed = 3) {
  auto syn = data::make_synthetic(n, seed);
  data::write_idx_images(d.file("img"), n, 28, 28, syn.images, gzip);
  data::write_idx_labels(d.file("lab"), syn.labels, gzip);
}

}  // namespace

TEST_CASE("idx round trip, gzip detected by content") {
  TmpDir d;
  write_pair(d, 32, false);
  data::Dataset plain = data::load_mnist(d.file("img"), d.file("lab"));
  CHECK(plain.n() == 32);
  CHECK(plain.images.shape == std::vector<int64_t>{32, 784});

  TmpDir dz;
  write_pair(dz, 32, true);
  data::Dataset zipped = data::load_mnist(dz.file("img"), dz.file("lab"));
  CHECK(zipped.images.data == plain.images.data);
  CHECK(zipped.labels == plain.labels);
}

TEST_CASE("normalize maps bytes to [0,1], zero byte to 0.0") {
  TmpDir d;
  write_pair(d, 8, false);
  data::Dataset ds = data::load_mnist(d.file("img"), d.file("lab"));
  auto syn = data::make_synthetic(8, 3);
  bool saw_zero = false;
  for (size_t i = 0; i < syn.images.size(); ++i) {
    CHECK(ds.images.data[i] == syn.images[i] / 255.0);
    if (syn.images[i] == 0) {
      CHECK(ds.images.data[i] == 0.0);
      saw_zero = true;
    }
  }
  CHECK(saw_zero);  // glyph corners are blank
}

TEST_CASE("standardize: per-pixel mean ~0, std 1 or floored to 0") {
  TmpDir d;
  const int64_t n = 256;
  write_pair(d, n, false);
  data::Dataset ds =
      data::load_mnist(d.file("img"), d.file("lab"), data::Preprocessing::Standardize);
  for (int64_t j = 0; j < 784; ++j) {
    double mean = 0.0;
    for (int64_t i = 0; i < n; ++i) mean += ds.images.at(i, j);
    mean /= double(n);
    CHECK(std::fabs(mean) <= 1e-9);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      double c = ds.images.at(i, j) - mean;
      var += c * c;
    }
    double sd = std::sqrt(var / double(n));
    // constant raw pixels divide by the 1e-8 floor and stay 0
    bool unit = std::fabs(sd - 1.0) <= 1e-6;
    bool zeroed = sd == 0.0;
    CHECK((unit || zeroed));
  }
}

TEST_CASE("loader rejects corrupted headers and mismatches") {
  TmpDir d;
  write_pair(d, 4, false);

  {
    std::fstream f(d.file("img"), std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(3);
    f.put(char(0x42));  // magic 2051 -> garbage
  }
  CHECK_THROWS_WITH_AS(data::load_mnist(d.file("img"), d.file("lab")),
                       doctest::Contains("bad magic"), Error);

  write_pair(d, 4, false);
  {
    // drop the last pixel byte
    std::ifstream in(d.file("img"), std::ios::binary);
    std::vector<char> all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    all.pop_back();
    std::ofstream out(d.file("img"), std::ios::binary | std::ios::trunc);
    out.write(all.data(), std::streamsize(all.size()));
  }
  CHECK_THROWS_WITH_AS(data::load_mnist(d.file("img"), d.file("lab")),
                       doctest::Contains("header says"), Error);

  write_pair(d, 4, false);
  auto syn = data::make_synthetic(6, 3);
  data::write_idx_labels(d.file("lab6"), syn.labels);
  CHECK_THROWS_WITH_AS(data::load_mnist(d.file("img"), d.file("lab6")),
                       doctest::Contains("labels"), Error);

  // image magic where labels expected
  CHECK_THROWS_AS(data::load_mnist(d.file("img"), d.file("img")), Error);
}

TEST_CASE("batch indices: chunk sizes and permutation") {
  auto chunks = data::batch_indices(60000, 128, 5, 0);
  REQUIRE(chunks.size() == 469);
  for (size_t i = 0; i + 1 < chunks.size(); ++i) CHECK(chunks[i].size() == 128);
  CHECK(chunks.back().size() == 96);

  std::vector<int64_t> all;
  for (const auto& c : chunks) all.insert(all.end(), c.begin(), c.end());
  std::sort(all.begin(), all.end());
  std::vector<int64_t> want(60000);
  std::iota(want.begin(), want.end(), 0);
  CHECK(all == want);
}

TEST_CASE("batch indices: determinism per (seed, epoch)") {
  CHECK(data::batch_indices(4, 2, 9, 0) == data::batch_indices(4, 2, 9, 0));
  CHECK(data::batch_indices(4, 2, 9, 0) != data::batch_indices(4, 2, 9, 1));
  CHECK(data::batch_indices(4, 2, 9, 0) != data::batch_indices(4, 2, 10, 0));
  CHECK_THROWS_AS(data::batch_indices(4, 5, 9, 0), Error);
  CHECK_THROWS_AS(data::batch_indices(4, 0, 9, 0), Error);
}

TEST_CASE("one-hot rows match labels") {
  data::Dataset ds = testsupport::toy_dataset(40);
  std::vector<int64_t> idx = {0, 5, 11, 17, 39};
  data::Batch b = data::make_batch(ds, idx, 0);
  REQUIRE(b.x.shape == std::vector<int64_t>{5, 784});
  REQUIRE(b.y_onehot.shape == std::vector<int64_t>{5, 10});
  for (int64_t i = 0; i < 5; ++i) {
    double sum = 0.0;
    int64_t arg = 0;
    for (int64_t j = 0; j < 10; ++j) {
      sum += b.y_onehot.at(i, j);
      if (b.y_onehot.at(i, j) > b.y_onehot.at(i, arg)) arg = j;
    }
    CHECK(sum == 1.0);
    CHECK(arg == ds.labels[size_t(idx[size_t(i)])]);
    for (int64_t j = 0; j < 784; ++j)
      CHECK(b.x.at(i, j) == ds.images.at(idx[size_t(i)], j));
  }
}

TEST_CASE("BatchIter walks epochs deterministically") {
  data::Dataset ds = testsupport::toy_dataset(6);
  data::BatchIter a(ds, 4, 21), b2(ds, 4, 21);
  for (int i = 0; i < 5; ++i) {
    data::Batch ba = a.next(), bb = b2.next();
    CHECK(ba.x.data == bb.x.data);
    CHECK(ba.labels == bb.labels);
  }
  CHECK(a.epoch() >= 2);  // 2 chunks per epoch, 5 next() calls span epochs
}

TEST_CASE("synthetic set is deterministic and balanced enough") {
  auto s1 = data::make_synthetic(500, 13);
  auto s2 = data::make_synthetic(500, 13);
  CHECK(s1.images == s2.images);
  CHECK(s1.labels == s2.labels);
  std::vector<int> count(10, 0);
  for (uint8_t l : s1.labels) {
    REQUIRE(l <= 9);
    ++count[l];
  }
  for (int c : count) CHECK(c > 20);  // uniform draw, 50 expected
}

TEST_CASE("full-size load matches the standard train split shape") {
  TmpDir d;
  data::write_synthetic_idx(d.path.string(), 60000, 1);
  data::Dataset ds = data::load_mnist(d.file("train-images-idx3-ubyte"),
                                      d.file("train-labels-idx1-ubyte"));
  CHECK(ds.n() == 60000);
  CHECK(ds.images.shape == std::vector<int64_t>{60000, 784});
}
