#include "optlens/dataio.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "optlens/rng.hpp"

namespace optlens::data {

Preprocessing preprocessing_from_string(const std::string& s) {
  if (s == "normalize") return Preprocessing::Normalize;
  if (s == "standardize") return Preprocessing::Standardize;
  fail("preprocessing: unknown mode '" + s + "' (want normalize|standardize)");
}

namespace {

uint32_t be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

// gzread handles both gzip and plain files, which is exactly the autodetect
// the loader wants.
std::vector<uint8_t> read_file(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) fail("idx: cannot open " + path);
  std::vector<uint8_t> out;
  uint8_t buf[1 << 16];
  int got;
  while ((got = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + got);
  const bool bad = got < 0;
  gzclose(f);
  if (bad) fail("idx: read error in " + path);
  return out;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes, bool gzip) {
  if (gzip) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) fail("idx: cannot open " + path + " for writing");
    if (gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size())) !=
        static_cast<int>(bytes.size())) {
      gzclose(f);
      fail("idx: short write to " + path);
    }
    gzclose(f);
    return;
  }
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) fail("idx: cannot open " + path + " for writing");
  const size_t w = std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (w != bytes.size()) fail("idx: short write to " + path);
}

void push_be32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(uint8_t(x >> 24));
  v.push_back(uint8_t(x >> 16));
  v.push_back(uint8_t(x >> 8));
  v.push_back(uint8_t(x));
}

}  // namespace

RawIdx load_idx(const std::string& path, uint32_t want_magic) {
  std::vector<uint8_t> raw = read_file(path);
  if (raw.size() < 4) fail("idx: truncated header in " + path);
  const uint32_t magic = be32(raw.data());
  if (magic != want_magic)
    fail("idx: bad magic " + std::to_string(magic) + " in " + path + " (want " +
         std::to_string(want_magic) + ")");
  const int ndim = int(magic & 0xff);
  if (raw.size() < 4 + 4 * size_t(ndim)) fail("idx: truncated header in " + path);
  RawIdx out;
  int64_t count = 1;
  for (int i = 0; i < ndim; ++i) {
    const int64_t d = be32(raw.data() + 4 + 4 * i);
    out.dims.push_back(d);
    count *= d;
  }
  const size_t off = 4 + 4 * size_t(ndim);
  if (raw.size() < off + size_t(count))
    fail("idx: " + path + " holds " + std::to_string(raw.size() - off) + " bytes, header says " +
         std::to_string(count));
  out.bytes.assign(raw.begin() + off, raw.begin() + off + count);
  return out;
}

Dataset load_mnist(const std::string& images_path, const std::string& labels_path,
                   Preprocessing mode) {
  RawIdx img = load_idx(images_path, 2051);
  RawIdx lab = load_idx(labels_path, 2049);
  if (img.dims.size() != 3) fail("idx: image file " + images_path + " is not rank 3");
  const int64_t n = img.dims[0];
  const int64_t pixels = img.dims[1] * img.dims[2];
  if (pixels != 784)
    fail("idx: expected 28x28 images, got " + std::to_string(img.dims[1]) + "x" +
         std::to_string(img.dims[2]));
  if (lab.dims.size() != 1 || lab.dims[0] != n)
    fail("idx: " + std::to_string(n) + " images but " + std::to_string(lab.dims[0]) + " labels");

  Dataset ds;
  ds.images = Tensor{n, pixels};
  for (int64_t i = 0; i < n * pixels; ++i) ds.images.data[i] = double(img.bytes[i]);
  ds.labels.resize(n);
  for (int64_t i = 0; i < n; ++i) {
    if (lab.bytes[i] > 9) fail("idx: label " + std::to_string(int(lab.bytes[i])) + " out of range");
    ds.labels[i] = int(lab.bytes[i]);
  }

  if (mode == Preprocessing::Normalize) {
    for (double& v : ds.images.data) v /= 255.0;
  } else {
    // per-pixel statistics over this set; std floored so constant pixels map to 0
    for (int64_t j = 0; j < pixels; ++j) {
      double m = 0.0;
      for (int64_t i = 0; i < n; ++i) m += ds.images.at(i, j);
      m /= double(n);
      double v = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double d = ds.images.at(i, j) - m;
        v += d * d;
      }
      const double sd = std::max(std::sqrt(v / double(n)), 1e-8);
      for (int64_t i = 0; i < n; ++i) ds.images.at(i, j) = (ds.images.at(i, j) - m) / sd;
    }
  }
  return ds;
}

void write_idx_images(const std::string& path, int64_t n, int64_t rows, int64_t cols,
                      const std::vector<uint8_t>& bytes, bool gzip) {
  if (static_cast<int64_t>(bytes.size()) != n * rows * cols)
    fail("idx: image byte count does not match dims");
  std::vector<uint8_t> out;
  push_be32(out, 2051);
  push_be32(out, uint32_t(n));
  push_be32(out, uint32_t(rows));
  push_be32(out, uint32_t(cols));
  out.insert(out.end(), bytes.begin(), bytes.end());
  write_file(path, out, gzip);
}

void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels, bool gzip) {
  std::vector<uint8_t> out;
  push_be32(out, 2049);
  push_be32(out, uint32_t(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  write_file(path, out, gzip);
}

std::vector<std::vector<int64_t>> batch_indices(int64_t n, int64_t batch_size, uint64_t seed,
                                                int64_t epoch) {
  if (batch_size < 1 || batch_size > n)
    fail("batch: size " + std::to_string(batch_size) + " invalid for dataset of " +
         std::to_string(n));
  std::vector<int64_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(stream_seed(seed, "batching", uint64_t(epoch)));
  rng.shuffle(perm);
  std::vector<std::vector<int64_t>> chunks;
  for (int64_t at = 0; at < n; at += batch_size) {
    const int64_t len = std::min(batch_size, n - at);
    chunks.emplace_back(perm.begin() + at, perm.begin() + at + len);
  }
  return chunks;
}

Batch make_batch(const Dataset& ds, const std::vector<int64_t>& idx, int64_t batch_index) {
  const int64_t b = static_cast<int64_t>(idx.size());
  const int64_t d = ds.images.shape[1];
  Batch out;
  out.x = Tensor{b, d};
  out.y_onehot = Tensor{b, int64_t(ds.n_classes)};
  out.labels.resize(b);
  out.index = batch_index;
  for (int64_t i = 0; i < b; ++i) {
    std::memcpy(out.x.data.data() + i * d, ds.images.data.data() + idx[i] * d, d * sizeof(double));
    out.labels[i] = ds.labels[idx[i]];
    out.y_onehot.at(i, out.labels[i]) = 1.0;
  }
  return out;
}

BatchIter::BatchIter(const Dataset& ds, int64_t batch_size, uint64_t seed)
    : ds_(ds), batch_size_(batch_size), seed_(seed) {
  chunks_ = batch_indices(ds.n(), batch_size_, seed_, epoch_);
}

Batch BatchIter::next() {
  if (pos_ >= chunks_.size()) {
    ++epoch_;
    pos_ = 0;
    chunks_ = batch_indices(ds_.n(), batch_size_, seed_, epoch_);
  }
  Batch b = make_batch(ds_, chunks_[pos_], static_cast<int64_t>(pos_));
  ++pos_;
  return b;
}

namespace {

// seven-segment glyphs; enough structure that the classes are separable but
// not trivially linear once jitter and noise land on top
constexpr uint8_t kSegments[10] = {
    0b0111111,  // 0: ABCDEF
    0b0000110,  // 1: BC
    0b1011011,  // 2: ABDEG
    0b1001111,  // 3: ABCDG
    0b1100110,  // 4: BCFG
    0b1101101,  // 5: ACDFG
    0b1111101,  // 6: ACDEFG
    0b0000111,  // 7: ABC
    0b1111111,  // 8
    0b1101111,  // 9: ABCDFG
};

void fill_rect(uint8_t* img, int x0, int x1, int y0, int y1, uint8_t v) {
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (x >= 0 && x < 28 && y >= 0 && y < 28) img[y * 28 + x] = v;
}

// one sample's glyph deformation; drawn per example so intra-class variation
// (placement, stroke weight, partial segments, uneven ink) dominates the
// class signal the way handwriting does
struct GlyphStyle {
  int dx, dy;          // global placement, +/-5
  int thick;           // stroke thickness minus one, in {0,1,2}
  double gain[7];      // per-segment ink intensity
  int ox[7], oy[7];    // per-segment placement wobble, +/-1
  double keep[7];      // fraction of the segment's length actually drawn
  bool from_hi[7];     // which end the missing part is cut from
};

void draw_segment(uint8_t* img, int x0, int x1, int y0, int y1, const GlyphStyle& g, int s) {
  // erode along the long axis only
  if (x1 - x0 >= y1 - y0) {
    const int len = x1 - x0 + 1;
    const int cut = int((1.0 - g.keep[s]) * len);
    if (g.from_hi[s]) x1 -= cut; else x0 += cut;
    y1 += g.thick;
  } else {
    const int len = y1 - y0 + 1;
    const int cut = int((1.0 - g.keep[s]) * len);
    if (g.from_hi[s]) y1 -= cut; else y0 += cut;
    x1 += g.thick;
  }
  const uint8_t v = uint8_t(255.0 * g.gain[s]);
  fill_rect(img, x0 + g.dx + g.ox[s], x1 + g.dx + g.ox[s], y0 + g.dy + g.oy[s],
            y1 + g.dy + g.oy[s], v);
}

void draw_digit(uint8_t* img, int digit, const GlyphStyle& g) {
  const uint8_t seg = kSegments[digit];
  const int L = 8, R = 19, T = 4, M = 13, B = 23;
  if (seg & 0b0000001) draw_segment(img, L, R, T, T + 1, g, 0);      // A
  if (seg & 0b0000010) draw_segment(img, R - 1, R, T, M + 1, g, 1);  // B
  if (seg & 0b0000100) draw_segment(img, R - 1, R, M, B, g, 2);      // C
  if (seg & 0b0001000) draw_segment(img, L, R, B - 1, B, g, 3);      // D
  if (seg & 0b0010000) draw_segment(img, L, L + 1, M, B, g, 4);      // E
  if (seg & 0b0100000) draw_segment(img, L, L + 1, T, M + 1, g, 5);  // F
  if (seg & 0b1000000) draw_segment(img, L, R, M, M + 1, g, 6);      // G
}

}  // namespace

SyntheticSet make_synthetic(int64_t n, uint64_t seed) {
  SyntheticSet out;
  out.images.assign(size_t(n) * 784, 0);
  out.labels.resize(n);
  Rng rng(stream_seed(seed, "synthetic"));
  for (int64_t i = 0; i < n; ++i) {
    const int digit = int(rng.index(10));
    GlyphStyle g;
    g.dx = int(rng.index(9)) - 4;
    g.dy = int(rng.index(9)) - 4;
    g.thick = int(rng.index(3));
    // style draws happen for all seven slots so the stream layout does not
    // depend on the glyph
    for (int s = 0; s < 7; ++s) {
      g.gain[s] = rng.uniform(0.65, 1.0);
      g.ox[s] = int(rng.index(3)) - 1;
      g.oy[s] = int(rng.index(3)) - 1;
      g.keep[s] = rng.uniform(0.0, 1.0) < 0.15 ? rng.uniform(0.5, 0.85) : 1.0;
      g.from_hi[s] = rng.uniform(0.0, 1.0) < 0.5;
    }
    const double contrast = rng.uniform(0.2, 0.42);
    uint8_t* img = out.images.data() + i * 784;
    draw_digit(img, digit, g);
    // clutter blobs: off-glyph ink that is class-uncorrelated
    const int blobs = int(rng.index(3));
    for (int b = 0; b < blobs; ++b) {
      const int bx = int(rng.index(27)), by = int(rng.index(27));
      const uint8_t bv = uint8_t(rng.uniform(32.0, 96.0));
      fill_rect(img, bx, bx + 1, by, by + 1, bv);
    }
    for (int p = 0; p < 784; ++p) {
      double v = contrast * img[p] + 20.0 * rng.normal();
      img[p] = uint8_t(std::clamp(v, 0.0, 255.0));
    }
    out.labels[i] = uint8_t(digit);
  }
  return out;
}

void write_synthetic_idx(const std::string& dir, int64_t n, uint64_t seed) {
  std::filesystem::create_directories(dir);
  SyntheticSet s = make_synthetic(n, seed);
  write_idx_images(dir + "/train-images-idx3-ubyte", n, 28, 28, s.images);
  write_idx_labels(dir + "/train-labels-idx1-ubyte", s.labels);
}

}  // namespace optlens::data
