#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "optlens/tensor.hpp"

namespace optlens::data {

enum class Preprocessing { Normalize, Standardize };

Preprocessing preprocessing_from_string(const std::string& s);

struct Dataset {
  Tensor images;  // N x 784
  std::vector<int> labels;
  int n_classes = 10;
  int64_t n() const { return images.shape.empty() ? 0 : images.shape[0]; }
};

struct RawIdx {
  std::vector<int64_t> dims;
  std::vector<uint8_t> bytes;
};

// IDX container as used by the MNIST distribution: u32 magic, big-endian u32
// per dimension, then raw bytes. Gzip files are detected by content, not name.
RawIdx load_idx(const std::string& path, uint32_t want_magic);

// pairs an image file (magic 2051) with a label file (magic 2049) and applies
// the pixel transform: normalize -> x/255, standardize -> (x-mean)/max(std, 1e-8)
// with per-pixel statistics over the loaded set
Dataset load_mnist(const std::string& images_path, const std::string& labels_path,
                   Preprocessing mode = Preprocessing::Normalize);

void write_idx_images(const std::string& path, int64_t n, int64_t rows, int64_t cols,
                      const std::vector<uint8_t>& bytes, bool gzip = false);
void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels, bool gzip = false);

struct Batch {
  Tensor x;         // B x 784
  Tensor y_onehot;  // B x 10
  std::vector<int> labels;
  int64_t index = 0;  // position within the epoch
};

// Seeded epoch permutation, chunked; the tail batch keeps the remainder
// (60000 @ 128 -> 468 full + one of 96). Indices only, nothing materialized.
std::vector<std::vector<int64_t>> batch_indices(int64_t n, int64_t batch_size, uint64_t seed,
                                                int64_t epoch);

Batch make_batch(const Dataset& ds, const std::vector<int64_t>& idx, int64_t batch_index);

// Iterates batches of one epoch after another, re-permuting per epoch with the
// same seed stream. next() never runs dry.
class BatchIter {
 public:
  BatchIter(const Dataset& ds, int64_t batch_size, uint64_t seed);
  Batch next();
  int64_t epoch() const { return epoch_; }

 private:
  const Dataset& ds_;
  int64_t batch_size_;
  uint64_t seed_;
  int64_t epoch_ = 0;
  size_t pos_ = 0;
  std::vector<std::vector<int64_t>> chunks_;
};

// Deterministic MNIST-shaped stand-in: segment-glyph digits with jitter and
// pixel noise, balanced uniform labels. Used when no real IDX files are around.
struct SyntheticSet {
  std::vector<uint8_t> images;  // n * 784
  std::vector<uint8_t> labels;
};
SyntheticSet make_synthetic(int64_t n, uint64_t seed);

// writes train-images-idx3-ubyte / train-labels-idx1-ubyte under dir
void write_synthetic_idx(const std::string& dir, int64_t n, uint64_t seed);

}  // namespace optlens::data
