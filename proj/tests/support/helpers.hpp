#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "optlens/dataio.hpp"
#include "optlens/rng.hpp"
#include "optlens/tensor.hpp"

namespace testsupport {

struct TmpDir {
  std::filesystem::path path;

  TmpDir() {
    static std::atomic<int> counter{0};
    path = std::filesystem::temp_directory_path() /
           ("optlens-test-" + std::to_string(counter.fetch_add(1)) + "-" +
            std::to_string(reinterpret_cast<uintptr_t>(this)));
    std::filesystem::create_directories(path);
  }
  ~TmpDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// small in-memory dataset, normalized pixels
inline optlens::data::Dataset toy_dataset(int64_t n, uint64_t seed = 7) {
  auto syn = optlens::data::make_synthetic(n, seed);
  optlens::data::Dataset ds;
  std::vector<double> px(syn.images.size());
  for (size_t i = 0; i < px.size(); ++i) px[i] = syn.images[i] / 255.0;
  ds.images = optlens::Tensor::matrix(n, 784, std::move(px));
  ds.labels.assign(syn.labels.begin(), syn.labels.end());
  return ds;
}

}  // namespace testsupport
