#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "gotcha/gallery.hpp"
#include "gotcha/rng.hpp"

namespace test {

// Scratch directory removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("gotcha-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline gotcha::Gallery random_gallery(std::size_t n, std::size_t attrs, std::size_t feats,
                                      std::uint64_t seed) {
  gotcha::Rng rng(seed);
  gotcha::Gallery g(attrs, feats);
  std::vector<std::int8_t> a(attrs);
  std::vector<float> f(feats);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& x : a) x = rng.bernoulli(0.5) ? 1 : -1;
    for (auto& x : f) x = static_cast<float>(rng.normal());
    g.add("r" + std::to_string(i), a, f);
  }
  return g;
}

}  // namespace test
