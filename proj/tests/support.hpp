#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "mcbias/dataset.hpp"

namespace testing {

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            fmt::format("mcbias-{}-{}-{}", ::getpid(), counter++, rd());
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

// Questions with option counts cycling through `counts`.
inline mcbias::Dataset synthetic_dataset(const std::string& name, std::size_t n,
                                         std::vector<std::size_t> counts, unsigned seed = 1) {
  std::mt19937 rng(seed);
  std::vector<mcbias::QuestionRecord> recs;
  for (std::size_t i = 0; i < n; ++i) {
    mcbias::QuestionRecord r;
    r.id = fmt::format("{}-{:04d}", name, i);
    r.question = fmt::format("Which item appears in picture {} of {}?", i, name);
    const auto k = counts[i % counts.size()];
    for (std::size_t j = 0; j < k; ++j) r.options.push_back(fmt::format("item {} {}", i, j));
    r.gold_index = rng() % k;
    recs.push_back(std::move(r));
  }
  return mcbias::Dataset(name, std::move(recs));
}

inline std::string dataset_jsonl(const mcbias::Dataset& d) {
  std::string out;
  for (const auto& r : d.records()) out += mcbias::serialize_record(r) + "\n";
  return out;
}

}  // namespace testing
