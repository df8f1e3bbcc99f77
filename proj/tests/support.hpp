#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "cssc/error.hpp"
#include "cssc/evaluation.hpp"
#include "cssc/random.hpp"
#include "cssc/tensor.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("cssc_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline cssc::Tensor random_tensor(cssc::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  cssc::Rng rng(seed);
  cssc::Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// CMC and mAP by literal definition: full sort of the valid gallery, then
// precision at every rank.
inline cssc::Metrics oracle_cmc_map(const cssc::Tensor& dist, const std::vector<int>& qids,
                                    const std::vector<int>& gids, const cssc::Mask& mask, std::size_t max_rank) {
  cssc::Metrics m;
  std::vector<std::size_t> first_rank;
  double ap_sum = 0.0;
  for (std::size_t i = 0; i < qids.size(); ++i) {
    std::vector<std::pair<double, std::size_t>> list;
    for (std::size_t j = 0; j < gids.size(); ++j)
      if (mask[i][j]) list.emplace_back(dist.at(i, j), j);
    std::sort(list.begin(), list.end());
    std::vector<bool> rel;
    for (auto& [d, j] : list) rel.push_back(gids[j] == qids[i]);
    const auto R = static_cast<std::size_t>(std::count(rel.begin(), rel.end(), true));
    if (R == 0) {
      ++m.num_skipped_queries;
      continue;
    }
    double ap = 0.0;
    for (std::size_t k = 1; k <= rel.size(); ++k) {
      if (!rel[k - 1]) continue;
      std::size_t hits = 0;
      for (std::size_t t = 0; t < k; ++t) hits += rel[t] ? 1 : 0;
      ap += static_cast<double>(hits) / static_cast<double>(k);
    }
    ap_sum += ap / static_cast<double>(R);
    std::size_t first = 1;
    while (!rel[first - 1]) ++first;
    first_rank.push_back(first);
    ++m.num_valid_queries;
  }
  if (m.num_valid_queries == 0) throw cssc::ValidationError("no valid queries");
  for (std::size_t k = 1; k <= max_rank; ++k) {
    double c = 0.0;
    for (std::size_t f : first_rank)
      if (f <= k) c += 1.0;
    m.cmc.push_back(c / static_cast<double>(m.num_valid_queries));
  }
  m.map = ap_sum / static_cast<double>(m.num_valid_queries);
  return m;
}

}  // namespace testing
