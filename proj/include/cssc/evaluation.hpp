#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cssc/data.hpp"
#include "cssc/model.hpp"

namespace cssc {

enum class Setting { standard, cloth_changing, camera_split };

std::string setting_name(Setting s);
Setting parse_setting(const std::string& text);

struct ProtocolSetting {
  Setting name = Setting::standard;
  std::set<int> query_cameras, gallery_cameras;  // camera_split only

  void validate() const;
};

struct SampleMeta {
  int identity = 0;
  int camera = 0;
  std::optional<int> clothing;
};

struct EmbeddingTable {
  Tensor embeddings;  // (n, d)
  std::vector<SampleMeta> meta;
  std::vector<std::string> paths;
};

// Embeds every sample of `split` in manifest order (resize only, no
// augmentation). Switches the model to evaluation mode.
EmbeddingTable extract_all(CsscModel& model, const Manifest& manifest, Split split, std::size_t batch_size);
void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);

// dist[i][j] = 1 - cos(Q_i, G_j).
Tensor cosine_distance(const Tensor& Q, const Tensor& G);

using Mask = std::vector<std::vector<bool>>;

// true marks a gallery entry that may be retrieved for the query.
Mask validity_mask(const std::vector<SampleMeta>& query, const std::vector<SampleMeta>& gallery,
                   const ProtocolSetting& setting);

struct Metrics {
  std::vector<double> cmc;  // cmc[k-1] for rank k
  double map = 0.0;
  std::size_t num_valid_queries = 0;
  std::size_t num_skipped_queries = 0;

  double rank(std::size_t k) const { return k == 0 || cmc.empty() ? 0.0 : cmc[std::min(k, cmc.size()) - 1]; }
  bool operator==(const Metrics&) const = default;
};

Metrics cmc_map(const Tensor& distmat, const std::vector<int>& query_ids, const std::vector<int>& gallery_ids,
                const Mask& mask, std::size_t max_rank = 50);

struct RankEntry {
  std::size_t gallery_index = 0;
  double distance = 0.0;
  bool match = false;
};

std::vector<std::vector<RankEntry>> rank_list(const Tensor& distmat, const Mask& mask,
                                              const std::vector<int>& query_ids,
                                              const std::vector<SampleMeta>& gallery, std::size_t k = 10);

// {setting, rank1, rank5, rank10, rank20, map, num_valid_queries}
std::string metrics_json(const Metrics& m, Setting setting);
void write_rank_list(const std::filesystem::path& path, const std::vector<std::vector<RankEntry>>& ranks,
                     const EmbeddingTable& query, const EmbeddingTable& gallery);

struct EvalReport {
  Setting setting;
  Metrics metrics;
  std::vector<std::vector<RankEntry>> ranks;
};

// Extracts query and gallery once and evaluates every requested setting.
std::vector<EvalReport> evaluate(CsscModel& model, const Manifest& manifest, const std::vector<ProtocolSetting>& settings,
                                 std::size_t batch_size, std::size_t max_rank = 50, std::size_t rank_k = 10,
                                 EmbeddingTable* query_out = nullptr, EmbeddingTable* gallery_out = nullptr);

}  // namespace cssc
