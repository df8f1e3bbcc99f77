#include "cssc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "cssc/error.hpp"

namespace cssc {

std::string setting_name(Setting s) {
  switch (s) {
    case Setting::standard: return "standard";
    case Setting::cloth_changing: return "cloth_changing";
    case Setting::camera_split: return "camera_split";
  }
  return "?";
}

Setting parse_setting(const std::string& text) {
  if (text == "standard") return Setting::standard;
  if (text == "cloth_changing") return Setting::cloth_changing;
  if (text == "camera_split") return Setting::camera_split;
  throw ValidationError("unknown setting '" + text + "' (expected standard, cloth_changing or camera_split)");
}

void ProtocolSetting::validate() const {
  if (name != Setting::camera_split) return;
  if (query_cameras.empty() || gallery_cameras.empty())
    throw ValidationError("camera_split needs explicit query and gallery camera sets");
  for (int c : query_cameras)
    if (gallery_cameras.count(c)) throw ValidationError("camera_split camera sets must be disjoint (camera " + std::to_string(c) + " in both)");
}

EmbeddingTable extract_all(CsscModel& model, const Manifest& manifest, Split split, std::size_t batch_size) {
  if (batch_size < 1) throw ValidationError("batch size must be >= 1");
  model.eval();
  const auto idx = manifest.indices(split);
  const auto& bcfg = model.config().backbone;
  ImageStore store(manifest, bcfg.input_height, bcfg.input_width);
  EmbeddingTable t;
  std::vector<Tensor> chunks;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    const std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(b),
                                        idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), b + batch_size)));
    chunks.push_back(model.embed(store.batch(part)));
  }
  for (std::size_t i : idx) {
    const auto& s = manifest.samples[i];
    t.meta.push_back({s.identity, s.camera, s.clothing});
    t.paths.push_back(s.image_path);
  }
  t.embeddings = chunks.empty() ? Tensor({0, 0}) : concat_rows(chunks);
  return t;
}

void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << "path\tidentity\tcamera\tclothing\tembedding\n";
  char buf[32];
  for (std::size_t i = 0; i < table.meta.size(); ++i) {
    const auto& m = table.meta[i];
    os << table.paths[i] << '\t' << m.identity << '\t' << m.camera << '\t' << (m.clothing ? std::to_string(*m.clothing) : "") << '\t';
    for (std::size_t j = 0; j < table.embeddings.dim(1); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", table.embeddings.at(i, j));
      os << (j ? "," : "") << buf;
    }
    os << '\n';
  }
  if (!os.flush()) throw Error("write failed for " + path.string());
}

Tensor cosine_distance(const Tensor& Q, const Tensor& G) {
  if (Q.rank() != 2 || G.rank() != 2 || Q.dim(1) != G.dim(1))
    throw ValidationError("cosine_distance: shape mismatch " + shape_string(Q.shape()) + " vs " + shape_string(G.shape()));
  const std::size_t q = Q.dim(0), g = G.dim(0), d = Q.dim(1);
  auto norms = [d](const Tensor& X, const char* which) {
    std::vector<double> n(X.dim(0));
    for (std::size_t i = 0; i < n.size(); ++i) {
      n[i] = l2_norm({X.data() + i * d, d});
      if (!(n[i] > 0)) throw ValidationError(std::string("cosine_distance: zero-norm ") + which + " row " + std::to_string(i));
    }
    return n;
  };
  const auto nq = norms(Q, "query"), ng = norms(G, "gallery");
  Tensor dist({q, g});
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += Q.at(i, k) * G.at(j, k);
      dist.at(i, j) = std::clamp(1.0 - dot / (nq[i] * ng[j]), 0.0, 2.0);
    }
  return dist;
}

Mask validity_mask(const std::vector<SampleMeta>& query, const std::vector<SampleMeta>& gallery,
                   const ProtocolSetting& setting) {
  setting.validate();
  if (setting.name == Setting::cloth_changing) {
    auto check = [](const std::vector<SampleMeta>& v, const char* which) {
      for (const auto& m : v)
        if (!m.clothing)
          throw ValidationError(std::string("cloth_changing setting requires the 'clothing' column (missing for ") + which + ")");
    };
    check(query, "query");
    check(gallery, "gallery");
  }
  Mask mask(query.size(), std::vector<bool>(gallery.size(), true));
  for (std::size_t i = 0; i < query.size(); ++i) {
    const auto& q = query[i];
    const bool q_ok = setting.name != Setting::camera_split || setting.query_cameras.count(q.camera);
    for (std::size_t j = 0; j < gallery.size(); ++j) {
      const auto& g = gallery[j];
      bool valid = q_ok;
      if (setting.name == Setting::camera_split && !setting.gallery_cameras.count(g.camera)) valid = false;
      const bool same_id = q.identity == g.identity;
      if (same_id && q.camera == g.camera) valid = false;
      if (setting.name == Setting::cloth_changing && same_id && *q.clothing == *g.clothing) valid = false;
      mask[i][j] = valid;
    }
  }
  return mask;
}

namespace {

// Valid gallery indices ordered by (distance, index).
std::vector<std::size_t> ranked(const Tensor& distmat, const Mask& mask, std::size_t i) {
  std::vector<std::size_t> order;
  for (std::size_t j = 0; j < distmat.dim(1); ++j)
    if (mask[i][j]) order.push_back(j);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return distmat.at(i, a) < distmat.at(i, b); });
  return order;
}

void check_shapes(const Tensor& distmat, std::size_t q, std::size_t g, const Mask& mask) {
  if (distmat.rank() != 2 || distmat.dim(0) != q || distmat.dim(1) != g || mask.size() != q)
    throw ValidationError("retrieval: inconsistent distance / metadata / mask shapes");
  for (const auto& row : mask)
    if (row.size() != g) throw ValidationError("retrieval: mask row has wrong length");
}

}  // namespace

Metrics cmc_map(const Tensor& distmat, const std::vector<int>& query_ids, const std::vector<int>& gallery_ids,
                const Mask& mask, std::size_t max_rank) {
  check_shapes(distmat, query_ids.size(), gallery_ids.size(), mask);
  if (max_rank < 1) throw ValidationError("max_rank must be >= 1");
  Metrics m;
  std::vector<double> hits(max_rank, 0.0);
  double ap_sum = 0.0;
  for (std::size_t i = 0; i < query_ids.size(); ++i) {
    const auto order = ranked(distmat, mask, i);
    std::size_t found = 0, first = 0;
    double ap = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (gallery_ids[order[r]] != query_ids[i]) continue;
      ++found;
      if (found == 1) first = r + 1;
      ap += static_cast<double>(found) / static_cast<double>(r + 1);
    }
    if (found == 0) {
      ++m.num_skipped_queries;
      continue;
    }
    ++m.num_valid_queries;
    ap_sum += ap / static_cast<double>(found);
    for (std::size_t k = first; k <= max_rank; ++k) hits[k - 1] += 1.0;
  }
  if (m.num_valid_queries == 0) throw ValidationError("no valid queries");
  const auto n = static_cast<double>(m.num_valid_queries);
  for (double h : hits) m.cmc.push_back(h / n);
  m.map = ap_sum / n;
  return m;
}

std::vector<std::vector<RankEntry>> rank_list(const Tensor& distmat, const Mask& mask, const std::vector<int>& query_ids,
                                              const std::vector<SampleMeta>& gallery, std::size_t k) {
  if (k < 1) throw ValidationError("rank list length k must be >= 1");
  check_shapes(distmat, query_ids.size(), gallery.size(), mask);
  std::vector<std::vector<RankEntry>> out;
  for (std::size_t i = 0; i < query_ids.size(); ++i) {
    const auto order = ranked(distmat, mask, i);
    std::vector<RankEntry> row;
    for (std::size_t r = 0; r < std::min(k, order.size()); ++r)
      row.push_back({order[r], distmat.at(i, order[r]), gallery[order[r]].identity == query_ids[i]});
    out.push_back(std::move(row));
  }
  return out;
}

std::string metrics_json(const Metrics& m, Setting setting) {
  nlohmann::ordered_json j;
  j["setting"] = setting_name(setting);
  j["rank1"] = m.rank(1);
  j["rank5"] = m.rank(5);
  j["rank10"] = m.rank(10);
  j["rank20"] = m.rank(20);
  j["map"] = m.map;
  j["num_valid_queries"] = m.num_valid_queries;
  return j.dump(2);
}

void write_rank_list(const std::filesystem::path& path, const std::vector<std::vector<RankEntry>>& ranks,
                     const EmbeddingTable& query, const EmbeddingTable& gallery) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << "query\tquery_identity\trank\tgallery\tgallery_identity\tdistance\tmatch\n";
  char buf[32];
  for (std::size_t i = 0; i < ranks.size(); ++i)
    for (std::size_t r = 0; r < ranks[i].size(); ++r) {
      const auto& e = ranks[i][r];
      std::snprintf(buf, sizeof buf, "%.6f", e.distance);
      os << query.paths[i] << '\t' << query.meta[i].identity << '\t' << r + 1 << '\t' << gallery.paths[e.gallery_index] << '\t'
         << gallery.meta[e.gallery_index].identity << '\t' << buf << '\t' << (e.match ? 1 : 0) << '\n';
    }
  if (!os.flush()) throw Error("write failed for " + path.string());
}

std::vector<EvalReport> evaluate(CsscModel& model, const Manifest& manifest, const std::vector<ProtocolSetting>& settings,
                                 std::size_t batch_size, std::size_t max_rank, std::size_t rank_k,
                                 EmbeddingTable* query_out, EmbeddingTable* gallery_out) {
  for (const auto& s : settings) {
    s.validate();
    if (s.name == Setting::cloth_changing && !manifest.has_clothing)
      throw ValidationError("cloth_changing setting requires the manifest column 'clothing'");
  }
  const auto query = extract_all(model, manifest, Split::query, batch_size);
  const auto gallery = extract_all(model, manifest, Split::gallery, batch_size);
  if (query.meta.empty() || gallery.meta.empty()) throw ValidationError("manifest needs non-empty query and gallery splits");
  const Tensor dist = cosine_distance(query.embeddings, gallery.embeddings);
  std::vector<int> qids, gids;
  for (const auto& m : query.meta) qids.push_back(m.identity);
  for (const auto& m : gallery.meta) gids.push_back(m.identity);
  std::vector<EvalReport> reports;
  for (const auto& s : settings) {
    const Mask mask = validity_mask(query.meta, gallery.meta, s);
    reports.push_back({s.name, cmc_map(dist, qids, gids, mask, max_rank), rank_list(dist, mask, qids, gallery.meta, rank_k)});
  }
  if (query_out) *query_out = query;
  if (gallery_out) *gallery_out = gallery;
  return reports;
}

}  // namespace cssc
