#include "cssc/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "cssc/error.hpp"
#include "cssc/image.hpp"

namespace cssc {

namespace fs = std::filesystem;

std::string split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "?";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "query") return Split::query;
  if (text == "gallery") return Split::gallery;
  throw ValidationError("unknown split '" + text + "' (expected train, query or gallery)");
}

std::vector<std::size_t> Manifest::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == split) out.push_back(i);
  return out;
}

std::vector<Sample> Manifest::subset(Split split) const {
  std::vector<Sample> out;
  for (const auto& s : samples)
    if (s.split == split) out.push_back(s);
  return out;
}

void finalize_manifest(Manifest& m) {
  std::stable_sort(m.samples.begin(), m.samples.end(), [](const Sample& a, const Sample& b) {
    if (a.image_path != b.image_path) return a.image_path < b.image_path;
    return a.split < b.split;
  });
  for (std::size_t i = 1; i < m.samples.size(); ++i)
    if (m.samples[i].image_path == m.samples[i - 1].image_path && m.samples[i].split == m.samples[i - 1].split)
      throw ValidationError("manifest: duplicate row for '" + m.samples[i].image_path + "' in split " +
                            split_name(m.samples[i].split));
  std::set<int> train_ids;
  for (const auto& s : m.samples)
    if (s.split == Split::train) train_ids.insert(s.raw_identity);
  m.train_label_map.clear();
  int next = 0;
  for (int id : train_ids) m.train_label_map[id] = next++;
  for (auto& s : m.samples) s.identity = s.split == Split::train ? m.train_label_map.at(s.raw_identity) : s.raw_identity;
  m.num_identities = train_ids.size();
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) fields.push_back(trim(f));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

int parse_count(const std::string& text, const std::string& column, std::size_t line_no) {
  int v = -1;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty()) throw ValidationError("manifest line " + std::to_string(line_no) + ": missing value for column '" + column + "'");
  if (ec != std::errc() || ptr != text.data() + text.size() || v < 0)
    throw ValidationError("manifest line " + std::to_string(line_no) + ": column '" + column +
                          "' must be a non-negative integer, got '" + text + "'");
  return v;
}

}  // namespace

Manifest load_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("manifest: cannot open " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(is, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line == "# source=synthetic") m.source = ManifestSource::synthetic;
      continue;
    }
    header = split_csv(line);
    break;
  }
  if (header.empty()) throw ValidationError("empty manifest: " + path.string());

  auto column = [&](const std::string& name, bool required) -> std::optional<std::size_t> {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      if (required) throw ValidationError("manifest: header is missing column '" + name + "'");
      return std::nullopt;
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_path = *column("path", true), c_id = *column("identity", true), c_cam = *column("camera", true),
                    c_split = *column("split", true);
  const auto c_clo = column("clothing", false);
  m.has_clothing = c_clo.has_value();

  while (std::getline(is, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_csv(line);
    if (fields.size() > header.size())
      throw ValidationError("manifest line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                            " fields, got " + std::to_string(fields.size()));
    if (fields.size() < header.size()) {
      std::string missing;
      for (std::size_t i = fields.size(); i < header.size(); ++i) missing += (missing.empty() ? "'" : ", '") + header[i] + "'";
      throw ValidationError("manifest line " + std::to_string(line_no) + ": missing column " + missing);
    }
    Sample s;
    s.image_path = fields[c_path];
    if (s.image_path.empty()) throw ValidationError("manifest line " + std::to_string(line_no) + ": missing value for column 'path'");
    if (!is_image_path(s.image_path))
      throw ValidationError("manifest line " + std::to_string(line_no) + ": '" + s.image_path + "' is not a .png or .ppm image");
    s.raw_identity = parse_count(fields[c_id], "identity", line_no);
    s.camera = parse_count(fields[c_cam], "camera", line_no);
    if (c_clo) s.clothing = parse_count(fields[*c_clo], "clothing", line_no);
    try {
      s.split = parse_split(fields[c_split]);
    } catch (const ValidationError& e) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    m.samples.push_back(std::move(s));
  }
  if (m.samples.empty()) throw ValidationError("empty manifest: " + path.string());
  finalize_manifest(m);
  return m;
}

void write_manifest(const fs::path& path, const Manifest& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw Error("manifest: cannot write " + path.string());
    if (m.source == ManifestSource::synthetic) os << "# source=synthetic\n";
    os << (m.has_clothing ? "path,identity,camera,clothing,split\n" : "path,identity,camera,split\n");
    for (const auto& s : m.samples) {
      os << s.image_path << ',' << s.raw_identity << ',' << s.camera << ',';
      if (m.has_clothing) {
        if (!s.clothing) throw Error("manifest: sample '" + s.image_path + "' has no clothing label");
        os << *s.clothing << ',';
      }
      os << split_name(s.split) << '\n';
    }
    if (!os.flush()) throw Error("manifest: write failed for " + path.string());
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Synthetic dataset

void SynthSpec::validate() const {
  if (num_identities < 2) throw ValidationError("synth.num_identities must be >= 2");
  if (clothes_per_identity < 2) throw ValidationError("synth.clothes_per_identity must be >= 2 for a cloth-changing split");
  if (images_per_clothing < 1) throw ValidationError("synth.images_per_clothing must be >= 1");
  if (num_cameras < 1) throw ValidationError("synth.num_cameras must be >= 1");
  if (image_height < 16 || image_width < 8) throw ValidationError("synth image size must be at least 16x8");
}

SyntheticRenderer::SyntheticRenderer(SynthSpec spec) : spec_(spec) {
  spec_.validate();
  const double H = spec_.image_height, W = spec_.image_width;
  std::set<std::uint16_t> used_stamps;
  for (int id = 0; id < spec_.num_identities; ++id) {
    Rng rng(derive_seed(spec_.seed, 1, id));
    SynthIdentity g;
    g.head_cx = W * (0.5 + rng.uniform(-0.08, 0.08));
    g.head_cy = H * rng.uniform(0.10, 0.15);
    g.head_r = H * rng.uniform(0.055, 0.085);
    g.torso_cx = W * 0.5;
    g.torso_cy = H * rng.uniform(0.36, 0.42);
    g.torso_rx = W * rng.uniform(0.26, 0.38);
    g.torso_ry = H * rng.uniform(0.14, 0.19);
    g.leg_top = g.torso_cy + 0.5 * g.torso_ry;
    g.leg_bottom = H * rng.uniform(0.84, 0.95);
    g.leg_width = W * rng.uniform(0.09, 0.15);
    g.leg_gap = W * rng.uniform(0.03, 0.12);
    do {
      g.stamp_bits = static_cast<std::uint16_t>(rng.below(1u << 16));
    } while (std::popcount(g.stamp_bits) < 4 || std::popcount(g.stamp_bits) > 12 || used_stamps.count(g.stamp_bits));
    used_stamps.insert(g.stamp_bits);
    g.stamp_cell = std::max(1, spec_.image_width / 16);
    const int side = 4 * g.stamp_cell;
    g.stamp_top = static_cast<int>(std::lround(g.torso_cy)) - side / 2 + static_cast<int>(rng.below(5)) - 2;
    g.stamp_left = static_cast<int>(std::lround(g.torso_cx)) - side / 2 + static_cast<int>(rng.below(5)) - 2;
    for (int c = 0; c < spec_.clothes_per_identity; ++c) {
      std::array<double, 3> col{};
      for (int attempt = 0;; ++attempt) {
        for (auto& v : col) v = rng.uniform(0.05, 0.95);
        bool distinct = true;
        for (const auto& o : g.clothing_colors) {
          double d = 0;
          for (int k = 0; k < 3; ++k) d = std::max(d, std::abs(o[k] - col[k]));
          distinct = distinct && d >= 0.3;
        }
        if (distinct || attempt >= 1000) break;
      }
      g.clothing_colors.push_back(col);
    }
    g.held_out_clothing = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec_.clothes_per_identity)));
    identities_.push_back(std::move(g));
  }
  for (int cam = 0; cam < spec_.num_cameras; ++cam) {
    Rng rng(derive_seed(spec_.seed, 2, cam));
    CameraEffect e;
    e.brightness = rng.uniform(-0.08, 0.08);
    e.shift_x = static_cast<int>(rng.below(5)) - 2;
    e.shift_y = static_cast<int>(rng.below(5)) - 2;
    cameras_.push_back(e);
  }
}

std::vector<std::uint8_t> SyntheticRenderer::silhouette(int id) const {
  const auto& g = identity(id);
  const int H = spec_.image_height, W = spec_.image_width;
  std::vector<std::uint8_t> map(static_cast<std::size_t>(H * W), Region::background);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      std::uint8_t r = Region::background;
      const double half_gap = 0.5 * g.leg_gap;
      const bool left_leg = px >= g.torso_cx - half_gap - g.leg_width && px <= g.torso_cx - half_gap;
      const bool right_leg = px >= g.torso_cx + half_gap && px <= g.torso_cx + half_gap + g.leg_width;
      if ((left_leg || right_leg) && py >= g.leg_top && py <= g.leg_bottom) r = Region::body;
      if (std::hypot(px - g.head_cx, py - g.head_cy) <= g.head_r) r = Region::body;
      const double ex = (px - g.torso_cx) / g.torso_rx, ey = (py - g.torso_cy) / g.torso_ry;
      if (ex * ex + ey * ey <= 1.0) r = Region::torso;
      const int sy = y - g.stamp_top, sx = x - g.stamp_left, side = 4 * g.stamp_cell;
      if (sy >= 0 && sx >= 0 && sy < side && sx < side) r = Region::stamp;
      map[static_cast<std::size_t>(y * W + x)] = r;
    }
  }
  return map;
}

std::string SyntheticRenderer::file_name(int id, int clothing, int image_index) const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "id%04d_clo%02d_cam%d_%03d.png", id, clothing, camera_of(image_index), image_index);
  return buf;
}

RenderedImage SyntheticRenderer::render(int id, int clothing, int image_index) const {
  const auto& g = identity(id);
  const auto& cam = camera(camera_of(image_index));
  const int H = spec_.image_height, W = spec_.image_width;
  const auto person = silhouette(id);
  const auto& torso_color = g.clothing_colors.at(static_cast<std::size_t>(clothing));
  Rng noise(derive_seed(spec_.seed, 3, id, clothing, image_index));
  RenderedImage out{Tensor({static_cast<std::size_t>(H), static_cast<std::size_t>(W), 3}),
                    std::vector<std::uint8_t>(static_cast<std::size_t>(H * W), Region::background)};
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const int sy = y - cam.shift_y, sx = x - cam.shift_x;
      std::uint8_t r = Region::background;
      if (sy >= 0 && sx >= 0 && sy < H && sx < W) r = person[static_cast<std::size_t>(sy * W + sx)];
      out.regions[static_cast<std::size_t>(y * W + x)] = r;
      std::array<double, 3> c{};
      switch (r) {
        case Region::background:
          for (auto& v : c) v = noise.uniform(0.2, 0.8);
          break;
        case Region::body: {
          const bool head = std::hypot(sx + 0.5 - g.head_cx, sy + 0.5 - g.head_cy) <= g.head_r;
          c = head ? head_color : leg_color;
          break;
        }
        case Region::torso: c = torso_color; break;
        case Region::stamp: {
          const int cy = (sy - g.stamp_top) / g.stamp_cell, cx = (sx - g.stamp_left) / g.stamp_cell;
          const bool on = (g.stamp_bits >> (cy * 4 + cx)) & 1u;
          c.fill(on ? stamp_on : stamp_off);
          break;
        }
      }
      for (std::size_t k = 0; k < 3; ++k)
        out.image[(static_cast<std::size_t>(y * W + x)) * 3 + k] = std::clamp(c[k] + cam.brightness, 0.0, 1.0);
    }
  }
  out.image = quantize8(std::move(out.image));
  return out;
}

Manifest generate_synthetic(const SynthSpec& spec, const fs::path& out_dir) {
  const SyntheticRenderer renderer(spec);
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw Error("synth: cannot create output directory " + out_dir.string() + ": " + ec.message());
  Manifest m;
  m.source = ManifestSource::synthetic;
  m.root = out_dir;
  for (int id = 0; id < spec.num_identities; ++id) {
    const int held = renderer.identity(id).held_out_clothing;
    for (int clo = 0; clo < spec.clothes_per_identity; ++clo) {
      for (int i = 0; i < spec.images_per_clothing; ++i) {
        const std::string rel = "images/" + renderer.file_name(id, clo, i);
        write_png(out_dir / rel, renderer.render(id, clo, i).image);
        Sample s{rel, id, id, renderer.camera_of(i), clo, Split::train};
        if (clo == held) {
          // First half of the held-out clothing queries, second half is gallery.
          s.split = 2 * i < spec.images_per_clothing ? Split::query : Split::gallery;
          m.samples.push_back(s);
        } else {
          m.samples.push_back(s);
          s.split = Split::gallery;
          m.samples.push_back(s);
        }
      }
    }
  }
  finalize_manifest(m);
  write_manifest(out_dir / "manifest.csv", m);
  return m;
}

// ---------------------------------------------------------------------------
// Augmentation

void AugConfig::validate() const {
  auto prob = [](double p, const char* key) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError(std::string(key) + " must lie in [0, 1]");
  };
  prob(flip_probability, "augment.flip_probability");
  prob(erase_probability, "augment.erase_probability");
  if (pad_pixels < 0) throw ValidationError("augment.pad_pixels must be >= 0");
  auto range = [](const std::pair<double, double>& r, const char* key) {
    if (!(r.first > 0.0 && r.first <= r.second)) throw ValidationError(std::string(key) + " must be an ordered pair of positive values");
  };
  range(erase_area_range, "augment.erase_area");
  range(erase_aspect_range, "augment.erase_aspect");
  if (erase_area_range.second > 1.0) throw ValidationError("augment.erase_area must not exceed 1");
}

namespace {

// Mirror index without repeating the edge pixel.
int reflect(int i, int n) {
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

}  // namespace

Tensor augment_train(const Tensor& image, const AugConfig& cfg, Rng& rng, AugTrace* trace) {
  cfg.validate();
  if (image.rank() != 3 || image.dim(2) != 3) throw ValidationError("augment: expected (h, w, 3) image, got " + shape_string(image.shape()));
  const int H = static_cast<int>(image.dim(0)), W = static_cast<int>(image.dim(1));
  if (cfg.pad_pixels >= std::min(H, W))
    throw ValidationError("augment.pad_pixels (" + std::to_string(cfg.pad_pixels) + ") must be smaller than the image side");
  AugTrace t;
  t.flipped = cfg.flip_probability > 0 && rng.bernoulli(cfg.flip_probability);
  if (cfg.pad_pixels > 0) {
    t.crop_top = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * cfg.pad_pixels + 1)));
    t.crop_left = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * cfg.pad_pixels + 1)));
  }
  Tensor out(image.shape());
  const int p = cfg.pad_pixels;
  for (int y = 0; y < H; ++y) {
    const int sy = reflect(y + t.crop_top - p, H);
    for (int x = 0; x < W; ++x) {
      int sx = reflect(x + t.crop_left - p, W);
      if (t.flipped) sx = W - 1 - sx;
      for (int k = 0; k < 3; ++k) out[static_cast<std::size_t>((y * W + x) * 3 + k)] = image[static_cast<std::size_t>((sy * W + sx) * 3 + k)];
    }
  }
  if (cfg.erase_probability > 0 && rng.bernoulli(cfg.erase_probability)) {
    const double area = static_cast<double>(H) * W;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double target = rng.uniform(cfg.erase_area_range.first, cfg.erase_area_range.second) * area;
      const double aspect = rng.uniform(cfg.erase_aspect_range.first, cfg.erase_aspect_range.second);
      const int h = static_cast<int>(std::lround(std::sqrt(target * aspect)));
      const int w = static_cast<int>(std::lround(std::sqrt(target / aspect)));
      if (h < 1 || w < 1 || h >= H || w >= W) continue;
      // Rounding can push the realized rectangle outside the configured ranges.
      const double frac = h * static_cast<double>(w) / area, ratio = static_cast<double>(h) / w;
      if (frac < cfg.erase_area_range.first || frac > cfg.erase_area_range.second) continue;
      if (ratio < cfg.erase_aspect_range.first || ratio > cfg.erase_aspect_range.second) continue;
      t.erased = true;
      t.erase_height = h;
      t.erase_width = w;
      t.erase_top = static_cast<int>(rng.below(static_cast<std::uint64_t>(H - h + 1)));
      t.erase_left = static_cast<int>(rng.below(static_cast<std::uint64_t>(W - w + 1)));
      for (int y = t.erase_top; y < t.erase_top + h; ++y)
        for (int x = t.erase_left; x < t.erase_left + w; ++x)
          for (int k = 0; k < 3; ++k) out[static_cast<std::size_t>((y * W + x) * 3 + k)] = rng.uniform();
      break;
    }
  }
  if (trace) *trace = t;
  return out;
}

// ---------------------------------------------------------------------------

ImageStore::ImageStore(const Manifest& manifest, std::size_t height, std::size_t width)
    : manifest_(manifest), height_(height), width_(width), cache_(manifest.samples.size()) {}

const Tensor& ImageStore::get(std::size_t sample_index) {
  auto& slot = cache_.at(sample_index);
  if (!slot) slot = resize_bilinear(read_image(manifest_.resolve(manifest_.samples[sample_index])), height_, width_);
  return *slot;
}

Tensor ImageStore::batch(const std::vector<std::size_t>& sample_indices) {
  Tensor out({sample_indices.size(), height_, width_, 3});
  const std::size_t per = height_ * width_ * 3;
  for (std::size_t i = 0; i < sample_indices.size(); ++i) {
    const Tensor& img = get(sample_indices[i]);
    std::copy(img.data(), img.data() + per, out.data() + i * per);
  }
  return out;
}

}  // namespace cssc
