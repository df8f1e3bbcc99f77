#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "cssc/data.hpp"
#include "cssc/error.hpp"
#include "cssc/image.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace cssc;
namespace fs = std::filesystem;

namespace {

fs::path write_text(const fs::path& dir, const std::string& name, const std::string& text) {
  const fs::path p = dir / name;
  std::ofstream(p) << text;
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("manifest remaps train identities to contiguous labels") {
  testing::TempDir dir("manifest");
  const auto p = write_text(dir.path(), "m.csv",
                            "path,identity,camera,clothing,split\n"
                            "a.png,5,0,0,train\n"
                            "b.png,5,1,1,train\n"
                            "c.png,9,0,0,train\n");
  const Manifest m = load_manifest(p);
  CHECK(m.num_identities == 2);
  REQUIRE(m.samples.size() == 3);
  CHECK(m.samples[0].identity == 0);
  CHECK(m.samples[1].identity == 0);
  CHECK(m.samples[2].identity == 1);
  CHECK(m.samples[2].raw_identity == 9);
}

TEST_CASE("manifest errors") {
  testing::TempDir dir("manifest_err");
  SUBCASE("empty file") {
    const auto p = write_text(dir.path(), "e.csv", "");
    CHECK(error_of([&] { load_manifest(p); }).find("empty manifest") != std::string::npos);
  }
  SUBCASE("row without its clothing field") {
    const auto p = write_text(dir.path(), "c.csv",
                              "path,identity,camera,split,clothing\n"
                              "a.png,1,0,train,0\n"
                              "b.png,1,1,train\n");
    const std::string msg = error_of([&] { load_manifest(p); });
    CHECK(msg.find("clothing") != std::string::npos);
    CHECK(msg.find("line 3") != std::string::npos);
  }
  SUBCASE("header without a required column") {
    const auto p = write_text(dir.path(), "h.csv", "path,identity,split\na.png,1,train\n");
    CHECK(error_of([&] { load_manifest(p); }).find("camera") != std::string::npos);
  }
  SUBCASE("duplicate rows") {
    const auto p = write_text(dir.path(), "d.csv", "path,identity,camera,split\na.png,1,0,train\na.png,1,0,train\n");
    CHECK_THROWS_AS(load_manifest(p), ValidationError);
  }
  SUBCASE("clothing column may be absent entirely") {
    const auto p = write_text(dir.path(), "n.csv", "path,identity,camera,split\na.png,1,0,query\n");
    const Manifest m = load_manifest(p);
    CHECK_FALSE(m.has_clothing);
    CHECK_FALSE(m.samples[0].clothing.has_value());
  }
}

TEST_CASE("manifest round trip") {
  testing::TempDir dir("roundtrip");
  const auto p = write_text(dir.path(), "m.csv",
                            "# source=synthetic\n"
                            "split,path,camera,identity,clothing\n"
                            "query,q/1.png,1,42,2\n"
                            "train,t/2.png,0,17,0\n"
                            "gallery,g/1.png,0,42,1\n"
                            "train,t/1.png,1,3,1\n");
  const Manifest a = load_manifest(p);
  write_manifest(dir.path() / "copy.csv", a);
  const Manifest b = load_manifest(dir.path() / "copy.csv");
  CHECK(a.samples == b.samples);
  CHECK(a.num_identities == b.num_identities);
  CHECK(a.source == b.source);
  CHECK(a.train_label_map == b.train_label_map);
  CHECK(a.source == ManifestSource::synthetic);
}

TEST_CASE("synthetic dataset layout") {
  testing::TempDir dir("synth");
  const SynthSpec spec;
  const Manifest m = generate_synthetic(spec, dir.path());
  std::set<std::string> files;
  for (const auto& s : m.samples) files.insert(s.image_path);
  CHECK(files.size() == 240);
  CHECK(m.num_identities == 20);

  // Query rows: one clothing per identity, never seen in training.
  std::map<int, std::set<int>> query_clothes, train_clothes;
  for (const auto& s : m.samples) {
    if (s.split == Split::query) query_clothes[s.raw_identity].insert(*s.clothing);
    if (s.split == Split::train) train_clothes[s.raw_identity].insert(*s.clothing);
  }
  CHECK(query_clothes.size() == 20);
  for (const auto& [id, clothes] : query_clothes) {
    CHECK(clothes.size() == 1);
    CHECK(train_clothes[id].count(*clothes.begin()) == 0);
  }
  for (const auto& s : m.samples) CHECK(fs::exists(m.resolve(s)));
}

TEST_CASE("synthetic generation is byte-identical for a fixed seed") {
  testing::TempDir a("synth_a"), b("synth_b");
  SynthSpec spec;
  spec.num_identities = 4;
  generate_synthetic(spec, a.path());
  generate_synthetic(spec, b.path());
  CHECK(file_bytes(a.path() / "manifest.csv") == file_bytes(b.path() / "manifest.csv"));
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(a.path() / "images")) {
    CHECK(file_bytes(e.path()) == file_bytes(b.path() / "images" / e.path().filename()));
    ++n;
  }
  CHECK(n == 48);
}

TEST_CASE("synthetic identity lives in geometry and stamp, clothing in torso color") {
  const SynthSpec spec;
  const SyntheticRenderer r(spec);
  for (int id = 0; id < spec.num_identities; ++id) {
    // Images 0 and 2 share a camera, so translation and brightness match.
    const RenderedImage x = r.render(id, 0, 0);
    const RenderedImage y = r.render(id, 1, 2);
    REQUIRE(x.regions == y.regions);
    bool torso_differs = false;
    const std::size_t w = static_cast<std::size_t>(spec.image_width);
    for (std::size_t p = 0; p < x.regions.size(); ++p) {
      const std::size_t row = p / w, col = p % w;
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t i = (row * w + col) * 3 + c;
        const double a = x.image[i], b = y.image[i];
        if (x.regions[p] == Region::torso) torso_differs |= std::abs(a - b) > 0.1;
        if (x.regions[p] == Region::body || x.regions[p] == Region::stamp) REQUIRE(a == b);
      }
    }
    CHECK(torso_differs);
  }
}

TEST_CASE("synthetic silhouettes are shared across clothing and camera") {
  const SynthSpec spec;
  const SyntheticRenderer r(spec);
  std::set<std::vector<std::uint8_t>> distinct;
  for (int id = 0; id < spec.num_identities; ++id) {
    const auto sil = r.silhouette(id);
    distinct.insert(sil);
    for (int clothing = 0; clothing < spec.clothes_per_identity; ++clothing)
      for (int k = 0; k < spec.images_per_clothing; ++k) {
        // Undo the camera translation and compare the person layer.
        const RenderedImage img = r.render(id, clothing, k);
        const CameraEffect& cam = r.camera(r.camera_of(k));
        for (int y = 0; y < spec.image_height; ++y)
          for (int x = 0; x < spec.image_width; ++x) {
            const int sy = y - cam.shift_y, sx = x - cam.shift_x;
            if (sy < 0 || sx < 0 || sy >= spec.image_height || sx >= spec.image_width) continue;
            const std::size_t p = static_cast<std::size_t>(y * spec.image_width + x);
            const std::size_t q = static_cast<std::size_t>(sy * spec.image_width + sx);
            REQUIRE(img.regions[p] == sil[q]);
          }
      }
  }
  CHECK(distinct.size() == static_cast<std::size_t>(spec.num_identities));
}

TEST_CASE("augmentation with everything off is the identity") {
  const Tensor img = testing::random_tensor({16, 8, 3}, 3, 0.0, 1.0);
  Rng rng(1);
  for (int t = 0; t < 20; ++t) CHECK(augment_train(img, AugConfig::none(), rng) == img);
}

TEST_CASE("augmentation flip") {
  const Tensor img = testing::random_tensor({16, 8, 3}, 4, 0.0, 1.0);
  AugConfig cfg = AugConfig::none();
  cfg.flip_probability = 1.0;
  Rng rng(2);
  const Tensor out = augment_train(img, cfg, rng);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 8; ++c)
      for (std::size_t k = 0; k < 3; ++k) CHECK(out[(r * 8 + c) * 3 + k] == img[(r * 8 + (7 - c)) * 3 + k]);
}

TEST_CASE("random erasing changes exactly one rectangle within the configured ranges") {
  const std::size_t H = 64, W = 32;
  // Constant source: noise fill can never reproduce it exactly.
  const Tensor img({H, W, 3}, 0.5);
  AugConfig cfg = AugConfig::none();
  cfg.erase_probability = 1.0;
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    AugTrace tr;
    const Tensor out = augment_train(img, cfg, rng, &tr);
    REQUIRE(tr.erased);
    std::size_t top = H, bottom = 0, left = W, right = 0, changed = 0;
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        bool diff = false;
        for (std::size_t k = 0; k < 3; ++k) diff |= out[(r * W + c) * 3 + k] != img[(r * W + c) * 3 + k];
        if (!diff) continue;
        ++changed;
        top = std::min(top, r), bottom = std::max(bottom, r);
        left = std::min(left, c), right = std::max(right, c);
      }
    REQUIRE(changed > 0);
    const std::size_t h = bottom - top + 1, w = right - left + 1;
    REQUIRE(changed == h * w);  // a filled axis-aligned rectangle
    CHECK(static_cast<int>(h) == tr.erase_height);
    CHECK(static_cast<int>(w) == tr.erase_width);
    const double area = static_cast<double>(h * w) / static_cast<double>(H * W);
    const double aspect = static_cast<double>(h) / static_cast<double>(w);
    CHECK(area >= cfg.erase_area_range.first);
    CHECK(area <= cfg.erase_area_range.second);
    CHECK(aspect >= cfg.erase_aspect_range.first);
    CHECK(aspect <= cfg.erase_aspect_range.second);
  }
}

TEST_CASE("augmentation preserves shape and range over random configurations") {
  Rng pick(99);
  for (int t = 0; t < 200; ++t) {
    AugConfig cfg;
    cfg.flip_probability = pick.uniform();
    cfg.pad_pixels = static_cast<int>(pick.below(8));
    cfg.erase_probability = pick.uniform();
    const double a = pick.uniform(0.01, 0.3);
    cfg.erase_area_range = {a, a + pick.uniform(0.0, 0.3)};
    const double s = pick.uniform(0.3, 1.0);
    cfg.erase_aspect_range = {s, s + pick.uniform(0.0, 2.0)};
    cfg.validate();
    const Tensor img = testing::random_tensor({32, 16, 3}, 1000 + static_cast<std::uint64_t>(t), 0.0, 1.0);
    Rng rng(static_cast<std::uint64_t>(t));
    const Tensor out = augment_train(img, cfg, rng);
    REQUIRE(out.shape() == img.shape());
    for (double v : out.values()) REQUIRE((v >= 0.0 && v <= 1.0));
  }
}

TEST_CASE("augmentation rejects padding larger than the image") {
  AugConfig cfg = AugConfig::none();
  cfg.pad_pixels = 8;
  Rng rng(0);
  CHECK_THROWS(augment_train(Tensor({8, 16, 3}), cfg, rng));
}

TEST_CASE("png round trip is lossless for 8-bit values") {
  testing::TempDir dir("png");
  Tensor img({5, 3, 3});
  Rng rng(5);
  for (double& v : img.values()) v = static_cast<double>(rng.below(256)) / 255.0;
  write_png(dir.path() / "x.png", img);
  const Tensor back = read_image(dir.path() / "x.png");
  CHECK(max_abs_diff(back, img) < 1e-12);
}
