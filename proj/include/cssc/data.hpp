#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cssc/random.hpp"
#include "cssc/tensor.hpp"

namespace cssc {

enum class Split { train, query, gallery };
enum class ManifestSource { synthetic, external };

std::string split_name(Split split);
Split parse_split(const std::string& text);

struct Sample {
  std::string image_path;  // relative to the manifest directory
  // Contiguous 0-based label for train rows; the raw label otherwise.
  int identity = 0;
  int raw_identity = 0;
  int camera = 0;
  std::optional<int> clothing;
  Split split = Split::train;

  bool operator==(const Sample&) const = default;
};

struct Manifest {
  std::vector<Sample> samples;
  std::size_t num_identities = 0;
  ManifestSource source = ManifestSource::external;
  std::filesystem::path root;
  std::map<int, int> train_label_map;  // raw -> contiguous
  bool has_clothing = true;

  std::vector<std::size_t> indices(Split split) const;
  std::vector<Sample> subset(Split split) const;
  std::filesystem::path resolve(const Sample& s) const { return root / s.image_path; }

  bool operator==(const Manifest&) const = default;
};

// Sorts rows by (path, split), remaps train identities and fills
// num_identities. Validates uniqueness of (path, split).
void finalize_manifest(Manifest& m);
Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& m);

struct SynthSpec {
  int num_identities = 20;
  int clothes_per_identity = 3;
  int images_per_clothing = 4;
  int image_height = 64;
  int image_width = 32;
  int num_cameras = 2;
  std::uint64_t seed = 7;

  void validate() const;
  int total_images() const { return num_identities * clothes_per_identity * images_per_clothing; }
};

// Pixel labels of the person layer.
enum Region : std::uint8_t { background = 0, body = 1, torso = 2, stamp = 3 };

struct SynthIdentity {
  double head_cx = 0, head_cy = 0, head_r = 0;
  double torso_cx = 0, torso_cy = 0, torso_rx = 0, torso_ry = 0;
  double leg_top = 0, leg_bottom = 0, leg_width = 0, leg_gap = 0;
  std::uint16_t stamp_bits = 0;  // row-major 4x4
  int stamp_top = 0, stamp_left = 0, stamp_cell = 2;
  std::vector<std::array<double, 3>> clothing_colors;
  int held_out_clothing = 0;
};

struct CameraEffect {
  double brightness = 0;
  int shift_x = 0, shift_y = 0;
};

struct RenderedImage {
  Tensor image;                       // (h, w, 3), quantized to 8 bits
  std::vector<std::uint8_t> regions;  // region of each output pixel after translation
};

// Deterministic renderer for the synthetic cloth-changing dataset. Identity
// lives in the silhouette geometry and the texture stamp; clothing only
// changes the torso color.
class SyntheticRenderer {
 public:
  explicit SyntheticRenderer(SynthSpec spec);

  const SynthSpec& spec() const { return spec_; }
  const SynthIdentity& identity(int id) const { return identities_.at(static_cast<std::size_t>(id)); }
  const CameraEffect& camera(int cam) const { return cameras_.at(static_cast<std::size_t>(cam)); }
  // Person-frame region map, identical for every image of the identity.
  std::vector<std::uint8_t> silhouette(int id) const;
  RenderedImage render(int id, int clothing, int image_index) const;
  int camera_of(int image_index) const { return image_index % spec_.num_cameras; }
  std::string file_name(int id, int clothing, int image_index) const;

  static constexpr std::array<double, 3> head_color{0.86, 0.70, 0.58};
  static constexpr std::array<double, 3> leg_color{0.22, 0.22, 0.30};
  static constexpr double stamp_on = 0.95, stamp_off = 0.05;

 private:
  SynthSpec spec_;
  std::vector<SynthIdentity> identities_;
  std::vector<CameraEffect> cameras_;
};

// Renders every image to out_dir/images and writes out_dir/manifest.csv.
Manifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir);

struct AugConfig {
  double flip_probability = 0.5;
  int pad_pixels = 10;
  double erase_probability = 0.5;
  std::pair<double, double> erase_area_range{0.02, 0.4};
  std::pair<double, double> erase_aspect_range{0.3, 3.33};

  void validate() const;
  static AugConfig none() { return {0.0, 0, 0.0, {0.02, 0.4}, {0.3, 3.33}}; }
};

struct AugTrace {
  bool flipped = false;
  int crop_top = 0, crop_left = 0;
  bool erased = false;
  int erase_top = 0, erase_left = 0, erase_height = 0, erase_width = 0;
};

Tensor augment_train(const Tensor& image, const AugConfig& cfg, Rng& rng, AugTrace* trace = nullptr);

// Loads manifest images resized to the model input; keeps a decoded cache.
class ImageStore {
 public:
  ImageStore(const Manifest& manifest, std::size_t height, std::size_t width);
  const Tensor& get(std::size_t sample_index);
  // Stacks the given samples into an (n, h, w, 3) batch.
  Tensor batch(const std::vector<std::size_t>& sample_indices);

 private:
  const Manifest& manifest_;
  std::size_t height_, width_;
  std::vector<std::optional<Tensor>> cache_;
};

}  // namespace cssc
