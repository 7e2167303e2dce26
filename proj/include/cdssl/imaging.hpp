#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cdssl/common.hpp"

namespace cdssl::imaging {

inline constexpr int kSliceSize = 224;

enum class Orientation : uint32_t { RAS_PLUS = 0, OTHER = 1 };

/// 3D scalar grid, row-major over (x, y, z) with z fastest. Axial slices are
/// planes of constant z.
struct VolumeGrid {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  Orientation orientation = Orientation::RAS_PLUS;
  std::vector<double> data;

  VolumeGrid() = default;
  VolumeGrid(std::array<int, 3> d, std::array<double, 3> s, Orientation o = Orientation::RAS_PLUS);

  size_t index(int x, int y, int z) const {
    return (static_cast<size_t>(x) * dims[1] + y) * dims[2] + z;
  }
  double& at(int x, int y, int z) { return data[index(x, y, z)]; }
  double at(int x, int y, int z) const { return data[index(x, y, z)]; }
  size_t voxels() const { return data.size(); }

  /// Throws unless all dims >= 1, spacings > 0 and the buffer matches.
  void validate() const;
};

struct MaskGrid {
  std::array<int, 3> dims{0, 0, 0};
  std::vector<uint8_t> data;

  size_t count() const;
};

struct SliceImage {
  Image2D image;
  int channels = 1;
  std::string subject_id;
  int slice_index = 0;
};

enum class SliceMode { center, five };

struct SliceStack {
  std::vector<SliceImage> slices;
  SliceMode mode = SliceMode::center;
};

std::string to_string(SliceMode m);
SliceMode slice_mode_from_string(const std::string& s);

/// Synthetic head-like phantom. The interior cavity radius rho (mm) carries
/// the planted signal: label = clamp(signal_coef * rho + N(0, label_noise_sd), 0, 18).
struct PhantomParams {
  std::array<int, 3> dims{40, 40, 12};
  std::array<double, 3> spacing_mm{4.0, 4.0, 4.0};
  double head_radius_frac = 0.42;   // in-plane head semi-axis as a fraction of the in-plane extent
  double rho_min_mm = 6.0;
  double rho_max_mm = 24.0;
  double signal_coef = 0.6;
  double label_noise_sd = 1.0;
  double image_noise_sd = 0.02;
  double texture_amplitude = 0.06;
  double structure_scale_mm = 18.0;  // wavelength of the tissue texture
  double other_orientation_prob = 0.25;
};

struct PhantomSample {
  VolumeGrid volume;
  double label = 0.0;
  double rho_mm = 0.0;
};

PhantomSample synthesize_volume(const PhantomParams& params, uint64_t seed);

/// Reorients to RAS+, resamples trilinearly to 1 mm, rescales to [0,1] and
/// z-scores with brain-mask statistics.
VolumeGrid preprocess_volume(const VolumeGrid& v);

/// Reorientation and 1 mm trilinear resampling only.
VolumeGrid reorient_ras(const VolumeGrid& v);
VolumeGrid resample_isotropic(const VolumeGrid& v);

/// Otsu threshold over a 256-bin histogram.
double otsu_threshold(const std::vector<double>& values);

/// Largest 6-connected component of voxels above the Otsu threshold.
MaskGrid compute_brain_mask(const VolumeGrid& v);

/// Axial slice indices for a mode and depth; throws when depth is too small.
std::vector<int> slice_indices(int depth, SliceMode mode);

SliceStack extract_slices(const VolumeGrid& v, SliceMode mode, const std::string& subject_id = {});

/// Centered crop for oversized axes, symmetric zero pad (extra pixel before)
/// for undersized axes.
Image2D crop_or_pad(const Image2D& img, int rows = kSliceSize, int cols = kSliceSize);

/// Generic "natural image" stand-in: random disks, rings, rectangles and
/// gradients on a kSliceSize canvas. `label` receives the object count.
Image2D synthesize_generic_image(uint64_t seed, double* label = nullptr);

/// Per-image z-score (no-op for constant images).
void standardize_image(Image2D& img);

/// Average pool by an integer factor (image dims must be divisible).
Image2D average_pool(const Image2D& img, int factor);

// Binary volume container: "CDVL" magic, u32 version, 3 x i32 dims,
// 3 x f64 spacing, u32 orientation, then float32 voxels (row-major),
// all little-endian. A 2D image uses dims (rows, cols, 1).
void write_volume(const std::filesystem::path& path, const VolumeGrid& v);
VolumeGrid read_volume(const std::filesystem::path& path);
void write_image_f32(const std::filesystem::path& path, const Image2D& img);
Image2D read_image_f32(const std::filesystem::path& path);

/// 8-bit binary PGM with min-max scaling.
void write_pgm(const std::filesystem::path& path, const Image2D& img);

}  // namespace cdssl::imaging
