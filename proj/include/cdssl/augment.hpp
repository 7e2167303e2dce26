#pragma once

#include <cstdint>

#include <json.hpp>

#include "cdssl/common.hpp"
#include "cdssl/imaging.hpp"

namespace cdssl::ssl {

/// Grayscale-safe augmentation recipe. Blur sigma is in pixels of the image
/// the policy is applied to.
struct AugmentPolicy {
  bool crop = true;
  double crop_scale_min = 0.6;
  double crop_scale_max = 1.0;
  double hflip_prob = 0.5;
  double blur_prob = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
  double jitter = 0.4;  // brightness shift and contrast factor range, +/-

  static AugmentPolicy identity();
  static AugmentPolicy crop_only(double scale_min, double scale_max);
};

nlohmann::json to_json(const AugmentPolicy& p);
AugmentPolicy augment_policy_from_json(const nlohmann::json& j);

struct ViewPair {
  Image2D view_a;
  Image2D view_b;
  uint64_t policy_seed = 0;
};

/// One stochastic transform of `img`; output has the input's shape.
Image2D augment(const Image2D& img, const AugmentPolicy& policy, Rng& rng);

/// Two independent transforms of the same image, deterministic in `seed`.
ViewPair make_view_pair(const Image2D& img, const AugmentPolicy& policy, uint64_t seed);
ViewPair make_view_pair(const imaging::SliceImage& img, const AugmentPolicy& policy, uint64_t seed);

/// Separable Gaussian blur with edge clamping.
Image2D gaussian_blur(const Image2D& img, double sigma);

/// Bilinear resample of the window [r0, r0+h) x [c0, c0+w) to out_rows x out_cols.
Image2D resize_window(const Image2D& img, double r0, double c0, double h, double w, int out_rows, int out_cols);

}  // namespace cdssl::ssl
