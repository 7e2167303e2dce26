#include "cdssl/augment.hpp"

#include <algorithm>
#include <cmath>

namespace cdssl::ssl {

AugmentPolicy AugmentPolicy::identity() {
  AugmentPolicy p;
  p.crop = false;
  p.hflip_prob = 0.0;
  p.blur_prob = 0.0;
  p.jitter = 0.0;
  return p;
}

AugmentPolicy AugmentPolicy::crop_only(double scale_min, double scale_max) {
  AugmentPolicy p = identity();
  p.crop = true;
  p.crop_scale_min = scale_min;
  p.crop_scale_max = scale_max;
  return p;
}

nlohmann::json to_json(const AugmentPolicy& p) {
  return {{"crop", p.crop},
          {"crop_scale_min", p.crop_scale_min},
          {"crop_scale_max", p.crop_scale_max},
          {"hflip_prob", p.hflip_prob},
          {"blur_prob", p.blur_prob},
          {"blur_sigma_min", p.blur_sigma_min},
          {"blur_sigma_max", p.blur_sigma_max},
          {"jitter", p.jitter}};
}

AugmentPolicy augment_policy_from_json(const nlohmann::json& j) {
  AugmentPolicy p;
  p.crop = j.value("crop", p.crop);
  p.crop_scale_min = j.value("crop_scale_min", p.crop_scale_min);
  p.crop_scale_max = j.value("crop_scale_max", p.crop_scale_max);
  p.hflip_prob = j.value("hflip_prob", p.hflip_prob);
  p.blur_prob = j.value("blur_prob", p.blur_prob);
  p.blur_sigma_min = j.value("blur_sigma_min", p.blur_sigma_min);
  p.blur_sigma_max = j.value("blur_sigma_max", p.blur_sigma_max);
  p.jitter = j.value("jitter", p.jitter);
  return p;
}

Image2D resize_window(const Image2D& img, double r0, double c0, double h, double w, int out_rows, int out_cols) {
  Image2D out(out_rows, out_cols);
  const double sr = h / out_rows, sc = w / out_cols;
  for (int r = 0; r < out_rows; ++r) {
    const double y = std::clamp(r0 + (r + 0.5) * sr - 0.5, 0.0, img.rows - 1.0);
    const int y0 = static_cast<int>(std::floor(y));
    const int y1 = std::min(y0 + 1, img.rows - 1);
    const double fy = y - y0;
    for (int c = 0; c < out_cols; ++c) {
      const double x = std::clamp(c0 + (c + 0.5) * sc - 0.5, 0.0, img.cols - 1.0);
      const int x0 = static_cast<int>(std::floor(x));
      const int x1 = std::min(x0 + 1, img.cols - 1);
      const double fx = x - x0;
      const double top = img.at(y0, x0) * (1 - fx) + img.at(y0, x1) * fx;
      const double bot = img.at(y1, x0) * (1 - fx) + img.at(y1, x1) * fx;
      out.at(r, c) = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

Image2D gaussian_blur(const Image2D& img, double sigma) {
  if (!(sigma > 0.0)) return img;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;

  Image2D tmp(img.rows, img.cols), out(img.rows, img.cols);
  for (int r = 0; r < img.rows; ++r)
    for (int c = 0; c < img.cols; ++c) {
      double s = 0.0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * img.at(r, std::clamp(c + i, 0, img.cols - 1));
      tmp.at(r, c) = s;
    }
  for (int r = 0; r < img.rows; ++r)
    for (int c = 0; c < img.cols; ++c) {
      double s = 0.0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp.at(std::clamp(r + i, 0, img.rows - 1), c);
      out.at(r, c) = s;
    }
  return out;
}

Image2D augment(const Image2D& img, const AugmentPolicy& p, Rng& rng) {
  Image2D out = img;
  if (p.crop) {
    const double area = uniform(rng, p.crop_scale_min, p.crop_scale_max);
    const double log_ratio = uniform(rng, std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    const double ratio = std::exp(log_ratio);
    const double h = std::min<double>(img.rows, std::sqrt(area / ratio) * img.rows);
    const double w = std::min<double>(img.cols, std::sqrt(area * ratio) * img.cols);
    const double r0 = uniform(rng, 0.0, img.rows - h);
    const double c0 = uniform(rng, 0.0, img.cols - w);
    out = resize_window(img, r0, c0, h, w, img.rows, img.cols);
  }
  if (p.hflip_prob > 0.0 && uniform(rng, 0.0, 1.0) < p.hflip_prob) {
    for (int r = 0; r < out.rows; ++r)
      std::reverse(out.data.begin() + static_cast<long>(r) * out.cols, out.data.begin() + static_cast<long>(r + 1) * out.cols);
  }
  if (p.blur_prob > 0.0 && uniform(rng, 0.0, 1.0) < p.blur_prob)
    out = gaussian_blur(out, uniform(rng, p.blur_sigma_min, p.blur_sigma_max));
  if (p.jitter > 0.0) {
    const double brightness = uniform(rng, -p.jitter, p.jitter);
    const double contrast = uniform(rng, 1.0 - p.jitter, 1.0 + p.jitter);
    double mean = 0.0;
    for (double v : out.data) mean += v;
    mean /= static_cast<double>(out.size());
    for (double& v : out.data) v = (v - mean) * contrast + mean + brightness;
  }
  return out;
}

ViewPair make_view_pair(const Image2D& img, const AugmentPolicy& policy, uint64_t seed) {
  ViewPair pair;
  pair.policy_seed = seed;
  Rng rng_a(derive_seed(seed, 0xA));
  Rng rng_b(derive_seed(seed, 0xB));
  pair.view_a = augment(img, policy, rng_a);
  pair.view_b = augment(img, policy, rng_b);
  return pair;
}

ViewPair make_view_pair(const imaging::SliceImage& img, const AugmentPolicy& policy, uint64_t seed) {
  return make_view_pair(img.image, policy, seed);
}

}  // namespace cdssl::ssl
