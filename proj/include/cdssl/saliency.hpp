#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cdssl/imaging.hpp"
#include "cdssl/nn.hpp"
#include "cdssl/regress.hpp"

namespace cdssl::saliency {

struct Heatmap {
  Image2D data;  // values in [0,1]
  std::string layer_tag;
};

struct RgbImage {
  int rows = 0, cols = 0;
  std::vector<uint8_t> pixels;  // interleaved RGB

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// ReLU(sum_k w_k A_k) with w_k the spatial mean of the gradient of channel k.
Image2D cam_from_activations(const nn::Tensor& activations, const nn::Tensor& gradients);

/// Bilinear resize (half-pixel centers).
Image2D upsample_bilinear(const Image2D& img, int rows, int cols);

/// GradCAM for the scalar regression output at the given block ("conv1".."convN").
Heatmap grad_cam(const regress::RegressorModel& model, const imaging::SliceImage& img, const std::string& layer);

/// Default layer: the last spatial block.
std::string default_layer(const regress::RegressorModel& model);

struct Rgb {
  uint8_t r, g, b;
};

/// Blue-to-red colormap on [0,1].
Rgb colormap(double v);

/// Colormap overlay alpha-blended (alpha = 0.5) onto the min-max scaled slice.
RgbImage render_overlay(const imaging::SliceImage& img, const Heatmap& map);

void write_ppm(const std::filesystem::path& path, const RgbImage& img);

}  // namespace cdssl::saliency
