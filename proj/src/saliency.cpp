#include "cdssl/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace cdssl::saliency {

Image2D cam_from_activations(const nn::Tensor& act, const nn::Tensor& grad) {
  if (act.c != grad.c || act.h != grad.h || act.w != grad.w) throw std::invalid_argument("activation/gradient shape mismatch");
  const Eigen::Index p = static_cast<Eigen::Index>(act.h) * act.w;
  Eigen::Map<const nn::RowMatrix> a(act.data.data(), act.c, p);
  Eigen::Map<const nn::RowMatrix> g(grad.data.data(), grad.c, p);
  const Eigen::VectorXd weights = g.rowwise().mean();
  const Eigen::RowVectorXd cam = (weights.transpose() * a).cwiseMax(0.0);
  Image2D out(act.h, act.w);
  for (Eigen::Index i = 0; i < p; ++i) out.data[static_cast<size_t>(i)] = cam[i];
  return out;
}

Image2D upsample_bilinear(const Image2D& img, int rows, int cols) {
  Image2D out(rows, cols);
  const double sr = static_cast<double>(img.rows) / rows, sc = static_cast<double>(img.cols) / cols;
  for (int r = 0; r < rows; ++r) {
    const double y = std::clamp((r + 0.5) * sr - 0.5, 0.0, img.rows - 1.0);
    const int y0 = static_cast<int>(std::floor(y)), y1 = std::min(y0 + 1, img.rows - 1);
    const double fy = y - y0;
    for (int c = 0; c < cols; ++c) {
      const double x = std::clamp((c + 0.5) * sc - 0.5, 0.0, img.cols - 1.0);
      const int x0 = static_cast<int>(std::floor(x)), x1 = std::min(x0 + 1, img.cols - 1);
      const double fx = x - x0;
      out.at(r, c) = (img.at(y0, x0) * (1 - fx) + img.at(y0, x1) * fx) * (1 - fy) +
                     (img.at(y1, x0) * (1 - fx) + img.at(y1, x1) * fx) * fy;
    }
  }
  return out;
}

std::string default_layer(const regress::RegressorModel& model) { return model.encoder.layer_tags().back(); }

Heatmap grad_cam(const regress::RegressorModel& model, const imaging::SliceImage& img, const std::string& layer) {
  const int li = model.encoder.layer_index(layer);
  if (li < 0) throw std::invalid_argument("layer '" + layer + "' is not a spatial block of the encoder");

  nn::Encoder enc = model.encoder;  // backward needs a mutable encoder; gradients are not accumulated
  nn::Encoder::Trace trace;
  enc.forward(enc.prepare_input(enc.stem(img.image)), &trace);
  const Eigen::Map<const nn::RowMatrix> w(model.head.weight().value.data(), 1, model.head.in_dim());
  const nn::VectorXd dfeat = w.transpose();
  std::vector<nn::Tensor> act_grads;
  enc.backward(trace, dfeat, &act_grads, false);

  const Image2D cam = cam_from_activations(trace.acts[li], act_grads[li]);
  Heatmap h;
  h.layer_tag = layer;
  h.data = upsample_bilinear(cam, img.image.rows, img.image.cols);
  const double mx = *std::max_element(h.data.data.begin(), h.data.data.end());
  if (mx > 0.0)
    for (double& v : h.data.data) v = std::clamp(v / mx, 0.0, 1.0);
  else
    std::fill(h.data.data.begin(), h.data.data.end(), 0.0);
  return h;
}

Rgb colormap(double v) {
  v = std::clamp(v, 0.0, 1.0);
  auto ch = [](double x) { return static_cast<uint8_t>(std::lround(255.0 * std::clamp(x, 0.0, 1.0))); };
  return {ch(1.5 - std::abs(4.0 * v - 3.0)), ch(1.5 - std::abs(4.0 * v - 2.0)), ch(1.5 - std::abs(4.0 * v - 1.0))};
}

RgbImage render_overlay(const imaging::SliceImage& img, const Heatmap& map) {
  if (img.image.rows != map.data.rows || img.image.cols != map.data.cols)
    throw std::invalid_argument("overlay shape mismatch: slice " + std::to_string(img.image.rows) + "x" +
                                std::to_string(img.image.cols) + ", heatmap " + std::to_string(map.data.rows) + "x" +
                                std::to_string(map.data.cols));
  RgbImage out{img.image.rows, img.image.cols, std::vector<uint8_t>(img.image.size() * 3)};
  auto [lo_it, hi_it] = std::minmax_element(img.image.data.begin(), img.image.data.end());
  const double lo = *lo_it, hi = *hi_it;
  for (size_t i = 0; i < img.image.size(); ++i) {
    const double gray = hi > lo ? 255.0 * (img.image.data[i] - lo) / (hi - lo) : 0.0;
    const Rgb c = colormap(map.data.data[i]);
    out.pixels[3 * i + 0] = static_cast<uint8_t>(std::lround(0.5 * gray + 0.5 * c.r));
    out.pixels[3 * i + 1] = static_cast<uint8_t>(std::lround(0.5 * gray + 0.5 * c.g));
    out.pixels[3 * i + 2] = static_cast<uint8_t>(std::lround(0.5 * gray + 0.5 * c.b));
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image: " + path.string());
  out << "P6\n" << img.cols << ' ' << img.rows << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

}  // namespace cdssl::saliency
