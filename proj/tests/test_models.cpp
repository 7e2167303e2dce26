#include <doctest.h>

#include <cmath>
#include <numeric>

#include "cdssl/augment.hpp"
#include "cdssl/checkpoint.hpp"
#include "cdssl/regress.hpp"
#include "cdssl/saliency.hpp"
#include "cdssl/ssl.hpp"
#include "test_util.hpp"

using namespace cdssl;

namespace {

nn::EncoderSpec tiny_spec() {
  nn::EncoderSpec s;
  s.input_size = 32;
  s.input_pool = 2;
  s.widths = {4, 6};
  return s;
}

Image2D random_image(Rng& rng, int n, double scale = 1.0) {
  Image2D img(n, n);
  for (double& x : img.data) x = normal(rng, 0.0, scale);
  return img;
}

// Images whose label is their brightness.
ssl::SliceSet brightness_set(int count, uint64_t seed, int n = 16) {
  Rng rng(seed);
  ssl::SliceSet s;
  for (int i = 0; i < count; ++i) {
    const double a = uniform(rng, 0.0, 1.0);
    Image2D img(n, n);
    for (double& x : img.data) x = a + normal(rng, 0.0, 0.05);
    s.images.push_back(img);
    s.labels.push_back(a);
    s.ids.push_back("s" + std::to_string(i));
  }
  return s;
}

ssl::SliceSet unlabeled(int count, uint64_t seed, int n = 16) {
  Rng rng(seed);
  ssl::SliceSet s;
  for (int i = 0; i < count; ++i) {
    s.images.push_back(random_image(rng, n));
    s.ids.push_back("u" + std::to_string(i));
  }
  return s;
}

ssl::SslConfig quick_ssl(ssl::Method m) {
  ssl::SslConfig c;
  c.method = m;
  c.epochs = 2;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  c.projection_dim = 8;
  c.hidden_dim = 16;
  c.prototypes = 6;
  return c;
}

double loss_of(const nn::Encoder& enc, const nn::Tensor& x, const nn::VectorXd& c) { return c.dot(enc.forward(x)); }

}  // namespace

TEST_CASE("encoder gradients match finite differences") {
  Rng rng(3);
  for (int t = 0; t < 3; ++t) {
    nn::Encoder enc(tiny_spec(), 100 + t);
    const nn::Tensor x = enc.prepare_input(random_image(rng, 16));
    nn::VectorXd c(enc.feature_dim());
    for (int i = 0; i < c.size(); ++i) c[i] = normal(rng);

    nn::Encoder::Trace trace;
    enc.forward(x, &trace);
    zero_grad(nn::param_ptrs(enc.params()));
    enc.backward(trace, c);

    for (auto& p : enc.params()) {
      nn::VectorXd fd(p.size());
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double keep = p.value[i], h = 1e-6;
        p.value[i] = keep + h;
        const double up = loss_of(enc, x, c);
        p.value[i] = keep - h;
        const double dn = loss_of(enc, x, c);
        p.value[i] = keep;
        fd[i] = (up - dn) / (2 * h);
      }
      const double rel = (fd - p.grad).norm() / std::max({fd.norm(), p.grad.norm(), 1e-8});
      CHECK_MESSAGE(rel < 1e-5, p.name);
    }
  }
}

TEST_CASE("three-channel stems accept single-channel data") {
  nn::EncoderSpec s3 = tiny_spec();
  s3.in_channels = 3;
  Checkpoint ck;
  ck.encoder_spec = s3;
  ck.encoder_weights = nn::Encoder(s3, 9).params();
  const auto enc3 = regress::init_backbone({regress::InitKind::ssl_checkpoint, ck}, tiny_spec(), 1);
  CHECK(enc3.spec().in_channels == 3);

  // Replicating the channel is the same as summing the stem weights over channels.
  nn::Encoder enc1(tiny_spec(), 0);
  enc1.params() = enc3.params();
  auto& w1 = enc1.params()[0];
  const auto& w3 = enc3.params()[0];
  const int cout = tiny_spec().widths[0];
  w1.shape = {cout, 9};
  w1.value.resize(cout * 9);
  w1.grad = nn::VectorXd::Zero(cout * 9);
  for (int o = 0; o < cout; ++o)
    for (int k = 0; k < 9; ++k) w1.value[o * 9 + k] = w3.value[o * 27 + k] + w3.value[o * 27 + 9 + k] + w3.value[o * 27 + 18 + k];

  Rng rng(4);
  const auto img = random_image(rng, 16);
  const auto f3 = enc3.forward(enc3.prepare_input(img)), f1 = enc1.forward(enc1.prepare_input(img));
  CHECK((f3 - f1).norm() < 1e-10);

  ck.encoder_spec.in_channels = 2;
  CHECK_THROWS(regress::init_backbone({regress::InitKind::ssl_checkpoint, ck}, tiny_spec(), 1));
  CHECK_THROWS(regress::init_backbone({regress::InitKind::ssl_checkpoint, std::nullopt}, tiny_spec(), 1));
}

TEST_CASE("augmentation") {
  Rng rng(5);
  const auto img = random_image(rng, 16);
  Rng r1(1);
  CHECK(ssl::augment(img, ssl::AugmentPolicy::identity(), r1) == img);

  const ssl::AugmentPolicy pol;
  const auto a = ssl::make_view_pair(img, pol, 77), b = ssl::make_view_pair(img, pol, 77);
  CHECK(a.view_a == b.view_a);
  CHECK(a.view_b == b.view_b);
  CHECK(a.view_a != a.view_b);
  CHECK(a.view_a.rows == 16);
  CHECK(a.view_a.cols == 16);

  Rng r2(2);
  const auto cropped = ssl::augment(img, ssl::AugmentPolicy::crop_only(0.5, 0.5), r2);
  CHECK(cropped.rows == 16);
  CHECK(cropped.cols == 16);
  for (double v : ssl::gaussian_blur(Image2D(5, 5, 2.0), 1.3).data) CHECK(std::abs(v - 2.0) < 1e-12);
  CHECK(ssl::resize_window(img, 0, 0, 16, 16, 16, 16) == img);
}

TEST_CASE("ssl pretraining") {
  const auto train = unlabeled(24, 1), val = unlabeled(8, 2);
  for (auto m : {ssl::Method::simclr, ssl::Method::barlow_twins, ssl::Method::swav}) {
    auto cfg = quick_ssl(m);
    const ssl::StageInfo a{"generic-" + ssl::method_tag(m), "generic", "h1"};
    const auto c1 = ssl::pretrain(std::nullopt, tiny_spec(), train, val, cfg, a, 11);
    const auto c2 = ssl::pretrain(std::nullopt, tiny_spec(), train, val, cfg, a, 11);
    CHECK(c1.val_loss == c2.val_loss);
    CHECK(nn::serialize_params(c1.encoder_weights) == nn::serialize_params(c2.encoder_weights));
    CHECK(std::isfinite(c1.val_loss));

    cfg.epochs = 0;
    const ssl::StageInfo b{"indomain-simclr", "indomain", "h2"};
    const auto c3 = ssl::pretrain(c1, tiny_spec(), train, val, cfg, b, 12);
    CHECK(nn::serialize_params(c3.encoder_weights) == nn::serialize_params(c1.encoder_weights));
    CHECK(c3.provenance_names() == std::vector<std::string>{a.stage_name, "indomain-simclr"});
  }
  CHECK_THROWS(ssl::pretrain(std::nullopt, tiny_spec(), unlabeled(4, 1), unlabeled(1, 2), quick_ssl(ssl::Method::simclr),
                             {"x", "generic", ""}, 1));
}

TEST_CASE("regression fine-tuning") {
  const auto train = brightness_set(64, 1), val = brightness_set(16, 2);
  regress::FinetuneConfig cfg;
  cfg.epochs = 60;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 8;
  const auto enc = regress::init_backbone({}, tiny_spec(), 3);
  const auto model = regress::finetune_regressor(enc, train, val, cfg, 5);
  CHECK(model.best_val_mse < 1e-2);
  CHECK(model.training_log.size() == 61);
  CHECK(model.training_log[0].epoch == 0);

  const auto again = regress::finetune_regressor(enc, train, val, cfg, 5);
  CHECK(again.best_val_mse == model.best_val_mse);
  CHECK(regress::predict_inputs(again, val.images) == regress::predict_inputs(model, val.images));

  // predictions do not depend on how inputs are grouped
  const auto all = regress::predict_inputs(model, val.images);
  for (size_t i = 0; i < val.size(); ++i)
    CHECK(regress::predict_inputs(model, {val.images[i]})[0] == all[i]);
  CHECK(regress::predict_inputs(model, {}).empty());

  auto one = cfg;
  one.epochs = 1;
  one.learning_rate = 1e-3;
  const auto step = regress::finetune_regressor(enc, train, val, one, 5);
  CHECK(step.training_log[1].val_mse < step.training_log[0].val_mse);

  auto zero = cfg;
  zero.epochs = 0;
  const auto idle = regress::finetune_regressor(enc, train, val, zero, 5);
  CHECK(idle.empty_trained);
  CHECK(nn::serialize_params(idle.encoder.params()) == nn::serialize_params(enc.params()));
  // the head starts at the mean label
  const double mean = std::accumulate(train.labels.begin(), train.labels.end(), 0.0) / train.size();
  CHECK(idle.head.bias().value[0] == doctest::Approx(mean).epsilon(1e-12));

  const auto sub = regress::aggregate_by_subject({"a", "a", "a", "a", "a", "b"}, {1, 2, 3, 4, 5, 9});
  CHECK(sub.at("a") == 3.0);
  CHECK(sub.at("b") == 9.0);
  CHECK(regress::aggregate_by_subject({}, {}).empty());

  Eigen::VectorXd g;
  CHECK(regress::mse_loss(Eigen::Vector2d(1, 3), Eigen::Vector2d(0, 0), &g) == 5.0);
  CHECK(g == Eigen::Vector2d(1, 3));
}

TEST_CASE("checkpoints") {
  const auto dir = testutil::scratch("ckpt");
  const Archive ar{{"a", std::string("\0\1\2", 3)}, {"b", ""}, {"meta.json", "{}"}};
  write_archive(dir / "x.cdar", ar);
  CHECK(read_archive(dir / "x.cdar") == ar);

  const auto model = regress::finetune_regressor(regress::init_backbone({}, tiny_spec(), 1), brightness_set(8, 1),
                                                 brightness_set(4, 2), {2, 1e-3, 4, 0.01}, 1,
                                                 {{"random", "random", "none", 1, "", ""}});
  const auto ck = regress::to_checkpoint(model, 1, "abc");
  save_checkpoint(dir / "m.ckpt", ck);
  const auto back = load_checkpoint(dir / "m.ckpt", std::string("abc"));
  CHECK(back.provenance == ck.provenance);
  const auto restored = regress::from_checkpoint(back);
  const auto imgs = brightness_set(3, 9).images;
  CHECK(regress::predict_inputs(restored, imgs) == regress::predict_inputs(model, imgs));
  CHECK_THROWS(load_checkpoint(dir / "m.ckpt", std::string("other")));

  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(config_hash(nlohmann::json{{"b", 1.0}, {"a", 2}}) == config_hash(nlohmann::json{{"a", 2.0}, {"b", 1}}));
}

TEST_CASE("gradcam") {
  nn::Tensor act(2, 2, 2), grad(2, 2, 2);
  act.data << 1, 0, 0, 1, 0, 2, 2, 0;
  grad.data << 1, 1, 1, 1, -0.5, -0.5, -0.5, -0.5;
  Image2D expect(2, 2);
  expect.data = {1, 0, 0, 1};
  CHECK(saliency::cam_from_activations(act, grad) == expect);

  nn::EncoderSpec spec = tiny_spec();
  regress::RegressorModel model;
  model.encoder = nn::Encoder(spec, 21);
  model.head = nn::Linear(model.encoder.feature_dim(), 1, "head", 22, 0.5);
  Rng rng(7);
  imaging::SliceImage slice;
  slice.image = random_image(rng, spec.input_size);

  const auto h = saliency::grad_cam(model, slice, saliency::default_layer(model));
  CHECK(h.data.rows == spec.input_size);
  CHECK(h.layer_tag == "conv2");
  for (double v : h.data.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS(saliency::grad_cam(model, slice, "conv9"));

  // rescaling the head by a positive factor leaves the normalized map unchanged
  auto scaled = model;
  scaled.head.weight().value *= 3.0;
  scaled.head.bias().value[0] += 4.0;
  const auto hs = saliency::grad_cam(scaled, slice, "conv2");
  for (size_t i = 0; i < h.data.size(); ++i) CHECK(std::abs(hs.data.data[i] - h.data.data[i]) < 1e-12);

  // last block: the pre-ReLU map sums to the head output minus its bias
  nn::Encoder enc = model.encoder;
  nn::Encoder::Trace trace;
  const auto feat = enc.forward(enc.prepare_input(enc.stem(slice.image)), &trace);
  const nn::VectorXd w = model.head.weight().value;
  std::vector<nn::Tensor> ag;
  enc.backward(trace, w, &ag, false);
  const auto& A = trace.acts.back();
  const auto& G = ag.back();
  double total = 0.0;
  for (int k = 0; k < A.c; ++k) {
    double gk = 0.0, ak = 0.0;
    for (int y = 0; y < A.h; ++y)
      for (int x = 0; x < A.w; ++x) {
        gk += G.at(k, y, x);
        ak += A.at(k, y, x);
      }
    total += gk / (A.h * A.w) * ak;
  }
  CHECK(total == doctest::Approx(w.dot(feat)).epsilon(1e-10));

  auto dead = model;
  dead.head.weight().value.setZero();
  for (double v : saliency::grad_cam(dead, slice, "conv1").data.data) CHECK(v == 0.0);

  const auto lo = saliency::colormap(0.0), hi = saliency::colormap(1.0);
  CHECK((lo.b > lo.r && lo.b > lo.g));
  CHECK((hi.r > hi.g && hi.r > hi.b));
  const auto o1 = saliency::render_overlay(slice, h), o2 = saliency::render_overlay(slice, h);
  CHECK(o1 == o2);
  CHECK(o1.pixels.size() == static_cast<size_t>(3 * spec.input_size * spec.input_size));
  saliency::Heatmap wrong{Image2D(3, 3), "conv1"};
  CHECK_THROWS(saliency::render_overlay(slice, wrong));
}
