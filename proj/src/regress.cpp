#include "cdssl/regress.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace cdssl::regress {

namespace {

double mean_mse(const RegressorModel& m, const ssl::SliceSet& set) {
  if (set.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (size_t i = 0; i < set.size(); ++i) {
    const double e = m.forward(set.images[i]) - set.labels[i];
    s += e * e;
  }
  return s / static_cast<double>(set.size());
}

}  // namespace

std::string to_string(InitKind k) {
  switch (k) {
    case InitKind::random: return "random";
    case InitKind::supervised_generic: return "supervised_generic";
    case InitKind::ssl_checkpoint: return "ssl_checkpoint";
  }
  return "random";
}

nlohmann::json to_json(const FinetuneConfig& c) {
  return {{"epochs", c.epochs}, {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"head_init_sd", c.head_init_sd}};
}

FinetuneConfig finetune_config_from_json(const nlohmann::json& j) {
  FinetuneConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.head_init_sd = j.value("head_init_sd", c.head_init_sd);
  if (c.epochs < 0 || c.batch_size < 1 || !(c.learning_rate > 0.0)) throw std::invalid_argument("invalid fine-tune config");
  return c;
}

double RegressorModel::forward(const Image2D& model_image) const {
  const nn::VectorXd f = encoder.forward(encoder.prepare_input(model_image));
  return head.forward(f)[0];
}

nn::Encoder init_backbone(const InitScheme& scheme, const nn::EncoderSpec& spec, uint64_t seed) {
  if (scheme.kind == InitKind::random) {
    if (scheme.checkpoint) throw std::invalid_argument("random initialization takes no checkpoint");
    return nn::Encoder(spec, derive_seed(seed, 0xE1));
  }
  if (!scheme.checkpoint) throw std::invalid_argument(to_string(scheme.kind) + " initialization requires a checkpoint");
  const Checkpoint& ckpt = *scheme.checkpoint;
  if (ckpt.encoder_spec.in_channels != spec.in_channels && !(spec.in_channels == 1 && ckpt.encoder_spec.in_channels == 3))
    throw std::invalid_argument("shape mismatch at layer 'conv1.weight': checkpoint stem has " +
                                std::to_string(ckpt.encoder_spec.in_channels) + " channels, data has " +
                                std::to_string(spec.in_channels));
  // Compare against a freshly built encoder of the requested layout (with the
  // checkpoint's stem channels) so the first differing layer is named.
  nn::EncoderSpec expected = spec;
  expected.in_channels = ckpt.encoder_spec.in_channels;
  nn::Encoder enc(expected, 0);
  nn::load_params(enc.params(), ckpt.encoder_weights);
  return enc;
}

double mse_loss(const Eigen::VectorXd& pred, const Eigen::VectorXd& target, Eigen::VectorXd* grad) {
  if (pred.size() != target.size() || pred.size() == 0) throw std::invalid_argument("mse_loss: size mismatch");
  const Eigen::VectorXd diff = pred - target;
  if (grad) *grad = 2.0 * diff / static_cast<double>(diff.size());
  return diff.squaredNorm() / static_cast<double>(diff.size());
}

RegressorModel finetune_regressor(nn::Encoder encoder, const ssl::SliceSet& train, const ssl::SliceSet& val,
                                  const FinetuneConfig& cfg, uint64_t seed, std::vector<StageDescriptor> provenance,
                                  const std::string& stage_hash) {
  if (train.empty()) throw std::invalid_argument("fine-tuning dataset is empty");
  if (train.labels.size() != train.size() || val.labels.size() != val.size())
    throw std::invalid_argument("every fine-tuning image needs a label");
  for (double y : train.labels)
    if (!(y >= 0.0 && y <= 18.0)) throw std::invalid_argument("fine-tuning labels must lie in [0,18]");

  RegressorModel m;
  m.encoder = std::move(encoder);
  m.head = nn::Linear(m.encoder.feature_dim(), 1, "head", derive_seed(seed, 0x4E), cfg.head_init_sd);
  m.head.bias().value[0] =
      std::accumulate(train.labels.begin(), train.labels.end(), 0.0) / static_cast<double>(train.size());
  m.provenance = std::move(provenance);
  m.provenance.push_back({"finetune", "regression", "labeled", seed, stage_hash, "adam"});

  std::vector<nn::Param*> params = nn::param_ptrs(m.encoder.params());
  for (auto& p : m.head.params()) params.push_back(&p);
  nn::Adam opt(cfg.learning_rate);

  const bool has_val = !val.empty();
  auto score = [&](const EpochLog& e) { return has_val ? e.val_mse : e.train_mse; };

  EpochLog initial{0, mean_mse(m, train), has_val ? mean_mse(m, val) : std::numeric_limits<double>::quiet_NaN()};
  m.training_log.push_back(initial);
  m.empty_trained = cfg.epochs == 0;
  std::vector<nn::Param> best_enc = m.encoder.params();
  std::vector<nn::Param> best_head = m.head.params();
  double best = score(initial);
  m.best_epoch = 0;

  const size_t batch = static_cast<size_t>(cfg.batch_size);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(derive_seed(seed, 0xF1, epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double sq = 0.0;
    for (size_t start = 0; start < order.size(); start += batch) {
      const size_t end = std::min(order.size(), start + batch);
      const size_t n = end - start;
      std::vector<nn::Encoder::Trace> traces(n);
      std::vector<nn::VectorXd> feats(n);
      Eigen::VectorXd pred(n), target(n);
      for (size_t i = 0; i < n; ++i) {
        const size_t k = order[start + i];
        feats[i] = m.encoder.forward(m.encoder.prepare_input(train.images[k]), &traces[i]);
        pred[i] = m.head.forward(feats[i])[0];
        target[i] = train.labels[k];
      }
      Eigen::VectorXd grad;
      const double loss = mse_loss(pred, target, &grad);
      if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "non-finite fine-tuning loss at epoch " << epoch << " (batch of " << n << ", prediction range ["
           << pred.minCoeff() << ", " << pred.maxCoeff() << "])";
        throw std::runtime_error(os.str());
      }
      sq += loss * static_cast<double>(n);
      nn::zero_grad(params);
      for (size_t i = 0; i < n; ++i) {
        const nn::VectorXd dfeat = m.head.backward(feats[i], Eigen::VectorXd::Constant(1, grad[i]));
        m.encoder.backward(traces[i], dfeat);
      }
      opt.step(params);
    }
    EpochLog log{epoch, mean_mse(m, train), has_val ? mean_mse(m, val) : std::numeric_limits<double>::quiet_NaN()};
    if (!std::isfinite(log.train_mse)) throw std::runtime_error("non-finite training MSE after epoch " + std::to_string(epoch));
    m.training_log.push_back(log);
    if (score(log) < best) {
      best = score(log);
      m.best_epoch = epoch;
      best_enc = m.encoder.params();
      best_head = m.head.params();
    }
  }
  nn::load_params(m.encoder.params(), best_enc);
  nn::load_params(m.head.params(), best_head);
  for (auto& p : m.encoder.params()) p.grad.setZero();
  for (auto& p : m.head.params()) p.grad.setZero();
  m.best_val_mse = best;
  return m;
}

std::vector<double> predict_inputs(const RegressorModel& model, const std::vector<Image2D>& images) {
  std::vector<double> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(model.forward(img));
  return out;
}

std::vector<double> predict(const RegressorModel& model, const std::vector<imaging::SliceImage>& images) {
  std::vector<double> out;
  out.reserve(images.size());
  for (const auto& s : images) out.push_back(model.forward(model.encoder.stem(s.image)));
  return out;
}

std::map<std::string, double> aggregate_by_subject(const std::vector<std::string>& ids,
                                                   const std::vector<double>& predictions) {
  if (ids.size() != predictions.size()) throw std::invalid_argument("ids and predictions differ in length");
  std::map<std::string, std::pair<double, int>> acc;
  for (size_t i = 0; i < ids.size(); ++i) {
    acc[ids[i]].first += predictions[i];
    acc[ids[i]].second += 1;
  }
  std::map<std::string, double> out;
  for (const auto& [id, s] : acc) out[id] = s.first / s.second;
  return out;
}

Checkpoint pretrain_supervised(const std::optional<Checkpoint>& init, const nn::EncoderSpec& spec,
                               const ssl::SliceSet& train, const ssl::SliceSet& val, const FinetuneConfig& cfg,
                               const ssl::StageInfo& stage, uint64_t seed) {
  InitScheme scheme;
  if (init) {
    scheme.kind = InitKind::ssl_checkpoint;
    scheme.checkpoint = init;
  }
  nn::Encoder enc = init_backbone(scheme, spec, seed);
  std::vector<StageDescriptor> prov = init ? init->provenance : std::vector<StageDescriptor>{};
  RegressorModel m = finetune_regressor(std::move(enc), train, val, cfg, seed, prov, stage.config_hash);
  m.provenance.back() = {stage.stage_name, "supervised", stage.dataset_tag, seed, stage.config_hash, "adam"};

  Checkpoint out;
  out.method = "supervised";
  out.seed = seed;
  out.config_hash = stage.config_hash;
  out.encoder_spec = m.encoder.spec();
  out.encoder_weights = m.encoder.params();
  out.head_weights = m.head.params();
  out.provenance = m.provenance;
  out.val_loss = m.best_val_mse;
  for (size_t i = 1; i < m.training_log.size(); ++i) out.val_history.push_back(m.training_log[i].val_mse);
  out.extra = {{"best_epoch", m.best_epoch}, {"config", to_json(cfg)}};
  return out;
}

Checkpoint to_checkpoint(const RegressorModel& model, uint64_t seed, const std::string& config_hash) {
  Checkpoint c;
  c.kind = "regressor";
  c.method = "regression";
  c.seed = seed;
  c.config_hash = config_hash;
  c.encoder_spec = model.encoder.spec();
  c.encoder_weights = model.encoder.params();
  c.head_weights = model.head.params();
  c.provenance = model.provenance;
  c.val_loss = model.best_val_mse;
  nlohmann::json log = nlohmann::json::array();
  for (const auto& e : model.training_log) {
    log.push_back({{"epoch", e.epoch},
                   {"train_mse", e.train_mse},
                   {"val_mse", std::isfinite(e.val_mse) ? nlohmann::json(e.val_mse) : nlohmann::json(nullptr)}});
    if (e.epoch > 0) c.val_history.push_back(std::isfinite(e.val_mse) ? e.val_mse : e.train_mse);
  }
  c.extra = {{"training_log", log}, {"best_epoch", model.best_epoch}, {"empty_trained", model.empty_trained}};
  return c;
}

RegressorModel from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.head_weights.empty()) throw std::invalid_argument("checkpoint has no regression head");
  RegressorModel m;
  m.encoder = ssl::encoder_from_checkpoint(ckpt);
  m.head = nn::Linear(m.encoder.feature_dim(), 1, "head", 0);
  nn::load_params(m.head.params(), ckpt.head_weights);
  m.provenance = ckpt.provenance;
  m.best_val_mse = ckpt.val_loss;
  if (ckpt.extra.contains("training_log")) {
    for (const auto& e : ckpt.extra["training_log"])
      m.training_log.push_back({e.at("epoch").get<int>(), e.at("train_mse").get<double>(),
                                e.at("val_mse").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                          : e.at("val_mse").get<double>()});
    m.best_epoch = ckpt.extra.value("best_epoch", 0);
    m.empty_trained = ckpt.extra.value("empty_trained", false);
  }
  return m;
}

}  // namespace cdssl::regress
