#include "cdssl/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

namespace cdssl::ssl {

namespace {

struct ForwardState {
  nn::Encoder::Trace trace;
  nn::VectorXd features;
  nn::ProjectionHead::Cache cache;
};

nn::MatrixXd init_prototypes(int k, int d, uint64_t seed) {
  Rng rng(seed);
  nn::MatrixXd p(k, d);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = normal(rng);
  return normalize_rows(p);
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::simclr: return "simclr";
    case Method::barlow_twins: return "barlow_twins";
    case Method::swav: return "swav";
  }
  return "simclr";
}

Method method_from_string(const std::string& s) {
  if (s == "simclr") return Method::simclr;
  if (s == "barlow_twins" || s == "blt") return Method::barlow_twins;
  if (s == "swav") return Method::swav;
  throw std::invalid_argument("unknown SSL method '" + s + "'");
}

std::string method_tag(Method m) {
  switch (m) {
    case Method::simclr: return "simclr";
    case Method::barlow_twins: return "blt";
    case Method::swav: return "swav";
  }
  return "simclr";
}

void SslConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
  if (projection_dim < 1 || hidden_dim < 1) throw std::invalid_argument("projection dimensions must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (optimizer != "adam") throw std::invalid_argument("unsupported optimizer '" + optimizer + "'");
  switch (method) {
    case Method::simclr:
      if (!(temperature > 0.0)) throw std::invalid_argument("simclr temperature must be positive");
      break;
    case Method::barlow_twins:
      if (!(lambda > 0.0)) throw std::invalid_argument("barlow_twins lambda must be positive");
      break;
    case Method::swav:
      if (prototypes < 2) throw std::invalid_argument("swav needs at least 2 prototypes");
      if (!(epsilon > 0.0) || sinkhorn_iters < 1 || !(swav_temperature > 0.0))
        throw std::invalid_argument("swav epsilon, sinkhorn_iters and temperature must be positive");
      break;
  }
}

nlohmann::json to_json(const SslConfig& c) {
  nlohmann::json j = {{"method", to_string(c.method)},
                      {"projection_dim", c.projection_dim},
                      {"hidden_dim", c.hidden_dim},
                      {"optimizer", {{"name", c.optimizer}, {"learning_rate", c.learning_rate}}},
                      {"epochs", c.epochs},
                      {"batch_size", c.batch_size},
                      {"augment", to_json(c.augment)}};
  switch (c.method) {
    case Method::simclr: j["temperature"] = c.temperature; break;
    case Method::barlow_twins: j["lambda"] = c.lambda; break;
    case Method::swav:
      j["prototypes"] = c.prototypes;
      j["epsilon"] = c.epsilon;
      j["sinkhorn_iters"] = c.sinkhorn_iters;
      j["temperature"] = c.swav_temperature;
      break;
  }
  return j;
}

SslConfig ssl_config_from_json(const nlohmann::json& j) {
  SslConfig c;
  c.method = method_from_string(j.at("method").get<std::string>());
  if (c.method == Method::swav) c.swav_temperature = j.value("temperature", c.swav_temperature);
  else c.temperature = j.value("temperature", c.temperature);
  c.lambda = j.value("lambda", c.lambda);
  c.prototypes = j.value("prototypes", c.prototypes);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.sinkhorn_iters = j.value("sinkhorn_iters", c.sinkhorn_iters);
  c.projection_dim = j.value("projection_dim", c.projection_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  if (j.contains("optimizer")) {
    c.optimizer = j["optimizer"].value("name", c.optimizer);
    c.learning_rate = j["optimizer"].value("learning_rate", c.learning_rate);
  }
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("augment")) c.augment = augment_policy_from_json(j["augment"]);
  c.validate();
  return c;
}

LossResult batch_loss(const SslConfig& cfg, const Eigen::MatrixXd& z_a, const Eigen::MatrixXd& z_b,
                      const Eigen::MatrixXd& prototypes) {
  switch (cfg.method) {
    case Method::simclr: return nt_xent_loss(z_a, z_b, cfg.temperature);
    case Method::barlow_twins: return barlow_twins_loss(z_a, z_b, cfg.lambda);
    case Method::swav: return swav_loss(z_a, z_b, prototypes, {cfg.swav_temperature, cfg.epsilon, cfg.sinkhorn_iters});
  }
  throw std::logic_error("unhandled SSL method");
}

void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
  const size_t workers = std::min<size_t>(n, static_cast<size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (size_t i = w; i < n; i += workers) fn(i);
    });
  for (auto& t : pool) t.join();
}

nn::Encoder encoder_from_checkpoint(const Checkpoint& ckpt) {
  nn::Encoder enc(ckpt.encoder_spec, 0);
  nn::load_params(enc.params(), ckpt.encoder_weights);
  return enc;
}

Checkpoint pretrain(const std::optional<Checkpoint>& init, const nn::EncoderSpec& spec, const SliceSet& train,
                    const SliceSet& val, const SslConfig& cfg, const StageInfo& stage, uint64_t seed,
                    const EpochCallback& on_epoch, int threads) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("pretraining dataset is empty");
  if (val.size() < 2) throw std::invalid_argument("pretraining needs at least 2 validation images");

  nn::Encoder enc = init ? encoder_from_checkpoint(*init) : nn::Encoder(spec, derive_seed(seed, 1));
  if (init && enc.spec().widths != spec.widths)
    throw std::invalid_argument("initialization checkpoint encoder widths do not match the configured encoder");
  nn::ProjectionHead head(enc.feature_dim(), cfg.hidden_dim, cfg.projection_dim, derive_seed(seed, 2));
  nn::Param prototypes("swav.prototypes", {cfg.prototypes, cfg.projection_dim});
  Eigen::Map<nn::RowMatrix> proto_view(prototypes.value.data(), cfg.prototypes, cfg.projection_dim);
  if (cfg.method == Method::swav) proto_view = init_prototypes(cfg.prototypes, cfg.projection_dim, derive_seed(seed, 3));

  std::vector<nn::Param*> params = nn::param_ptrs(enc.params());
  for (nn::Param* p : head.param_ptrs()) params.push_back(p);
  if (cfg.method == Method::swav) params.push_back(&prototypes);
  nn::Adam opt(cfg.learning_rate);

  const size_t batch = static_cast<size_t>(cfg.batch_size);

  // Runs one batch; returns the loss and, when `learn`, accumulates gradients.
  auto run_batch = [&](const SliceSet& set, const std::vector<size_t>& idx, const std::vector<uint64_t>& view_seeds,
                       bool learn) -> double {
    const size_t n = idx.size();
    std::vector<ViewPair> views(n);
    parallel_for(n, threads, [&](size_t i) { views[i] = make_view_pair(set.images[idx[i]], cfg.augment, view_seeds[i]); });

    std::vector<ForwardState> sa(n), sb(n);
    Eigen::MatrixXd za(n, cfg.projection_dim), zb(n, cfg.projection_dim);
    for (size_t i = 0; i < n; ++i) {
      sa[i].features = enc.forward(enc.prepare_input(views[i].view_a), learn ? &sa[i].trace : nullptr);
      sb[i].features = enc.forward(enc.prepare_input(views[i].view_b), learn ? &sb[i].trace : nullptr);
      za.row(i) = head.forward(sa[i].features, &sa[i].cache).transpose();
      zb.row(i) = head.forward(sb[i].features, &sb[i].cache).transpose();
    }
    const Eigen::MatrixXd protos = proto_view;
    LossResult loss = batch_loss(cfg, za, zb, protos);
    if (!std::isfinite(loss.value)) {
      std::ostringstream os;
      os << "non-finite " << to_string(cfg.method) << " loss in stage '" << stage.stage_name << "' (batch of " << n
         << ", embedding norms a: [" << za.rowwise().norm().minCoeff() << ", " << za.rowwise().norm().maxCoeff()
         << "], b: [" << zb.rowwise().norm().minCoeff() << ", " << zb.rowwise().norm().maxCoeff() << "])";
      throw std::runtime_error(os.str());
    }
    if (!learn) return loss.value;
    for (size_t i = 0; i < n; ++i) {
      const nn::VectorXd da = head.backward(sa[i].features, sa[i].cache, loss.grad_a.row(i).transpose());
      enc.backward(sa[i].trace, da);
      const nn::VectorXd db = head.backward(sb[i].features, sb[i].cache, loss.grad_b.row(i).transpose());
      enc.backward(sb[i].trace, db);
    }
    if (cfg.method == Method::swav) {
      Eigen::Map<nn::RowMatrix> g(prototypes.grad.data(), cfg.prototypes, cfg.projection_dim);
      g += loss.grad_prototypes;
    }
    return loss.value;
  };

  // Validation: fixed batches and fixed view seeds across epochs.
  const size_t val_batch = std::min(batch, val.size());
  auto validation_loss = [&]() {
    double total = 0.0;
    int batches = 0;
    for (size_t start = 0; start + val_batch <= val.size(); start += val_batch) {
      std::vector<size_t> idx(val_batch);
      std::vector<uint64_t> seeds(val_batch);
      for (size_t i = 0; i < val_batch; ++i) {
        idx[i] = start + i;
        seeds[i] = derive_seed(seed, 0x7A1, start + i);
      }
      total += run_batch(val, idx, seeds, false);
      ++batches;
    }
    return total / batches;
  };

  Checkpoint out;
  out.method = to_string(cfg.method);
  out.seed = seed;
  out.config_hash = stage.config_hash;
  if (init) out.provenance = init->provenance;
  out.provenance.push_back({stage.stage_name, to_string(cfg.method), stage.dataset_tag, seed, stage.config_hash,
                            cfg.method == Method::barlow_twins ? "adam (in place of lars)" : "adam"});

  std::vector<nn::Param> best_enc = enc.params();
  std::vector<nn::Param> best_head = head.snapshot();
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  std::vector<double> train_history;

  if (cfg.epochs == 0) best_val = validation_loss();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffle_rng(derive_seed(seed, 0x5F, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    int steps = 0;
    for (size_t start = 0; start < order.size(); start += batch) {
      const size_t end = std::min(order.size(), start + batch);
      if (end - start < 2) break;  // batch statistics need two samples
      std::vector<size_t> idx(order.begin() + start, order.begin() + end);
      std::vector<uint64_t> seeds(idx.size());
      for (size_t i = 0; i < idx.size(); ++i) seeds[i] = derive_seed(seed, epoch, idx[i]);
      nn::zero_grad(params);
      epoch_loss += run_batch(train, idx, seeds, true);
      opt.step(params);
      if (cfg.method == Method::swav) proto_view = normalize_rows(Eigen::MatrixXd(proto_view));
      ++steps;
    }
    if (steps == 0) throw std::invalid_argument("pretraining dataset has fewer than 2 images");
    train_history.push_back(epoch_loss / steps);
    const double v = validation_loss();
    out.val_history.push_back(v);
    if (on_epoch) on_epoch(epoch, train_history.back(), v);
    if (v < best_val) {
      best_val = v;
      best_epoch = epoch;
      best_enc = enc.params();
      best_head = head.snapshot();
    }
  }

  out.encoder_spec = enc.spec();
  out.encoder_weights = std::move(best_enc);
  out.projection_weights = std::move(best_head);
  for (auto& p : out.encoder_weights) p.grad.setZero();
  for (auto& p : out.projection_weights) p.grad.setZero();
  out.val_loss = best_val;
  out.extra = {{"best_epoch", best_epoch}, {"train_history", train_history}, {"config", to_json(cfg)}};
  return out;
}

}  // namespace cdssl::ssl
