#pragma once

// Search, retrain and evaluation drivers over the ResNet hosts.

#include <array>
#include <cstdio>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sase/bilevel.hpp"
#include "sase/checkpoint.hpp"
#include "sase/data.hpp"
#include "sase/genotype_io.hpp"
#include "sase/host.hpp"

namespace sase {

/// Train and test sets of one task plus a description for the run log.
struct TaskData {
  Dataset train;
  Dataset test;
  std::string description;
  Normalization norm;

  HostSpec host_spec(HostFamily family) const {
    HostSpec s;
    s.family = family;
    s.in_channels = train.images.shape().c;
    s.classes = train.classes;
    s.side = train.images.shape().h;
    return s;
  }
};

/// Synthetic task when `synthetic` is non-empty, otherwise CIFAR-10 from
/// `data_root` truncated to the given sizes (0 keeps everything).
inline TaskData load_task(const std::string& synthetic, const std::string& data_root, std::size_t train_limit = 5000,
                          std::size_t test_limit = 1000) {
  TaskData t;
  if (!synthetic.empty()) {
    const auto spec = SynthSpec::parse(synthetic);
    auto [train, test] = synth_dataset(spec);
    t.train = std::move(train);
    t.test = std::move(test);
    t.description = "synthetic:" + spec.str();
    t.norm = synthetic_normalization(spec.channels);
    return t;
  }
  if (data_root.empty()) fail(ErrorKind::Usage, "no dataset: pass --synthetic, --data or set SASE_DATA_ROOT");
  t.train = load_cifar_binary(data_root, SplitRole::RetrainTrain, train_limit);
  t.test = load_cifar_binary(data_root, SplitRole::Test, test_limit);
  t.description = "cifar10:" + data_root;
  t.norm = cifar_normalization();
  return t;
}

inline nlohmann::ordered_json hyper_to_json(const SearchHyper& h) {
  nlohmann::ordered_json j;
  j["epochs"] = h.epochs;
  j["batch"] = h.batch;
  j["lr_max"] = h.lr_max;
  j["lr_min"] = h.lr_min;
  j["momentum"] = h.momentum;
  j["weight_decay"] = h.weight_decay;
  j["alpha_lr"] = h.alpha_lr;
  j["adam_beta1"] = h.adam_beta1;
  j["adam_beta2"] = h.adam_beta2;
  j["adam_eps"] = h.adam_eps;
  j["alpha_init_std"] = h.alpha_init_std;
  j["eps_scale"] = h.eps_scale;
  j["order"] = h.order;
  return j;
}

inline SearchHyper hyper_from_json(const nlohmann::json& j) {
  SearchHyper h;
  try {
    h.epochs = j.at("epochs").get<int>();
    h.batch = j.at("batch").get<int>();
    h.lr_max = j.at("lr_max").get<double>();
    h.lr_min = j.at("lr_min").get<double>();
    h.momentum = j.at("momentum").get<double>();
    h.weight_decay = j.at("weight_decay").get<double>();
    h.alpha_lr = j.at("alpha_lr").get<double>();
    h.adam_beta1 = j.at("adam_beta1").get<double>();
    h.adam_beta2 = j.at("adam_beta2").get<double>();
    h.adam_eps = j.at("adam_eps").get<double>();
    h.alpha_init_std = j.at("alpha_init_std").get<double>();
    h.eps_scale = j.at("eps_scale").get<double>();
    h.order = j.at("order").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("search hyperparameters: ") + e.what());
  }
  return h;
}

inline nlohmann::ordered_json host_to_json(const HostSpec& s) {
  nlohmann::ordered_json j;
  j["family"] = host_name(s.family);
  j["in_channels"] = s.in_channels;
  j["classes"] = s.classes;
  j["side"] = s.side;
  return j;
}

inline HostSpec host_from_json(const nlohmann::json& j) {
  HostSpec s;
  try {
    s.family = parse_host(j.at("family").get<std::string>());
    s.in_channels = j.at("in_channels").get<int>();
    s.classes = j.at("classes").get<int>();
    s.side = j.at("side").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("host spec: ") + e.what());
  }
  return s;
}

/// Mean logits over the alpha tables (one table unless alphas are per site).
template <class T>
Tensor<double> mean_alpha(const std::vector<Parameter<T>*>& tables) {
  if (tables.empty()) fail(ErrorKind::Value, "no architecture parameters");
  Tensor<double> out(alpha_shape());
  for (auto* t : tables)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += static_cast<double>(t->tensor()[i]);
  for (auto& v : out.storage()) v /= static_cast<double>(tables.size());
  return out;
}

struct EpochRecord {
  int epoch = 0;
  std::array<std::array<double, kOpsPerSet>, kNumEdges> weights{};
  std::array<double, kNumEdges> entropy{};
  double train_loss = 0;
  double val_loss = 0;

  double mean_entropy() const {
    double total = 0;
    for (double h : entropy) total += h;
    return total / kNumEdges;
  }
};

inline EpochRecord summarize_alpha(int epoch, const Tensor<double>& alpha, double train_loss, double val_loss) {
  EpochRecord r;
  r.epoch = epoch;
  r.train_loss = train_loss;
  r.val_loss = val_loss;
  for (int e = 0; e < kNumEdges; ++e) {
    const auto p = softmax_row(alpha, e);
    std::copy(p.begin(), p.end(), r.weights[e].begin());
    r.entropy[e] = entropy(p);
  }
  return r;
}

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline constexpr const char* kTrajectoryHeader = "epoch,edge_id,w0,w1,w2,w3,w4,w5,w6,entropy,train_loss,val_loss";

/// One line per (epoch, edge). Epoch 0 is the initial alpha; its losses are nan.
inline std::string trajectory_csv(const std::vector<EpochRecord>& records) {
  std::string out = std::string(kTrajectoryHeader) + "\n";
  for (const auto& r : records)
    for (int e = 0; e < kNumEdges; ++e) {
      out += std::to_string(r.epoch) + "," + std::string(kEdgeNames[e]);
      for (double w : r.weights[e]) out += "," + format_number(w);
      out += "," + format_number(r.entropy[e]) + "," + format_number(r.train_loss) + "," + format_number(r.val_loss) + "\n";
    }
  return out;
}

/// Full search state: host, optimizers, data halves and shuffling RNG.
template <class T>
class SearchSession {
 public:
  SearchSession(const HostSpec& spec, const SearchHyper& hyper, bool alpha_per_site, const Dataset& train,
                std::uint64_t seed)
      : spec_(spec), hyper_(hyper), per_site_(alpha_per_site), seed_(seed), rng_(seed) {
    hyper_.validate();
    auto halves = split_halves(train, seed);
    omega_ = std::move(halves.first);
    alpha_ = std::move(halves.second);
    if (omega_.size() < static_cast<std::size_t>(hyper_.batch) || alpha_.size() < static_cast<std::size_t>(hyper_.batch))
      fail(ErrorKind::Value, "search data holds fewer than one batch per half (" + std::to_string(alpha_.size()) +
                                 " < " + std::to_string(hyper_.batch) + ")");
    host_ = std::make_unique<ResNetHost<T>>(spec, HostMode::search(alpha_per_site, hyper_.alpha_init_std), rng_);
    BilevelProblem<T> problem;
    problem.weights = host_->parameters(ParamGroup::NetworkWeight);
    problem.alphas = host_->parameters(ParamGroup::ArchitectureWeight);
    for (auto& [name, b] : host_->named_buffers()) problem.buffers.push_back(b);
    opt_ = std::make_unique<BilevelOptimizer<T>>(std::move(problem), hyper_);
    trajectory_.push_back(summarize_alpha(0, alpha(), std::nan(""), std::nan("")));
  }

  bool done() const { return epoch_ >= hyper_.epochs; }
  int epoch() const { return epoch_; }
  double current_lr() const { return cosine_lr(epoch_, hyper_.epochs, hyper_.lr_max, hyper_.lr_min); }
  std::size_t iterations_per_epoch() const {
    return std::min(omega_.size(), alpha_.size()) / static_cast<std::size_t>(hyper_.batch);
  }

  /// One pass over the paired half-split loaders.
  const EpochRecord& run_epoch() {
    if (done()) fail(ErrorKind::Value, "search already ran all epochs");
    const double lr = current_lr();
    const auto omega_order = shuffled_order(omega_.size(), rng_);
    const auto alpha_order = shuffled_order(alpha_.size(), rng_);
    const std::size_t B = static_cast<std::size_t>(hyper_.batch);
    double train_sum = 0, val_sum = 0;
    const std::size_t iters = iterations_per_epoch();
    for (std::size_t it = 0; it < iters; ++it) {
      const auto tb = gather<T>(omega_, omega_order, it * B, B);
      const auto vb = gather<T>(alpha_, alpha_order, it * B, B);
      const auto tx = Var<T>::constant(tb.images), vx = Var<T>::constant(vb.images);
      LossFn<T> train_loss = [&] { return cross_entropy(host_->forward(tx, true), std::span<const int>(tb.labels)); };
      LossFn<T> val_loss = [&] { return cross_entropy(host_->forward(vx, true), std::span<const int>(vb.labels)); };
      const auto losses = opt_->step(train_loss, val_loss, lr);
      train_sum += losses.train_loss;
      val_sum += losses.val_loss;
    }
    ++epoch_;
    trajectory_.push_back(summarize_alpha(epoch_, alpha(), train_sum / iters, val_sum / iters));
    return trajectory_.back();
  }

  void run() {
    while (!done()) run_epoch();
  }

  Tensor<double> alpha() const { return mean_alpha(host_->alphas()); }
  Genotype genotype() const { return derive_genotype(alpha()); }
  const std::vector<EpochRecord>& trajectory() const { return trajectory_; }
  ResNetHost<T>& host() { return *host_; }
  BilevelOptimizer<T>& optimizer() { return *opt_; }
  const Dataset& omega_half() const { return omega_; }
  const Dataset& alpha_half() const { return alpha_; }

  std::string hyper_json() const {
    nlohmann::ordered_json j;
    j["kind"] = "search";
    j["hyper"] = hyper_to_json(hyper_);
    j["host"] = host_to_json(spec_);
    j["alpha_per_site"] = per_site_;
    j["seed"] = seed_;
    j["precision"] = sizeof(T) == sizeof(float) ? "f32" : "f64";
    return j.dump();
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.hyper_json = hyper_json();
    ck.rng_state = rng_to_string(rng_);
    ck.counters = {{"epoch", static_cast<std::uint64_t>(epoch_)},
                   {"iteration", opt_->iteration()},
                   {"adam_steps", opt_->alpha_optimizer().steps()}};
    append_module_state(ck, *host_);
    const auto& problem = opt_->problem();
    auto names = parameter_names();
    for (std::size_t i = 0; i < problem.weights.size(); ++i)
      ck.records.push_back(to_record("sgd/" + names.at(problem.weights[i]), opt_->weight_optimizer().buffers()[i]));
    for (std::size_t i = 0; i < problem.alphas.size(); ++i) {
      const auto& n = names.at(problem.alphas[i]);
      ck.records.push_back(to_record("adam_m/" + n, opt_->alpha_optimizer().first_moments()[i]));
      ck.records.push_back(to_record("adam_v/" + n, opt_->alpha_optimizer().second_moments()[i]));
    }
    return ck;
  }

  /// Loads a checkpoint written by a session with the same configuration.
  void restore(const Checkpoint& ck) {
    if (ck.hyper_json != hyper_json()) fail(ErrorKind::Format, "checkpoint was written by a different search configuration");
    load_module_state(ck, *host_);
    const auto& problem = opt_->problem();
    auto names = parameter_names();
    for (std::size_t i = 0; i < problem.weights.size(); ++i) {
      auto& buf = opt_->weight_optimizer().buffers()[i];
      buf = from_record<T>(ck.at("sgd/" + names.at(problem.weights[i])), buf.shape());
    }
    for (std::size_t i = 0; i < problem.alphas.size(); ++i) {
      const auto& n = names.at(problem.alphas[i]);
      auto& m = opt_->alpha_optimizer().first_moments()[i];
      auto& v = opt_->alpha_optimizer().second_moments()[i];
      m = from_record<T>(ck.at("adam_m/" + n), m.shape());
      v = from_record<T>(ck.at("adam_v/" + n), v.shape());
    }
    rng_ = rng_from_string(ck.rng_state);
    epoch_ = static_cast<int>(ck.counter("epoch"));
    opt_->set_iteration(ck.counter("iteration"));
    opt_->alpha_optimizer().set_steps(ck.counter("adam_steps"));
    trajectory_.resize(1);
  }

 private:
  std::map<const Parameter<T>*, std::string> parameter_names() const {
    std::map<const Parameter<T>*, std::string> out;
    for (const auto& [name, p] : host_->named_parameters()) out[p] = name;
    return out;
  }

  HostSpec spec_;
  SearchHyper hyper_;
  bool per_site_;
  std::uint64_t seed_;
  Rng rng_;
  Dataset omega_, alpha_;
  std::unique_ptr<ResNetHost<T>> host_;
  std::unique_ptr<BilevelOptimizer<T>> opt_;
  std::vector<EpochRecord> trajectory_;
  int epoch_ = 0;
};

struct SearchResult {
  Genotype genotype;
  Tensor<double> alpha;
  std::vector<EpochRecord> trajectory;
  double initial_entropy = 0;
  double final_entropy = 0;
};

template <class T>
SearchResult run_search(const SearchHyper& hyper, const HostSpec& spec, bool alpha_per_site, const Dataset& train,
                        std::uint64_t seed, Checkpoint* final_state = nullptr) {
  SearchSession<T> session(spec, hyper, alpha_per_site, train, seed);
  session.run();
  if (final_state) *final_state = session.checkpoint();
  SearchResult r;
  r.alpha = session.alpha();
  r.genotype = derive_genotype(r.alpha);
  r.trajectory = session.trajectory();
  r.initial_entropy = r.trajectory.front().mean_entropy();
  r.final_entropy = r.trajectory.back().mean_entropy();
  return r;
}

/// Genotype from the alpha records of a search checkpoint.
inline Genotype derive_from_checkpoint(const Checkpoint& ck) {
  std::vector<const TensorRecord*> tables;
  for (const auto& r : ck.records)
    if (r.name == "param/alpha" || r.name.rfind("param/alpha.", 0) == 0) tables.push_back(&r);
  if (tables.empty()) fail(ErrorKind::Format, "checkpoint holds no architecture parameters");
  Tensor<double> alpha(alpha_shape());
  for (const auto* t : tables) {
    const auto a = from_record<double>(*t, alpha_shape());
    for (std::size_t i = 0; i < alpha.size(); ++i) alpha[i] += a[i];
  }
  for (auto& v : alpha.storage()) v /= static_cast<double>(tables.size());
  return derive_genotype(alpha);
}

// ------------------------------------------------------------------ retrain

struct EvalResult {
  double accuracy = 0;
  double loss = 0;
  std::size_t examples = 0;
};

/// Inference-mode top-1 accuracy and mean cross-entropy. Ties in the logits
/// go to the lowest class index.
template <class T>
EvalResult evaluate(ResNetHost<T>& host, const Dataset& d, int batch = 128) {
  NoGradGuard guard;
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  EvalResult r;
  std::size_t correct = 0;
  double loss_sum = 0;
  for (std::size_t begin = 0; begin < d.size(); begin += static_cast<std::size_t>(batch)) {
    const std::size_t count = std::min<std::size_t>(batch, d.size() - begin);
    const auto b = gather<T>(d, order, begin, count);
    const auto logits = host.forward(Var<T>::constant(b.images), false);
    loss_sum += static_cast<double>(cross_entropy(logits, std::span<const int>(b.labels)).value().item()) * count;
    const int K = logits.shape().c;
    for (std::size_t i = 0; i < count; ++i) {
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (logits.value()[i * K + k] > logits.value()[i * K + best]) best = k;
      correct += best == b.labels[i];
    }
  }
  r.examples = d.size();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(d.size());
  r.loss = loss_sum / static_cast<double>(d.size());
  return r;
}

struct RetrainConfig {
  int epochs = 10;
  int batch = 64;
  double lr_max = 0.025;
  double lr_min = 0.0001;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool augment = true;
  std::uint64_t seed = 0;
};

struct RetrainResult {
  double accuracy = 0;
  double test_loss = 0;
  std::vector<double> loss_curve;
  std::size_t param_count = 0;
  std::size_t attention_params = 0;
};

template <class T>
struct RetrainOutcome {
  RetrainResult metrics;
  std::unique_ptr<ResNetHost<T>> host;
};

/// SGD with momentum, weight decay and a per-epoch cosine rate, then test
/// accuracy. Everything is drawn from `cfg.seed`.
template <class T>
RetrainOutcome<T> run_retrain(const HostSpec& spec, const HostMode& mode, const Dataset& train, const Dataset& test,
                              const RetrainConfig& cfg) {
  if (mode.kind == AttentionMode::Search) fail(ErrorKind::Value, "retraining needs a discrete or baseline host");
  if (cfg.epochs < 0 || cfg.batch < 1) fail(ErrorKind::Value, "invalid retrain epochs or batch");
  if (train.size() < static_cast<std::size_t>(cfg.batch)) fail(ErrorKind::Value, "training set smaller than one batch");
  Rng rng(cfg.seed);
  RetrainOutcome<T> out;
  out.host = std::make_unique<ResNetHost<T>>(spec, mode, rng);
  auto& host = *out.host;
  const auto params = host.parameters();
  SgdMomentum<T> opt(cfg.momentum, cfg.weight_decay);
  const std::size_t B = static_cast<std::size_t>(cfg.batch);
  const int pad = std::max(1, spec.side / 8);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
    const auto order = shuffled_order(train.size(), rng);
    double sum = 0;
    const std::size_t iters = train.size() / B;
    for (std::size_t it = 0; it < iters; ++it) {
      auto b = gather<T>(train, order, it * B, B);
      if (cfg.augment) augment(b.images, pad, rng);
      zero_grads(params);
      auto loss = cross_entropy(host.forward(Var<T>::constant(b.images), true), std::span<const int>(b.labels));
      const double lv = static_cast<double>(loss.value().item());
      if (!std::isfinite(lv)) fail(ErrorKind::Numeric, "non-finite training loss");
      backprop(loss);
      opt.step(params, lr);
      sum += lv;
    }
    out.metrics.loss_curve.push_back(sum / static_cast<double>(iters));
  }
  const auto ev = evaluate(host, test);
  out.metrics.accuracy = ev.accuracy;
  out.metrics.test_loss = ev.loss;
  out.metrics.param_count = host.parameter_count();
  out.metrics.attention_params = host.attention_param_count();
  return out;
}

/// Host description stored with retrained weights so `eval` can rebuild it.
inline std::string model_json(const HostSpec& spec, const HostMode& mode) {
  nlohmann::ordered_json j;
  j["kind"] = "model";
  j["host"] = host_to_json(spec);
  j["attention"] = mode.kind == AttentionMode::None ? "none" : "discrete";
  if (mode.kind == AttentionMode::Discrete) j["genotype"] = nlohmann::ordered_json::parse(serialize_genotype(mode.genotype));
  return j.dump();
}

template <class T>
Checkpoint model_checkpoint(const ResNetHost<T>& host) {
  Checkpoint ck;
  ck.hyper_json = model_json(host.spec(), host.mode());
  append_module_state(ck, host);
  return ck;
}

/// Rebuilds a retrained host from its checkpoint.
template <class T>
std::unique_ptr<ResNetHost<T>> host_from_checkpoint(const Checkpoint& ck) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ck.hyper_json);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Format, std::string("checkpoint header: ") + e.what());
  }
  if (j.value("kind", "") != "model") fail(ErrorKind::Format, "checkpoint does not hold a retrained model");
  const auto spec = host_from_json(j.at("host"));
  HostMode mode = HostMode::baseline();
  if (j.value("attention", "") == "discrete") mode = HostMode::discrete(parse_genotype(j.at("genotype").dump()));
  Rng rng(0);
  auto host = std::make_unique<ResNetHost<T>>(spec, mode, rng);
  load_module_state(ck, *host);
  return host;
}

}  // namespace sase
