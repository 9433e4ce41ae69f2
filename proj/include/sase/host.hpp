#pragma once

// CIFAR-style ResNets (basic blocks, 16/32/64 channels) with an attention
// block after the last batch normalization of every residual block, applied
// before the residual addition.

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sase/supernet.hpp"

namespace sase {

enum class HostFamily { ResNet8, ResNet20 };

inline const char* host_name(HostFamily f) { return f == HostFamily::ResNet8 ? "resnet8" : "resnet20"; }

inline HostFamily parse_host(const std::string& s) {
  if (s == "resnet8") return HostFamily::ResNet8;
  if (s == "resnet20") return HostFamily::ResNet20;
  fail(ErrorKind::Usage, "unknown host '" + s + "' (expected resnet8 or resnet20)");
}

struct HostSpec {
  HostFamily family = HostFamily::ResNet8;
  int in_channels = 3;
  int classes = 10;
  int side = 32;
  std::array<int, 3> stage_channels{16, 32, 64};

  int blocks_per_stage() const { return family == HostFamily::ResNet8 ? 1 : 3; }
  int sites() const { return 3 * blocks_per_stage(); }
};

enum class AttentionMode { None, Search, Discrete };

struct HostMode {
  AttentionMode kind = AttentionMode::None;
  Genotype genotype{};
  bool alpha_per_site = false;
  double alpha_init_std = 0.001;

  static HostMode baseline() { return {}; }
  static HostMode search(bool per_site = false, double init_std = 0.001) {
    return {AttentionMode::Search, {}, per_site, init_std};
  }
  static HostMode discrete(const Genotype& g) { return {AttentionMode::Discrete, g, false, 0.001}; }
};

/// One operation per edge, uniform over the seven, from `seed` alone.
inline Genotype random_genotype(std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> pick(0, kOpsPerSet - 1);
  Genotype g;
  for (auto& o : g.ops) o = pick(rng);
  return g;
}

template <class T>
class ResidualBlock : public Module<T> {
 public:
  ResidualBlock(int in, int out, int stride, int side_out, const HostMode& mode, Rng& rng) {
    conv1_ = &this->add_child("conv1", std::make_unique<Conv2d<T>>(in, out, 3, 3, Conv2dOptions{stride, stride, 1, 1},
                                                                    false, rng));
    bn1_ = &this->add_child("bn1", std::make_unique<BatchNorm<T>>(out));
    conv2_ = &this->add_child("conv2", std::make_unique<Conv2d<T>>(out, out, 3, 3, Conv2dOptions::same(3, 3), false, rng));
    bn2_ = &this->add_child("bn2", std::make_unique<BatchNorm<T>>(out));
    if (stride != 1 || in != out) {
      proj_ = &this->add_child("proj", std::make_unique<Conv2d<T>>(in, out, 1, 1, Conv2dOptions{stride, stride, 0, 0},
                                                                    false, rng));
      proj_bn_ = &this->add_child("proj_bn", std::make_unique<BatchNorm<T>>(out));
    }
    const Geometry g{out, side_out, side_out};
    if (mode.kind == AttentionMode::Search)
      sase_ = &this->add_child("sase", std::make_unique<SaseBlock<T>>(g, rng));
    else if (mode.kind == AttentionMode::Discrete)
      sase_ = &this->add_child("sase", std::make_unique<SaseBlock<T>>(mode.genotype, g, rng));
  }

  Var<T> forward(const Var<T>& x, bool training, const std::optional<Var<T>>& alpha) {
    auto y = relu(bn1_->forward(conv1_->forward(x), training));
    y = bn2_->forward(conv2_->forward(y), training);
    if (sase_) y = sase_->forward(y, training, alpha);
    auto shortcut = proj_ ? proj_bn_->forward(proj_->forward(x), training) : x;
    return relu(add(y, shortcut));
  }

  SaseBlock<T>* sase() { return sase_; }

 private:
  Conv2d<T>* conv1_ = nullptr;
  BatchNorm<T>* bn1_ = nullptr;
  Conv2d<T>* conv2_ = nullptr;
  BatchNorm<T>* bn2_ = nullptr;
  Conv2d<T>* proj_ = nullptr;
  BatchNorm<T>* proj_bn_ = nullptr;
  SaseBlock<T>* sase_ = nullptr;
};

/// Stem conv, three stages and a zero-initialized linear classifier on
/// globally averaged features. Output logits are (B, classes, 1, 1).
template <class T>
class ResNetHost : public Module<T> {
 public:
  ResNetHost(const HostSpec& spec, const HostMode& mode, Rng& rng) : spec_(spec), mode_(mode) {
    if (spec.side < 4 || spec.classes < 2 || spec.in_channels < 1) fail(ErrorKind::Value, "invalid host spec");
    if (mode.kind == AttentionMode::Discrete) mode.genotype.validate();
    const int c0 = spec.stage_channels[0];
    stem_ = &this->add_child("stem", std::make_unique<Conv2d<T>>(spec.in_channels, c0, 3, 3, Conv2dOptions::same(3, 3),
                                                                  false, rng));
    stem_bn_ = &this->add_child("stem_bn", std::make_unique<BatchNorm<T>>(c0));
    int in = c0, side = spec.side;
    for (int s = 0; s < 3; ++s) {
      const int out = spec.stage_channels[s];
      for (int b = 0; b < spec.blocks_per_stage(); ++b) {
        const int stride = (s > 0 && b == 0) ? 2 : 1;
        side = (side - 1) / stride + 1;
        auto& blk = this->add_child("stage" + std::to_string(s + 1) + "." + std::to_string(b),
                                    std::make_unique<ResidualBlock<T>>(in, out, stride, side, mode, rng));
        blocks_.push_back(&blk);
        in = out;
      }
    }
    fc_ = &this->add_child("fc", std::make_unique<Dense<T>>(in, spec.classes, rng, true));
    if (mode.kind == AttentionMode::Search) {
      const int tables = mode.alpha_per_site ? spec.sites() : 1;
      for (int t = 0; t < tables; ++t)
        alphas_.push_back(&this->add_parameter(tables == 1 ? "alpha" : "alpha." + std::to_string(t),
                                               normal_tensor<T>(alpha_shape(), static_cast<T>(mode.alpha_init_std), rng),
                                               ParamGroup::ArchitectureWeight));
    }
  }

  Var<T> forward(const Var<T>& x, bool training) {
    if (x.shape().c != spec_.in_channels || x.shape().h != spec_.side || x.shape().w != spec_.side)
      fail(ErrorKind::Shape, "host expects (B," + std::to_string(spec_.in_channels) + "," + std::to_string(spec_.side) +
                                 "," + std::to_string(spec_.side) + "), got " + x.shape().str());
    auto y = relu(stem_bn_->forward(stem_->forward(x), training));
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      std::optional<Var<T>> alpha;
      if (!alphas_.empty()) alpha = alphas_[alphas_.size() == 1 ? 0 : i]->var();
      y = blocks_[i]->forward(y, training, alpha);
    }
    return fc_->forward(reduce_mean(y, kSpatial));
  }

  const HostSpec& spec() const { return spec_; }
  const HostMode& mode() const { return mode_; }
  std::vector<SaseBlock<T>*> sites() const {
    std::vector<SaseBlock<T>*> out;
    for (auto* b : blocks_)
      if (b->sase()) out.push_back(b->sase());
    return out;
  }
  const std::vector<Parameter<T>*>& alphas() const { return alphas_; }

  /// Trainable scalars inside the attention blocks.
  std::size_t attention_param_count() const {
    std::size_t total = 0;
    for (auto* s : sites()) total += s->parameter_count();
    return total;
  }

 private:
  HostSpec spec_;
  HostMode mode_;
  Conv2d<T>* stem_ = nullptr;
  BatchNorm<T>* stem_bn_ = nullptr;
  std::vector<ResidualBlock<T>*> blocks_;
  Dense<T>* fc_ = nullptr;
  std::vector<Parameter<T>*> alphas_;
};

}  // namespace sase
