#pragma once

// The six-edge attention block. Channel branch: one squeeze feeding two
// excitations. Spatial branch: two squeezes (the second on the input gated
// by the second channel map), a 1x1 combine block and one excitation.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "sase/attention_ops.hpp"

namespace sase {

enum class EdgeId { SQUEEZE_CH, EXCITE_CH_1, EXCITE_CH_2, SQUEEZE_SP_1, SQUEEZE_SP_2, EXCITE_SP };

inline constexpr int kNumEdges = 6;
inline constexpr std::array<std::string_view, kNumEdges> kEdgeNames{"SQUEEZE_CH",   "EXCITE_CH_1",  "EXCITE_CH_2",
                                                                    "SQUEEZE_SP_1", "SQUEEZE_SP_2", "EXCITE_SP"};
inline constexpr std::array<OpFamily, kNumEdges> kEdgeFamilies{
    OpFamily::ChannelSqueeze, OpFamily::ChannelExcite,  OpFamily::ChannelExcite,
    OpFamily::SpatialSqueeze, OpFamily::SpatialSqueeze, OpFamily::SpatialExcite};

inline Shape alpha_shape() { return {kNumEdges, kOpsPerSet, 1, 1}; }

/// One operation index per edge.
struct Genotype {
  int version = 1;
  std::array<int, kNumEdges> ops{};

  int& operator[](EdgeId e) { return ops[static_cast<std::size_t>(e)]; }
  int operator[](EdgeId e) const { return ops[static_cast<std::size_t>(e)]; }
  std::string_view kind(int edge) const { return op_kind_name(kEdgeFamilies.at(edge), ops.at(edge)); }
  bool operator==(const Genotype&) const = default;

  void validate() const {
    if (version != 1) fail(ErrorKind::Format, "genotype: unsupported version " + std::to_string(version));
    for (int e = 0; e < kNumEdges; ++e)
      if (ops[e] < 0 || ops[e] >= kOpsPerSet)
        fail(ErrorKind::Value, "genotype: invalid operation index on " + std::string(kEdgeNames[e]));
  }
};

/// The module reported by the search on CIFAR-10.
inline Genotype reference_genotype() {
  Genotype g;
  g[EdgeId::SQUEEZE_CH] = static_cast<int>(ChannelSqueezeKind::GAP_GMP);
  g[EdgeId::EXCITE_CH_1] = static_cast<int>(ChannelExciteKind::FC_REDUCE);
  g[EdgeId::EXCITE_CH_2] = static_cast<int>(ChannelExciteKind::AFFINE);
  g[EdgeId::SQUEEZE_SP_1] = static_cast<int>(SpatialSqueezeKind::GAP);
  g[EdgeId::SQUEEZE_SP_2] = static_cast<int>(SpatialSqueezeKind::L4_POOL);
  g[EdgeId::EXCITE_SP] = static_cast<int>(SpatialExciteKind::STACK2_CONV2D_K3);
  return g;
}

/// Row-wise argmax; ties go to the lowest index.
template <class T>
Genotype derive_genotype(const Tensor<T>& alpha) {
  if (alpha.shape() != alpha_shape()) fail(ErrorKind::Shape, "derive_genotype: alpha must be " + alpha_shape().str());
  Genotype g;
  for (int e = 0; e < kNumEdges; ++e) {
    int best = 0;
    for (int o = 0; o < kOpsPerSet; ++o) {
      const T v = alpha[static_cast<std::size_t>(e * kOpsPerSet + o)];
      if (std::isnan(v)) fail(ErrorKind::Numeric, "derive_genotype: NaN in alpha");
      if (v > alpha[static_cast<std::size_t>(e * kOpsPerSet + best)]) best = o;
    }
    g.ops[e] = best;
  }
  return g;
}

/// Candidates on one edge: all seven (mixed) or one (discrete).
template <class T>
class Edge : public Module<T> {
 public:
  Edge(EdgeId id, const Geometry& g, Rng& rng) : id_(id) {
    for (int k = 0; k < kOpsPerSet; ++k)
      ops_.push_back(&this->add_child(std::string(op_kind_name(family(), k)), make_op<T>(family(), k, g, rng)));
  }
  Edge(EdgeId id, int kind, const Geometry& g, Rng& rng) : id_(id) {
    ops_.push_back(&this->add_child(std::string(op_kind_name(family(), kind)), make_op<T>(family(), kind, g, rng)));
  }

  bool mixed() const { return ops_.size() > 1; }
  EdgeId id() const { return id_; }
  OpFamily family() const { return kEdgeFamilies[static_cast<std::size_t>(id_)]; }
  AttentionOp<T>& candidate(int k) { return *ops_.at(static_cast<std::size_t>(k)); }

  /// Mixed edges take their row of alpha as (1,7,1,1) logits.
  Var<T> forward(const Var<T>& x, bool training, const std::optional<Var<T>>& alpha_row = std::nullopt) {
    if (!mixed()) return ops_[0]->forward(x, training);
    if (!alpha_row) fail(ErrorKind::Value, "mixed edge needs an alpha row");
    if (alpha_row->value().size() != static_cast<std::size_t>(kOpsPerSet))
      fail(ErrorKind::Shape, "mixed edge: alpha row must hold 7 values, got " + alpha_row->shape().str());
    auto weights = softmax(reshape(*alpha_row, Shape{1, kOpsPerSet, 1, 1}), 1);
    std::vector<Var<T>> outs;
    outs.reserve(ops_.size());
    for (auto* op : ops_) outs.push_back(op->forward(x, training));
    return weighted_sum(weights, outs);
  }

 private:
  EdgeId id_;
  std::vector<AttentionOp<T>*> ops_;
};

/// 1x1 conv 2 -> 1, BN, ReLU.
template <class T>
class CombineBlock : public Module<T> {
 public:
  explicit CombineBlock(Rng& rng)
      : conv_(this->add_child("conv", std::make_unique<Conv2d<T>>(2, 1, 1, 1, Conv2dOptions{}, true, rng))),
        bn_(this->add_child("bn", std::make_unique<BatchNorm<T>>(1))) {}
  Var<T> forward(const Var<T>& a, const Var<T>& b, bool training) {
    return relu(bn_.forward(conv_.forward(concat_channels(a, b)), training));
  }
  Conv2d<T>& conv() { return conv_; }
  BatchNorm<T>& bn() { return bn_; }

 private:
  Conv2d<T>& conv_;
  BatchNorm<T>& bn_;
};

inline constexpr std::size_t kCombineBlockParams = 5;

template <class T>
class SaseBlock : public Module<T> {
 public:
  /// Search block: every edge mixes all seven candidates.
  SaseBlock(const Geometry& g, Rng& rng) : geom_(g) {
    for (int e = 0; e < kNumEdges; ++e)
      edges_.push_back(&this->add_child(std::string(kEdgeNames[e]), std::make_unique<Edge<T>>(EdgeId(e), g, rng)));
    combine_ = &this->add_child("combine", std::make_unique<CombineBlock<T>>(rng));
  }
  /// Discrete block built from a genotype.
  SaseBlock(const Genotype& genotype, const Geometry& g, Rng& rng) : geom_(g) {
    genotype.validate();
    for (int e = 0; e < kNumEdges; ++e)
      edges_.push_back(&this->add_child(std::string(kEdgeNames[e]),
                                        std::make_unique<Edge<T>>(EdgeId(e), genotype.ops[e], g, rng)));
    combine_ = &this->add_child("combine", std::make_unique<CombineBlock<T>>(rng));
  }

  bool mixed() const { return edges_[0]->mixed(); }
  const Geometry& geometry() const { return geom_; }
  Edge<T>& edge(EdgeId e) { return *edges_[static_cast<std::size_t>(e)]; }
  CombineBlock<T>& combine() { return *combine_; }

  /// Attention map with the input's shape. `alpha` is (6,7,1,1) for search
  /// blocks and ignored otherwise.
  Var<T> map(const Var<T>& x, bool training, const std::optional<Var<T>>& alpha = std::nullopt) {
    const Shape s = x.shape();
    if (s.c != geom_.c) fail(ErrorKind::Shape, "SASE block built for C=" + std::to_string(geom_.c) + ", got " + s.str());
    if (mixed() && (!alpha || alpha->shape() != alpha_shape()))
      fail(ErrorKind::Shape, "SASE search block needs alpha of shape " + alpha_shape().str());
    auto row = [&](EdgeId e) -> std::optional<Var<T>> {
      if (!mixed()) return std::nullopt;
      return select_batch(*alpha, static_cast<int>(e));
    };
    auto run = [&](EdgeId e, const Var<T>& in) { return edge(e).forward(in, training, row(e)); };

    auto desc = run(EdgeId::SQUEEZE_CH, x);
    auto map1 = run(EdgeId::EXCITE_CH_1, desc);
    auto map2 = run(EdgeId::EXCITE_CH_2, desc);
    auto a = run(EdgeId::SQUEEZE_SP_1, x);
    auto b = run(EdgeId::SQUEEZE_SP_2, mul(x, map2));
    auto sp_map = run(EdgeId::EXCITE_SP, combine_->forward(a, b, training));
    return scale(add(map1, sp_map), T(0.5));
  }

  /// x re-weighted by its attention map.
  Var<T> forward(const Var<T>& x, bool training, const std::optional<Var<T>>& alpha = std::nullopt) {
    return mul(x, map(x, training, alpha));
  }

 private:
  Geometry geom_;
  std::vector<Edge<T>*> edges_;
  CombineBlock<T>* combine_ = nullptr;
};

template <class T>
std::unique_ptr<SaseBlock<T>> instantiate_discrete(const Genotype& genotype, const Geometry& g, Rng& rng) {
  return std::make_unique<SaseBlock<T>>(genotype, g, rng);
}

/// Insertion sites sharing one geometry.
struct SiteGroup {
  int channels;
  int count;
  int h;
  int w;
};

/// ResNet-50 bottleneck outputs at 224x224 input.
inline std::vector<SiteGroup> resnet50_schedule() {
  return {{256, 3, 56, 56}, {512, 4, 28, 28}, {1024, 6, 14, 14}, {2048, 3, 7, 7}};
}
inline std::vector<SiteGroup> resnet101_schedule() {
  return {{256, 3, 56, 56}, {512, 4, 28, 28}, {1024, 23, 14, 14}, {2048, 3, 7, 7}};
}

/// Parameters of one discrete block, from closed-form per-op counts.
inline std::size_t block_param_count(const Genotype& genotype, const Geometry& g, bool count_fusion_norm = true) {
  genotype.validate();
  std::size_t total = kCombineBlockParams;
  total += squeeze_param_count(SqueezeAxis::Channel, genotype[EdgeId::SQUEEZE_CH], g, count_fusion_norm);
  total += channel_excite_param_count(ChannelExciteKind(genotype[EdgeId::EXCITE_CH_1]), g);
  total += channel_excite_param_count(ChannelExciteKind(genotype[EdgeId::EXCITE_CH_2]), g);
  total += squeeze_param_count(SqueezeAxis::Spatial, genotype[EdgeId::SQUEEZE_SP_1], g, count_fusion_norm);
  total += squeeze_param_count(SqueezeAxis::Spatial, genotype[EdgeId::SQUEEZE_SP_2], g, count_fusion_norm);
  total += spatial_excite_param_count(SpatialExciteKind(genotype[EdgeId::EXCITE_SP]), g);
  return total;
}

/// Extra trainable scalars from inserting the block at every site.
inline std::size_t param_count(const Genotype& genotype, const std::vector<SiteGroup>& schedule,
                               bool count_fusion_norm = true) {
  if (schedule.empty()) fail(ErrorKind::Value, "param_count: empty site schedule");
  std::size_t total = 0;
  for (const auto& s : schedule) {
    if (s.channels < 1 || s.count < 0 || s.h < 1 || s.w < 1) fail(ErrorKind::Value, "param_count: invalid site group");
    total += static_cast<std::size_t>(s.count) * block_param_count(genotype, {s.channels, s.h, s.w}, count_fusion_norm);
  }
  return total;
}

}  // namespace sase
