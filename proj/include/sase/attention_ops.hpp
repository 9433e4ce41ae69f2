#pragma once

// The four candidate sets of squeeze / excitation operations. Squeezes map
// (B,C,H,W) to per-channel (B,C,1,1) or per-position (B,1,H,W) descriptors;
// excitations turn descriptors into sigmoid-bounded attention maps.

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "sase/nn.hpp"
#include "sase/ops.hpp"

namespace sase {

enum class ChannelSqueezeKind { GAP, GSOP, IN_L2NORM, L4_POOL, GAP_GMP, GAP_STD, GAP_SKEW };
enum class SpatialSqueezeKind { GAP, GSOP, IN_L2NORM, L4_POOL, GAP_GMP, GAP_STD, GAP_SKEW };
enum class ChannelExciteKind { FC_REDUCE, CONV1D_K3, CONV1D_K5, CONV1D_K7, STACK2_CONV1D_K3, STACK3_CONV1D_K3, AFFINE };
enum class SpatialExciteKind { CONV2D_K3, CONV2D_K5, CONV2D_K7, STACK2_CONV2D_K3, SEPCONV_K3, SEPCONV_K5, AFFINE };

inline constexpr int kOpsPerSet = 7;

inline constexpr std::array<std::string_view, kOpsPerSet> kSqueezeNames{"GAP",     "GSOP",    "IN_L2NORM", "L4_POOL",
                                                                        "GAP_GMP", "GAP_STD", "GAP_SKEW"};
inline constexpr std::array<std::string_view, kOpsPerSet> kChannelExciteNames{
    "FC_REDUCE", "CONV1D_K3", "CONV1D_K5", "CONV1D_K7", "STACK2_CONV1D_K3", "STACK3_CONV1D_K3", "AFFINE"};
inline constexpr std::array<std::string_view, kOpsPerSet> kSpatialExciteNames{
    "CONV2D_K3", "CONV2D_K5", "CONV2D_K7", "STACK2_CONV2D_K3", "SEPCONV_K3", "SEPCONV_K5", "AFFINE"};

/// Lp exponent of L4_POOL.
inline constexpr double kLpExponent = 4.0;
/// Channel / position shrink factor ahead of GSoP covariance pooling.
inline constexpr int kGsopShrink = 4;
/// FC_REDUCE reduction ratio and minimum bottleneck width.
inline constexpr int kFcReduction = 16;
inline constexpr int kFcMinHidden = 4;
/// Stabilizer for skew denominators, std and L2 norms.
inline constexpr double kStatEps = 1e-5;

/// Feature-map geometry an operation instance is built for.
struct Geometry {
  int c = 1;
  int h = 1;
  int w = 1;
  int hw() const { return h * w; }
};

template <class T>
class AttentionOp : public Module<T> {
 public:
  virtual Var<T> forward(const Var<T>& x, bool training) = 0;
  virtual std::string_view name() const = 0;
};

/// Which axis a squeeze keeps: Channel keeps C (reduces H,W); Spatial keeps
/// H,W (reduces C).
enum class SqueezeAxis { Channel, Spatial };

inline int fc_hidden_width(int channels) {
  return std::max((channels + kFcReduction - 1) / kFcReduction, kFcMinHidden);
}

namespace detail {

inline unsigned reduced_axes(SqueezeAxis axis) { return axis == SqueezeAxis::Channel ? kSpatial : kChannel; }

inline Shape descriptor_shape(SqueezeAxis axis, const Geometry& g) {
  return axis == SqueezeAxis::Channel ? Shape{1, g.c, 1, 1} : Shape{1, 1, g.h, g.w};
}

/// (n x len) contiguous-bin adaptive average pooling matrix, stored as
/// (1,1,n,len). Bin i covers [floor(i*len/n), ceil((i+1)*len/n)).
template <class T>
Tensor<T> adaptive_pool_matrix(int len, int n) {
  Tensor<T> p(Shape{1, 1, n, len});
  for (int i = 0; i < n; ++i) {
    const int lo = (i * len) / n;
    const int hi = ((i + 1) * len + n - 1) / n;
    for (int j = lo; j < hi; ++j) p.at(0, 0, i, j) = T(1) / static_cast<T>(hi - lo);
  }
  return p;
}

template <class T>
Tensor<T> transposed(const Tensor<T>& m) {
  const Shape s = m.shape();
  Tensor<T> t(Shape{s.n, s.c, s.w, s.h});
  for (int i = 0; i < s.h; ++i)
    for (int j = 0; j < s.w; ++j) t.at(0, 0, j, i) = m.at(0, 0, i, j);
  return t;
}

}  // namespace detail

// ------------------------------------------------------------------ squeezes

template <class T>
class StatSqueeze : public AttentionOp<T> {
 public:
  StatSqueeze(SqueezeAxis axis, Stat stat, std::string_view name) : axis_(axis), stat_(stat), name_(name) {}
  Var<T> forward(const Var<T>& x, bool) override {
    return reduce_stat(x, detail::reduced_axes(axis_), stat_, T(0), T(kLpExponent));
  }
  std::string_view name() const override { return name_; }

 private:
  SqueezeAxis axis_;
  Stat stat_;
  std::string_view name_;
};

/// Combines two stacked statistics per descriptor position with a grouped
/// pointwise convolution (2 weights + 1 bias per group), then BN and ReLU.
template <class T>
class FusedStatCombine : public Module<T> {
 public:
  FusedStatCombine(int groups, Rng& rng)
      : groups_(groups),
        w_primary_(this->add_parameter("w_primary",
                                       uniform_tensor<T>(Shape{1, groups, 1, 1}, T(1) / std::sqrt(T(2)), rng))),
        w_secondary_(this->add_parameter("w_secondary",
                                         uniform_tensor<T>(Shape{1, groups, 1, 1}, T(1) / std::sqrt(T(2)), rng))),
        bias_(this->add_parameter("bias", Tensor<T>(Shape{1, groups, 1, 1}))),
        bn_(this->add_child("bn", std::make_unique<BatchNorm<T>>(groups))) {}

  /// Grouped conv output before normalization.
  Var<T> combine(const Var<T>& primary, const Var<T>& secondary) const {
    if (primary.shape() != secondary.shape())
      fail(ErrorKind::Shape, "fused_stat_combine: " + primary.shape().str() + " vs " + secondary.shape().str());
    if (primary.shape().c != groups_) fail(ErrorKind::Shape, "fused_stat_combine: group count mismatch");
    return add(add(mul(primary, w_primary_.var()), mul(secondary, w_secondary_.var())), bias_.var());
  }

  Var<T> forward(const Var<T>& primary, const Var<T>& secondary, bool training) {
    return relu(bn_.forward(combine(primary, secondary), training));
  }

  Parameter<T>& w_primary() { return w_primary_; }
  Parameter<T>& w_secondary() { return w_secondary_; }
  Parameter<T>& bias() { return bias_; }
  BatchNorm<T>& bn() { return bn_; }

 private:
  int groups_;
  Parameter<T>& w_primary_;
  Parameter<T>& w_secondary_;
  Parameter<T>& bias_;
  BatchNorm<T>& bn_;
};

/// GAP fused with a second statistic (max, std or skew).
template <class T>
class FusedStatSqueeze : public AttentionOp<T> {
 public:
  FusedStatSqueeze(SqueezeAxis axis, Stat secondary, const Geometry& g, std::string_view name, Rng& rng)
      : axis_(axis),
        secondary_(secondary),
        name_(name),
        fuse_(this->add_child("fuse", std::make_unique<FusedStatCombine<T>>(axis == SqueezeAxis::Channel ? g.c : 1,
                                                                            rng))) {}

  Var<T> statistics_secondary(const Var<T>& x) const {
    return reduce_stat(x, detail::reduced_axes(axis_), secondary_, T(kStatEps));
  }

  Var<T> forward(const Var<T>& x, bool training) override {
    auto mean = reduce_stat(x, detail::reduced_axes(axis_), Stat::Mean);
    return fuse_.forward(mean, statistics_secondary(x), training);
  }
  std::string_view name() const override { return name_; }
  FusedStatCombine<T>& fuser() { return fuse_; }

 private:
  SqueezeAxis axis_;
  Stat secondary_;
  std::string_view name_;
  FusedStatCombine<T>& fuse_;
};

/// Standardization followed by an L2 norm. The slice is standardized across
/// the kept axis (per position over channels for channel descriptors, per
/// channel over positions for spatial descriptors), scaled by a per-channel
/// affine, and then collapsed with sqrt(sum y^2 + eps) over the reduced axis.
template <class T>
class InstanceL2Squeeze : public AttentionOp<T> {
 public:
  InstanceL2Squeeze(SqueezeAxis axis, const Geometry& g)
      : axis_(axis),
        gamma_(this->add_parameter("gamma", Tensor<T>(Shape{1, g.c, 1, 1}, T(1)))),
        beta_(this->add_parameter("beta", Tensor<T>(Shape{1, g.c, 1, 1}, T(0)))) {}

  Var<T> forward(const Var<T>& x, bool) override {
    const unsigned reduce = detail::reduced_axes(axis_);
    const unsigned standardize_over = axis_ == SqueezeAxis::Channel ? kChannel : kSpatial;
    if (axis_ == SqueezeAxis::Channel && x.shape().c < 2)
      fail(ErrorKind::Shape, "IN_L2NORM: channel descriptors need at least 2 channels");
    auto y = instance_norm(x, gamma_.var(), beta_.var(), standardize_over, T(kStatEps));
    return sqrt(add_scalar(reduce_sum(square(y), reduce), T(kStatEps)));
  }
  std::string_view name() const override { return "IN_L2NORM"; }

 private:
  SqueezeAxis axis_;
  Parameter<T>& gamma_;
  Parameter<T>& beta_;
};

/// Global second-order pooling: adaptive average pooling shrinks the kept
/// axis by 4, a population covariance is taken over the samples of the
/// reduced axis, a row-wise convolution (one weight vector shared by all
/// rows) compresses the matrix to a vector, and a linear map restores the
/// descriptor length.
template <class T>
class GsopSqueeze : public AttentionOp<T> {
 public:
  GsopSqueeze(SqueezeAxis axis, const Geometry& g, Rng& rng) : axis_(axis), geom_(g) {
    if (axis == SqueezeAxis::Channel && g.hw() < 2)
      fail(ErrorKind::Shape, "GSOP: channel covariance needs H*W >= 2");
    if (axis == SqueezeAxis::Spatial && g.c < 2) fail(ErrorKind::Shape, "GSOP: spatial covariance needs C >= 2");
    const int len = axis == SqueezeAxis::Channel ? g.c : g.hw();
    pooled_ = (len + kGsopShrink - 1) / kGsopShrink;
    pool_ = detail::adaptive_pool_matrix<T>(len, pooled_);
    row_weight_ = &this->add_parameter(
        "row_weight", uniform_tensor<T>(Shape{1, 1, pooled_, 1}, T(1) / std::sqrt(T(pooled_)), rng));
    restore_ = &this->add_child("restore", std::make_unique<Dense<T>>(pooled_, len, rng));
  }

  int pooled_size() const { return pooled_; }

  /// (B,1,n,n) covariance of the pooled features.
  Var<T> covariance(const Var<T>& x) const {
    const Shape s = x.shape();
    if (s.c != geom_.c || s.h != geom_.h || s.w != geom_.w)
      fail(ErrorKind::Shape, "GSOP: input " + s.str() + " differs from construction geometry");
    auto flat = reshape(x, Shape{s.n, 1, s.c, s.h * s.w});
    if (axis_ == SqueezeAxis::Channel) {
      auto pooled = bmm(Var<T>::constant(pool_), flat);  // (B,1,n,HW)
      auto centered = sub(pooled, reduce_mean(pooled, kWidth));
      return scale(bmm(centered, transpose_hw(centered)), T(1) / static_cast<T>(s.h * s.w));
    }
    auto pooled = bmm(flat, Var<T>::constant(detail::transposed(pool_)));  // (B,1,C,m)
    auto centered = sub(pooled, reduce_mean(pooled, kHeight));
    return scale(bmm(transpose_hw(centered), centered), T(1) / static_cast<T>(s.c));
  }

  Var<T> forward(const Var<T>& x, bool) override {
    const Shape s = x.shape();
    auto rows = bmm(covariance(x), row_weight_->var());  // (B,1,n,1)
    auto out = restore_->forward(reshape(rows, Shape{s.n, pooled_, 1, 1}));
    return axis_ == SqueezeAxis::Channel ? out : reshape(out, Shape{s.n, 1, s.h, s.w});
  }
  std::string_view name() const override { return "GSOP"; }

  Parameter<T>& row_weight() { return *row_weight_; }
  Dense<T>& restore() { return *restore_; }

 private:
  SqueezeAxis axis_;
  Geometry geom_;
  int pooled_ = 1;
  Tensor<T> pool_;
  Parameter<T>* row_weight_ = nullptr;
  Dense<T>* restore_ = nullptr;
};

// --------------------------------------------------------------- excitations

template <class T>
class FcReduceExcite : public AttentionOp<T> {
 public:
  FcReduceExcite(int channels, Rng& rng)
      : reduce_(this->add_child("reduce", std::make_unique<Dense<T>>(channels, fc_hidden_width(channels), rng))),
        expand_(this->add_child("expand", std::make_unique<Dense<T>>(fc_hidden_width(channels), channels, rng))) {}
  Var<T> forward(const Var<T>& s, bool) override {
    const Shape shape = s.shape();
    return reshape(sigmoid(expand_.forward(relu(reduce_.forward(s)))), shape);
  }
  std::string_view name() const override { return "FC_REDUCE"; }
  Dense<T>& reduce() { return reduce_; }
  Dense<T>& expand() { return expand_; }

 private:
  Dense<T>& reduce_;
  Dense<T>& expand_;
};

/// `depth` same-padded 1D convolutions over the channel sequence, joined by
/// ReLU, then sigmoid.
template <class T>
class Conv1dExcite : public AttentionOp<T> {
 public:
  Conv1dExcite(int kernel, int depth, std::string_view name, Rng& rng) : name_(name) {
    for (int i = 0; i < depth; ++i) {
      weights_.push_back(&this->add_parameter(
          "conv" + std::to_string(i) + ".weight",
          uniform_tensor<T>(Shape{1, 1, 1, kernel}, T(1) / std::sqrt(T(kernel)), rng)));
      biases_.push_back(&this->add_parameter("conv" + std::to_string(i) + ".bias", Tensor<T>(Shape{})));
    }
  }
  Var<T> forward(const Var<T>& s, bool) override {
    const Shape shape = s.shape();
    auto seq = reshape(s, Shape{shape.n, 1, 1, shape.c});
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      if (i > 0) seq = relu(seq);
      seq = conv1d(seq, weights_[i]->var(), std::optional<Var<T>>(biases_[i]->var()));
    }
    return reshape(sigmoid(seq), shape);
  }
  std::string_view name() const override { return name_; }
  Parameter<T>& weight(std::size_t i) { return *weights_.at(i); }
  Parameter<T>& bias(std::size_t i) { return *biases_.at(i); }

 private:
  std::string_view name_;
  std::vector<Parameter<T>*> weights_;
  std::vector<Parameter<T>*> biases_;
};

/// gamma * s + beta with one (gamma, beta) per descriptor position, then sigmoid.
template <class T>
class AffineExcite : public AttentionOp<T> {
 public:
  explicit AffineExcite(Shape param_shape)
      : shape_(param_shape),
        gamma_(this->add_parameter("gamma", Tensor<T>(param_shape, T(1)))),
        beta_(this->add_parameter("beta", Tensor<T>(param_shape, T(0)))) {}
  Var<T> forward(const Var<T>& s, bool) override {
    const Shape in = s.shape();
    if (in.c != shape_.c || in.h != shape_.h || in.w != shape_.w)
      fail(ErrorKind::Shape, "AFFINE: input " + in.str() + " differs from construction shape " + shape_.str());
    return sigmoid(add(mul(s, gamma_.var()), beta_.var()));
  }
  std::string_view name() const override { return "AFFINE"; }
  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }

 private:
  Shape shape_;
  Parameter<T>& gamma_;
  Parameter<T>& beta_;
};

/// Chain of single-channel 2D convolutions joined by ReLU, then sigmoid.
/// Separable kernels are a linear k x 1 followed by 1 x k pair.
template <class T>
class Conv2dExcite : public AttentionOp<T> {
 public:
  struct Layer {
    int kh, kw;
    bool relu_before;
  };
  Conv2dExcite(std::vector<Layer> layers, std::string_view name, Rng& rng) : layers_(std::move(layers)), name_(name) {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      convs_.push_back(&this->add_child(
          "conv" + std::to_string(i),
          std::make_unique<Conv2d<T>>(1, 1, layers_[i].kh, layers_[i].kw,
                                      Conv2dOptions::same(layers_[i].kh, layers_[i].kw), true, rng)));
  }
  Var<T> forward(const Var<T>& m, bool) override {
    if (m.shape().c != 1) fail(ErrorKind::Shape, "spatial excitation expects a (B,1,H,W) map");
    Var<T> y = m;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      if (layers_[i].relu_before) y = relu(y);
      y = convs_[i]->forward(y);
    }
    return sigmoid(y);
  }
  std::string_view name() const override { return name_; }
  Conv2d<T>& conv(std::size_t i) { return *convs_.at(i); }

 private:
  std::vector<Layer> layers_;
  std::string_view name_;
  std::vector<Conv2d<T>*> convs_;
};

// ----------------------------------------------------------------- factories

template <class K>
std::string_view kind_name(K kind) {
  const auto i = static_cast<std::size_t>(kind);
  if constexpr (std::is_same_v<K, ChannelExciteKind>)
    return kChannelExciteNames[i];
  else if constexpr (std::is_same_v<K, SpatialExciteKind>)
    return kSpatialExciteNames[i];
  else
    return kSqueezeNames[i];
}

template <class K>
std::optional<K> parse_kind(std::string_view name) {
  for (int i = 0; i < kOpsPerSet; ++i)
    if (kind_name(static_cast<K>(i)) == name) return static_cast<K>(i);
  return std::nullopt;
}

template <class T>
std::unique_ptr<AttentionOp<T>> make_squeeze(SqueezeAxis axis, int kind_index, const Geometry& g, Rng& rng) {
  if (g.c < 1 || g.h < 1 || g.w < 1) fail(ErrorKind::Shape, "squeeze: invalid geometry");
  const auto name = kSqueezeNames.at(static_cast<std::size_t>(kind_index));
  switch (static_cast<ChannelSqueezeKind>(kind_index)) {
    case ChannelSqueezeKind::GAP: return std::make_unique<StatSqueeze<T>>(axis, Stat::Mean, name);
    case ChannelSqueezeKind::GSOP: return std::make_unique<GsopSqueeze<T>>(axis, g, rng);
    case ChannelSqueezeKind::IN_L2NORM: return std::make_unique<InstanceL2Squeeze<T>>(axis, g);
    case ChannelSqueezeKind::L4_POOL: return std::make_unique<StatSqueeze<T>>(axis, Stat::Lp, name);
    case ChannelSqueezeKind::GAP_GMP: return std::make_unique<FusedStatSqueeze<T>>(axis, Stat::Max, g, name, rng);
    case ChannelSqueezeKind::GAP_STD: return std::make_unique<FusedStatSqueeze<T>>(axis, Stat::Std, g, name, rng);
    case ChannelSqueezeKind::GAP_SKEW: return std::make_unique<FusedStatSqueeze<T>>(axis, Stat::Skew, g, name, rng);
  }
  fail(ErrorKind::Value, "unknown squeeze kind");
}

template <class T>
std::unique_ptr<AttentionOp<T>> make_channel_squeeze(ChannelSqueezeKind kind, const Geometry& g, Rng& rng) {
  return make_squeeze<T>(SqueezeAxis::Channel, static_cast<int>(kind), g, rng);
}

template <class T>
std::unique_ptr<AttentionOp<T>> make_spatial_squeeze(SpatialSqueezeKind kind, const Geometry& g, Rng& rng) {
  return make_squeeze<T>(SqueezeAxis::Spatial, static_cast<int>(kind), g, rng);
}

template <class T>
std::unique_ptr<AttentionOp<T>> make_channel_excite(ChannelExciteKind kind, const Geometry& g, Rng& rng) {
  const auto name = kind_name(kind);
  switch (kind) {
    case ChannelExciteKind::FC_REDUCE: return std::make_unique<FcReduceExcite<T>>(g.c, rng);
    case ChannelExciteKind::CONV1D_K3: return std::make_unique<Conv1dExcite<T>>(3, 1, name, rng);
    case ChannelExciteKind::CONV1D_K5: return std::make_unique<Conv1dExcite<T>>(5, 1, name, rng);
    case ChannelExciteKind::CONV1D_K7: return std::make_unique<Conv1dExcite<T>>(7, 1, name, rng);
    case ChannelExciteKind::STACK2_CONV1D_K3: return std::make_unique<Conv1dExcite<T>>(3, 2, name, rng);
    case ChannelExciteKind::STACK3_CONV1D_K3: return std::make_unique<Conv1dExcite<T>>(3, 3, name, rng);
    case ChannelExciteKind::AFFINE: return std::make_unique<AffineExcite<T>>(Shape{1, g.c, 1, 1});
  }
  fail(ErrorKind::Value, "unknown channel excitation kind");
}

template <class T>
std::unique_ptr<AttentionOp<T>> make_spatial_excite(SpatialExciteKind kind, const Geometry& g, Rng& rng) {
  using L = typename Conv2dExcite<T>::Layer;
  const auto name = kind_name(kind);
  switch (kind) {
    case SpatialExciteKind::CONV2D_K3: return std::make_unique<Conv2dExcite<T>>(std::vector<L>{{3, 3, false}}, name, rng);
    case SpatialExciteKind::CONV2D_K5: return std::make_unique<Conv2dExcite<T>>(std::vector<L>{{5, 5, false}}, name, rng);
    case SpatialExciteKind::CONV2D_K7: return std::make_unique<Conv2dExcite<T>>(std::vector<L>{{7, 7, false}}, name, rng);
    case SpatialExciteKind::STACK2_CONV2D_K3:
      return std::make_unique<Conv2dExcite<T>>(std::vector<L>{{3, 3, false}, {3, 3, true}}, name, rng);
    case SpatialExciteKind::SEPCONV_K3:
      return std::make_unique<Conv2dExcite<T>>(std::vector<L>{{3, 1, false}, {1, 3, false}}, name, rng);
    case SpatialExciteKind::SEPCONV_K5:
      return std::make_unique<Conv2dExcite<T>>(std::vector<L>{{5, 1, false}, {1, 5, false}}, name, rng);
    case SpatialExciteKind::AFFINE: return std::make_unique<AffineExcite<T>>(Shape{1, 1, g.h, g.w});
  }
  fail(ErrorKind::Value, "unknown spatial excitation kind");
}

// ------------------------------------------------------------ op families

enum class OpFamily { ChannelSqueeze, SpatialSqueeze, ChannelExcite, SpatialExcite };

inline constexpr std::array<OpFamily, 4> kOpFamilies{OpFamily::ChannelSqueeze, OpFamily::SpatialSqueeze,
                                                      OpFamily::ChannelExcite, OpFamily::SpatialExcite};

inline std::string_view family_name(OpFamily f) {
  switch (f) {
    case OpFamily::ChannelSqueeze: return "channel_squeeze";
    case OpFamily::SpatialSqueeze: return "spatial_squeeze";
    case OpFamily::ChannelExcite: return "channel_excite";
    case OpFamily::SpatialExcite: return "spatial_excite";
  }
  return "?";
}

inline std::string_view op_kind_name(OpFamily f, int k) {
  const auto i = static_cast<std::size_t>(k);
  switch (f) {
    case OpFamily::ChannelExcite: return kChannelExciteNames.at(i);
    case OpFamily::SpatialExcite: return kSpatialExciteNames.at(i);
    default: return kSqueezeNames.at(i);
  }
}

template <class T>
std::unique_ptr<AttentionOp<T>> make_op(OpFamily f, int k, const Geometry& g, Rng& rng) {
  switch (f) {
    case OpFamily::ChannelSqueeze: return make_channel_squeeze<T>(ChannelSqueezeKind(k), g, rng);
    case OpFamily::SpatialSqueeze: return make_spatial_squeeze<T>(SpatialSqueezeKind(k), g, rng);
    case OpFamily::ChannelExcite: return make_channel_excite<T>(ChannelExciteKind(k), g, rng);
    case OpFamily::SpatialExcite: return make_spatial_excite<T>(SpatialExciteKind(k), g, rng);
  }
  fail(ErrorKind::Value, "unknown operation family");
}

inline Shape op_input_shape(OpFamily f, int batch, const Geometry& g) {
  switch (f) {
    case OpFamily::ChannelExcite: return {batch, g.c, 1, 1};
    case OpFamily::SpatialExcite: return {batch, 1, g.h, g.w};
    default: return {batch, g.c, g.h, g.w};
  }
}

inline Shape op_output_shape(OpFamily f, int batch, const Geometry& g) {
  switch (f) {
    case OpFamily::ChannelSqueeze:
    case OpFamily::ChannelExcite: return {batch, g.c, 1, 1};
    default: return {batch, 1, g.h, g.w};
  }
}

/// Convenience entry points taking the input tensor directly.
template <class T>
Var<T> channel_squeeze(AttentionOp<T>& op, const Var<T>& x, bool training = true) {
  if (x.shape().c < 1) fail(ErrorKind::Shape, "channel_squeeze: C < 1");
  return op.forward(x, training);
}

// ------------------------------------------------------ analytic param counts

/// Trainable scalars of one operation instance.
inline std::size_t squeeze_param_count(SqueezeAxis axis, int kind_index, const Geometry& g,
                                       bool count_fusion_norm = true) {
  const std::size_t groups = axis == SqueezeAxis::Channel ? g.c : 1;
  const std::size_t len = axis == SqueezeAxis::Channel ? g.c : static_cast<std::size_t>(g.hw());
  switch (static_cast<ChannelSqueezeKind>(kind_index)) {
    case ChannelSqueezeKind::GAP:
    case ChannelSqueezeKind::L4_POOL: return 0;
    case ChannelSqueezeKind::GSOP: {
      const std::size_t n = (len + kGsopShrink - 1) / kGsopShrink;
      return n + n * len + len;
    }
    case ChannelSqueezeKind::IN_L2NORM: return 2 * static_cast<std::size_t>(g.c);
    case ChannelSqueezeKind::GAP_GMP:
    case ChannelSqueezeKind::GAP_STD:
    case ChannelSqueezeKind::GAP_SKEW: return 3 * groups + (count_fusion_norm ? 2 * groups : 0);
  }
  fail(ErrorKind::Value, "unknown squeeze kind");
}

inline std::size_t channel_excite_param_count(ChannelExciteKind kind, const Geometry& g) {
  const std::size_t c = g.c;
  switch (kind) {
    case ChannelExciteKind::FC_REDUCE: {
      const std::size_t hid = fc_hidden_width(g.c);
      return c * hid + hid + hid * c + c;
    }
    case ChannelExciteKind::CONV1D_K3: return 4;
    case ChannelExciteKind::CONV1D_K5: return 6;
    case ChannelExciteKind::CONV1D_K7: return 8;
    case ChannelExciteKind::STACK2_CONV1D_K3: return 8;
    case ChannelExciteKind::STACK3_CONV1D_K3: return 12;
    case ChannelExciteKind::AFFINE: return 2 * c;
  }
  fail(ErrorKind::Value, "unknown channel excitation kind");
}

inline std::size_t spatial_excite_param_count(SpatialExciteKind kind, const Geometry& g) {
  switch (kind) {
    case SpatialExciteKind::CONV2D_K3: return 10;
    case SpatialExciteKind::CONV2D_K5: return 26;
    case SpatialExciteKind::CONV2D_K7: return 50;
    case SpatialExciteKind::STACK2_CONV2D_K3: return 20;
    case SpatialExciteKind::SEPCONV_K3: return 8;
    case SpatialExciteKind::SEPCONV_K5: return 12;
    case SpatialExciteKind::AFFINE: return 2 * static_cast<std::size_t>(g.hw());
  }
  fail(ErrorKind::Value, "unknown spatial excitation kind");
}

}  // namespace sase
