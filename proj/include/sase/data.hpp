#pragma once

// Image datasets: the CIFAR-10 binary format, seeded synthetic tasks, the
// half split used by the search and mini-batch assembly.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sase/nn.hpp"

namespace sase {

enum class SplitRole { OmegaHalf, AlphaHalf, RetrainTrain, Test };

inline const char* role_name(SplitRole r) {
  switch (r) {
    case SplitRole::OmegaHalf: return "omega-half";
    case SplitRole::AlphaHalf: return "alpha-half";
    case SplitRole::RetrainTrain: return "retrain-train";
    case SplitRole::Test: return "test";
  }
  return "unknown";
}

/// Normalized images (N, C, H, W) and labels in [0, classes).
struct Dataset {
  Tensor<float> images{Shape{1, 1, 1, 1}};
  std::vector<int> labels;
  int classes = 0;
  SplitRole role = SplitRole::RetrainTrain;
  std::vector<std::size_t> source_index;  // position of each example in the set it was taken from

  std::size_t size() const { return labels.size(); }
  Shape image_shape() const { return {1, images.shape().c, images.shape().h, images.shape().w}; }
};

/// Fixed per-channel constants applied as (x - mean) / std after scaling to [0, 1].
struct Normalization {
  std::vector<float> mean;
  std::vector<float> std;
};

inline Normalization cifar_normalization() { return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}}; }
inline Normalization synthetic_normalization(int channels) {
  return {std::vector<float>(channels, 0.5f), std::vector<float>(channels, 0.25f)};
}

inline void normalize_in_place(Tensor<float>& images, const Normalization& norm) {
  const Shape s = images.shape();
  if (static_cast<int>(norm.mean.size()) != s.c || static_cast<int>(norm.std.size()) != s.c)
    fail(ErrorKind::Shape, "normalization constants do not match channel count");
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      float* p = images.storage().data() + images.index(n, c, 0, 0);
      for (std::size_t k = 0; k < plane; ++k) p[k] = (p[k] - norm.mean[c]) / norm.std[c];
    }
}

// ----------------------------------------------------------------- CIFAR-10

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr int kCifarSide = 32;
inline constexpr int kCifarClasses = 10;

/// One batch file: 1 label byte then 3072 channel-planar pixel bytes per
/// record. Pixels are scaled to [0, 1] but not normalized.
inline Dataset read_cifar_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0)
    fail(ErrorKind::Format, path + ": length " + std::to_string(bytes.size()) + " is not a positive multiple of 3073");
  const int n = static_cast<int>(bytes.size() / kCifarRecordBytes);
  Dataset d;
  d.classes = kCifarClasses;
  d.images = Tensor<float>(Shape{n, 3, kCifarSide, kCifarSide});
  d.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + static_cast<std::size_t>(i) * kCifarRecordBytes;
    if (rec[0] > 9) fail(ErrorKind::Format, path + ": label byte " + std::to_string(rec[0]) + " out of range");
    d.labels[i] = rec[0];
    float* dst = d.images.storage().data() + static_cast<std::size_t>(i) * 3072;
    for (int k = 0; k < 3072; ++k) dst[k] = static_cast<float>(rec[1 + k]) / 255.0f;
  }
  d.source_index.resize(n);
  std::iota(d.source_index.begin(), d.source_index.end(), std::size_t{0});
  return d;
}

/// Inverse of read_cifar_file for images already in [0, 1].
inline void write_cifar_file(const std::string& path, const Dataset& d) {
  if (d.images.shape().c != 3 || d.images.shape().h != kCifarSide || d.images.shape().w != kCifarSide)
    fail(ErrorKind::Shape, "CIFAR records hold 3x32x32 images");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write " + path);
  for (std::size_t i = 0; i < d.size(); ++i) {
    out.put(static_cast<char>(d.labels[i]));
    const float* src = d.images.storage().data() + i * 3072;
    for (int k = 0; k < 3072; ++k)
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(src[k], 0.0f, 1.0f) * 255.0f))));
  }
  if (!out) fail(ErrorKind::Io, "write failed for " + path);
}

inline Dataset concat(const std::vector<Dataset>& parts) {
  if (parts.empty()) fail(ErrorKind::Value, "concat of no datasets");
  const Shape s0 = parts[0].images.shape();
  int total = 0;
  for (const auto& p : parts) total += static_cast<int>(p.size());
  Dataset d;
  d.classes = parts[0].classes;
  d.role = parts[0].role;
  d.images = Tensor<float>(Shape{total, s0.c, s0.h, s0.w});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.images.storage().begin(), p.images.storage().end(), d.images.storage().begin() + off);
    off += p.images.size();
    d.labels.insert(d.labels.end(), p.labels.begin(), p.labels.end());
  }
  d.source_index.resize(total);
  std::iota(d.source_index.begin(), d.source_index.end(), std::size_t{0});
  return d;
}

/// First `limit` examples (all when limit is 0).
inline Dataset head(const Dataset& d, std::size_t limit) {
  if (limit == 0 || limit >= d.size()) return d;
  std::vector<std::size_t> idx(limit);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Dataset out;
  out.classes = d.classes;
  out.role = d.role;
  const Shape s = d.images.shape();
  out.images = Tensor<float>(Shape{static_cast<int>(limit), s.c, s.h, s.w});
  std::copy_n(d.images.storage().begin(), out.images.size(), out.images.storage().begin());
  out.labels.assign(d.labels.begin(), d.labels.begin() + static_cast<std::ptrdiff_t>(limit));
  out.source_index = idx;
  return out;
}

/// Training role reads data_batch_1..5.bin, test reads test_batch.bin.
/// The result is normalized with cifar_normalization().
inline Dataset load_cifar_binary(const std::string& dir, SplitRole role, std::size_t limit = 0) {
  std::vector<Dataset> parts;
  if (role == SplitRole::Test) {
    parts.push_back(read_cifar_file((std::filesystem::path(dir) / "test_batch.bin").string()));
  } else {
    for (int b = 1; b <= 5; ++b)
      parts.push_back(read_cifar_file((std::filesystem::path(dir) / ("data_batch_" + std::to_string(b) + ".bin")).string()));
  }
  Dataset d = head(concat(parts), limit);
  d.role = role;
  normalize_in_place(d.images, cifar_normalization());
  return d;
}

/// Data root from SASE_DATA_ROOT, unless `flag` is non-empty.
inline std::string resolve_data_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("SASE_DATA_ROOT")) return env;
  return {};
}

// ---------------------------------------------------------------- synthetic

enum class SynthRule { Prototype, ChannelMax };

struct SynthSpec {
  int classes = 4;
  int channels = 3;
  int side = 16;
  int train = 1024;
  int test = 512;
  SynthRule rule = SynthRule::Prototype;
  double noise = 0.5;
  std::uint64_t seed = 0;

  /// "default", "rigged", or comma separated key=value overrides on top of
  /// either, e.g. "rigged,train=512,side=8".
  static SynthSpec parse(const std::string& text) {
    SynthSpec s;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty() || item == "default") continue;
      if (item == "rigged") {
        s.rule = SynthRule::ChannelMax;
        s.classes = 3;
        continue;
      }
      const auto eq = item.find('=');
      if (eq == std::string::npos) fail(ErrorKind::Usage, "synthetic spec: unknown item '" + item + "'");
      const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
      try {
        if (key == "k" || key == "classes") s.classes = std::stoi(val);
        else if (key == "c" || key == "channels") s.channels = std::stoi(val);
        else if (key == "side") s.side = std::stoi(val);
        else if (key == "train") s.train = std::stoi(val);
        else if (key == "test") s.test = std::stoi(val);
        else if (key == "noise") s.noise = std::stod(val);
        else if (key == "seed") s.seed = std::stoull(val);
        else if (key == "rule") {
          if (val == "prototype") s.rule = SynthRule::Prototype;
          else if (val == "channel-max") s.rule = SynthRule::ChannelMax;
          else fail(ErrorKind::Usage, "synthetic spec: unknown rule '" + val + "'");
        } else {
          fail(ErrorKind::Usage, "synthetic spec: unknown key '" + key + "'");
        }
      } catch (const std::logic_error&) {
        fail(ErrorKind::Usage, "synthetic spec: bad value for '" + key + "'");
      }
    }
    return s;
  }

  std::string str() const {
    std::ostringstream os;
    os << "rule=" << (rule == SynthRule::Prototype ? "prototype" : "channel-max") << ",k=" << classes
       << ",c=" << channels << ",side=" << side << ",train=" << train << ",test=" << test << ",noise=" << noise
       << ",seed=" << seed;
    return os.str();
  }
};

namespace detail {

// Smooth left-right symmetric field in [0, 1] from a few random cosines.
inline std::vector<float> smooth_pattern(int side, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> f(static_cast<std::size_t>(side) * side, 0.0);
  for (int t = 0; t < 3; ++t) {
    const double fy = 1 + 2 * u(rng), fx = 1 + 2 * u(rng), ph = 6.283185307179586 * u(rng);
    const double amp = 0.5 + u(rng);
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const double xs = std::abs((x + 0.5) / side - 0.5);  // mirror symmetric
        f[y * side + x] += amp * std::cos(6.283185307179586 * (fy * y / side) + fx * 6.283185307179586 * xs + ph);
      }
  }
  const auto [lo, hi] = std::minmax_element(f.begin(), f.end());
  std::vector<float> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = static_cast<float>(0.15 + 0.7 * (f[i] - *lo) / (*hi - *lo));
  return out;
}

}  // namespace detail

/// Seeded, class-balanced synthetic images in [0, 1], normalized with
/// (0.5, 0.25). Prototype rule: one smooth pattern per class and channel plus
/// Gaussian noise. Channel-max rule: noise with one bright pixel placed in
/// channel `label`; classes equal channels.
inline std::pair<Dataset, Dataset> synth_dataset(const SynthSpec& spec) {
  if (spec.classes < 2) fail(ErrorKind::Value, "synthetic data needs at least 2 classes");
  if (spec.channels < 1 || spec.side < 2 || spec.train < 1 || spec.test < 1 || spec.noise < 0)
    fail(ErrorKind::Value, "synthetic spec has invalid extents");
  if (spec.rule == SynthRule::ChannelMax && spec.classes != spec.channels)
    fail(ErrorKind::Value, "channel-max rule needs as many classes as channels");
  Rng rng(spec.seed);
  std::vector<std::vector<float>> protos;
  if (spec.rule == SynthRule::Prototype)
    for (int k = 0; k < spec.classes * spec.channels; ++k) protos.push_back(detail::smooth_pattern(spec.side, rng));

  auto make = [&](int n, SplitRole role) {
    Dataset d;
    d.classes = spec.classes;
    d.role = role;
    d.images = Tensor<float>(Shape{n, spec.channels, spec.side, spec.side});
    d.labels.resize(n);
    std::normal_distribution<double> noise(0.0, spec.noise);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> pos(0, spec.side * spec.side - 1);
    const std::size_t plane = static_cast<std::size_t>(spec.side) * spec.side;
    for (int i = 0; i < n; ++i) {
      const int label = i % spec.classes;
      d.labels[i] = label;
      for (int c = 0; c < spec.channels; ++c) {
        float* p = d.images.storage().data() + d.images.index(i, c, 0, 0);
        if (spec.rule == SynthRule::Prototype) {
          const auto& proto = protos[static_cast<std::size_t>(label) * spec.channels + c];
          for (std::size_t k = 0; k < plane; ++k)
            p[k] = std::clamp(static_cast<float>(proto[k] + noise(rng)), 0.0f, 1.0f);
        } else {
          for (std::size_t k = 0; k < plane; ++k) p[k] = static_cast<float>(0.6 * u(rng));
        }
      }
      if (spec.rule == SynthRule::ChannelMax) {
        float* p = d.images.storage().data() + d.images.index(i, label, 0, 0);
        p[pos(rng)] = 1.0f;
      }
    }
    // Interleaved labels are shuffled so batches are not ordered by class.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Dataset out = d;
    for (int i = 0; i < n; ++i) {
      std::copy_n(d.images.storage().begin() + perm[i] * plane * spec.channels, plane * spec.channels,
                  out.images.storage().begin() + static_cast<std::size_t>(i) * plane * spec.channels);
      out.labels[i] = d.labels[perm[i]];
    }
    out.source_index.resize(n);
    std::iota(out.source_index.begin(), out.source_index.end(), std::size_t{0});
    normalize_in_place(out.images, synthetic_normalization(spec.channels));
    return out;
  };
  Dataset train = make(spec.train, SplitRole::RetrainTrain);
  Dataset test = make(spec.test, SplitRole::Test);
  return {std::move(train), std::move(test)};
}

// ------------------------------------------------------------------- splits

/// Examples at `idx` in order; source_index records their positions in `d`.
inline Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx, SplitRole role) {
  const Shape s = d.images.shape();
  const std::size_t stride = static_cast<std::size_t>(s.c) * s.h * s.w;
  Dataset out;
  out.classes = d.classes;
  out.role = role;
  out.images = Tensor<float>(Shape{static_cast<int>(std::max<std::size_t>(idx.size(), 1)), s.c, s.h, s.w});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= d.size()) fail(ErrorKind::Value, "subset index out of range");
    std::copy_n(d.images.storage().begin() + idx[i] * stride, stride, out.images.storage().begin() + i * stride);
    out.labels.push_back(d.labels[idx[i]]);
  }
  out.source_index = idx;
  return out;
}

/// Seeded partition into two disjoint halves (the first gets the extra
/// example when the size is odd).
inline std::pair<Dataset, Dataset> split_halves(const Dataset& d, std::uint64_t seed) {
  if (d.size() < 2) fail(ErrorKind::Value, "cannot split fewer than 2 examples");
  std::vector<std::size_t> perm(d.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t half = (d.size() + 1) / 2;
  std::vector<std::size_t> a(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(half));
  std::vector<std::size_t> b(perm.begin() + static_cast<std::ptrdiff_t>(half), perm.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {subset(d, a, SplitRole::OmegaHalf), subset(d, b, SplitRole::AlphaHalf)};
}

// ------------------------------------------------------------------ batches

template <class T>
struct Batch {
  Tensor<T> images;
  std::vector<int> labels;
};

template <class T>
Batch<T> gather(const Dataset& d, const std::vector<std::size_t>& order, std::size_t begin, std::size_t count) {
  const Shape s = d.images.shape();
  const std::size_t stride = static_cast<std::size_t>(s.c) * s.h * s.w;
  Batch<T> b{Tensor<T>(Shape{static_cast<int>(count), s.c, s.h, s.w}), {}};
  b.labels.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t src = order[begin + i];
    std::copy_n(d.images.storage().begin() + src * stride, stride, b.images.storage().begin() + i * stride);
    b.labels.push_back(d.labels[src]);
  }
  return b;
}

inline std::vector<std::size_t> shuffled_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// Random horizontal flip and a random shift of up to `pad` pixels with zero
/// fill (zero is the channel mean after normalization).
template <class T>
void augment(Tensor<T>& images, int pad, Rng& rng) {
  const Shape s = images.shape();
  std::bernoulli_distribution flip(0.5);
  std::uniform_int_distribution<int> shift(-pad, pad);
  std::vector<T> tmp(static_cast<std::size_t>(s.h) * s.w);
  for (int n = 0; n < s.n; ++n) {
    const bool f = flip(rng);
    const int dy = shift(rng), dx = shift(rng);
    for (int c = 0; c < s.c; ++c) {
      T* p = images.storage().data() + images.index(n, c, 0, 0);
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          const int sy = y + dy, sx0 = x + dx;
          const int sx = f ? s.w - 1 - sx0 : sx0;
          tmp[y * s.w + x] = (sy >= 0 && sy < s.h && sx0 >= 0 && sx0 < s.w) ? p[sy * s.w + sx] : T(0);
        }
      std::copy(tmp.begin(), tmp.end(), p);
    }
  }
}

}  // namespace sase
