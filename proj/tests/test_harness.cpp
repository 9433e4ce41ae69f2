#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "sase/harness.hpp"

using namespace sase;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("sase_test_" + name + "_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

Dataset cifar_pattern(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> byte(0, 255), label(0, 9);
  Dataset d;
  d.classes = 10;
  d.images = Tensor<float>(Shape{n, 3, 32, 32});
  for (auto& v : d.images.storage()) v = static_cast<float>(byte(rng)) / 255.0f;
  for (int i = 0; i < n; ++i) d.labels.push_back(label(rng));
  return d;
}

TEST(Cifar, RecordCountFromLength) {
  auto dir = scratch_dir("count");
  write_cifar_file((dir / "b.bin").string(), cifar_pattern(5, 1));
  EXPECT_EQ(fs::file_size(dir / "b.bin"), 5 * 3073u);
  EXPECT_EQ(read_cifar_file((dir / "b.bin").string()).size(), 5u);
  fs::remove_all(dir);
}

TEST(Cifar, WriteReadRoundTrip) {
  auto dir = scratch_dir("roundtrip");
  Dataset d;
  d.classes = 10;
  d.images = Tensor<float>(Shape{1, 3, 32, 32});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) d.images.at(0, c, y, x) = static_cast<float>((c * 97 + y * 7 + x) % 256) / 255.0f;
  d.labels = {7};
  write_cifar_file((dir / "one.bin").string(), d);

  std::ifstream raw(dir / "one.bin", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(raw)), std::istreambuf_iterator<char>());
  ASSERT_EQ(bytes.size(), 3073u);
  EXPECT_EQ(bytes[0], 7);
  EXPECT_EQ(bytes[1 + 1024 + 2 * 32 + 5], (97 + 14 + 5) % 256);  // channel 1 (G), row 2, col 5

  auto back = read_cifar_file((dir / "one.bin").string());
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.images, d.images);
  fs::remove_all(dir);
}

TEST(Cifar, TruncatedFileIsRejected) {
  auto dir = scratch_dir("trunc");
  write_cifar_file((dir / "b.bin").string(), cifar_pattern(3, 2));
  {
    std::ofstream out(dir / "b.bin", std::ios::binary | std::ios::app);
    out << std::string(100, 'x');
  }
  try {
    read_cifar_file((dir / "b.bin").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Format);
  }
  fs::remove_all(dir);
}

TEST(Cifar, LabelOutOfRangeIsRejected) {
  auto dir = scratch_dir("label");
  std::ofstream(dir / "b.bin", std::ios::binary) << static_cast<char>(10) << std::string(3072, '\0');
  EXPECT_THROW(read_cifar_file((dir / "b.bin").string()), Error);
  fs::remove_all(dir);
}

TEST(Cifar, MissingFileIsIoError) {
  try {
    read_cifar_file("/nonexistent/data_batch_1.bin");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
  }
}

TEST(Cifar, DirectoryLoaderNormalizesInOrder) {
  auto dir = scratch_dir("dir");
  std::vector<Dataset> parts;
  for (int b = 1; b <= 5; ++b) {
    parts.push_back(cifar_pattern(2, 10 + b));
    write_cifar_file((dir / ("data_batch_" + std::to_string(b) + ".bin")).string(), parts.back());
  }
  write_cifar_file((dir / "test_batch.bin").string(), cifar_pattern(3, 20));
  auto train = load_cifar_binary(dir.string(), SplitRole::RetrainTrain);
  auto test = load_cifar_binary(dir.string(), SplitRole::Test);
  ASSERT_EQ(train.size(), 10u);
  EXPECT_EQ(test.size(), 3u);
  const auto norm = cifar_normalization();
  for (int b = 0; b < 5; ++b)
    for (int i = 0; i < 2; ++i) {
      EXPECT_EQ(train.labels[b * 2 + i], parts[b].labels[i]);
      const float raw = std::round(parts[b].images.at(i, 2, 3, 4) * 255.0f) / 255.0f;
      EXPECT_FLOAT_EQ(train.images.at(b * 2 + i, 2, 3, 4), (raw - norm.mean[2]) / norm.std[2]);
    }
  EXPECT_EQ(load_cifar_binary(dir.string(), SplitRole::RetrainTrain, 4).size(), 4u);
  fs::remove_all(dir);
}

TEST(DataRoot, FlagOverridesEnvironment) {
  ::setenv("SASE_DATA_ROOT", "/from/env", 1);
  EXPECT_EQ(resolve_data_root(""), "/from/env");
  EXPECT_EQ(resolve_data_root("/from/flag"), "/from/flag");
  ::unsetenv("SASE_DATA_ROOT");
  EXPECT_EQ(resolve_data_root(""), "");
}

TEST(Synthetic, DeterministicPerSeed) {
  auto a = synth_dataset(SynthSpec{});
  auto b = synth_dataset(SynthSpec{});
  EXPECT_EQ(a.first.images, b.first.images);
  EXPECT_EQ(a.first.labels, b.first.labels);
  EXPECT_EQ(a.second.images, b.second.images);
  SynthSpec other;
  other.seed = 1;
  EXPECT_NE(synth_dataset(other).first.images, a.first.images);
}

TEST(Synthetic, BalancedAndNormalized) {
  auto [train, test] = synth_dataset(SynthSpec{});
  std::vector<int> counts(4);
  for (int l : train.labels) ++counts[l];
  for (int c : counts) EXPECT_EQ(c, 256);
  for (float v : train.images.storage()) {
    EXPECT_GE(v, (0.0f - 0.5f) / 0.25f - 1e-6f);
    EXPECT_LE(v, (1.0f - 0.5f) / 0.25f + 1e-6f);
  }
}

TEST(Synthetic, FewerThanTwoClassesIsAnError) {
  SynthSpec s;
  s.classes = 1;
  EXPECT_THROW(synth_dataset(s), Error);
}

TEST(Synthetic, SpecParsing) {
  auto s = SynthSpec::parse("default");
  EXPECT_EQ(s.classes, 4);
  EXPECT_EQ(s.side, 16);
  s = SynthSpec::parse("rigged,train=64,side=8");
  EXPECT_EQ(s.rule, SynthRule::ChannelMax);
  EXPECT_EQ(s.classes, 3);
  EXPECT_EQ(s.train, 64);
  EXPECT_EQ(s.side, 8);
  EXPECT_THROW(SynthSpec::parse("bogus=1"), Error);
  EXPECT_THROW(SynthSpec::parse("k=x"), Error);
}

// Nearest-centroid classifier: linear in x with w_k = mu_k, b_k = -|mu_k|^2/2.
TEST(Synthetic, LinearProbeSeparatesWellSeparatedPrototypes) {
  SynthSpec s;
  s.noise = 0.1;
  auto [train, test] = synth_dataset(s);
  const std::size_t dim = train.images.size() / train.size();
  std::vector<std::vector<double>> mu(s.classes, std::vector<double>(dim));
  std::vector<int> n(s.classes);
  for (std::size_t i = 0; i < train.size(); ++i) {
    ++n[train.labels[i]];
    for (std::size_t j = 0; j < dim; ++j) mu[train.labels[i]][j] += train.images[i * dim + j];
  }
  for (int k = 0; k < s.classes; ++k)
    for (auto& v : mu[k]) v /= n[k];
  int correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    int best = 0;
    double best_score = -1e300;
    for (int k = 0; k < s.classes; ++k) {
      double score = 0;
      for (std::size_t j = 0; j < dim; ++j) score += mu[k][j] * (test.images[i * dim + j] - 0.5 * mu[k][j]);
      if (score > best_score) best_score = score, best = k;
    }
    correct += best == test.labels[i];
  }
  EXPECT_GT(static_cast<double>(correct) / test.size(), 0.95);
}

TEST(Synthetic, ChannelMaxRuleLabelsTheBrightestChannel) {
  auto [train, test] = synth_dataset(SynthSpec::parse("rigged,train=90"));
  const Shape s = train.images.shape();
  for (std::size_t i = 0; i < train.size(); ++i) {
    int best = 0;
    float best_v = -1e9f;
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
          if (train.images.at(static_cast<int>(i), c, y, x) > best_v) best_v = train.images.at(static_cast<int>(i), c, y, x), best = c;
    EXPECT_EQ(best, train.labels[i]);
  }
}

TEST(Split, HalvesAreDisjointAndCoverTheSet) {
  auto [train, test] = synth_dataset(SynthSpec::parse("train=101"));
  auto [omega, alpha] = split_halves(train, 9);
  EXPECT_EQ(omega.role, SplitRole::OmegaHalf);
  EXPECT_EQ(alpha.role, SplitRole::AlphaHalf);
  EXPECT_EQ(omega.size(), 51u);
  EXPECT_EQ(alpha.size(), 50u);
  std::set<std::size_t> a(omega.source_index.begin(), omega.source_index.end());
  std::set<std::size_t> b(alpha.source_index.begin(), alpha.source_index.end());
  for (auto i : b) EXPECT_EQ(a.count(i), 0u);
  std::set<std::size_t> all = a;
  all.insert(b.begin(), b.end());
  EXPECT_EQ(all.size(), train.size());
  EXPECT_EQ(*all.rbegin(), train.size() - 1);
  const std::size_t stride = train.images.size() / train.size();
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    EXPECT_EQ(alpha.labels[i], train.labels[alpha.source_index[i]]);
    EXPECT_EQ(alpha.images[i * stride], train.images[alpha.source_index[i] * stride]);
  }
}

TEST(Augment, ZeroPadIsIdentityOrMirror) {
  Rng rng(4);
  auto src = uniform_tensor<float>(Shape{8, 2, 4, 4}, 1.0f, rng);
  auto img = src;
  augment(img, 0, rng);
  for (int n = 0; n < 8; ++n) {
    bool same = true, mirror = true;
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
          same = same && img.at(n, c, y, x) == src.at(n, c, y, x);
          mirror = mirror && img.at(n, c, y, x) == src.at(n, c, y, 3 - x);
        }
    EXPECT_TRUE(same || mirror);
  }
}

TEST(Host, SiteCounts) {
  Rng rng(1);
  HostSpec s{HostFamily::ResNet20, 3, 10, 8};
  EXPECT_EQ(s.sites(), 9);
  ResNetHost<float> r20(s, HostMode::discrete(reference_genotype()), rng);
  EXPECT_EQ(r20.sites().size(), 9u);
  s.family = HostFamily::ResNet8;
  ResNetHost<float> r8(s, HostMode::discrete(reference_genotype()), rng);
  EXPECT_EQ(r8.sites().size(), 3u);
  ResNetHost<float> base(s, HostMode::baseline(), rng);
  EXPECT_TRUE(base.sites().empty());
}

TEST(Host, SiteGeometryFollowsStages) {
  Rng rng(1);
  ResNetHost<float> h(HostSpec{HostFamily::ResNet20, 3, 10, 16}, HostMode::discrete(reference_genotype()), rng);
  const auto sites = h.sites();
  for (int i = 0; i < 9; ++i) {
    EXPECT_EQ(sites[i]->geometry().c, 16 << (i / 3));
    EXPECT_EQ(sites[i]->geometry().h, 16 >> (i / 3));
  }
}

TEST(Host, BaselineHasFewerParametersThanAnyGenotype) {
  const HostSpec s{HostFamily::ResNet8, 3, 4, 16};
  Rng rng(2);
  const auto base = ResNetHost<float>(s, HostMode::baseline(), rng).parameter_count();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ResNetHost<float> h(s, HostMode::discrete(random_genotype(seed)), rng);
    EXPECT_LT(base, h.parameter_count());
    EXPECT_EQ(h.parameter_count() - base, h.attention_param_count());
  }
}

TEST(Host, ZeroInitializedClassifierGivesZeroLogits) {
  Rng rng(3);
  ResNetHost<double> h(HostSpec{HostFamily::ResNet8, 3, 5, 8}, HostMode::discrete(reference_genotype()), rng);
  auto x = Var<double>::constant(uniform_tensor<double>(Shape{2, 3, 8, 8}, 1.0, rng));
  auto y = h.forward(x, true);
  EXPECT_EQ(y.shape(), (Shape{2, 5, 1, 1}));
  for (double v : y.value().storage()) EXPECT_EQ(v, 0.0);
}

TEST(Host, SearchModeAlphaTables) {
  Rng rng(4);
  const HostSpec s{HostFamily::ResNet20, 3, 4, 8};
  ResNetHost<float> shared(s, HostMode::search(false), rng);
  EXPECT_EQ(shared.alphas().size(), 1u);
  ResNetHost<float> per_site(s, HostMode::search(true), rng);
  EXPECT_EQ(per_site.alphas().size(), 9u);
  EXPECT_EQ(per_site.parameter_count(ParamGroup::ArchitectureWeight), 9u * 42u);
}

TEST(Host, WrongInputShapeIsAnError) {
  Rng rng(5);
  ResNetHost<float> h(HostSpec{HostFamily::ResNet8, 3, 4, 8}, HostMode::baseline(), rng);
  EXPECT_THROW(h.forward(Var<float>::constant(Tensor<float>(Shape{1, 3, 16, 16})), false), Error);
  EXPECT_THROW(parse_host("vgg"), Error);
}

TEST(RandomGenotype, SameSeedSameGenotype) {
  for (std::uint64_t s = 0; s < 50; ++s) EXPECT_EQ(random_genotype(s), random_genotype(s));
}

// Chi-square with 6 degrees of freedom; 22.458 is the p = 0.001 critical value.
TEST(RandomGenotype, PerEdgeMarginalsAreUniform) {
  std::array<std::array<int, kOpsPerSet>, kNumEdges> counts{};
  const int n = 10000;
  for (int s = 0; s < n; ++s) {
    const auto g = random_genotype(static_cast<std::uint64_t>(s));
    for (int e = 0; e < kNumEdges; ++e) ++counts[e][g.ops[e]];
  }
  const double expected = n / 7.0;
  for (int e = 0; e < kNumEdges; ++e) {
    double chi2 = 0;
    for (int k = 0; k < kOpsPerSet; ++k) chi2 += (counts[e][k] - expected) * (counts[e][k] - expected) / expected;
    EXPECT_LT(chi2, 22.458) << kEdgeNames[e];
  }
}

// ---------------------------------------------------------------- checkpoint

Checkpoint random_checkpoint(Rng& rng) {
  std::uniform_int_distribution<int> small(0, 5), ext(1, 4), byte(32, 126);
  std::normal_distribution<float> val(0.0f, 10.0f);
  Checkpoint ck;
  auto text = [&](int len) {
    std::string s;
    for (int i = 0; i < len; ++i) s.push_back(static_cast<char>(byte(rng)));
    return s;
  };
  ck.hyper_json = "{\"x\":\"" + text(small(rng) * 3) + "\"}";
  ck.rng_state = text(small(rng) * 7);
  for (int i = 0, n = small(rng); i < n; ++i) ck.counters.emplace_back(text(1 + small(rng)), rng());
  for (int i = 0, n = small(rng); i < n; ++i) {
    TensorRecord r;
    r.name = text(1 + small(rng) * 4);
    const int rank = small(rng) % 5;
    std::size_t count = 1;
    for (int d = 0; d < rank; ++d) {
      r.extents.push_back(static_cast<std::uint32_t>(ext(rng)));
      count *= r.extents.back();
    }
    for (std::size_t k = 0; k < count; ++k) r.data.push_back(val(rng));
    ck.records.push_back(std::move(r));
  }
  return ck;
}

TEST(Checkpoint, RoundTripsByteIdentically) {
  Rng rng(77);
  for (int t = 0; t < 1000; ++t) {
    const auto ck = random_checkpoint(rng);
    const auto bytes = encode_checkpoint(ck);
    const auto back = decode_checkpoint(bytes);
    EXPECT_EQ(back, ck);
    ASSERT_EQ(encode_checkpoint(back), bytes);
  }
}

TEST(Checkpoint, LayoutIsLittleEndian) {
  Checkpoint ck;
  ck.hyper_json = "{}";
  ck.records.push_back({"w", {2}, {1.0f, -2.0f}});
  const auto b = encode_checkpoint(ck);
  EXPECT_EQ(b.substr(0, 8), "SASECKPT");
  EXPECT_EQ(b[8], 1);
  EXPECT_EQ(b[9], 0);
  // magic, version, "{}", empty rng, no counters, one record "w" of rank 1
  const std::size_t rec = 8 + 4 + 4 + 2 + 4 + 4 + 4;
  EXPECT_EQ(b[rec], 1);
  EXPECT_EQ(b[rec + 4], 'w');
  EXPECT_EQ(b[rec + 5], 1);
  EXPECT_EQ(b[rec + 9], 2);
  EXPECT_EQ(static_cast<unsigned char>(b[rec + 13 + 3]), 0x3F);  // 1.0f = 0x3F800000
  EXPECT_EQ(b.size(), rec + 13 + 8);
}

TEST(Checkpoint, CorruptInputsAreFormatErrors) {
  Checkpoint ck;
  ck.records.push_back({"w", {3}, {1, 2, 3}});
  const auto good = encode_checkpoint(ck);
  for (const auto& bad : {good.substr(0, good.size() - 1), "XASECKPT" + good.substr(8), good + "z", std::string("SASE")}) {
    try {
      decode_checkpoint(bad);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Format);
    }
  }
  ck.records[0].extents = {2};
  EXPECT_THROW(encode_checkpoint(ck), Error);
}

TEST(Checkpoint, FileRoundTrip) {
  auto dir = scratch_dir("ckpt");
  Rng rng(3);
  const auto ck = random_checkpoint(rng);
  save_checkpoint(ck, (dir / "a.ckpt").string());
  EXPECT_EQ(load_checkpoint((dir / "a.ckpt").string()), ck);
  EXPECT_THROW(load_checkpoint((dir / "missing.ckpt").string()), Error);
  fs::remove_all(dir);
}

// ------------------------------------------------------------------- search

SearchHyper tiny_hyper(int epochs) {
  SearchHyper h;
  h.epochs = epochs;
  h.batch = 16;
  return h;
}

const TaskData& tiny_task() {
  static const TaskData t = load_task("train=96,test=64,side=8", "");
  return t;
}

TEST(Search, ZeroEpochsGivesInitialGenotype) {
  const auto& task = tiny_task();
  SearchSession<float> session(task.host_spec(HostFamily::ResNet8), tiny_hyper(0), false, task.train, 5);
  const auto initial = session.alpha();
  auto r = run_search<float>(tiny_hyper(0), task.host_spec(HostFamily::ResNet8), false, task.train, 5);
  EXPECT_EQ(r.genotype, derive_genotype(initial));
  EXPECT_EQ(r.trajectory.size(), 1u);
  for (double h : r.trajectory[0].entropy) EXPECT_NEAR(h, std::log(7.0), 1e-4);
}

TEST(Search, DatasetSmallerThanOneBatchPerHalf) {
  const auto& task = tiny_task();
  auto h = tiny_hyper(1);
  h.batch = 64;
  EXPECT_THROW(SearchSession<float>(task.host_spec(HostFamily::ResNet8), h, false, task.train, 1), Error);
}

TEST(Search, DeterministicTrajectoryAndGenotype) {
  const auto& task = tiny_task();
  auto a = run_search<float>(tiny_hyper(2), task.host_spec(HostFamily::ResNet8), false, task.train, 3);
  auto b = run_search<float>(tiny_hyper(2), task.host_spec(HostFamily::ResNet8), false, task.train, 3);
  EXPECT_EQ(trajectory_csv(a.trajectory), trajectory_csv(b.trajectory));
  EXPECT_EQ(serialize_genotype(a.genotype), serialize_genotype(b.genotype));
  EXPECT_EQ(a.alpha, b.alpha);
}

TEST(Search, TrajectoryCsvLayout) {
  const auto& task = tiny_task();
  auto r = run_search<float>(tiny_hyper(1), task.host_spec(HostFamily::ResNet8), false, task.train, 3);
  const auto csv = trajectory_csv(r.trajectory);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kTrajectoryHeader);
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 11);
  }
  EXPECT_EQ(rows, 2 * kNumEdges);
  for (const auto& rec : r.trajectory)
    for (int e = 0; e < kNumEdges; ++e) {
      double total = 0;
      for (double w : rec.weights[e]) total += w;
      EXPECT_NEAR(total, 1.0, 1e-12);
      EXPECT_GE(rec.entropy[e], 0.0);
      EXPECT_LE(rec.entropy[e], std::log(7.0) + 1e-12);
    }
  EXPECT_TRUE(std::isfinite(r.trajectory[1].train_loss));
  EXPECT_TRUE(std::isfinite(r.trajectory[1].val_loss));
}

TEST(Search, PerSiteAlphaDerivesFromMeanLogits) {
  const auto& task = tiny_task();
  SearchSession<float> s(task.host_spec(HostFamily::ResNet8), tiny_hyper(1), true, task.train, 2);
  EXPECT_EQ(s.host().alphas().size(), 3u);
  s.run();
  EXPECT_EQ(derive_from_checkpoint(s.checkpoint()), s.genotype());
}

TEST(Search, ResumeFromCheckpointIsBitIdentical) {
  const auto& task = tiny_task();
  const auto spec = task.host_spec(HostFamily::ResNet8);
  SearchSession<float> straight(spec, tiny_hyper(3), false, task.train, 8);
  straight.run();

  SearchSession<float> first(spec, tiny_hyper(3), false, task.train, 8);
  first.run_epoch();
  const auto bytes = encode_checkpoint(first.checkpoint());
  SearchSession<float> resumed(spec, tiny_hyper(3), false, task.train, 8);
  resumed.restore(decode_checkpoint(bytes));
  EXPECT_EQ(encode_checkpoint(resumed.checkpoint()), bytes);
  resumed.run();
  EXPECT_EQ(encode_checkpoint(resumed.checkpoint()), encode_checkpoint(straight.checkpoint()));
  EXPECT_EQ(resumed.alpha(), straight.alpha());
}

TEST(Search, CheckpointFromOtherConfigurationIsRejected) {
  const auto& task = tiny_task();
  SearchSession<float> a(task.host_spec(HostFamily::ResNet8), tiny_hyper(1), false, task.train, 8);
  SearchSession<float> b(task.host_spec(HostFamily::ResNet8), tiny_hyper(2), false, task.train, 8);
  EXPECT_THROW(b.restore(a.checkpoint()), Error);
}

// Label = channel holding the brightest pixel. The squeeze edges' softmax
// entropy must drop over 10 epochs.
TEST(Search, RiggedTaskConcentratesSqueezeWeights) {
  const auto task = load_task("rigged,train=192,test=32,side=8", "");
  SearchHyper h;
  h.epochs = 10;
  h.batch = 32;
  auto r = run_search<float>(h, task.host_spec(HostFamily::ResNet8), false, task.train, 1);
  auto squeeze_entropy = [](const EpochRecord& rec) {
    return rec.entropy[0] + rec.entropy[3] + rec.entropy[4];
  };
  EXPECT_LT(squeeze_entropy(r.trajectory.back()), squeeze_entropy(r.trajectory.front()));
  EXPECT_LT(r.final_entropy, r.initial_entropy);
}

// ------------------------------------------------------------------ retrain

TEST(Retrain, ZeroEpochsIsChanceLevel) {
  const auto& task = tiny_task();
  RetrainConfig cfg;
  cfg.epochs = 0;
  cfg.batch = 16;
  auto out = run_retrain<float>(task.host_spec(HostFamily::ResNet8), HostMode::discrete(reference_genotype()), task.train,
                                task.test, cfg);
  // 99% binomial interval for p = 1/4, n = 64 is within +-0.14.
  EXPECT_NEAR(out.metrics.accuracy, 0.25, 2.576 * std::sqrt(0.25 * 0.75 / 64));
  EXPECT_NEAR(out.metrics.test_loss, std::log(4.0), 1e-6);
  EXPECT_TRUE(out.metrics.loss_curve.empty());
}

TEST(Retrain, DeterministicPerSeed) {
  const auto& task = tiny_task();
  RetrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 16;
  cfg.seed = 4;
  const auto spec = task.host_spec(HostFamily::ResNet8);
  auto a = run_retrain<float>(spec, HostMode::discrete(reference_genotype()), task.train, task.test, cfg);
  auto b = run_retrain<float>(spec, HostMode::discrete(reference_genotype()), task.train, task.test, cfg);
  EXPECT_EQ(a.metrics.loss_curve, b.metrics.loss_curve);
  EXPECT_EQ(a.metrics.accuracy, b.metrics.accuracy);
  EXPECT_EQ(a.metrics.loss_curve.size(), 2u);
  EXPECT_GT(a.metrics.attention_params, 0u);
}

TEST(Retrain, ModelCheckpointRestoresEvaluation) {
  const auto& task = tiny_task();
  RetrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 16;
  const auto spec = task.host_spec(HostFamily::ResNet8);
  auto out = run_retrain<float>(spec, HostMode::discrete(random_genotype(3)), task.train, task.test, cfg);
  const auto ck = decode_checkpoint(encode_checkpoint(model_checkpoint(*out.host)));
  auto host = host_from_checkpoint<float>(ck);
  const auto ev = evaluate(*host, task.test);
  EXPECT_EQ(ev.accuracy, out.metrics.accuracy);
  EXPECT_EQ(ev.loss, out.metrics.test_loss);
  EXPECT_EQ(host->mode().genotype, random_genotype(3));
}

TEST(Retrain, SearchHostIsRejected) {
  const auto& task = tiny_task();
  EXPECT_THROW(run_retrain<float>(task.host_spec(HostFamily::ResNet8), HostMode::search(), task.train, task.test, {}),
               Error);
}

}  // namespace
