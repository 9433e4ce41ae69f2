// Command-line front end: search, derive, retrain, eval, random, gradcheck
// and paramcount.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "sase/gradient_suite.hpp"
#include "sase/harness.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct RunConfig {
  std::string command;
  std::optional<std::uint64_t> seed;
  std::string data;
  std::string synthetic;
  std::string host = "resnet8";
  int epochs = 10;
  int batch = 64;
  std::string out;
  std::string precision = "f32";
  int order = 2;
  bool alpha_per_site = false;
  std::string genotype;
  std::string checkpoint;
  bool baseline = false;
  std::optional<double> lr;
  bool no_augment = false;
  std::size_t train_limit = 5000;
  std::size_t test_limit = 1000;
  int trials = 20;
};

std::string stem_of(const std::string& out) {
  fs::path p(out);
  return (p.parent_path() / p.stem()).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) sase::fail(sase::ErrorKind::Io, "cannot write " + path);
  f << text;
  if (!f) sase::fail(sase::ErrorKind::Io, "write failed for " + path);
}

void require_seed(const RunConfig& c) {
  if (!c.seed) sase::fail(sase::ErrorKind::Usage, c.command + " requires --seed");
}

void require_out(const RunConfig& c) {
  if (c.out.empty()) sase::fail(sase::ErrorKind::Usage, c.command + " requires --out");
}

void check_out_dir(const RunConfig& c) {
  if (c.out.empty()) return;
  const auto dir = fs::path(c.out).parent_path();
  if (!dir.empty() && !fs::is_directory(dir))
    sase::fail(sase::ErrorKind::Io, "output directory does not exist: " + dir.string());
}

void check_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path)) sase::fail(sase::ErrorKind::Io, what + " not found: " + path);
}

sase::TaskData task_for(const RunConfig& c) {
  const auto root = sase::resolve_data_root(c.data);
  if (!c.synthetic.empty() && !c.data.empty())
    sase::fail(sase::ErrorKind::Usage, "--synthetic and --data are mutually exclusive");
  if (c.synthetic.empty() && !root.empty() && !fs::is_directory(root))
    sase::fail(sase::ErrorKind::Io, "data root is not a directory: " + root);
  return sase::load_task(c.synthetic, c.synthetic.empty() ? root : "", c.train_limit, c.test_limit);
}

sase::SearchHyper search_hyper(const RunConfig& c) {
  sase::SearchHyper h;
  h.epochs = c.epochs;
  h.batch = c.batch;
  h.order = c.order;
  if (c.lr) h.lr_max = *c.lr;
  h.validate();
  if (h.epochs < 0) sase::fail(sase::ErrorKind::Usage, "--epochs must be non-negative");
  return h;
}

sase::RetrainConfig retrain_config(const RunConfig& c) {
  sase::RetrainConfig r;
  r.epochs = c.epochs;
  r.batch = c.batch;
  if (c.lr) r.lr_max = *c.lr;
  r.augment = !c.no_augment;
  r.seed = *c.seed;
  if (r.epochs < 0 || r.batch < 1 || !(r.lr_max > 0)) sase::fail(sase::ErrorKind::Usage, "invalid retrain settings");
  return r;
}

json retrain_json(const sase::RetrainConfig& r) {
  json j;
  j["epochs"] = r.epochs;
  j["batch"] = r.batch;
  j["lr_max"] = r.lr_max;
  j["lr_min"] = r.lr_min;
  j["momentum"] = r.momentum;
  j["weight_decay"] = r.weight_decay;
  j["augment"] = r.augment;
  j["seed"] = r.seed;
  return j;
}

json base_config(const RunConfig& c) {
  json j;
  j["command"] = c.command;
  if (c.seed) j["seed"] = *c.seed;
  j["precision"] = c.precision;
  return j;
}

void echo_config(const RunConfig& c, const json& config) {
  if (c.out.empty())
    std::cout << "config: " << config.dump() << "\n";
  else
    write_text(stem_of(c.out) + ".config.json", config.dump(2) + "\n");
}

json metrics_json(const sase::RetrainResult& m) {
  json j;
  j["accuracy"] = m.accuracy;
  j["test_loss"] = m.test_loss;
  j["loss_curve"] = m.loss_curve;
  j["param_count"] = m.param_count;
  j["attention_params"] = m.attention_params;
  return j;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ------------------------------------------------------------------ search

template <class T>
int cmd_search(const RunConfig& c) {
  require_seed(c);
  require_out(c);
  check_out_dir(c);
  const auto hyper = search_hyper(c);
  const auto family = sase::parse_host(c.host);
  const auto task = task_for(c);
  const auto spec = task.host_spec(family);
  const auto stem = stem_of(c.out);

  json config = base_config(c);
  config["task"] = task.description;
  config["host"] = sase::host_to_json(spec);
  config["hyper"] = sase::hyper_to_json(hyper);
  config["alpha_per_site"] = c.alpha_per_site;
  config["augment"] = false;
  echo_config(c, config);

  const auto t0 = std::chrono::steady_clock::now();
  sase::SearchSession<T> session(spec, hyper, c.alpha_per_site, task.train, *c.seed);
  std::fprintf(stderr, "search: %s, %s, %zu iterations per epoch\n", task.description.c_str(), c.host.c_str(),
               session.iterations_per_epoch());
  while (!session.done()) {
    const auto& r = session.run_epoch();
    std::fprintf(stderr, "epoch %d/%d train_loss %.4f val_loss %.4f entropy %.6f\n", r.epoch, hyper.epochs,
                 r.train_loss, r.val_loss, r.mean_entropy());
  }
  const auto genotype = session.genotype();
  const auto& traj = session.trajectory();

  sase::save_genotype(genotype, c.out);
  write_text(stem + ".trajectory.csv", sase::trajectory_csv(traj));
  sase::save_checkpoint(session.checkpoint(), stem + ".ckpt");
  json report;
  report["genotype"] = json::parse(sase::serialize_genotype(genotype));
  report["initial_entropy"] = traj.front().mean_entropy();
  report["final_entropy"] = traj.back().mean_entropy();
  report["epochs"] = hyper.epochs;
  report["seconds"] = seconds_since(t0);
  write_text(stem + ".report.json", report.dump(2) + "\n");

  std::cout << sase::serialize_genotype(genotype) << "\n";
  std::printf("entropy %.9g -> %.9g\n", traj.front().mean_entropy(), traj.back().mean_entropy());
  return 0;
}

int cmd_derive(const RunConfig& c) {
  if (c.checkpoint.empty()) sase::fail(sase::ErrorKind::Usage, "derive requires --checkpoint");
  check_file(c.checkpoint, "checkpoint");
  check_out_dir(c);
  json config = base_config(c);
  config["checkpoint"] = c.checkpoint;
  echo_config(c, config);
  const auto g = sase::derive_from_checkpoint(sase::load_checkpoint(c.checkpoint));
  if (!c.out.empty()) sase::save_genotype(g, c.out);
  std::cout << sase::serialize_genotype(g) << "\n";
  return 0;
}

// ----------------------------------------------------------------- retrain

template <class T>
int retrain_and_report(const RunConfig& c, const sase::HostMode& mode, json config) {
  const auto cfg = retrain_config(c);
  const auto family = sase::parse_host(c.host);
  const auto task = task_for(c);
  const auto spec = task.host_spec(family);
  config["task"] = task.description;
  config["host"] = sase::host_to_json(spec);
  config["retrain"] = retrain_json(cfg);
  echo_config(c, config);

  const auto t0 = std::chrono::steady_clock::now();
  auto outcome = sase::run_retrain<T>(spec, mode, task.train, task.test, cfg);
  const auto& m = outcome.metrics;
  for (std::size_t e = 0; e < m.loss_curve.size(); ++e)
    std::fprintf(stderr, "epoch %zu/%d train_loss %.4f\n", e + 1, cfg.epochs, m.loss_curve[e]);

  json report = config;
  report["metrics"] = metrics_json(m);
  report["seconds"] = seconds_since(t0);
  if (!c.out.empty()) {
    write_text(c.out, report.dump(2) + "\n");
    sase::save_checkpoint(sase::model_checkpoint(*outcome.host), stem_of(c.out) + ".ckpt");
  }
  std::printf("accuracy %.6f test_loss %.6f params %zu attention_params %zu\n", m.accuracy, m.test_loss,
              m.param_count, m.attention_params);
  return 0;
}

template <class T>
int cmd_retrain(const RunConfig& c) {
  require_seed(c);
  check_out_dir(c);
  if (c.baseline == !c.genotype.empty())
    sase::fail(sase::ErrorKind::Usage, "retrain needs exactly one of --genotype or --baseline");
  json config = base_config(c);
  sase::HostMode mode = sase::HostMode::baseline();
  if (!c.genotype.empty()) {
    check_file(c.genotype, "genotype");
    const auto g = sase::load_genotype(c.genotype);
    mode = sase::HostMode::discrete(g);
    config["genotype"] = json::parse(sase::serialize_genotype(g));
  } else {
    config["genotype"] = nullptr;
  }
  return retrain_and_report<T>(c, mode, config);
}

template <class T>
int cmd_random(const RunConfig& c) {
  require_seed(c);
  check_out_dir(c);
  const auto g = sase::random_genotype(*c.seed);
  json config = base_config(c);
  config["genotype"] = json::parse(sase::serialize_genotype(g));
  if (!c.out.empty()) sase::save_genotype(g, stem_of(c.out) + ".genotype.json");
  std::cout << sase::serialize_genotype(g) << "\n";
  return retrain_and_report<T>(c, sase::HostMode::discrete(g), config);
}

template <class T>
int cmd_eval(const RunConfig& c) {
  if (c.checkpoint.empty()) sase::fail(sase::ErrorKind::Usage, "eval requires --checkpoint");
  check_file(c.checkpoint, "checkpoint");
  check_out_dir(c);
  const auto host = sase::host_from_checkpoint<T>(sase::load_checkpoint(c.checkpoint));
  const auto task = task_for(c);
  const auto& spec = host->spec();
  if (task.test.images.shape().c != spec.in_channels || task.test.images.shape().h != spec.side ||
      task.test.classes != spec.classes)
    sase::fail(sase::ErrorKind::Shape, "dataset geometry does not match the model");
  json config = base_config(c);
  config["checkpoint"] = c.checkpoint;
  config["task"] = task.description;
  config["batch"] = c.batch;
  echo_config(c, config);
  const auto r = sase::evaluate(*host, task.test, c.batch);
  json report = config;
  report["accuracy"] = r.accuracy;
  report["loss"] = r.loss;
  report["examples"] = r.examples;
  if (!c.out.empty()) write_text(c.out, report.dump(2) + "\n");
  std::printf("accuracy %.6f loss %.6f examples %zu\n", r.accuracy, r.loss, r.examples);
  return 0;
}

// --------------------------------------------------------- static checks

int cmd_gradcheck(const RunConfig& c) {
  if (c.precision != "f64") sase::fail(sase::ErrorKind::Usage, "gradcheck runs at --precision f64 only");
  if (c.trials < 1) sase::fail(sase::ErrorKind::Usage, "--trials must be positive");
  check_out_dir(c);
  const std::uint64_t seed = c.seed.value_or(0);
  json config = base_config(c);
  config["seed"] = seed;
  config["trials"] = c.trials;
  config["op_tolerance"] = 1e-5;
  config["block_tolerance"] = 1e-4;
  echo_config(c, config);

  const auto t0 = std::chrono::steady_clock::now();
  json report = config;
  int failures = 0;
  for (const auto& r : sase::run_gradient_suite(c.trials, seed)) {
    const bool ok = r.max_rel_error <= 1e-5;
    failures += !ok;
    std::printf("op %s/%s max_rel_error %.3e %s\n", std::string(sase::family_name(r.family)).c_str(),
                std::string(sase::op_kind_name(r.family, r.kind)).c_str(), r.max_rel_error, ok ? "ok" : "FAIL");
    report["ops"].push_back({{"family", sase::family_name(r.family)},
                             {"kind", sase::op_kind_name(r.family, r.kind)},
                             {"max_rel_error", r.max_rel_error}});
  }
  for (int e = 0; e < sase::kNumEdges; ++e) {
    const auto r = sase::check_mixed_edge_gradient(sase::EdgeId(e), c.trials, seed);
    const bool ok = r.max_rel_error <= 1e-5;
    failures += !ok;
    std::printf("edge %s max_rel_error %.3e %s\n", std::string(sase::kEdgeNames[e]).c_str(), r.max_rel_error,
                ok ? "ok" : "FAIL");
    report["edges"].push_back({{"edge", sase::kEdgeNames[e]}, {"max_rel_error", r.max_rel_error}});
  }
  const auto block = sase::check_block_gradient(c.trials, seed);
  const bool block_ok = block.max_rel_error <= 1e-4;
  failures += !block_ok;
  std::printf("block max_rel_error %.3e %s\n", block.max_rel_error, block_ok ? "ok" : "FAIL");
  report["block"] = {{"max_rel_error", block.max_rel_error}};
  report["failures"] = failures;
  report["seconds"] = seconds_since(t0);
  if (!c.out.empty()) write_text(c.out, report.dump(2) + "\n");
  if (failures) sase::fail(sase::ErrorKind::Numeric, std::to_string(failures) + " gradient checks exceeded tolerance");
  return 0;
}

int cmd_paramcount(const RunConfig& c) {
  check_out_dir(c);
  sase::Genotype g = sase::reference_genotype();
  if (!c.genotype.empty()) {
    check_file(c.genotype, "genotype");
    g = sase::load_genotype(c.genotype);
  }
  json config = base_config(c);
  config["host"] = c.host;
  config["genotype"] = json::parse(sase::serialize_genotype(g));
  std::size_t count = 0;
  if (c.host == "resnet50-schedule" || c.host == "resnet101-schedule") {
    count = sase::param_count(g, c.host == "resnet50-schedule" ? sase::resnet50_schedule() : sase::resnet101_schedule());
  } else {
    const auto family = sase::parse_host(c.host);
    sase::HostSpec spec;
    if (!c.synthetic.empty() || !sase::resolve_data_root(c.data).empty()) {
      spec = task_for(c).host_spec(family);
    } else {
      spec.family = family;
      spec.in_channels = 3;
      spec.classes = sase::kCifarClasses;
      spec.side = sase::kCifarSide;
    }
    config["host_spec"] = sase::host_to_json(spec);
    sase::Rng rng(0);
    count = sase::ResNetHost<float>(spec, sase::HostMode::discrete(g), rng).attention_param_count();
  }
  echo_config(c, config);
  json report = config;
  report["attention_params"] = count;
  if (!c.out.empty()) write_text(c.out, report.dump(2) + "\n");
  std::printf("attention_params %zu\n", count);
  return 0;
}

template <class T>
int dispatch(const RunConfig& c) {
  if (c.command == "search") return cmd_search<T>(c);
  if (c.command == "retrain") return cmd_retrain<T>(c);
  if (c.command == "random") return cmd_random<T>(c);
  if (c.command == "eval") return cmd_eval<T>(c);
  sase::fail(sase::ErrorKind::Usage, "unknown command " + c.command);
}

int run(const RunConfig& c) {
  if (c.command == "derive") return cmd_derive(c);
  if (c.command == "gradcheck") return cmd_gradcheck(c);
  if (c.command == "paramcount") return cmd_paramcount(c);
  return c.precision == "f64" ? dispatch<double>(c) : dispatch<float>(c);
}

void add_common(CLI::App* sub, RunConfig& c, bool training) {
  sub->add_option("--seed", c.seed, "Run seed");
  sub->add_option("--data", c.data, "CIFAR-10 binary directory (default: $SASE_DATA_ROOT)");
  sub->add_option("--synthetic", c.synthetic, "Synthetic task: default, rigged or key=value list");
  sub->add_option("--host", c.host, "Host network")->capture_default_str();
  sub->add_option("--out", c.out, "Output file");
  sub->add_option("--precision", c.precision, "Floating-point width")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  sub->add_option("--batch", c.batch, "Batch size")->capture_default_str();
  sub->add_option("--train-limit", c.train_limit, "CIFAR training examples to load (0 = all)")->capture_default_str();
  sub->add_option("--test-limit", c.test_limit, "CIFAR test examples to load (0 = all)")->capture_default_str();
  if (training) {
    sub->add_option("--epochs", c.epochs, "Epochs")->capture_default_str();
    sub->add_option("--lr", c.lr, "Initial weight learning rate");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Searchable attention blocks for ResNet hosts"};
  app.require_subcommand(1);
  RunConfig c;

  auto* search = app.add_subcommand("search", "Bi-level architecture search");
  add_common(search, c, true);
  search->add_option("--order", c.order, "Alpha gradient order")->check(CLI::IsMember({1, 2}))->capture_default_str();
  search->add_flag("--alpha-per-site", c.alpha_per_site, "One alpha table per insertion site");

  auto* derive = app.add_subcommand("derive", "Genotype from a search checkpoint");
  derive->add_option("--checkpoint", c.checkpoint, "Search checkpoint")->required();
  derive->add_option("--out", c.out, "Genotype JSON output");

  auto* retrain = app.add_subcommand("retrain", "Train a discrete or attention-free host");
  add_common(retrain, c, true);
  retrain->add_option("--genotype", c.genotype, "Genotype JSON");
  retrain->add_flag("--baseline", c.baseline, "Train without attention blocks");
  retrain->add_flag("--no-augment", c.no_augment, "Disable flip and shift augmentation");

  auto* random = app.add_subcommand("random", "Retrain a host with a genotype drawn from --seed");
  add_common(random, c, true);
  random->add_flag("--no-augment", c.no_augment, "Disable flip and shift augmentation");

  auto* eval = app.add_subcommand("eval", "Test accuracy of a retrained model");
  add_common(eval, c, false);
  eval->add_option("--checkpoint", c.checkpoint, "Model checkpoint written by retrain")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every operation");
  gradcheck->add_option("--precision", c.precision, "Must be f64")->check(CLI::IsMember({"f32", "f64"}));
  gradcheck->add_option("--seed", c.seed, "Draw seed");
  gradcheck->add_option("--trials", c.trials, "Random inputs per check")->capture_default_str();
  gradcheck->add_option("--out", c.out, "Report JSON output");

  auto* paramcount = app.add_subcommand("paramcount", "Attention parameters added to a host");
  paramcount->add_option("--genotype", c.genotype, "Genotype JSON (default: the reported module)");
  paramcount->add_option("--host", c.host, "resnet8, resnet20, resnet50-schedule or resnet101-schedule");
  paramcount->add_option("--synthetic", c.synthetic, "Take the host geometry from a synthetic task");
  paramcount->add_option("--data", c.data, "Take the host geometry from CIFAR-10");
  paramcount->add_option("--out", c.out, "Report JSON output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: UsageError: " << e.what() << "\n";
    return 2;
  }
  for (auto* sub : app.get_subcommands()) c.command = sub->get_name();
  if (c.command == "gradcheck" && gradcheck->count("--precision") == 0) c.precision = "f64";

  try {
    return run(c);
  } catch (const sase::Error& e) {
    std::cerr << "error: " << sase::error_kind_name(e.kind()) << ": " << e.what() << "\n";
    return e.kind() == sase::ErrorKind::Usage ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: InternalError: " << e.what() << "\n";
    return 1;
  }
}
