// Command-line front end.
//
// Exit codes: 0 ok, 2 usage or input error, 3 audit outside tolerance,
// 4 check or acceptance threshold not met.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>

#include "accvit/accvit.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitAudit = 3;
constexpr int kExitThreshold = 4;

struct Options {
  std::string variant = "tiny";
  std::size_t resolution = 224;
  std::optional<std::size_t> classes;
  std::uint64_t seed = 0;
  std::string image, weights, out, suite;
  bool tsv = false;
  bool all_logits = false;
  // train-smoke
  std::size_t steps = 200;
  double lr = 0.01;
  double momentum = 0.9;
  double smoothing = 0.1;
  std::size_t images = 8;
  std::size_t size = 64;
};

int cmd_info(const Options& o) {
  accvit::AccVitModel<float> model(accvit::variant(o.variant, o.classes), o.seed);
  const auto r = accvit::audit_model(model, o.resolution, o.resolution);
  if (o.tsv) {
    accvit::write_audit_tsv(r, std::cout);
  } else {
    accvit::write_audit_table(r, std::cout);
  }
  return r.params_ok() && r.macs_ok() ? kExitOk : kExitAudit;
}

int cmd_forward(const Options& o) {
  accvit::AccVitModel<float> model(accvit::variant(o.variant, o.classes), o.seed);
  if (!o.weights.empty()) accvit::load_weights(model, o.weights);
  const auto img = accvit::read_ppm(o.image);
  accvit::NoGradGuard guard;
  const auto logits = model.forward(accvit::image_to_tensor(img, o.resolution));
  const auto v = logits.data();
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t k = std::min<std::size_t>(5, order.size());
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return v[a] > v[b] || (v[a] == v[b] && a < b);
                    });
  std::cout << std::setprecision(9);
  std::cout << "rank\tclass\tlogit\n";
  for (std::size_t i = 0; i < k; ++i) {
    std::cout << i + 1 << '\t' << order[i] << '\t' << v[order[i]] << '\n';
  }
  if (o.all_logits) {
    for (std::size_t i = 0; i < v.size(); ++i) std::cout << "logit\t" << i << '\t' << v[i] << '\n';
  }
  for (auto x : v) {
    if (!std::isfinite(x)) {
      std::cerr << "error: non-finite logits\n";
      return kExitThreshold;
    }
  }
  return kExitOk;
}

int cmd_verify(const Options& o) {
  const auto results = accvit::run_suite(o.suite);
  std::size_t failed = 0;
  for (const auto& c : results) {
    std::cout << (c.passed ? "PASS  " : "FAIL  ") << c.name << "  (" << c.detail << ")\n";
    if (!c.passed) ++failed;
  }
  std::cout << results.size() - failed << "/" << results.size() << " checks passed\n";
  return failed == 0 ? kExitOk : kExitThreshold;
}

int cmd_train_smoke(const Options& o) {
  accvit::AccVitModel<float> model(accvit::variant(o.variant, 2), o.seed);
  const auto data = accvit::brightness_dataset(o.images, o.size, o.seed);
  accvit::TrainOptions opt;
  opt.steps = o.steps;
  opt.lr = o.lr;
  opt.momentum = o.momentum;
  opt.label_smoothing = o.smoothing;
  const auto trace = accvit::train_smoke(model, data, opt);

  std::ofstream file;
  if (!o.out.empty()) {
    file.open(o.out);
    if (!file) throw accvit::Error(accvit::ErrorCode::kIo, "cannot open " + o.out);
  }
  std::ostream& os = o.out.empty() ? std::cout : file;
  os << std::setprecision(9);
  for (std::size_t i = 0; i < trace.size(); ++i) os << i << '\t' << trace[i] << '\n';

  const auto ratio = accvit::smoothed_loss_ratio(trace);
  if (!ratio) {
    std::cerr << "empty loss trace: threshold not met\n";
    return kExitThreshold;
  }
  std::cerr << "initial loss " << trace.front() << ", final/initial ratio " << *ratio
            << (*ratio < 0.5 ? " (< 0.5, ok)" : " (>= 0.5, threshold not met)") << '\n';
  return *ratio < 0.5 ? kExitOk : kExitThreshold;
}

int cmd_save(const Options& o) {
  accvit::AccVitModel<float> model(accvit::variant(o.variant, o.classes), o.seed);
  accvit::save_weights(model, o.out);
  std::cout << "wrote " << model.named_parameters().size() << " tensors ("
            << model.parameter_count() << " parameters) to " << o.out << '\n';
  return kExitOk;
}

int cmd_load(const Options& o) {
  accvit::AccVitModel<float> model(accvit::variant(o.variant, o.classes), o.seed);
  accvit::load_weights(model, o.weights);
  std::cout << "loaded " << model.named_parameters().size() << " tensors ("
            << model.parameter_count() << " parameters) into " << o.variant << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Atrous attention vision transformer toolkit"};
  app.require_subcommand(1);
  Options o;
  int (*handler)(const Options&) = nullptr;

  auto variant_opt = [&](CLI::App* sub) {
    sub->add_option("--variant", o.variant, "femto|pico|nano|tiny|small|base|micro");
    sub->add_option("--seed", o.seed, "initialization seed");
  };
  auto classes_opt = [&](CLI::App* sub) {
    sub->add_option("--classes", o.classes, "override the number of classes");
  };

  auto* info = app.add_subcommand("info", "parameter and compute audit");
  variant_opt(info);
  classes_opt(info);
  info->add_option("--resolution", o.resolution, "square input side");
  info->add_flag("--tsv", o.tsv, "emit module<TAB>params<TAB>flops lines");
  info->callback([&] { handler = cmd_info; });

  auto* fwd = app.add_subcommand("forward", "classify a binary PPM image");
  variant_opt(fwd);
  classes_opt(fwd);
  fwd->add_option("--image", o.image, "P6 image")->required();
  fwd->add_option("--weights", o.weights, "weight file");
  fwd->add_option("--resolution", o.resolution, "square input side");
  fwd->add_flag("--all-logits", o.all_logits, "print every logit");
  fwd->callback([&] { handler = cmd_forward; });

  auto* ver = app.add_subcommand("verify", "run a verification suite");
  ver->add_option("suite", o.suite, "partition|gradcheck|gating|shapes|audit|serialize|train|all")
      ->required()
      ->check(CLI::IsMember(accvit::suite_names()));
  ver->callback([&] { handler = cmd_verify; });

  auto* train = app.add_subcommand("train-smoke", "toy training run on synthetic data");
  train->add_option("--variant", o.variant, "model variant (default micro)");
  train->add_option("--seed", o.seed, "seed for data and initialization");
  train->add_option("--steps", o.steps, "SGD steps");
  train->add_option("--lr", o.lr, "learning rate");
  train->add_option("--momentum", o.momentum, "momentum");
  train->add_option("--label-smoothing", o.smoothing, "label smoothing");
  train->add_option("--images", o.images, "synthetic images (full batch)");
  train->add_option("--size", o.size, "image side");
  train->add_option("--out", o.out, "loss trace path (default stdout)");
  train->callback([&] { handler = cmd_train_smoke; });
  train->preparse_callback([&](std::size_t) { o.variant = "micro"; });

  auto* save = app.add_subcommand("save-weights", "write freshly initialized weights");
  variant_opt(save);
  classes_opt(save);
  save->add_option("--out", o.out, "output path")->required();
  save->callback([&] { handler = cmd_save; });

  auto* load = app.add_subcommand("load", "validate a weight file against a variant");
  variant_opt(load);
  classes_opt(load);
  load->add_option("--weights", o.weights, "weight file")->required();
  load->callback([&] { handler = cmd_load; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  try {
    return handler(o);
  } catch (const accvit::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}
