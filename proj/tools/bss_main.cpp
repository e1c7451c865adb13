// bss: feature-fusion and attention operators on BST1 tensors, plus the
// detection-metrics pipeline and the check/selftest/bench drivers.
//
// Exit codes: 0 success, 1 validation failure, 2 I/O or parse error.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "bss/bss.hpp"
#include "bss/suites.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct CommonOpts {
  int threads = 0;
};

void apply_threads(const CommonOpts& o) { bss::set_thread_count(o.threads); }

int run_simam(const std::string& in, double lambda, const std::string& out,
              const std::string& energy_out) {
  const bss::Tensor x = bss::read_tensor_file(in);
  const bss::SimAMConfig cfg{lambda};
  if (!energy_out.empty()) {
    const auto field = bss::simam_energy(x, cfg);
    bss::write_tensor_file(energy_out, field.e_star);
  }
  bss::write_tensor_file(out, bss::simam_forward(x, cfg));
  return 0;
}

int run_sa(const std::string& in, int groups, int shuffle_groups, double gn_delta,
           const std::string& weights_dir, const std::string& out) {
  const bss::Tensor x = bss::read_tensor_file(in);
  bss::SAConfig cfg;
  cfg.groups = groups;
  cfg.shuffle_groups = shuffle_groups;
  cfg.gn_delta = gn_delta;
  if (groups < 1 || x.dims().c % (2 * groups) != 0) {
    throw bss::ConfigError("sa: 2*groups must divide C=" + std::to_string(x.dims().c));
  }
  const int len = x.dims().c / (2 * groups);
  const bss::SAWeights wts = weights_dir.empty()
                                 ? bss::SAWeights::defaults(len)
                                 : bss::load_sa_weights(weights_dir, len);
  bss::write_tensor_file(out, bss::sa_forward(x, cfg, wts));
  return 0;
}

int run_fuse(const std::string& graph_path, const std::vector<std::string>& input_args,
             const std::string& weights_dir, const std::string& out_dir) {
  const bss::FusionGraph graph = bss::load_graph(graph_path, weights_dir);
  std::map<std::string, bss::Tensor> inputs;
  for (const auto& arg : input_args) {
    const auto eq = arg.find('=');
    if (eq == std::string::npos) {
      throw bss::ConfigError("--input expects LEVEL=FILE, got \"" + arg + "\"");
    }
    inputs.emplace(arg.substr(0, eq), bss::read_tensor_file(arg.substr(eq + 1)));
  }
  const auto outputs = bss::graph_execute(graph, inputs);
  fs::create_directories(out_dir);
  for (const auto& [id, tensor] : outputs) {
    bss::write_tensor_file(fs::path(out_dir) / (id + ".bst"), tensor);
  }
  return 0;
}

int run_eval(const std::string& gt_dir, const std::string& det_file, double iou,
             int classes, const std::string& out_dir) {
  const bss::EvalReport report = bss::eval_dataset(gt_dir, det_file, iou, classes);
  fs::create_directories(out_dir);
  bss::write_file_atomic(fs::path(out_dir) / "report.json",
                         bss::report_to_json(report).dump(2) + "\n");
  for (const auto& ce : report.per_class) {
    bss::write_file_atomic(
        fs::path(out_dir) / ("pr_class_" + std::to_string(ce.class_id) + ".csv"),
        bss::pr_curve_csv(ce.curve));
  }
  std::printf("images %lld, gt %lld, det %lld\n",
              static_cast<long long>(report.images),
              static_cast<long long>(report.gt_total),
              static_cast<long long>(report.det_total));
  for (const auto& ce : report.per_class) {
    std::printf("class %d: tp=%lld fp=%lld fn=%lld P=%.6f R=%.6f F1=%.6f%s%s\n",
                ce.class_id, static_cast<long long>(ce.tp),
                static_cast<long long>(ce.fp), static_cast<long long>(ce.fn),
                ce.at_full.precision, ce.at_full.recall, ce.at_full.f1,
                ce.ap_defined ? " AP=" : " AP=undefined",
                ce.ap_defined ? bss::format_double(ce.ap).c_str() : "");
  }
  if (report.map_defined) {
    std::printf("mAP@%.2f = %.6f over %d classes\n", report.iou_threshold,
                report.map, report.map_classes);
  } else {
    std::printf("mAP undefined: no class has ground truth\n");
  }
  return 0;
}

int run_check(const std::string& suite, const std::string& op, int trials,
              double tol, std::uint64_t seed, const std::string& json_out) {
  std::vector<bss::SuiteResult> results;
  if (suite == "invariants" || suite == "all") {
    auto r = bss::run_invariant_suite(seed);
    results.insert(results.end(), r.begin(), r.end());
  }
  if (suite == "oracle" || suite == "all") {
    auto r = bss::run_oracle_suite(seed);
    results.insert(results.end(), r.begin(), r.end());
  }
  if (suite == "grad" || suite == "all") {
    auto r = bss::run_grad_suite(trials, tol, seed, op);
    results.insert(results.end(), r.begin(), r.end());
  }
  if (results.empty()) {
    throw bss::ConfigError("check: unknown suite \"" + suite + "\"");
  }
  bool all_pass = true;
  std::printf("%-12s %-42s %-6s %s\n", "suite", "check", "result", "detail");
  for (const auto& r : results) {
    all_pass = all_pass && r.pass;
    std::printf("%-12s %-42s %-6s %s\n", r.suite.c_str(), r.name.c_str(),
                r.pass ? "pass" : "FAIL", r.detail.c_str());
  }
  if (!json_out.empty()) {
    ordered_json j = ordered_json::array();
    for (const auto& r : results) {
      j.push_back({{"suite", r.suite}, {"name", r.name}, {"pass", r.pass},
                   {"detail", r.detail}});
    }
    bss::write_file_atomic(json_out, j.dump(2) + "\n");
  }
  std::printf("%s\n", all_pass ? "all checks passed" : "CHECK FAILURES");
  return all_pass ? 0 : 1;
}

int run_bench() {
  using clock = std::chrono::steady_clock;
  bss::Rng rng(42);
  struct Entry {
    std::string name;
    bss::Shape4 shape;
    std::function<void(const bss::Tensor&)> fn;
  };
  bss::SAConfig sa_cfg;
  sa_cfg.groups = 2;
  sa_cfg.shuffle_groups = 2;
  const bss::SAWeights sa_wts = bss::SAWeights::defaults(16);
  const std::vector<Entry> entries = {
      {"global_avg_pool", {2, 64, 64, 64}, [](const bss::Tensor& x) { bss::global_avg_pool(x); }},
      {"group_norm", {2, 64, 64, 64}, [](const bss::Tensor& x) { bss::group_norm(x, 8, 1e-5); }},
      {"channel_shuffle", {2, 64, 64, 64}, [](const bss::Tensor& x) { bss::channel_shuffle(x, 4); }},
      {"resample_up2", {2, 64, 32, 32}, [](const bss::Tensor& x) { bss::resample(x, bss::Resample::up2); }},
      {"resample_down2", {2, 64, 64, 64}, [](const bss::Tensor& x) { bss::resample(x, bss::Resample::down2); }},
      {"simam_forward", {2, 64, 64, 64}, [](const bss::Tensor& x) { bss::simam_forward(x, bss::SimAMConfig{1e-4}); }},
      {"sa_forward", {2, 64, 64, 64}, [&](const bss::Tensor& x) { bss::sa_forward(x, sa_cfg, sa_wts); }},
      {"fuse_weighted_x3", {2, 64, 64, 64}, [](const bss::Tensor& x) {
         bss::fuse_weighted(std::vector<bss::Tensor>{x, x, x}, {1.0, 0.5, 2.0}, 1e-4);
       }},
  };
  std::printf("%-18s %-16s %10s %12s\n", "op", "shape", "ms", "Melem/s");
  for (const auto& e : entries) {
    bss::Tensor x(e.shape);
    for (std::int64_t i = 0; i < x.size(); ++i) {
      x[static_cast<std::size_t>(i)] = static_cast<float>(rng.normal());
    }
    e.fn(x);  // warm-up
    const int reps = 5;
    const auto start = clock::now();
    for (int i = 0; i < reps; ++i) e.fn(x);
    const double ms =
        std::chrono::duration<double, std::milli>(clock::now() - start).count() / reps;
    const double melems = static_cast<double>(e.shape.elems()) / (ms * 1000.0);
    std::printf("%-18s %-16s %10.3f %12.1f\n", e.name.c_str(), e.shape.str().c_str(),
                ms, melems);
  }
  return 0;
}

struct Artifact {
  std::string name;
  std::size_t bytes = 0;
  std::uint64_t hash = 0;
};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

int run_selftest(const std::string& fixtures, const std::string& out_dir) {
  const fs::path fx(fixtures);
  const fs::path out(out_dir);
  fs::create_directories(out / "fuse");
  fs::create_directories(out / "eval");

  std::vector<Artifact> artifacts;
  std::vector<std::string> failures;
  auto record = [&](const fs::path& rel) {
    const auto bytes = bss::read_file_bytes(out / rel);
    artifacts.push_back({rel.generic_string(), bytes.size(), bss::hash_bytes(bytes)});
  };

  // 1. BST1 round-trip of the shipped JSON tensor
  const bss::Tensor feat = bss::read_tensor_file(fx / "tensors" / "feat_1x8x8x8.json");
  bss::write_tensor_file(out / "feat_roundtrip.bst", feat);
  {
    const auto bytes = bss::read_file_bytes(out / "feat_roundtrip.bst");
    if (bytes != bss::bst_serialize(bss::to_bst(feat))) {
      failures.push_back("bst_roundtrip: bytes differ");
    }
    const bss::Tensor back = bss::tensor_from_bst(bss::bst_deserialize(bytes));
    if (!(back == feat)) failures.push_back("bst_roundtrip: values differ");
  }
  record("feat_roundtrip.bst");

  // 2. SimAM on the fixture tensor
  {
    const bss::SimAMConfig cfg{1e-4};
    bss::write_tensor_file(out / "simam_out.bst", bss::simam_forward(feat, cfg));
    bss::write_tensor_file(out / "simam_energy.bst", bss::simam_energy(feat, cfg).e_star);
    record("simam_out.bst");
    record("simam_energy.bst");
  }

  // 3. Shuffle attention with the shipped weights
  {
    bss::SAConfig cfg;
    cfg.groups = 2;
    cfg.shuffle_groups = 2;
    cfg.gn_delta = 1e-5;
    const bss::SAWeights wts = bss::load_sa_weights(fx / "sa_weights", 2);
    bss::write_tensor_file(out / "sa_out.bst", bss::sa_forward(feat, cfg, wts));
    record("sa_out.bst");
  }

  // 4. Default neck over the shipped pyramid
  {
    const bss::FusionGraph graph = bss::load_graph(fx / "bss_default_neck.json");
    const auto rep = bss::graph_validate(graph);
    if (!rep.valid) failures.push_back("default neck graph failed validation");
    std::map<std::string, bss::Tensor> inputs;
    for (const char* level : {"P3", "P4", "P5"}) {
      inputs.emplace(level, bss::read_tensor_file(fx / "tensors" /
                                                  (std::string(level) + ".json")));
    }
    for (const auto& [id, tensor] : bss::graph_execute(graph, inputs)) {
      bss::write_tensor_file(out / "fuse" / (id + ".bst"), tensor);
      record(fs::path("fuse") / (id + ".bst"));
    }
  }

  // 5. Metrics fixture against the golden report
  {
    const auto report =
        bss::eval_dataset(fx / "detect" / "gt", fx / "detect" / "det.jsonl", 0.5, 4);
    bss::write_file_atomic(out / "eval" / "report.json",
                           bss::report_to_json(report).dump(2) + "\n");
    record(fs::path("eval") / "report.json");
    for (const auto& ce : report.per_class) {
      const std::string name = "pr_class_" + std::to_string(ce.class_id) + ".csv";
      bss::write_file_atomic(out / "eval" / name, bss::pr_curve_csv(ce.curve));
      record(fs::path("eval") / name);
      const fs::path golden_csv = fx / "detect" / ("golden_" + name);
      if (bss::read_file_bytes(out / "eval" / name) != bss::read_file_bytes(golden_csv)) {
        failures.push_back(name + " differs from golden");
      }
    }
    if (bss::read_file_bytes(out / "eval" / "report.json") !=
        bss::read_file_bytes(fx / "detect" / "golden_report.json")) {
      failures.push_back("eval report differs from golden");
    }
  }

  const bool pass = failures.empty();
  ordered_json j;
  j["pass"] = pass;
  j["failures"] = failures;
  j["artifacts"] = ordered_json::array();
  for (const auto& a : artifacts) {
    j["artifacts"].push_back(
        {{"name", a.name}, {"bytes", a.bytes}, {"fnv1a64", hex64(a.hash)}});
  }
  bss::write_file_atomic(out / "selftest_report.json", j.dump(2) + "\n");
  for (const auto& f : failures) std::fprintf(stderr, "selftest failure: %s\n", f.c_str());
  std::printf("selftest %s: %zu artifacts under %s\n", pass ? "passed" : "FAILED",
              artifacts.size(), out.string().c_str());
  return pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"feature fusion and attention operators with detection metrics"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  CommonOpts common;
  app.add_option("--threads", common.threads, "worker thread bound (0 = all cores)")
      ->envname("BSS_THREADS");

  auto* simam = app.add_subcommand("simam", "energy-based attention forward pass");
  std::string simam_in, simam_out, simam_energy;
  double simam_lambda = 1e-4;
  simam->add_option("--in", simam_in, "input tensor (.bst or .json)")->required();
  simam->add_option("--lambda", simam_lambda, "energy regularizer");
  simam->add_option("--out", simam_out, "output tensor path")->required();
  simam->add_option("--emit-energy", simam_energy, "also write per-neuron energies");

  auto* sa = app.add_subcommand("sa", "shuffle attention forward pass");
  std::string sa_in, sa_out, sa_weights;
  int sa_groups = 1, sa_shuffle = 2;
  double sa_delta = 1e-5;
  sa->add_option("--in", sa_in, "input tensor")->required();
  sa->add_option("--groups", sa_groups, "feature groups K")->required();
  sa->add_option("--shuffle-groups", sa_shuffle, "final channel shuffle groups");
  sa->add_option("--gn-delta", sa_delta, "GN epsilon");
  sa->add_option("--weights", sa_weights, "weights directory (manifest.json)");
  sa->add_option("--out", sa_out, "output tensor path")->required();

  auto* fuse = app.add_subcommand("fuse", "execute a fusion graph");
  std::string fuse_graph, fuse_weights, fuse_out_dir;
  std::vector<std::string> fuse_inputs;
  fuse->add_option("--graph", fuse_graph, "graph JSON")->required();
  fuse->add_option("--input", fuse_inputs, "LEVEL=FILE (repeatable)")->required();
  fuse->add_option("--weights", fuse_weights, "conv weights directory");
  fuse->add_option("--out-dir", fuse_out_dir, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "detection metrics over GT and detections");
  std::string eval_gt, eval_det, eval_out = "eval_out";
  double eval_iou = 0.5;
  int eval_classes = 4;
  eval->add_option("--gt", eval_gt, "ground-truth directory")->required();
  eval->add_option("--det", eval_det, "detections JSONL file")->required();
  eval->add_option("--iou", eval_iou, "IoU threshold");
  eval->add_option("--classes", eval_classes, "class count Q");
  eval->add_option("--out-dir", eval_out, "output directory");

  auto* check = app.add_subcommand("check", "invariant / oracle / gradient suites");
  std::string check_suite = "all", check_op_name, check_json;
  int check_trials = 20;
  double check_tol = 1e-4;
  std::uint64_t check_seed = 7;
  check->add_option("--suite", check_suite, "all | invariants | oracle | grad");
  check->add_option("--op", check_op_name, "restrict grad suite to one op");
  check->add_option("--trials", check_trials, "grad trials per op");
  check->add_option("--tol", check_tol, "grad relative-error tolerance");
  check->add_option("--seed", check_seed, "suite seed");
  check->add_option("--json", check_json, "also write a JSON report");

  auto* bench = app.add_subcommand("bench", "per-op wall time (informational)");

  auto* selftest = app.add_subcommand("selftest", "run every shipped fixture");
  std::string st_fixtures = "fixtures", st_out = "selftest_out";
  selftest->add_option("--fixtures", st_fixtures, "fixtures directory");
  selftest->add_option("--out-dir", st_out, "artifact directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    apply_threads(common);
    if (simam->parsed()) return run_simam(simam_in, simam_lambda, simam_out, simam_energy);
    if (sa->parsed()) return run_sa(sa_in, sa_groups, sa_shuffle, sa_delta, sa_weights, sa_out);
    if (fuse->parsed()) return run_fuse(fuse_graph, fuse_inputs, fuse_weights, fuse_out_dir);
    if (eval->parsed()) return run_eval(eval_gt, eval_det, eval_iou, eval_classes, eval_out);
    if (check->parsed()) {
      return run_check(check_suite, check_op_name, check_trials, check_tol, check_seed,
                       check_json);
    }
    if (bench->parsed()) return run_bench();
    if (selftest->parsed()) return run_selftest(st_fixtures, st_out);
  } catch (const bss::Error& e) {
    std::fprintf(stderr, "bss: error[%s]: %s\n", e.kind().c_str(), e.what());
    return (e.kind() == "io" || e.kind() == "parse") ? 2 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "bss: error[internal]: %s\n", e.what());
    return 1;
  }
  return 0;
}
