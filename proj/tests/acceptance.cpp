// Acceptance suite: runs every criterion at its stated tolerance and prints
// one pass/fail line per criterion. Exit code 0 iff all pass.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bss/bss.hpp"
#include "bss/suites.hpp"

namespace fs = std::filesystem;
using namespace bss;

namespace {

const std::string kCli = BSS_CLI_PATH;
const fs::path kFixtures = BSS_FIXTURES_DIR;

int run_cli(const std::string& args) {
  const int status = std::system((kCli + " " + args).c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

DTensor random_dtensor(Rng& rng, Shape4 d) {
  DTensor t(d);
  for (std::int64_t i = 0; i < t.size(); ++i) t[static_cast<std::size_t>(i)] = rng.normal();
  return t;
}

struct Check {
  bool ok = true;
  std::string detail;
  void fail(const std::string& why) {
    ok = false;
    if (detail.empty()) detail = why;
  }
};

// C1: constant input forces e* = 2, so every gate is sigmoid(0.5).
Check criterion1() {
  Check c;
  Rng rng(101);
  const double want = 1.0 / (1.0 + std::exp(-0.5));
  for (int i = 0; i < 10; ++i) {
    const float value = static_cast<float>(rng.uniform(-5.0, 5.0));
    const Shape4 d{1 + static_cast<int>(i % 2), 1 + static_cast<int>(i % 3), 3 + (i % 4),
                   2 + (i % 5)};
    Tensor x(d, value);
    for (double lambda : {1e-4, 1e-2, 1.0}) {
      const auto field = simam_energy(x, SimAMConfig{lambda});
      for (std::int64_t e = 0; e < field.e_star.size(); ++e) {
        const double gate = sigmoid(1.0 / field.e_star[static_cast<std::size_t>(e)]);
        if (std::abs(gate - want) > 1e-6) {
          c.fail("gate " + std::to_string(gate) + " != sigmoid(0.5)");
        }
        if (std::abs(gate - 0.622459) > 1e-6) c.fail("gate differs from 0.622459");
      }
    }
  }
  return c;
}

// C2: the closed form is the exact ridge minimizer and sampling never wins.
Check criterion2() {
  Check c;
  const double lambdas[] = {1e-4, 1e-2, 0.1};
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(Rng::mix(202, static_cast<std::uint64_t>(trial)));
    const int m = static_cast<int>(rng.uniform_int(4, 64));
    std::vector<double> channel(static_cast<std::size_t>(m));
    for (auto& v : channel) v = rng.normal();
    const double lambda = lambdas[trial % 3];
    const int t = static_cast<int>(rng.uniform_int(0, m - 1));
    const auto analytic = simam_analytic_min(channel, t, lambda);
    try {
      const auto exact = simam_oracle_min(channel, t, lambda, 10000, 555 + trial);
      worst = std::max({worst, std::abs(analytic.omega_t - exact.omega_t),
                        std::abs(analytic.b_t - exact.b_t)});
      if (std::abs(analytic.omega_t - exact.omega_t) > 1e-8 ||
          std::abs(analytic.b_t - exact.b_t) > 1e-8) {
        c.fail("solution mismatch " + std::to_string(worst));
      }
      if (std::abs(analytic.e_min - exact.e_min) > 1e-9) c.fail("e_min mismatch");
    } catch (const OracleError& e) {
      c.fail(e.what());  // a sampled pair beat the claimed minimum
    }
  }
  c.detail = "max |analytic-exact| = " + std::to_string(worst);
  return c;
}

// C3: median |closed form - exact leave-one-out minimum| shrinks with M.
Check criterion3() {
  Check c;
  auto median_gap = [](int m, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> gaps;
    const double lambda = 1e-4;
    for (int ch = 0; ch < 8; ++ch) {
      std::vector<double> channel(static_cast<std::size_t>(m));
      double sum = 0, sumsq = 0;
      for (auto& v : channel) {
        v = rng.normal();
        sum += v;
        sumsq += v * v;
      }
      const double mu = sum / m;
      const double var = sumsq / m - mu * mu;
      for (int t = 0; t < m; ++t) {
        const double dev = channel[static_cast<std::size_t>(t)] - mu;
        const double e5 = 4.0 * (var + lambda) / (dev * dev + 2.0 * var + 2.0 * lambda);
        gaps.push_back(std::abs(e5 - simam_exact_min_energy(
                                         channel[static_cast<std::size_t>(t)], sum, sumsq,
                                         m, lambda)));
      }
    }
    std::nth_element(gaps.begin(),
                     gaps.begin() + static_cast<std::ptrdiff_t>(gaps.size() / 2), gaps.end());
    return gaps[gaps.size() / 2];
  };
  const double at64 = median_gap(64, 303);
  const double at6400 = median_gap(6400, 304);
  c.ok = at6400 < at64;
  c.detail = "median gap M=64: " + std::to_string(at64) +
             " -> M=6400: " + std::to_string(at6400);
  return c;
}

// C4: every named backward matches central differences over >= 20 shapes.
Check criterion4() {
  Check c;
  for (const char* op : {"simam_forward", "sa_forward", "fuse_weighted", "group_norm",
                         "pointwise_conv"}) {
    const GradCheckReport rep = check_op(op, 20, 1e-4, 404);
    if (!rep.pass) {
      c.fail(std::string(op) + " max rel " + std::to_string(rep.max_rel));
    }
    c.detail += std::string(op) + "=" + std::to_string(rep.max_rel) + " ";
  }
  return c;
}

// C5: Eq.-1 algebra at 64-bit tolerances.
Check criterion5() {
  Check c;
  Rng rng(505);
  const double eps = 1e-4;
  const std::vector<double> w{0.5, 1.5, 2.0};
  double wsum = 0;
  for (double v : w) wsum += v;
  double coeff_sum = 0;
  for (double v : w) coeff_sum += v / (eps + wsum);
  if (!(coeff_sum < 1.0)) c.fail("coefficient sum not < 1");
  if (std::abs(coeff_sum - wsum / (eps + wsum)) > 1e-12) c.fail("coefficient sum identity");

  const DTensor x = random_dtensor(rng, Shape4{1, 2, 4, 4});
  const DTensor same = fuse_weighted(std::vector<DTensor>{x, x}, {1.0, 1.0}, eps);
  for (std::int64_t i = 0; i < same.size(); ++i) {
    if (std::abs(same[static_cast<std::size_t>(i)] -
                 0.99995000249987497 * x[static_cast<std::size_t>(i)]) > 1e-9) {
      c.fail("identical-input fusion is not 0.99995 * input");
    }
  }

  std::vector<DTensor> ins;
  for (int i = 0; i < 3; ++i) ins.push_back(random_dtensor(rng, Shape4{1, 2, 3, 3}));
  const double scale = 7.25;
  const DTensor lhs = fuse_weighted(ins, {scale * w[0], scale * w[1], scale * w[2]}, eps);
  const DTensor rhs = fuse_weighted(ins, w, eps / scale);
  for (std::int64_t i = 0; i < lhs.size(); ++i) {
    if (std::abs(lhs[static_cast<std::size_t>(i)] - rhs[static_cast<std::size_t>(i)]) > 1e-9) {
      c.fail("weight homogeneity fuse(c*w, eps) != fuse(w, eps/c)");
    }
  }
  return c;
}

// C6: topology surgery on the 7-node graph plus the shipped neck.
Check criterion6() {
  Check c;
  FusionGraph g;
  auto input = [&](const std::string& id, Shape4 d) {
    FusionNode n;
    n.id = id;
    n.kind = NodeKind::input;
    g.nodes.push_back(n);
    g.input_dims[id] = d;
  };
  auto node = [&](const std::string& id, NodeKind kind, std::vector<FusionEdge> edges) {
    FusionNode n;
    n.id = id;
    n.kind = kind;
    n.raw_weights.assign(edges.size(), 1.0);
    n.edges = std::move(edges);
    g.nodes.push_back(n);
  };
  input("A", Shape4{1, 2, 4, 4});
  input("B", Shape4{1, 2, 4, 4});
  node("PT1", NodeKind::fuse, {{"A", {}}});
  node("PT2", NodeKind::fuse, {{"PT1", {}}});
  node("F", NodeKind::fuse, {{"PT2", {}}, {"B", {}}});
  node("PT3", NodeKind::fuse, {{"F", {}}});
  node("O", NodeKind::output, {{"PT3", {}}});
  g.outputs = {"O"};

  const FusionGraph s = graph_simplify(g);
  if (s.nodes.size() != 4) c.fail("expected 4 surviving nodes of 7");
  for (const char* id : {"PT1", "PT2", "PT3"}) {
    if (s.find(id) != nullptr) c.fail(std::string("pass-through ") + id + " survived");
  }
  for (const char* id : {"A", "B", "F", "O"}) {
    if (s.find(id) == nullptr) c.fail(std::string(id) + " was wrongly pruned");
  }
  const FusionGraph s2 = graph_simplify(s);
  if (s2.nodes.size() != s.nodes.size()) c.fail("simplify is not idempotent");

  const FusionGraph neck = make_default_neck(1, 4, 32, 32);
  const auto rep = graph_validate(neck);
  if (!rep.valid) c.fail("default neck failed validation");
  Rng rng(606);
  std::map<std::string, Tensor> ins;
  auto rand_f = [&](Shape4 d) {
    Tensor t(d);
    for (std::int64_t i = 0; i < t.size(); ++i) {
      t[static_cast<std::size_t>(i)] = static_cast<float>(rng.normal());
    }
    return t;
  };
  ins.emplace("P3", rand_f(Shape4{1, 4, 32, 32}));
  ins.emplace("P4", rand_f(Shape4{1, 4, 16, 16}));
  ins.emplace("P5", rand_f(Shape4{1, 4, 8, 8}));  // 1/4 the P3 side
  const auto outs = graph_execute(neck, ins);
  if (!(outs.at("P3out").dims() == Shape4{1, 4, 32, 32}) ||
      !(outs.at("P4out").dims() == Shape4{1, 4, 16, 16}) ||
      !(outs.at("P5out").dims() == Shape4{1, 4, 8, 8})) {
    c.fail("default neck does not preserve per-level dims");
  }
  return c;
}

// C7: SA structural laws plus its finite-difference check.
Check criterion7() {
  Check c;
  Rng rng(707);
  Tensor x(1, 8, 4, 4);
  for (std::int64_t i = 0; i < x.size(); ++i) {
    x[static_cast<std::size_t>(i)] = static_cast<float>(rng.normal());
  }
  SAConfig cfg;
  cfg.groups = 2;
  cfg.shuffle_groups = 1;
  SAWeights zeros;
  zeros.w1.assign(2, 0.f);
  zeros.b1.assign(2, 0.f);
  zeros.w2.assign(2, 0.f);
  zeros.b2.assign(2, 0.f);
  const Tensor halved = sa_forward(x, cfg, zeros);
  if (!(halved.dims() == x.dims())) c.fail("dims not preserved");
  for (std::int64_t i = 0; i < x.size(); ++i) {
    if (halved[static_cast<std::size_t>(i)] != 0.5f * x[static_cast<std::size_t>(i)]) {
      c.fail("all-zero weights did not give exactly x/2");
    }
  }
  const Tensor shuffled = channel_shuffle(x, 4);
  if (!(channel_shuffle(shuffled, 8 / 4) == x)) c.fail("shuffle inverse failed");

  const GradCheckReport rep = check_op("sa_forward", 20, 1e-4, 708);
  if (!rep.pass) c.fail("sa_forward gradcheck max rel " + std::to_string(rep.max_rel));
  c.detail = "sa_forward max rel " + std::to_string(rep.max_rel);
  return c;
}

// C8: metric pipeline numbers.
Check criterion8() {
  Check c;
  PRCurve curve;
  curve.gt_count = 2;
  curve.points = {{0.5, 1.0}, {0.5, 0.5}, {1.0, 2.0 / 3.0}};
  if (std::abs(average_precision(curve) - (0.5 + 0.5 * (2.0 / 3.0))) > 1e-9) {
    c.fail("hand-derived AP fixture != 0.833333");
  }
  const PRF m = prf(3, 1, 2);
  if (std::abs(m.precision - 0.75) > 1e-12 || std::abs(m.recall - 0.6) > 1e-12 ||
      std::abs(m.f1 - 0.666667) > 1e-6) {
    c.fail("prf(3,1,2) mismatch");
  }

  const auto gts = load_gt_dir(kFixtures / "detect" / "gt", 4);
  std::vector<DetRecord> self;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    DetRecord d;
    d.image = gts[i].image;
    d.class_id = gts[i].class_id;
    d.box = gts[i].box;
    d.corners = gts[i].corners;
    d.score = 1.0;
    d.order = i;
    self.push_back(d);
  }
  const EvalReport self_rep = evaluate(self, gts, 0.5, 4);
  if (!self_rep.map_defined || self_rep.map != 1.0) c.fail("self-match mAP != 1");

  const EvalReport rep =
      eval_dataset(kFixtures / "detect" / "gt", kFixtures / "detect" / "det.jsonl", 0.5, 4);
  const std::string produced = report_to_json(rep).dump(2) + "\n";
  if (produced != slurp(kFixtures / "detect" / "golden_report.json")) {
    c.fail("golden report bytes differ");
  }
  c.detail = "mAP = " + format_double(rep.map);
  return c;
}

// C9: selftest artifacts are bit-identical across runs and thread counts.
Check criterion9() {
  Check c;
  const fs::path base =
      fs::temp_directory_path() / ("bss_acc9_" + std::to_string(::getpid()));
  fs::remove_all(base);
  fs::create_directories(base);
  const std::vector<std::pair<std::string, std::string>> runs = {
      {"t1a", "--threads 1"}, {"t1b", "--threads 1"}, {"t8", "--threads 8"}};
  for (const auto& [name, threads] : runs) {
    const int code = run_cli("selftest --fixtures " + kFixtures.string() + " --out-dir " +
                             (base / name).string() + " " + threads + " >" +
                             (base / (name + ".log")).string());
    if (code != 0) c.fail("selftest exited " + std::to_string(code));
  }
  auto collect = [](const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
      if (entry.is_regular_file()) {
        files[fs::relative(entry.path(), root).generic_string()] = slurp(entry.path());
      }
    }
    return files;
  };
  const auto a = collect(base / "t1a");
  const auto b = collect(base / "t1b");
  const auto d = collect(base / "t8");
  if (a.empty()) c.fail("no artifacts produced");
  if (a != b) c.fail("repeat run with --threads 1 differs");
  if (a != d) c.fail("--threads 8 run differs");
  c.detail = std::to_string(a.size()) + " artifacts compared";
  fs::remove_all(base);
  return c;
}

// C10: BST1 fidelity and line-numbered rejection of malformed inputs.
Check criterion10() {
  Check c;
  Rng rng(1010);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape4 d{static_cast<int>(rng.uniform_int(1, 3)),
                   static_cast<int>(rng.uniform_int(1, 6)),
                   static_cast<int>(rng.uniform_int(1, 7)),
                   static_cast<int>(rng.uniform_int(1, 7))};
    Tensor t(d);
    for (std::int64_t i = 0; i < t.size(); ++i) {
      t[static_cast<std::size_t>(i)] = static_cast<float>(100.0 * rng.normal());
    }
    const auto bytes = bst_serialize(to_bst(t));
    const Tensor back = tensor_from_bst(bst_deserialize(bytes));
    if (!(back == t) || bst_serialize(to_bst(back)) != bytes) {
      c.fail("BST1 round-trip not byte-exact");
    }
  }

  const fs::path tmp =
      fs::temp_directory_path() / ("bss_acc10_" + std::to_string(::getpid()));
  fs::remove_all(tmp);
  fs::create_directories(tmp / "gt");
  std::ofstream(tmp / "gt" / "im.txt") << "0 0.5 0.5 0.2 0.2\n0 0.5 0.5 0.2\n";
  std::ofstream(tmp / "det.jsonl") << "";
  const fs::path errfile = tmp / "err.txt";
  int code = std::system((kCli + " eval --gt " + (tmp / "gt").string() + " --det " +
                          (tmp / "det.jsonl").string() + " --classes 1 --out-dir " +
                          (tmp / "out").string() + " 2>" + errfile.string() + " >/dev/null")
                             .c_str());
  code = WIFEXITED(code) ? WEXITSTATUS(code) : -1;
  std::string err = slurp(errfile);
  if (code != 2) c.fail("malformed GT line: expected exit 2, got " + std::to_string(code));
  if (err.find("line 2") == std::string::npos) c.fail("GT error lacks the line number");

  std::ofstream(tmp / "gt" / "im.txt") << "0 0.5 0.5 0.2 0.2\n";
  std::ofstream(tmp / "det.jsonl")
      << R"({"image":"im","class":0,"bbox":[0.5,0.5,0.2,0.2],"score":0.9})" << "\n{bad\n";
  code = std::system((kCli + " eval --gt " + (tmp / "gt").string() + " --det " +
                      (tmp / "det.jsonl").string() + " --classes 1 --out-dir " +
                      (tmp / "out").string() + " 2>" + errfile.string() + " >/dev/null")
                         .c_str());
  code = WIFEXITED(code) ? WEXITSTATUS(code) : -1;
  err = slurp(errfile);
  if (code != 2) c.fail("malformed det line: expected exit 2, got " + std::to_string(code));
  if (err.find("line 2") == std::string::npos) c.fail("det error lacks the line number");
  fs::remove_all(tmp);
  return c;
}

}  // namespace

int main() {
  struct Entry {
    int id;
    const char* title;
    double time_limit;  // seconds; 0 = none
    std::function<Check()> fn;
  };
  const std::vector<Entry> criteria = {
      {1, "SimAM constant-input law (gate = sigmoid(0.5) +/- 1e-6)", 1.0, criterion1},
      {2, "SimAM analytic vs normal-equation oracle (1e-8; sampling never wins)", 10.0,
       criterion2},
      {3, "SimAM approximation gap shrinks from M=64 to M=6400", 30.0, criterion3},
      {4, "gradient checks: 5 backward passes, 20 shapes, rel err <= 1e-4", 60.0,
       criterion4},
      {5, "fusion algebra: coefficient sum, 0.99995 identity, weight homogeneity", 0.0,
       criterion5},
      {6, "graph surgery: 7-node prune, idempotence, default neck dims", 0.0, criterion6},
      {7, "SA structural laws and finite differences", 60.0, criterion7},
      {8, "metrics: AP fixture, Eqs. on (3,1,2), self-match, golden report", 5.0,
       criterion8},
      {9, "selftest determinism across runs and --threads 1/8", 0.0, criterion9},
      {10, "BST1 byte fidelity; malformed lines exit 2 with line numbers", 0.0,
       criterion10},
  };

  int failures = 0;
  for (const auto& entry : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Check c;
    try {
      c = entry.fn();
    } catch (const std::exception& e) {
      c.ok = false;
      c.detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (entry.time_limit > 0 && secs > entry.time_limit) {
      c.ok = false;
      c.detail += " [exceeded " + std::to_string(entry.time_limit) + "s budget]";
    }
    if (!c.ok) ++failures;
    std::printf("C%02d %s (%.2fs) %s%s%s\n", entry.id, c.ok ? "PASS" : "FAIL", secs,
                entry.title, c.detail.empty() ? "" : " -- ", c.detail.c_str());
  }
  if (failures) std::printf("%d criterion(s) failed\n", failures);
  return failures ? 1 : 0;
}
