// Regenerates the derived fixtures: seeded tensor files, the shuffle-attention
// weights directory, and the golden metrics outputs for the shipped detection
// fixture. The ground-truth / detection files themselves are hand-written and
// never touched here.
//
//   bss_fixturegen [fixtures_dir]

#include <cstdio>
#include <filesystem>
#include <string>

#include "bss/bss.hpp"

namespace fs = std::filesystem;

namespace {

// Quarter-grid values are exact in float and double, so the JSON form stays
// compact and round-trips bit-exactly.
bss::Tensor quarter_tensor(bss::Shape4 d, std::uint64_t seed) {
  bss::Rng rng(seed);
  bss::Tensor t(d);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[static_cast<std::size_t>(i)] =
        static_cast<float>(std::round(4.0 * rng.normal()) / 4.0);
  }
  return t;
}

void write_vec(const fs::path& path, const std::vector<float>& v) {
  bss::BstArray a;
  a.dims = {static_cast<std::uint32_t>(v.size())};
  a.data = v;
  bss::bst_write(path, a);
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? argv[1] : "fixtures";
  fs::create_directories(root / "tensors");
  fs::create_directories(root / "sa_weights");

  bss::write_tensor_file(root / "tensors" / "feat_1x8x8x8.json",
                         quarter_tensor({1, 8, 8, 8}, 11));
  bss::write_tensor_file(root / "tensors" / "P3.json", quarter_tensor({1, 4, 32, 32}, 12));
  bss::write_tensor_file(root / "tensors" / "P4.json", quarter_tensor({1, 4, 16, 16}, 13));
  bss::write_tensor_file(root / "tensors" / "P5.json", quarter_tensor({1, 4, 8, 8}, 14));

  write_vec(root / "sa_weights" / "w1.bst", {1.0f, 0.75f});
  write_vec(root / "sa_weights" / "b1.bst", {0.0f, 0.25f});
  write_vec(root / "sa_weights" / "w2.bst", {1.0f, 1.25f});
  write_vec(root / "sa_weights" / "b2.bst", {0.0f, -0.25f});
  bss::write_file_atomic(root / "sa_weights" / "manifest.json",
                         std::string("{\n  \"w1\": \"w1.bst\",\n  \"b1\": \"b1.bst\",\n")
                             + "  \"w2\": \"w2.bst\",\n  \"b2\": \"b2.bst\"\n}\n");

  const auto report =
      bss::eval_dataset(root / "detect" / "gt", root / "detect" / "det.jsonl", 0.5, 4);
  bss::write_file_atomic(root / "detect" / "golden_report.json",
                         bss::report_to_json(report).dump(2) + "\n");
  for (const auto& ce : report.per_class) {
    bss::write_file_atomic(
        root / "detect" / ("golden_pr_class_" + std::to_string(ce.class_id) + ".csv"),
        bss::pr_curve_csv(ce.curve));
  }
  std::printf("fixtures written under %s\n", root.string().c_str());
  return 0;
}
