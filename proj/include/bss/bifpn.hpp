// Fast normalized weighted fusion and the fusion graph it runs in.
//
//   O = sum_i  w_i / (eps + sum_j w_j) * I_i,   w_i = max(0, raw_i)
//
// The graph is data: nodes with resampled in-edges, per-edge raw weights, an
// epsilon per node, and an optional 1x1 conv + activation after fusion.
// Topology surgery (prune single-input pass-through nodes, add same-level
// input->output skip edges) is a graph-to-graph transform.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bss/errors.hpp"
#include "bss/ops.hpp"
#include "bss/tensor.hpp"
#include "bss/tensor_io.hpp"

#include <nlohmann/json.hpp>

namespace bss {

template <typename T>
TensorT<T> fuse_weighted(const std::vector<const TensorT<T>*>& inputs,
                         const std::vector<double>& raw_weights, double epsilon) {
  if (inputs.empty()) throw ConfigError("fuse_weighted: need at least one input");
  if (inputs.size() != raw_weights.size()) {
    throw ConfigError("fuse_weighted: " + std::to_string(raw_weights.size()) +
                      " weights for " + std::to_string(inputs.size()) + " inputs");
  }
  const Shape4 d = inputs[0]->dims();
  for (const auto* in : inputs) {
    if (!(in->dims() == d)) {
      throw ShapeError("fuse_weighted: input dims " + in->dims().str() +
                       " != " + d.str());
    }
  }
  double sum = 0.0;
  std::vector<double> eff(raw_weights.size());
  for (std::size_t i = 0; i < raw_weights.size(); ++i) {
    eff[i] = std::max(0.0, raw_weights[i]);
    sum += eff[i];
  }
  const double denom = epsilon + sum;
  if (denom <= 0.0) {
    throw ConfigError("fuse_weighted: all weights zero and epsilon <= 0");
  }
  for (double& w : eff) w /= denom;

  TensorT<T> out(d);
  const std::int64_t total = out.size();
  for (std::int64_t e = 0; e < total; ++e) {
    double acc = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      acc += eff[i] * static_cast<double>((*inputs[i])[static_cast<std::size_t>(e)]);
    }
    out[static_cast<std::size_t>(e)] = static_cast<T>(acc);
  }
  return out;
}

template <typename T>
TensorT<T> fuse_weighted(const std::vector<TensorT<T>>& inputs,
                         const std::vector<double>& raw_weights, double epsilon) {
  std::vector<const TensorT<T>*> ptrs;
  ptrs.reserve(inputs.size());
  for (const auto& t : inputs) ptrs.push_back(&t);
  return fuse_weighted(ptrs, raw_weights, epsilon);
}

// Gradient w.r.t. each input: the fused coefficient times upstream.
template <typename T>
std::vector<TensorT<T>> fuse_weighted_backward(std::size_t input_count,
                                               const std::vector<double>& raw_weights,
                                               double epsilon,
                                               const TensorT<T>& upstream) {
  if (input_count != raw_weights.size()) {
    throw ConfigError("fuse_weighted_backward: weight count mismatch");
  }
  double sum = 0.0;
  std::vector<double> eff(raw_weights.size());
  for (std::size_t i = 0; i < raw_weights.size(); ++i) {
    eff[i] = std::max(0.0, raw_weights[i]);
    sum += eff[i];
  }
  const double denom = epsilon + sum;
  if (denom <= 0.0) throw ConfigError("fuse_weighted_backward: zero denominator");
  std::vector<TensorT<T>> grads;
  grads.reserve(input_count);
  for (std::size_t i = 0; i < input_count; ++i) {
    const double coeff = eff[i] / denom;
    TensorT<T> g(upstream.dims());
    for (std::int64_t e = 0; e < g.size(); ++e) {
      g[static_cast<std::size_t>(e)] =
          static_cast<T>(coeff * static_cast<double>(upstream[static_cast<std::size_t>(e)]));
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

enum class NodeKind { input, fuse, output };
enum class Activation { none, silu };

struct FusionEdge {
  std::string src;
  std::vector<Resample> steps;  // applied left to right to the source value
};

struct FusionPost {
  std::optional<ConvSpec<float>> conv;
  Activation act = Activation::none;
};

struct FusionNode {
  std::string id;
  NodeKind kind = NodeKind::fuse;
  std::vector<FusionEdge> edges;
  std::vector<double> raw_weights;
  double epsilon = 1e-4;
  FusionPost post;
  std::string level;  // for the same-level skip rule; may be empty

  bool has_post() const {
    return post.conv.has_value() || post.act != Activation::none;
  }
};

struct FusionGraph {
  std::vector<FusionNode> nodes;
  std::map<std::string, Shape4> input_dims;  // level (= input node id) -> dims
  std::vector<std::string> outputs;

  const FusionNode* find(const std::string& id) const {
    for (const auto& n : nodes) {
      if (n.id == id) return &n;
    }
    return nullptr;
  }
  FusionNode* find(const std::string& id) {
    for (auto& n : nodes) {
      if (n.id == id) return &n;
    }
    return nullptr;
  }
};

struct GraphIssue {
  std::string code;
  std::string message;
};

struct ValidationReport {
  bool valid = true;
  std::vector<GraphIssue> issues;
  // per-node working dims, filled when the graph is acyclic and consistent
  std::map<std::string, Shape4> dims;

  void add(const std::string& code, const std::string& message) {
    valid = false;
    issues.push_back({code, message});
  }
};

namespace graph_detail {

// Kahn's algorithm with a lexicographic frontier: the fixed evaluation order.
inline bool topo_order(const FusionGraph& g, std::vector<std::string>& order) {
  std::map<std::string, int> indeg;
  std::map<std::string, std::vector<std::string>> consumers;
  for (const auto& n : g.nodes) indeg[n.id] = 0;
  for (const auto& n : g.nodes) {
    for (const auto& e : n.edges) {
      if (indeg.count(e.src)) {
        ++indeg[n.id];
        consumers[e.src].push_back(n.id);
      }
    }
  }
  std::set<std::string> ready;
  for (const auto& [id, deg] : indeg) {
    if (deg == 0) ready.insert(id);
  }
  order.clear();
  while (!ready.empty()) {
    const std::string id = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(id);
    for (const auto& c : consumers[id]) {
      if (--indeg[c] == 0) ready.insert(c);
    }
  }
  return order.size() == g.nodes.size();
}

inline std::optional<Shape4> apply_steps(Shape4 d, const std::vector<Resample>& steps) {
  for (Resample s : steps) {
    switch (s) {
      case Resample::none:
        break;
      case Resample::up2:
        d.h *= 2;
        d.w *= 2;
        break;
      case Resample::down2:
        if (d.h % 2 != 0 || d.w % 2 != 0) return std::nullopt;
        d.h /= 2;
        d.w /= 2;
        break;
    }
  }
  return d;
}

// "P4out" -> "P4" when no explicit level is set; inputs are their own level.
inline std::string node_level(const FusionNode& n) {
  if (!n.level.empty()) return n.level;
  if (n.kind == NodeKind::input) return n.id;
  if (n.kind == NodeKind::output && n.id.size() > 3 &&
      n.id.compare(n.id.size() - 3, 3, "out") == 0) {
    return n.id.substr(0, n.id.size() - 3);
  }
  return {};
}

}  // namespace graph_detail

inline ValidationReport graph_validate(const FusionGraph& g) {
  ValidationReport rep;
  std::set<std::string> ids;
  for (const auto& n : g.nodes) {
    if (!ids.insert(n.id).second) rep.add("dup-id", "duplicate node id " + n.id);
  }
  for (const auto& n : g.nodes) {
    if (n.kind == NodeKind::input) {
      if (!n.edges.empty()) rep.add("input-with-edges", n.id + " is an input with in-edges");
      if (!g.input_dims.count(n.id)) {
        rep.add("missing-input-dims", "no declared dims for input " + n.id);
      }
      continue;
    }
    if (n.edges.empty()) rep.add("no-inedge", n.id + " has no in-edges");
    if (n.edges.size() != n.raw_weights.size()) {
      rep.add("weight-count", n.id + ": " + std::to_string(n.raw_weights.size()) +
                                  " weights for " + std::to_string(n.edges.size()) +
                                  " edges");
    }
    double sum = 0.0;
    for (double w : n.raw_weights) sum += std::max(0.0, w);
    if (n.epsilon + sum <= 0.0) {
      rep.add("zero-denominator", n.id + ": all weights clamp to zero and epsilon <= 0");
    }
    for (const auto& e : n.edges) {
      if (!ids.count(e.src)) rep.add("dangling-src", n.id + " references missing " + e.src);
      if (e.src == n.id) rep.add("cycle", n.id + " feeds itself");
    }
  }
  for (const auto& [level, dims] : g.input_dims) {
    const FusionNode* n = g.find(level);
    if (!n || n->kind != NodeKind::input) {
      rep.add("missing-input-node", "declared input " + level + " has no input node");
    }
    if (dims.n < 1 || dims.c < 1 || dims.h < 1 || dims.w < 1) {
      rep.add("bad-dims", "declared dims for " + level + " are invalid");
    }
  }
  for (const auto& out : g.outputs) {
    if (!ids.count(out)) rep.add("dangling-output", "declared output " + out + " missing");
  }

  std::vector<std::string> order;
  if (!graph_detail::topo_order(g, order)) {
    rep.add("cycle", "graph contains a cycle");
    return rep;
  }
  if (!rep.valid) return rep;

  // Dim propagation in topological order.
  for (const auto& id : order) {
    const FusionNode* n = g.find(id);
    if (n->kind == NodeKind::input) {
      rep.dims[id] = g.input_dims.at(id);
      continue;
    }
    std::optional<Shape4> working;
    for (const auto& e : n->edges) {
      if (!rep.dims.count(e.src)) {
        rep.add("dim-unknown", id + ": no dims for source " + e.src);
        continue;
      }
      auto resampled = graph_detail::apply_steps(rep.dims.at(e.src), e.steps);
      if (!resampled) {
        rep.add("odd-downsample", id + ": down2 on odd dims from " + e.src);
        continue;
      }
      if (!working) {
        working = resampled;
      } else if (!(*working == *resampled)) {
        rep.add("dim-mismatch", id + ": edge from " + e.src + " gives " +
                                    resampled->str() + ", expected " + working->str());
      }
    }
    if (!working) continue;
    Shape4 out = *working;
    if (n->post.conv) {
      const auto& conv = *n->post.conv;
      if (conv.in_channels != out.c) {
        rep.add("bad-conv", id + ": conv expects Cin=" + std::to_string(conv.in_channels) +
                                ", node has C=" + std::to_string(out.c));
      } else {
        out.c = conv.out_channels;
      }
    }
    rep.dims[id] = out;
  }
  if (!rep.valid) return rep;

  // Outputs must be fed by the declared inputs.
  std::set<std::string> reachable;
  for (const auto& [level, _] : g.input_dims) reachable.insert(level);
  for (const auto& id : order) {
    const FusionNode* n = g.find(id);
    for (const auto& e : n->edges) {
      if (reachable.count(e.src)) {
        reachable.insert(id);
        break;
      }
    }
  }
  for (const auto& out : g.outputs) {
    if (!reachable.count(out)) {
      rep.add("unreachable-output", out + " is not reachable from any input");
    }
  }
  return rep;
}

// Prunes fuse nodes with a single in-edge and no post-op (rewiring consumers
// to the source, composing resample steps) and guarantees each level that has
// both an input node and an output-stage node carries a direct skip edge with
// raw weight 1. Idempotent.
inline FusionGraph graph_simplify(const FusionGraph& g) {
  {
    const auto rep = graph_validate(g);
    if (!rep.valid) {
      throw GraphError("graph_simplify: invalid graph: " + rep.issues.front().message);
    }
  }
  FusionGraph s = g;

  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t i = 0; i < s.nodes.size(); ++i) {
      const FusionNode& victim = s.nodes[i];
      if (victim.kind != NodeKind::fuse || victim.edges.size() != 1 ||
          victim.has_post()) {
        continue;
      }
      if (std::find(s.outputs.begin(), s.outputs.end(), victim.id) != s.outputs.end()) {
        continue;  // declared outputs stay
      }
      const FusionEdge inherited = victim.edges[0];
      const std::string victim_id = victim.id;
      for (auto& n : s.nodes) {
        for (auto& e : n.edges) {
          if (e.src == victim_id) {
            std::vector<Resample> steps = inherited.steps;
            steps.insert(steps.end(), e.steps.begin(), e.steps.end());
            e.src = inherited.src;
            e.steps = std::move(steps);
          }
        }
      }
      s.nodes.erase(s.nodes.begin() + static_cast<std::ptrdiff_t>(i));
      changed = true;
      break;
    }
  }

  // Same-level skip edges.
  for (auto& n : s.nodes) {
    if (n.kind != NodeKind::output) continue;
    const std::string level = graph_detail::node_level(n);
    if (level.empty()) continue;
    const FusionNode* in_node = s.find(level);
    if (!in_node || in_node->kind != NodeKind::input) continue;
    bool present = false;
    for (const auto& e : n.edges) {
      if (e.src == level) present = true;
    }
    if (!present) {
      n.edges.push_back({level, {}});
      n.raw_weights.push_back(1.0);
    }
  }

  const auto rep = graph_validate(s);
  if (!rep.valid) {
    throw GraphError("graph_simplify: rewiring produced an invalid graph: " +
                     rep.issues.front().message);
  }
  return s;
}

// Evaluates the graph over the provided input tensors. Edges fuse in
// (source id, declaration index) order so edge declaration order never
// changes the summation order.
inline std::map<std::string, Tensor> graph_execute(
    const FusionGraph& g, const std::map<std::string, Tensor>& inputs) {
  const auto rep = graph_validate(g);
  if (!rep.valid) {
    std::string msg = "graph_execute: invalid graph:";
    for (const auto& issue : rep.issues) msg += " [" + issue.code + "] " + issue.message;
    throw GraphError(msg);
  }
  for (const auto& [level, dims] : g.input_dims) {
    auto it = inputs.find(level);
    if (it == inputs.end()) {
      throw ConfigError("graph_execute: missing input level " + level);
    }
    if (!(it->second.dims() == dims)) {
      throw ShapeError("graph_execute: input " + level + " has dims " +
                       it->second.dims().str() + ", declared " + dims.str());
    }
  }

  std::vector<std::string> order;
  graph_detail::topo_order(g, order);

  std::map<std::string, Tensor> values;
  for (const auto& id : order) {
    const FusionNode* n = g.find(id);
    if (n->kind == NodeKind::input) {
      values.emplace(id, inputs.at(id));
      continue;
    }
    struct Slot {
      std::string src;
      std::size_t idx;
    };
    std::vector<Slot> slots;
    slots.reserve(n->edges.size());
    for (std::size_t i = 0; i < n->edges.size(); ++i) slots.push_back({n->edges[i].src, i});
    std::sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) {
      return a.src != b.src ? a.src < b.src : a.idx < b.idx;
    });
    std::vector<Tensor> resampled;
    std::vector<double> weights;
    resampled.reserve(slots.size());
    for (const auto& slot : slots) {
      Tensor v = values.at(slot.src);
      for (Resample step : n->edges[slot.idx].steps) v = resample(v, step);
      resampled.push_back(std::move(v));
      weights.push_back(n->raw_weights[slot.idx]);
    }
    Tensor fused = fuse_weighted(resampled, weights, n->epsilon);
    if (n->post.conv) fused = pointwise_conv(fused, *n->post.conv);
    if (n->post.act == Activation::silu) fused = silu_map(fused);
    values.emplace(id, std::move(fused));
  }

  std::map<std::string, Tensor> out;
  for (const auto& id : g.outputs) out.emplace(id, values.at(id));
  return out;
}

// ---- JSON form ----
//
// {"nodes":[{"id":"P4td","kind":"fuse",
//            "inputs":[{"src":"P5","resample":"up2"},{"src":"P4","resample":"none"}],
//            "weights":[1,1],"epsilon":1e-4,
//            "post":{"conv":null,"act":"none"}}],
//  "inputs":{"P3":[1,4,32,32],...},
//  "outputs":["P3out","P4out","P5out"]}
//
// "post" and "epsilon" are optional; omitted weights default to 1 per edge.
// A node may carry an explicit "level" for the skip rule; otherwise inputs
// are their own level and output ids ending in "out" are matched by prefix.
// Conv weights may be inline ("weight":[...], "bias":[...]) or named files
// ("weight_file"/"bias_file") resolved against weights_dir.

inline Resample resample_from_string(const std::string& s, const std::string& origin) {
  if (s == "none") return Resample::none;
  if (s == "up2") return Resample::up2;
  if (s == "down2") return Resample::down2;
  throw ParseError(origin + ": unknown resample \"" + s + "\"");
}

inline FusionGraph parse_graph_json(const nlohmann::json& j, const std::string& origin,
                                    const std::filesystem::path& weights_dir = {}) {
  auto fail = [&](const std::string& why) -> void { throw ParseError(origin + ": " + why); };
  if (!j.is_object() || !j.contains("nodes")) fail("graph JSON needs \"nodes\"");
  FusionGraph g;
  for (const auto& jn : j.at("nodes")) {
    FusionNode n;
    if (!jn.contains("id")) fail("node without id");
    n.id = jn.at("id").get<std::string>();
    const std::string kind = jn.value("kind", std::string("fuse"));
    if (kind == "input") {
      n.kind = NodeKind::input;
    } else if (kind == "fuse") {
      n.kind = NodeKind::fuse;
    } else if (kind == "output") {
      n.kind = NodeKind::output;
    } else {
      fail("node " + n.id + ": unknown kind \"" + kind + "\"");
    }
    n.level = jn.value("level", std::string());
    if (jn.contains("inputs")) {
      for (const auto& je : jn.at("inputs")) {
        FusionEdge e;
        e.src = je.at("src").get<std::string>();
        const std::string r = je.value("resample", std::string("none"));
        const Resample step = resample_from_string(r, origin + " node " + n.id);
        if (step != Resample::none) e.steps.push_back(step);
        n.edges.push_back(std::move(e));
      }
    }
    if (jn.contains("weights")) {
      for (const auto& w : jn.at("weights")) n.raw_weights.push_back(w.get<double>());
    } else {
      n.raw_weights.assign(n.edges.size(), 1.0);
    }
    n.epsilon = jn.value("epsilon", 1e-4);
    if (jn.contains("post") && !jn.at("post").is_null()) {
      const auto& jp = jn.at("post");
      const std::string act = jp.value("act", std::string("none"));
      if (act == "silu") {
        n.post.act = Activation::silu;
      } else if (act != "none") {
        fail("node " + n.id + ": unknown activation \"" + act + "\"");
      }
      if (jp.contains("conv") && !jp.at("conv").is_null()) {
        const auto& jc = jp.at("conv");
        ConvSpec<float> conv;
        conv.out_channels = jc.at("out_channels").get<int>();
        conv.in_channels = jc.value("in_channels", conv.out_channels);
        if (jc.contains("weight")) {
          for (const auto& v : jc.at("weight")) conv.weight.push_back(v.get<float>());
        } else if (jc.contains("weight_file")) {
          const auto file = weights_dir / jc.at("weight_file").get<std::string>();
          const auto arr = bst_read(file);
          if (arr.dims.size() != 2) {
            fail("node " + n.id + ": conv weight file must be rank-2 BST1");
          }
          conv.out_channels = static_cast<int>(arr.dims[0]);
          conv.in_channels = static_cast<int>(arr.dims[1]);
          conv.weight = arr.data;
        }
        if (jc.contains("bias")) {
          for (const auto& v : jc.at("bias")) conv.bias.push_back(v.get<float>());
        } else if (jc.contains("bias_file")) {
          const auto file = weights_dir / jc.at("bias_file").get<std::string>();
          conv.bias = vector_from_bst(bst_read(file), file.string());
        }
        if (conv.weight.empty()) {
          if (conv.out_channels != conv.in_channels) {
            fail("node " + n.id + ": conv without weights must be square (identity)");
          }
          conv = ConvSpec<float>::identity(conv.out_channels);
        }
        if (conv.bias.empty()) conv.bias.assign(conv.out_channels, 0.0f);
        try {
          conv.validate();
        } catch (const Error& e) {
          fail("node " + n.id + ": " + e.what());
        }
        n.post.conv = std::move(conv);
      }
    }
    g.nodes.push_back(std::move(n));
  }
  if (j.contains("inputs")) {
    for (const auto& [level, jd] : j.at("inputs").items()) {
      if (!jd.is_array() || jd.size() != 4) fail("input " + level + ": dims must be [n,c,h,w]");
      g.input_dims[level] = Shape4{jd[0].get<int>(), jd[1].get<int>(), jd[2].get<int>(),
                                   jd[3].get<int>()};
    }
  }
  if (j.contains("outputs")) {
    for (const auto& o : j.at("outputs")) g.outputs.push_back(o.get<std::string>());
  }
  return g;
}

// The shipped three-level neck: one top-down intermediate at P4, outputs at
// every level, and the same-level P4 skip edge. P3 is the finest level; P4
// and P5 halve the spatial side step by step.
inline FusionGraph make_default_neck(int n, int c, int h, int w) {
  if (h % 4 != 0 || w % 4 != 0) {
    throw ConfigError("default neck: P3 spatial dims must be divisible by 4");
  }
  FusionGraph g;
  auto input = [&](const std::string& id, Shape4 dims) {
    FusionNode node;
    node.id = id;
    node.kind = NodeKind::input;
    g.nodes.push_back(node);
    g.input_dims[id] = dims;
  };
  auto fuse = [&](const std::string& id, NodeKind kind,
                  std::vector<FusionEdge> edges) {
    FusionNode node;
    node.id = id;
    node.kind = kind;
    node.raw_weights.assign(edges.size(), 1.0);
    node.edges = std::move(edges);
    g.nodes.push_back(node);
  };
  input("P3", Shape4{n, c, h, w});
  input("P4", Shape4{n, c, h / 2, w / 2});
  input("P5", Shape4{n, c, h / 4, w / 4});
  fuse("P4td", NodeKind::fuse, {{"P5", {Resample::up2}}, {"P4", {}}});
  fuse("P3out", NodeKind::output, {{"P4td", {Resample::up2}}, {"P3", {}}});
  fuse("P4out", NodeKind::output,
       {{"P3out", {Resample::down2}}, {"P4td", {}}, {"P4", {}}});
  fuse("P5out", NodeKind::output, {{"P4out", {Resample::down2}}, {"P5", {}}});
  g.outputs = {"P3out", "P4out", "P5out"};
  return g;
}

inline FusionGraph load_graph(const std::filesystem::path& path,
                              const std::filesystem::path& weights_dir = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return parse_graph_json(j, path.string(), weights_dir);
}

}  // namespace bss
