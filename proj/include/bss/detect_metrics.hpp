// Detection evaluation: greedy IoU matching at a threshold, precision /
// recall / F1, per-class AP as the area under the monotone precision
// envelope, and mAP as the unweighted class mean.
//
// Files: ground truth is one text file per image with lines
// "class cx cy w h" (normalized centers); detections are JSON lines
// {"image": str, "class": int, "bbox": [cx,cy,w,h], "score": float}.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bss/errors.hpp"
#include "bss/tensor_io.hpp"

#include <nlohmann/json.hpp>

namespace bss {

struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;
};

// Corner form, clipped to the unit square on ingestion. No pixel grid, no +1.
struct Corners {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

inline Corners to_corners(const Box& b) {
  Corners c;
  c.x1 = std::clamp(b.cx - b.w / 2.0, 0.0, 1.0);
  c.y1 = std::clamp(b.cy - b.h / 2.0, 0.0, 1.0);
  c.x2 = std::clamp(b.cx + b.w / 2.0, 0.0, 1.0);
  c.y2 = std::clamp(b.cy + b.h / 2.0, 0.0, 1.0);
  return c;
}

inline double iou(const Corners& a, const Corners& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
  const double area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
  const double uni = area_a + area_b - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

struct GTRecord {
  std::string image;
  int class_id = 0;
  Box box;
  Corners corners;
};

struct DetRecord {
  std::string image;
  int class_id = 0;
  Box box;
  Corners corners;
  double score = 0.0;
  std::size_t order = 0;  // position in the detection file; the tie-break
};

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Eqs. P = TP/(TP+FP), R = TP/(TP+FN), F1 = 2PR/(P+R), with 0/0 -> 0.
inline PRF prf(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
  if (tp < 0 || fp < 0 || fn < 0) throw ConfigError("prf: negative count");
  PRF r;
  r.precision = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  r.recall = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  r.f1 = (r.precision + r.recall) == 0.0
             ? 0.0
             : 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

struct PRPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct PRCurve {
  std::vector<PRPoint> points;  // swept over score-descending detections
  std::int64_t gt_count = 0;
};

// All-point interpolation: precision replaced by its running max from the
// right, AP = sum of delta-recall times envelope precision.
inline double average_precision(const PRCurve& curve) {
  if (curve.gt_count <= 0) {
    throw DegenerateError("average_precision: undefined with zero ground truth");
  }
  const std::size_t n = curve.points.size();
  std::vector<double> env(n);
  double running = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    running = std::max(running, curve.points[i].precision);
    env[i] = running;
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (curve.points[i].recall - prev_recall) * env[i];
    prev_recall = curve.points[i].recall;
  }
  return ap;
}

inline double mean_ap(const std::vector<double>& per_class_ap) {
  if (per_class_ap.empty()) throw ConfigError("mean_ap: no classes with defined AP");
  double acc = 0.0;
  for (double ap : per_class_ap) acc += ap;
  return acc / static_cast<double>(per_class_ap.size());
}

struct DetOutcome {
  std::size_t det_index = 0;  // index into the caller's detection list
  double score = 0.0;
  bool tp = false;
};

struct ClassMatch {
  std::vector<DetOutcome> outcomes;  // score-descending, ties by input order
  std::int64_t tp = 0, fp = 0, fn = 0;
  std::int64_t gt_count = 0;
};

// Greedy protocol: walk detections by descending score; a detection is a TP
// iff its best-IoU unmatched same-class same-image GT clears the threshold,
// which consumes that GT. Unmatched GT count is FN.
inline ClassMatch match_class(const std::vector<DetRecord>& dets,
                              const std::vector<GTRecord>& gts, int class_id,
                              double iou_thresh) {
  ClassMatch result;
  std::map<std::string, std::vector<std::size_t>> gt_by_image;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (gts[i].class_id == class_id) {
      gt_by_image[gts[i].image].push_back(i);
      ++result.gt_count;
    }
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].class_id == class_id) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return dets[a].order < dets[b].order;
  });

  std::vector<char> consumed(gts.size(), 0);
  for (std::size_t idx : order) {
    const DetRecord& det = dets[idx];
    double best = -1.0;
    std::size_t best_gt = 0;
    bool found = false;
    auto it = gt_by_image.find(det.image);
    if (it != gt_by_image.end()) {
      for (std::size_t gi : it->second) {
        if (consumed[gi]) continue;
        const double v = iou(det.corners, gts[gi].corners);
        if (v > best) {
          best = v;
          best_gt = gi;
          found = true;
        }
      }
    }
    DetOutcome outcome{idx, det.score, false};
    if (found && best >= iou_thresh) {
      outcome.tp = true;
      consumed[best_gt] = 1;
      ++result.tp;
    } else {
      ++result.fp;
    }
    result.outcomes.push_back(outcome);
  }
  result.fn = result.gt_count - result.tp;
  return result;
}

inline std::map<int, ClassMatch> match_detections(const std::vector<DetRecord>& dets,
                                                  const std::vector<GTRecord>& gts,
                                                  double iou_thresh, int classes) {
  std::map<int, ClassMatch> out;
  for (int q = 0; q < classes; ++q) out.emplace(q, match_class(dets, gts, q, iou_thresh));
  return out;
}

inline PRCurve pr_curve(const ClassMatch& match) {
  PRCurve curve;
  curve.gt_count = match.gt_count;
  std::int64_t tp = 0, fp = 0;
  for (const auto& o : match.outcomes) {
    o.tp ? ++tp : ++fp;
    PRPoint p;
    p.recall = match.gt_count == 0 ? 0.0
                                   : static_cast<double>(tp) / static_cast<double>(match.gt_count);
    p.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    curve.points.push_back(p);
  }
  return curve;
}

struct OperatingPoint {
  double threshold = 0.0;  // keep detections with score >= threshold
  std::int64_t tp = 0, fp = 0, fn = 0;
  PRF metrics;
};

// Best-F1 prefix of the score-descending sweep; first prefix wins ties.
inline OperatingPoint f1_max_point(const ClassMatch& match) {
  OperatingPoint best;
  best.fn = match.gt_count;
  best.metrics = prf(0, 0, match.gt_count);
  std::int64_t tp = 0, fp = 0;
  for (const auto& o : match.outcomes) {
    o.tp ? ++tp : ++fp;
    const PRF m = prf(tp, fp, match.gt_count - tp);
    if (m.f1 > best.metrics.f1) {
      best = OperatingPoint{o.score, tp, fp, match.gt_count - tp, m};
    }
  }
  return best;
}

struct ClassEval {
  int class_id = 0;
  std::int64_t gt_count = 0;
  std::int64_t det_count = 0;
  std::int64_t tp = 0, fp = 0, fn = 0;
  PRF at_full;           // operating point with every detection kept
  OperatingPoint f1_max;
  double ap = 0.0;
  bool ap_defined = false;
  PRCurve curve;
  std::vector<std::string> flags;
};

struct EvalReport {
  double iou_threshold = 0.5;
  int classes = 0;
  std::int64_t images = 0;
  std::int64_t gt_total = 0;
  std::int64_t det_total = 0;
  std::vector<ClassEval> per_class;
  PRF macro;
  double map = 0.0;
  bool map_defined = false;
  int map_classes = 0;  // classes with defined AP
};

// ---- ingestion ----

namespace metrics_detail {

inline double parse_real(const std::string& token, const std::string& where) {
  double v = 0.0;
  const char* begin = token.data();
  const char* end = begin + token.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw ParseError(where + ": bad number \"" + token + "\"");
  }
  return v;
}

inline int parse_class(const std::string& token, const std::string& where) {
  int v = 0;
  const char* begin = token.data();
  const char* end = begin + token.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end || v < 0) {
    throw ParseError(where + ": bad class id \"" + token + "\"");
  }
  return v;
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline void validate_box(const Box& b, const std::string& where) {
  if (!(b.w > 0.0) || !(b.h > 0.0)) {
    throw ParseError(where + ": box width/height must be > 0");
  }
  if (!std::isfinite(b.cx) || !std::isfinite(b.cy)) {
    throw ParseError(where + ": non-finite box center");
  }
}

}  // namespace metrics_detail

// One file per image; the image id is the file stem. Lines "class cx cy w h".
inline std::vector<GTRecord> load_gt_dir(const std::filesystem::path& dir, int classes) {
  if (!std::filesystem::is_directory(dir)) {
    throw IoError("ground-truth directory " + dir.string() + " does not exist");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<GTRecord> out;
  for (const auto& file : files) {
    const auto bytes = read_file_bytes(file);
    std::string text(bytes.begin(), bytes.end());
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t nl = text.find('\n', pos);
      const std::string line =
          text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
      pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
      ++line_no;
      const auto tokens = metrics_detail::split_ws(line);
      if (tokens.empty()) continue;
      const std::string where = file.string() + " line " + std::to_string(line_no);
      if (tokens.size() != 5) {
        throw ParseError(where + ": expected \"class cx cy w h\", got " +
                         std::to_string(tokens.size()) + " fields");
      }
      GTRecord rec;
      rec.image = file.stem().string();
      rec.class_id = metrics_detail::parse_class(tokens[0], where);
      if (rec.class_id >= classes) {
        throw ParseError(where + ": class id " + std::to_string(rec.class_id) +
                         " out of range [0," + std::to_string(classes) + ")");
      }
      rec.box = Box{metrics_detail::parse_real(tokens[1], where),
                    metrics_detail::parse_real(tokens[2], where),
                    metrics_detail::parse_real(tokens[3], where),
                    metrics_detail::parse_real(tokens[4], where)};
      metrics_detail::validate_box(rec.box, where);
      rec.corners = to_corners(rec.box);
      out.push_back(std::move(rec));
    }
  }
  return out;
}

inline std::vector<DetRecord> load_detections_jsonl(const std::filesystem::path& file,
                                                    int classes) {
  const auto bytes = read_file_bytes(file);
  std::string text(bytes.begin(), bytes.end());
  std::vector<DetRecord> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string line =
        text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    bool blank = true;
    for (char ch : line) {
      if (ch != ' ' && ch != '\t' && ch != '\r') blank = false;
    }
    if (blank) continue;
    const std::string where = file.string() + " line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("image") || !j.contains("class") ||
        !j.contains("bbox") || !j.contains("score")) {
      throw ParseError(where + ": need \"image\", \"class\", \"bbox\", \"score\"");
    }
    DetRecord rec;
    rec.order = out.size();
    try {
      rec.image = j.at("image").get<std::string>();
      rec.class_id = j.at("class").get<int>();
      const auto& bb = j.at("bbox");
      if (!bb.is_array() || bb.size() != 4) {
        throw ParseError(where + ": bbox must be [cx,cy,w,h]");
      }
      rec.box = Box{bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(),
                    bb[3].get<double>()};
      rec.score = j.at("score").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
    if (rec.class_id < 0 || rec.class_id >= classes) {
      throw ParseError(where + ": class id " + std::to_string(rec.class_id) +
                       " out of range [0," + std::to_string(classes) + ")");
    }
    if (!std::isfinite(rec.score) || rec.score < 0.0 || rec.score > 1.0) {
      throw ParseError(where + ": score must be a finite value in [0,1]");
    }
    metrics_detail::validate_box(rec.box, where);
    rec.corners = to_corners(rec.box);
    out.push_back(std::move(rec));
  }
  return out;
}

inline EvalReport evaluate(const std::vector<DetRecord>& dets,
                           const std::vector<GTRecord>& gts, double iou_thresh,
                           int classes) {
  if (classes < 1) throw ConfigError("evaluate: need at least one class");
  EvalReport rep;
  rep.iou_threshold = iou_thresh;
  rep.classes = classes;
  rep.gt_total = static_cast<std::int64_t>(gts.size());
  rep.det_total = static_cast<std::int64_t>(dets.size());
  {
    std::vector<std::string> images;
    for (const auto& g : gts) images.push_back(g.image);
    for (const auto& d : dets) images.push_back(d.image);
    std::sort(images.begin(), images.end());
    images.erase(std::unique(images.begin(), images.end()), images.end());
    rep.images = static_cast<std::int64_t>(images.size());
  }

  std::vector<double> defined_aps;
  double macro_p = 0.0, macro_r = 0.0, macro_f1 = 0.0;
  for (int q = 0; q < classes; ++q) {
    ClassMatch match = match_class(dets, gts, q, iou_thresh);
    ClassEval ce;
    ce.class_id = q;
    ce.gt_count = match.gt_count;
    ce.det_count = static_cast<std::int64_t>(match.outcomes.size());
    ce.tp = match.tp;
    ce.fp = match.fp;
    ce.fn = match.fn;
    ce.at_full = prf(match.tp, match.fp, match.fn);
    ce.f1_max = f1_max_point(match);
    ce.curve = pr_curve(match);
    if (match.gt_count > 0) {
      ce.ap = average_precision(ce.curve);
      ce.ap_defined = true;
      defined_aps.push_back(ce.ap);
    } else {
      ce.flags.push_back("no_gt_ap_undefined");
    }
    if (match.gt_count == 0 && ce.det_count == 0) ce.flags.push_back("empty_class");
    if (ce.det_count == 0 && match.gt_count > 0) ce.flags.push_back("no_detections");
    macro_p += ce.at_full.precision;
    macro_r += ce.at_full.recall;
    macro_f1 += ce.at_full.f1;
    rep.per_class.push_back(std::move(ce));
  }
  rep.macro.precision = macro_p / classes;
  rep.macro.recall = macro_r / classes;
  rep.macro.f1 = macro_f1 / classes;
  rep.map_classes = static_cast<int>(defined_aps.size());
  if (!defined_aps.empty()) {
    rep.map = mean_ap(defined_aps);
    rep.map_defined = true;
  }
  return rep;
}

inline EvalReport eval_dataset(const std::filesystem::path& gt_dir,
                               const std::filesystem::path& det_file,
                               double iou_thresh, int classes) {
  const auto gts = load_gt_dir(gt_dir, classes);
  const auto dets = load_detections_jsonl(det_file, classes);
  return evaluate(dets, gts, iou_thresh, classes);
}

// ---- emission ----

inline nlohmann::ordered_json prf_to_json(const PRF& m) {
  return nlohmann::ordered_json{
      {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
}

inline nlohmann::ordered_json report_to_json(const EvalReport& rep) {
  nlohmann::ordered_json j;
  j["config"] = {{"iou_threshold", rep.iou_threshold}, {"classes", rep.classes}};
  j["counts"] = {{"images", rep.images},
                 {"ground_truth", rep.gt_total},
                 {"detections", rep.det_total}};
  j["per_class"] = nlohmann::ordered_json::array();
  for (const auto& ce : rep.per_class) {
    nlohmann::ordered_json jc;
    jc["class"] = ce.class_id;
    jc["gt"] = ce.gt_count;
    jc["detections"] = ce.det_count;
    jc["tp"] = ce.tp;
    jc["fp"] = ce.fp;
    jc["fn"] = ce.fn;
    jc["full"] = prf_to_json(ce.at_full);
    jc["f1_max"] = {{"threshold", ce.f1_max.threshold},
                    {"tp", ce.f1_max.tp},
                    {"fp", ce.f1_max.fp},
                    {"fn", ce.f1_max.fn},
                    {"precision", ce.f1_max.metrics.precision},
                    {"recall", ce.f1_max.metrics.recall},
                    {"f1", ce.f1_max.metrics.f1}};
    if (ce.ap_defined) {
      jc["ap"] = ce.ap;
    } else {
      jc["ap"] = nullptr;
    }
    jc["flags"] = ce.flags;
    j["per_class"].push_back(std::move(jc));
  }
  j["macro"] = prf_to_json(rep.macro);
  if (rep.map_defined) {
    j["map"] = rep.map;
  } else {
    j["map"] = nullptr;
  }
  j["map_classes"] = rep.map_classes;
  return j;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

inline std::string pr_curve_csv(const PRCurve& curve) {
  std::string out = "recall,precision\n";
  for (const auto& p : curve.points) {
    out += format_double(p.recall);
    out += ',';
    out += format_double(p.precision);
    out += '\n';
  }
  return out;
}

}  // namespace bss
