#include "tightbox/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "tightbox/errors.hpp"

namespace tightbox {

std::string to_string(Scenario s) { return s == Scenario::prelabel ? "prelabel" : "perturbed_gt"; }

Scenario parse_scenario(const std::string& s) {
  if (s == "prelabel") return Scenario::prelabel;
  if (s == "perturbed_gt") return Scenario::perturbed_gt;
  throw Error("unknown scenario '" + s + "'");
}

std::string to_string(Normalization n) { return n == Normalization::per_box ? "per_box" : "pooled"; }

Normalization parse_normalization(const std::string& s) {
  if (s == "per_box") return Normalization::per_box;
  if (s == "pooled") return Normalization::pooled;
  throw Error("unknown normalization '" + s + "'");
}

namespace {

void check_tolerances(const std::vector<double>& t) {
  if (t.empty()) throw Error("no tolerances given");
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!(t[i] > 0.0)) throw Error("tolerances must be positive");
    if (i > 0 && !(t[i] > t[i - 1])) throw Error("tolerances must be strictly increasing");
  }
}

}  // namespace

bool EvalConfig::valid() const noexcept {
  try {
    check_tolerances(tolerances);
  } catch (const Error&) {
    return false;
  }
  return error_model.valid();
}

double mae_le_edge(std::span<const PredTruth> pairs, int edge, Normalization norm) {
  if (pairs.empty()) throw EmptyInput("mae_le of an empty set");
  double num = 0.0, den = 0.0;
  for (const auto& p : pairs) {
    const double err = edge_errors(p.pred, p.truth)[edge];
    const double le = p.truth.longest_edge();
    if (norm == Normalization::per_box) {
      num += err / le;
      den += 1.0;
    } else {
      num += err;
      den += le;
    }
  }
  return 100.0 * num / den;
}

double mae_le(std::span<const PredTruth> pairs, Normalization norm) {
  if (pairs.empty()) throw EmptyInput("mae_le of an empty set");
  double num = 0.0, den = 0.0;
  for (const auto& p : pairs) {
    const auto e = edge_errors(p.pred, p.truth);
    const double le = p.truth.longest_edge();
    const double sum = e[0] + e[1] + e[2] + e[3];
    if (norm == Normalization::per_box) {
      num += sum / le;
      den += 4.0;
    } else {
      num += sum;
      den += 4.0 * le;
    }
  }
  return 100.0 * num / den;
}

std::map<double, double> tolerance_table(std::span<const PredTruth> pairs, const std::vector<double>& tolerances) {
  if (pairs.empty()) throw EmptyInput("tolerance_table of an empty set");
  check_tolerances(tolerances);
  std::vector<std::size_t> within(tolerances.size(), 0);
  for (const auto& p : pairs) {
    const auto e = edge_errors(p.pred, p.truth);
    const double le = p.truth.longest_edge();
    for (std::size_t k = 0; k < tolerances.size(); ++k) {
      const double cutoff = tolerances[k] * le / 100.0;
      for (double v : e) within[k] += v <= cutoff ? 1 : 0;
    }
  }
  std::map<double, double> out;
  const double edges = 4.0 * pairs.size();
  for (std::size_t k = 0; k < tolerances.size(); ++k) out[tolerances[k]] = within[k] / edges;
  return out;
}

std::vector<BBox> rough_boxes(const std::vector<LabeledInstance>& instances, const EvalConfig& cfg) {
  std::vector<BBox> out;
  out.reserve(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    if (cfg.scenario == Scenario::prelabel) {
      if (!inst.prelabel_box) throw MissingPrelabels("instance " + std::to_string(i) + " (" + inst.image_id + ") has no pre-label");
      out.push_back(*inst.prelabel_box);
    } else {
      Rng rng = make_stream(cfg.seed, {0x6576616c, static_cast<std::uint64_t>(i)});
      out.push_back(perturb(*inst.true_box, cfg.error_model, rng));
    }
  }
  return out;
}

std::vector<BBox> refine_batch(const BoxRegressor& model, const std::vector<LabeledInstance>& instances,
                               const std::vector<BBox>& rough, const ImageSource& images,
                               const SampleConfig& sample_cfg, std::vector<std::size_t>* failures) {
  SampleConfig cfg = sample_cfg;
  cfg.patch_size = model.input_size();
  std::vector<BBox> out(rough.size());
  constexpr std::size_t kChunk = 64;
  std::vector<ImagePatch> patches;
  for (std::size_t start = 0; start < rough.size(); start += kChunk) {
    const std::size_t end = std::min(rough.size(), start + kChunk);
    patches.clear();
    for (std::size_t i = start; i < end; ++i) {
      ImagePatch p = make_inference_patch(images.get(instances[i].image_id), rough[i], cfg);
      p.image_id = instances[i].image_id;
      patches.push_back(std::move(p));
    }
    const auto raw = model.predict(patches);
    for (std::size_t i = start; i < end; ++i) {
      const Image& img = images.get(instances[i].image_id);
      try {
        out[i] = finalize_prediction(patches[i - start].transform, raw[i - start], img.width, img.height);
      } catch (const DegenerateBox&) {
        if (failures) failures->push_back(i);
        try {
          out[i] = clip(rough[i], img.width, img.height);
        } catch (const DegenerateBox&) {
          out[i] = rough[i];
        }
      }
    }
  }
  return out;
}

EvalReport evaluate(const BoxRegressor& model, const std::vector<LabeledInstance>& instances,
                    const ImageSource& images, const SampleConfig& sample_cfg, const EvalConfig& eval_cfg) {
  if (!eval_cfg.valid()) throw Error("invalid evaluation config");
  std::vector<LabeledInstance> usable;
  for (const auto& inst : instances) {
    if (inst.true_box) usable.push_back(inst);
  }
  if (usable.empty()) throw EmptyDataset("no instances with ground truth to evaluate");

  const std::vector<BBox> rough = rough_boxes(usable, eval_cfg);
  std::vector<std::size_t> failures;
  const std::vector<BBox> refined = refine_batch(model, usable, rough, images, sample_cfg, &failures);

  std::vector<PredTruth> before, after;
  before.reserve(usable.size());
  after.reserve(usable.size());
  for (std::size_t i = 0; i < usable.size(); ++i) {
    before.push_back({rough[i], *usable[i].true_box});
    after.push_back({refined[i], *usable[i].true_box});
  }

  EvalReport r;
  r.n_boxes = usable.size();
  r.n_edges = 4 * usable.size();
  r.mae_le_before = mae_le(before, eval_cfg.normalization);
  r.mae_le_after = mae_le(after, eval_cfg.normalization);
  r.tolerance_before = tolerance_table(before, eval_cfg.tolerances);
  r.tolerance_after = tolerance_table(after, eval_cfg.tolerances);
  for (int e = 0; e < 4; ++e) {
    r.edges[e] = {mae_le_edge(before, e, eval_cfg.normalization), mae_le_edge(after, e, eval_cfg.normalization)};
  }
  r.scenario = eval_cfg.scenario;
  r.seed = eval_cfg.seed;
  r.normalization = eval_cfg.normalization;
  r.refine_failures = failures.size();
  return r;
}

std::string tolerance_key(double t) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, t);
  (void)ec;
  return std::string(buf, end);
}

nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["n_boxes"] = r.n_boxes;
  j["n_edges"] = r.n_edges;
  j["mae_le"] = {{"before", r.mae_le_before}, {"after", r.mae_le_after}};
  nlohmann::ordered_json tol = nlohmann::ordered_json::object();
  for (const auto& [t, before] : r.tolerance_before) {
    tol[tolerance_key(t)] = {{"before", before}, {"after", r.tolerance_after.at(t)}};
  }
  j["tolerance"] = tol;
  nlohmann::ordered_json edges = nlohmann::ordered_json::object();
  for (int e = 0; e < 4; ++e) edges[kEdgeNames[e]] = {{"before", r.edges[e].before}, {"after", r.edges[e].after}};
  j["edges"] = edges;
  j["scenario"] = to_string(r.scenario);
  j["seed"] = r.seed;
  j["normalization"] = to_string(r.normalization);
  j["refine_failures"] = r.refine_failures;
  j["assumptions"] = "edges of matched (pre-label, ground-truth) pairs only";
  return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.n_boxes = j.at("n_boxes").get<std::size_t>();
  r.n_edges = j.value("n_edges", 4 * r.n_boxes);
  r.mae_le_before = j.at("mae_le").at("before").get<double>();
  r.mae_le_after = j.at("mae_le").at("after").get<double>();
  for (const auto& [key, v] : j.at("tolerance").items()) {
    const double t = std::stod(key);
    r.tolerance_before[t] = v.at("before").get<double>();
    r.tolerance_after[t] = v.at("after").get<double>();
  }
  if (j.contains("edges")) {
    for (int e = 0; e < 4; ++e) {
      const auto& v = j["edges"].at(kEdgeNames[e]);
      r.edges[e] = {v.at("before").get<double>(), v.at("after").get<double>()};
    }
  }
  r.scenario = parse_scenario(j.at("scenario").get<std::string>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.normalization = parse_normalization(j.value("normalization", std::string("per_box")));
  r.refine_failures = j.value("refine_failures", std::size_t{0});
  return r;
}

RenderedReport report_render(const EvalReport& r) {
  std::ostringstream os;
  char line[160];
  os << "scenario: " << to_string(r.scenario) << "  seed: " << r.seed << "  boxes: " << r.n_boxes
     << "  edges: " << r.n_edges << "  normalization: " << to_string(r.normalization) << '\n';
  os << '\n';
  std::snprintf(line, sizeof line, "%-18s %10s %10s\n", "MAE/LE (%)", "before", "after");
  os << line;
  std::snprintf(line, sizeof line, "%-18s %10.3f %10.3f\n", "all edges", r.mae_le_before, r.mae_le_after);
  os << line;
  for (int e = 0; e < 4; ++e) {
    std::snprintf(line, sizeof line, "%-18s %10.3f %10.3f\n", kEdgeNames[e], r.edges[e].before, r.edges[e].after);
    os << line;
  }
  os << '\n';
  std::snprintf(line, sizeof line, "%-18s %10s %10s\n", "edges within (%)", "before", "after");
  os << line;
  for (const auto& [t, before] : r.tolerance_before) {
    const std::string label = tolerance_key(t) + "% of LE";
    std::snprintf(line, sizeof line, "%-18s %10.1f %10.1f\n", label.c_str(), 100.0 * before,
                  100.0 * r.tolerance_after.at(t));
    os << line;
  }
  if (r.refine_failures > 0) os << "\nrefinement fell back to the rough box for " << r.refine_failures << " instance(s)\n";
  return {os.str(), report_to_json(r).dump(2) + "\n"};
}

}  // namespace tightbox
