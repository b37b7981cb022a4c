#include <pybind11/eigen.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ctxdet/error.hpp"
#include "ctxdet/io.hpp"
#include "ctxdet/pipeline.hpp"

namespace py = pybind11;
using namespace ctxdet;

namespace {

std::vector<PixelPoint> to_points(const std::vector<std::array<int, 2>>& pts) {
  std::vector<PixelPoint> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back({p[0], p[1]});
  return out;
}

BinaryMask to_mask(const std::vector<std::array<int, 2>>& pts) {
  BinaryMask m;
  m.points = to_points(pts);
  for (const auto& p : m.points) {
    m.bounds.width = std::max(m.bounds.width, p.x + 1);
    m.bounds.height = std::max(m.bounds.height, p.y + 1);
  }
  return m;
}

py::dict category_ap_dict(const CategoryAP& a) {
  py::dict d;
  d["category_id"] = a.category_id;
  d["name"] = a.name;
  d["supercategory"] = a.supercategory;
  d["num_gt"] = a.num_gt;
  d["ap"] = a.ap;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Context-aware object detection core";

  py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<SchemaError>(m, "SchemaError");
  py::register_exception<ShapeMismatch>(m, "ShapeMismatch");
  py::register_exception<MissingSegmentation>(m, "MissingSegmentation");

  py::class_<BoundingBox>(m, "BoundingBox")
      .def(py::init<>())
      .def(py::init([](double x, double y, double w, double h) { return BoundingBox{x, y, w, h}; }), py::arg("x"),
           py::arg("y"), py::arg("w"), py::arg("h"))
      .def_static("from_center", &BoundingBox::from_center)
      .def_readwrite("x", &BoundingBox::x)
      .def_readwrite("y", &BoundingBox::y)
      .def_readwrite("w", &BoundingBox::w)
      .def_readwrite("h", &BoundingBox::h)
      .def_property_readonly("cx", &BoundingBox::cx)
      .def_property_readonly("cy", &BoundingBox::cy)
      .def_property_readonly("area", &BoundingBox::area)
      .def("as_tuple", [](const BoundingBox& b) { return py::make_tuple(b.x, b.y, b.w, b.h); })
      .def(py::self == py::self)
      .def("__repr__", [](const BoundingBox& b) {
        return "BoundingBox(" + format_double(b.x) + ", " + format_double(b.y) + ", " + format_double(b.w) + ", " +
               format_double(b.h) + ")";
      });

  m.def("iou", &iou, py::arg("a"), py::arg("b"));
  m.def(
      "encode_addon",
      [](const BoundingBox& person, const BoundingBox& addon) { return encode_addon(person, addon).as_array(); },
      py::arg("person"), py::arg("addon"));
  m.def(
      "decode_addon",
      [](const BoundingBox& person, const std::array<double, 4>& off) {
        return decode_addon(person, AddOnOffset::from_array(off));
      },
      py::arg("person"), py::arg("offset"));
  m.def(
      "directed_hausdorff",
      [](const std::vector<std::array<int, 2>>& mask, const std::vector<std::array<int, 2>>& ref) {
        return directed_hausdorff(to_mask(mask), to_mask(ref));
      },
      py::arg("mask"), py::arg("reference"), "Points are (x, y) pixel coordinates.");

  m.def("noisy_or", &noisy_or, py::arg("p"));
  m.def(
      "average_precision",
      [](const std::vector<double>& scores, const std::vector<int>& labels, int num_gt) {
        if (scores.size() != labels.size()) throw ShapeMismatch("scores and labels differ in length");
        std::vector<MatchLabel> l;
        for (int v : labels) l.push_back(v > 0 ? MatchLabel::TruePositive
                                         : v == 0 ? MatchLabel::FalsePositive
                                                  : MatchLabel::Ignored);
        return average_precision(scores, l, num_gt);
      },
      py::arg("scores"), py::arg("labels"), py::arg("num_gt"), "labels: 1 TP, 0 FP, -1 ignored.");

  m.def(
      "kmeans",
      [](const Eigen::MatrixXd& points, int k, std::uint64_t seed) {
        if (points.cols() != 4) throw ShapeMismatch("kmeans expects an N x 4 array");
        std::vector<Point4> pts;
        for (Eigen::Index r = 0; r < points.rows(); ++r) pts.push_back({points(r, 0), points(r, 1), points(r, 2), points(r, 3)});
        const KMeansResult res = kmeans(pts, k, seed);
        Eigen::MatrixXd c(static_cast<Eigen::Index>(res.centroids.size()), 4);
        for (size_t i = 0; i < res.centroids.size(); ++i)
          for (int j = 0; j < 4; ++j) c(static_cast<Eigen::Index>(i), j) = res.centroids[i][static_cast<size_t>(j)];
        return py::make_tuple(c, res.assignment, res.sse);
      },
      py::arg("points"), py::arg("k"), py::arg("seed") = 0, "Returns (centroids, assignment, sse history).");

  m.def(
      "select_context_regions",
      [](const std::vector<BoundingBox>& regions, const Eigen::MatrixXd& probs, int width, int height, int top_t) {
        const ContextSet s = select_context_regions(regions, probs, {width, height}, top_t);
        return py::make_tuple(s.boxes, s.region_index);
      },
      py::arg("regions"), py::arg("probs"), py::arg("width"), py::arg("height"), py::arg("top_t") = kContextTopT);

  m.def(
      "relation_overlap_bits",
      [](const BoundingBox& c, const BoundingBox& b) {
        RelationCodebook cb;
        cb.centroids = {{0, 0, 0, 0}};
        cb.thresholds = kOverlapThresholds;
        const auto bits = relation_indicator(cb, c, b);
        return std::vector<int>(bits.begin() + 1, bits.end());
      },
      py::arg("context"), py::arg("box"));

  m.def(
      "heatmap_peak",
      [](double a, double b) {
        PersonPrediction p;
        p.person = {0, 0, 10, 20};
        p.person_score = 1.0;
        p.confidence = {1.0};
        p.intermediate = p.refined = {AddOnOffset{}};
        p.fallback = {false};
        const HeatmapParams hp{a, b, 0.1, 0.5};
        return heatmap_value(p, 0, p.person.cx(), p.person.cy(), hp);
      },
      py::arg("a") = -50.0, py::arg("b") = 100.0, "Field value at the centre of a confident prediction.");

  m.def(
      "default_config", [] { return run_config_to_json(RunConfig{}).dump(); },
      "Default run config as a JSON string.");
  m.def(
      "resolve_config", [](const std::string& text) { return run_config_to_json(run_config_from_json(nlohmann::json::parse(text))).dump(); },
      py::arg("config_json"), "Validates a config (JSON string) and returns it with defaults filled in.");

  m.def(
      "generate_split",
      [](const std::string& config_json, bool test, const std::filesystem::path& dir) {
        const RunConfig c = run_config_from_json(nlohmann::json::parse(config_json));
        save_dataset(generate_split(c, test), dir);
      },
      py::arg("config_json"), py::arg("test"), py::arg("dir"), "Writes a synthetic split to `dir`.");

  m.def(
      "evaluate_files",
      [](const std::filesystem::path& detections, const std::filesystem::path& split_dir) {
        const SceneSet scenes = load_dataset(split_dir).scenes;
        py::list out;
        for (const auto& a : evaluate(load_detections(detections), scenes)) out.append(category_ap_dict(a));
        return out;
      },
      py::arg("detections"), py::arg("split_dir"), "Per-category AP of a detections CSV against a split directory.");

  m.attr("CONTEXT_TOP_T") = kContextTopT;
  m.attr("RELATION_CLUSTERS") = kRelationClusters;
  m.attr("OVERLAP_THRESHOLDS") = kOverlapThresholds;
}
