#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "evp/backbone.hpp"
#include "evp/errors.hpp"
#include "evp/harness/config.hpp"
#include "evp/harness/trainer.hpp"
#include "evp/label_mapping.hpp"
#include "evp/optimizer.hpp"
#include "evp/prompt_geometry.hpp"

namespace py = pybind11;
using namespace evp;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Image to_image(const Array& a) {
  if (a.ndim() != 3) throw Error(ErrorKind::kShape, "expected an (H, W, C) array");
  const auto* p = a.data();
  return Image(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)),
               std::vector<double>(p, p + a.size()));
}

Array to_array(const Image& img) {
  Array out({img.height(), img.width(), img.channels()});
  std::copy(img.values().begin(), img.values().end(), out.mutable_data());
  return out;
}

nlohmann::json to_nlohmann(const py::object& obj) {
  const auto dumps = py::module_::import("json").attr("dumps");
  return nlohmann::json::parse(dumps(obj).cast<std::string>());
}

py::object to_python(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

PromptGeometry geometry(int outer, int inner, int channels, const std::string& mode) {
  PromptGeometry g{outer, inner, channels, prompt_mode_from_string(mode)};
  g.validate();
  return g;
}

PromptTemplate prompt_from(const Array& weights, int inner, const std::string& mode) {
  Image w = to_image(weights);
  const PromptGeometry g = geometry(w.height(), inner, w.channels(), mode);
  PromptTemplate p = PromptTemplate::zeros(g);
  if (!w.same_shape(p.weights)) throw Error(ErrorKind::kShape, "prompt weights must be square");
  p.weights = std::move(w);
  return p;
}

BackboneConfig backbone_config(const py::object& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!overrides.is_none()) j["backbone"] = to_nlohmann(overrides);
  harness::RunConfig base;
  return harness::merge_json(base, j).backbone;
}

py::list collisions(const LabelMapping& m) {
  py::list out;
  for (const auto& e : m.collision_log) {
    py::dict d;
    d["downstream"] = e.downstream;
    d["contested"] = e.contested;
    d["holder"] = e.holder;
    d["assigned"] = e.assigned;
    out.append(d);
  }
  return out;
}

py::dict mapping_dict(const LabelMapping& m) {
  py::dict d;
  d["assignment"] = m.assignment;
  d["frequency"] = m.frequency;
  d["collisions"] = collisions(m);
  return d;
}

}  // namespace

PYBIND11_MODULE(_evp, m) {
  m.doc() = "Visual prompting on a frozen toy vision transformer";

  static py::exception<Error> error(m, "EvpError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(error.ptr(), (std::string(to_string(e.kind())) + ": " + e.what()).c_str());
    }
  });

  m.def("make_mask", [](int outer, int inner, int channels) { return to_array(make_mask(outer, inner, channels).entries()); },
        py::arg("outer"), py::arg("inner"), py::arg("channels") = 3);
  m.def("parameter_count",
        [](int outer, int inner, int channels, const std::string& mode) {
          return parameter_count(geometry(outer, inner, channels, mode));
        },
        py::arg("outer"), py::arg("inner"), py::arg("channels") = 3, py::arg("mode") = "shrink_pad");
  m.def("shrink", [](const Array& image, int size) { return to_array(shrink(to_image(image), size)); },
        py::arg("image"), py::arg("size"));
  m.def("compose",
        [](const Array& image, const Array& weights, int inner, const std::string& mode) {
          return to_array(compose(to_image(image), prompt_from(weights, inner, mode)));
        },
        py::arg("image"), py::arg("weights"), py::arg("inner"), py::arg("mode") = "shrink_pad",
        "Composes an image with prompt weights W; the prompt occupies the border outside the inner block.");
  m.def("prompt_gradient",
        [](const Array& composed_gradient, const Array& weights, int inner, const std::string& mode) {
          return to_array(prompt_gradient(to_image(composed_gradient), prompt_from(weights, inner, mode)));
        },
        py::arg("composed_gradient"), py::arg("weights"), py::arg("inner"), py::arg("mode") = "shrink_pad");
  m.def("normalize_gradient",
        [](const Array& grad, const Array& mask, const std::string& kind, double eps) {
          NormalizationMode mode{norm_kind_from_string(kind), eps};
          mode.validate();
          return to_array(normalize_gradient(to_image(grad), MaskMatrix(to_image(mask)), mode));
        },
        py::arg("grad"), py::arg("mask"), py::arg("kind") = "l2_whole", py::arg("eps") = 1e-12);

  py::class_<Backbone>(m, "Backbone")
      .def(py::init([](const py::object& config) { return Backbone::create(backbone_config(config)); }),
           py::arg("config") = py::none())
      .def_property_readonly("num_classes", [](const Backbone& b) { return b.config().num_classes; })
      .def_property_readonly("native_size", [](const Backbone& b) { return b.config().native_size; })
      .def("checksum", &Backbone::checksum)
      .def("forward",
           [](const Backbone& b, const Array& image) {
             const Vector v = b.forward(to_image(image));
             return std::vector<double>(v.data(), v.data() + v.size());
           },
           py::arg("image"))
      .def("input_gradient",
           [](const Backbone& b, const Array& image, int label) {
             const BackboneGradient g = b.input_gradient(to_image(image), label);
             return py::make_tuple(g.loss, to_array(g.image_grad));
           },
           py::arg("image"), py::arg("label"), "Returns (cross-entropy loss, d loss / d image).");

  m.def("mapping_from_frequencies",
        [](std::vector<std::vector<long>> frequency, int num_pretrained, const std::string& policy) {
          return mapping_dict(
              mapping_from_frequencies(std::move(frequency), num_pretrained, collision_policy_from_string(policy)));
        },
        py::arg("frequency"), py::arg("num_pretrained"), py::arg("policy") = "unique");
  m.def("build_mapping",
        [](const Backbone& b, const std::vector<Array>& images, const std::vector<int>& labels, int num_downstream,
           const std::string& policy) {
          if (images.size() != labels.size()) throw Error(ErrorKind::kShape, "images and labels differ in length");
          std::vector<LabeledImage> data;
          for (std::size_t i = 0; i < images.size(); ++i) data.push_back({to_image(images[i]), labels[i]});
          return mapping_dict(build_mapping(b, data, num_downstream, collision_policy_from_string(policy)));
        },
        py::arg("backbone"), py::arg("images"), py::arg("labels"), py::arg("num_downstream"),
        py::arg("policy") = "unique");

  m.def("default_config", [] { return to_python(harness::to_json(harness::RunConfig{})); });
  m.def("train",
        [](const py::object& config, const std::string& output_dir) {
          harness::RunConfig c = harness::merge_json(harness::RunConfig{}, to_nlohmann(config));
          harness::TrainOptions opts;
          opts.write_outputs = !output_dir.empty();
          c.output_dir = output_dir;
          harness::TrainResult r;
          {
            py::gil_scoped_release release;
            r = harness::train(c, opts);
          }
          py::list records;
          for (const auto& rec : r.records) records.append(to_python(harness::to_json(rec)));
          py::dict out;
          out["records"] = records;
          out["step_losses"] = r.step_losses;
          out["steps"] = r.steps;
          out["prompt_params"] = r.state.parameter_count();
          out["checksum_before"] = r.checksum_before;
          out["checksum_after"] = r.checksum_after;
          if (r.state.pixel) out["prompt"] = to_array(r.state.pixel->weights);
          if (r.state.mapping) out["mapping"] = r.state.mapping->assignment;
          return out;
        },
        py::arg("config"), py::arg("output_dir") = "",
        "Runs one training job. Outputs are written only when output_dir is given.");
}
