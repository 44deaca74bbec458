#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "bnas/binarize.hpp"
#include "bnas/checkpoint.hpp"
#include "bnas/cli.hpp"
#include "bnas/data.hpp"
#include "bnas/deploy.hpp"
#include "bnas/network.hpp"
#include "bnas/search.hpp"

namespace py = pybind11;
using namespace bnas;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  FloatArray out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

ConvGeometry geometry(int kernel, int stride, int dilation, int padding, int groups) {
  return {kernel, stride, dilation, padding, groups};
}

py::dict cost_dict(const CostReport& r) {
  py::dict d;
  d["memory_savings"] = r.memory_savings();
  d["speedup"] = r.speedup();
  d["flops"] = r.flops();
  d["param_bits_binary"] = r.param_bits_binary();
  d["param_bits_float"] = r.param_bits_float();
  return d;
}

}  // namespace

PYBIND11_MODULE(_bnas, m) {
  m.doc() = "Binary cell search, training and XNOR deployment";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<GenotypeError>(m, "GenotypeError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def(
      "binconv",
      [](const FloatArray& x, const FloatArray& w, int stride, int dilation, int padding, int groups) {
        const Tensor wt = to_tensor(w);
        NoGradGuard no_grad;
        return to_array(binconv_forward(to_tensor(x), wt, geometry(wt.dim(2), stride, dilation, padding, groups)));
      },
      py::arg("x"), py::arg("w"), py::arg("stride") = 1, py::arg("dilation") = 1, py::arg("padding") = 0,
      py::arg("groups") = 1, "XNOR approximation of conv2d(x, w): beta * K * (sign(w) conv sign(x)).");
  m.def(
      "packed_binconv",
      [](const FloatArray& x, const FloatArray& w, int stride, int dilation, int padding, int groups) {
        const Tensor wt = to_tensor(w);
        const auto packed = PackedConvWeights::from_latent(wt, geometry(wt.dim(2), stride, dilation, padding, groups));
        NoGradGuard no_grad;
        return to_array(packed_binconv(to_tensor(x), packed));
      },
      py::arg("x"), py::arg("w"), py::arg("stride") = 1, py::arg("dilation") = 1, py::arg("padding") = 0,
      py::arg("groups") = 1, "Bit-packed XNOR/popcount evaluation of binconv.");
  m.def(
      "quantization_error",
      [](const FloatArray& x, const FloatArray& w, int stride, int dilation, int padding) {
        const Tensor wt = to_tensor(w);
        return quantization_error(to_tensor(x), wt, geometry(wt.dim(2), stride, dilation, padding, 1));
      },
      py::arg("x"), py::arg("w"), py::arg("stride") = 1, py::arg("dilation") = 1, py::arg("padding") = 0);
  m.def(
      "sep_quantization_error",
      [](const FloatArray& x, const FloatArray& depthwise, const FloatArray& pointwise, int stride, int dilation,
         int padding) {
        const Tensor dw = to_tensor(depthwise);
        return sep_quantization_error(to_tensor(x), dw, to_tensor(pointwise),
                                      geometry(dw.dim(2), stride, dilation, padding, 1));
      },
      py::arg("x"), py::arg("depthwise"), py::arg("pointwise"), py::arg("stride") = 1, py::arg("dilation") = 1,
      py::arg("padding") = 0);

  m.def(
      "xnor_dot", [](const FloatArray& a, const FloatArray& b) { return xnor_dot(pack(to_tensor(a)), pack(to_tensor(b))); },
      py::arg("a"), py::arg("b"), "Dot product of sign(a) and sign(b) via XNOR and popcount.");

  m.def("layer_kinds", [] {
    const SearchSpace space = SearchSpace::standard();
    std::vector<std::string> names;
    for (LayerKind k : space.kinds()) names.emplace_back(to_string(k));
    return names;
  });
  m.def(
      "select_op",
      [](const std::vector<double>& weights, double gamma) {
        const auto space = SearchSpace::standard();
        return std::string(to_string(space.at(select_op(weights, space, gamma))));
      },
      py::arg("weights"), py::arg("gamma") = 1.0,
      "Layer chosen on one edge, with the Zeroise weight divided by gamma.");
  m.def("regularizer_value", &regularizer_value, py::arg("edges"), py::arg("epoch"), py::arg("lam"), py::arg("tau"));
  m.def("entropy", [](const std::vector<double>& p) { return entropy(p); }, py::arg("probs"));

  py::class_<Genotype>(m, "Genotype")
      .def_static("from_json", &Genotype::from_json)
      .def_static("load", [](const std::string& path) { return Genotype::load(path); })
      .def_static("uniform", [](const std::string& kind) { return Genotype::uniform(layer_kind_from_string(kind)); })
      .def("to_json", &Genotype::to_json)
      .def("save", [](const Genotype& g, const std::string& path) { g.save(path); })
      .def("count", [](const Genotype& g, const std::string& kind) { return g.count(layer_kind_from_string(kind)); })
      .def("with_zeroise_replaced",
           [](const Genotype& g, const std::string& kind) { return replace_zeroise(g, layer_kind_from_string(kind)); })
      .def_readwrite("gamma", &Genotype::gamma)
      .def_readwrite("seed", &Genotype::seed)
      .def("__eq__", [](const Genotype& a, const Genotype& b) { return a == b; });

  m.def("preset_names", &preset_names);
  m.def(
      "cost_report",
      [](const Genotype& g, const std::string& preset_name, int num_classes) {
        NetworkConfig cfg = preset(preset_name);
        cfg.num_classes = num_classes;
        return cost_dict(cost_report(g, cfg));
      },
      py::arg("genotype"), py::arg("preset") = "bnas-mini", py::arg("num_classes") = 10);

  m.def(
      "synthetic_blobs",
      [](int classes, std::size_t n, std::uint64_t seed, float noise, int side) {
        const Dataset ds = synthetic_blobs(classes, n, seed, noise, side);
        FloatArray images({static_cast<py::ssize_t>(ds.size()), static_cast<py::ssize_t>(ds.channels),
                           static_cast<py::ssize_t>(ds.height), static_cast<py::ssize_t>(ds.width)});
        std::copy(ds.images.begin(), ds.images.end(), images.mutable_data());
        return py::make_tuple(images, py::array_t<int>(static_cast<py::ssize_t>(ds.labels.size()), ds.labels.data()));
      },
      py::arg("classes"), py::arg("n"), py::arg("seed"), py::arg("noise") = 0.15f, py::arg("side") = kCifarSide);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the bnas command line in-process; returns (exit_code, stdout, stderr).");
}
