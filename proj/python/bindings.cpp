#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "chprune/config.hpp"
#include "chprune/distill.hpp"
#include "chprune/engine.hpp"
#include "chprune/errors.hpp"
#include "chprune/fitness.hpp"
#include "chprune/genetic.hpp"
#include "chprune/model_io.hpp"
#include "chprune/pruner.hpp"
#include "chprune/run.hpp"

namespace py = pybind11;
using namespace chprune;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

Chromosome to_mask(const std::vector<int>& bits) {
  Chromosome m(bits.size(), 0);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] != 0 && bits[i] != 1) throw ShapeError("mask entries must be 0 or 1");
    m[i] = static_cast<std::uint8_t>(bits[i]);
  }
  return m;
}

std::vector<int> from_mask(const Chromosome& m) { return {m.bits.begin(), m.bits.end()}; }

// N x (C*K*K) patches; callers fill ref_outputs when they need them.
VolumeSet to_volumes(const Array& volumes, std::size_t channels, std::size_t kernel) {
  if (volumes.ndim() != 2) throw ShapeError("volumes must be a 2-D array");
  VolumeSet vs;
  vs.layer_id = "python";
  vs.channels = channels;
  vs.kernel = kernel;
  vs.volumes = to_tensor(volumes);
  vs.origins.resize(static_cast<std::size_t>(volumes.shape(0)));
  return vs;
}

HessianCache to_hessian(const Array& h, std::size_t channels, std::size_t kernel) {
  HessianCache c;
  c.channels = channels;
  c.kernel = kernel;
  c.samples = 1;
  c.matrix = to_tensor(h);
  return c;
}

py::object to_python(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_python(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Channel pruning: second-order layer error, genetic mask search, attention transfer.";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<PruneError>(m, "PruneError", base.ptr());

  py::class_<ModelStats>(m, "ModelStats")
      .def_readonly("params", &ModelStats::params)
      .def_readonly("flops", &ModelStats::flops)
      .def("__repr__", [](const ModelStats& s) {
        std::ostringstream out;
        out << "ModelStats(params=" << s.params << ", flops=" << s.flops << ")";
        return out.str();
      });

  py::class_<Network>(m, "Network")
      .def_property_readonly("input_shape", [](const Network& n) { return n.input_shape; })
      .def_property_readonly("layer_ids",
                             [](const Network& n) {
                               std::vector<std::string> ids;
                               for (const auto& l : n.layers) ids.push_back(l.id);
                               return ids;
                             })
      .def("conv_ids", &Network::conv_ids)
      .def("stats", [](const Network& n) { return model_stats(n); })
      .def("prunable_layers", [](const Network& n) { return prunable_layers(n); })
      .def("consumer_of", [](const Network& n, const std::string& id) { return consumer_of(n, id); })
      .def("param", [](const Network& n, const std::string& id, const std::string& r) {
        return to_array(n.layers[n.index_of(id)].param(r));
      }, py::arg("layer"), py::arg("role") = "weight")
      .def("set_param", [](Network& n, const std::string& id, const std::string& r, const Array& a) {
        Tensor& t = n.layers[n.index_of(id)].param(r);
        Tensor v = to_tensor(a);
        if (v.shape() != t.shape()) throw ShapeError("parameter shape mismatch for " + id + "." + r);
        t = std::move(v);
      }, py::arg("layer"), py::arg("role"), py::arg("value"))
      .def("forward", [](const Network& n, const Array& x) {
        const Tensor batch = to_tensor(x);
        Tensor logits;
        {
          py::gil_scoped_release release;
          logits = forward(n, batch).logits;
        }
        return to_array(logits);
      }, "Inference-mode logits for an N x C x H x W batch.")
      .def("surgery", [](const Network& n, const std::string& consumer, const std::vector<int>& mask) {
        return surgery(n, consumer, to_mask(mask));
      }, py::arg("consumer"), py::arg("mask"))
      .def("save", [](const Network& n, const std::filesystem::path& dir) { save_model(n, dir); });

  m.def("make_architecture", [](const std::string& name, std::size_t classes, const Shape& input, std::uint64_t seed) {
    Network net = make_architecture(name, classes, input);
    Rng rng(seed);
    init_parameters(net, rng);
    return net;
  }, py::arg("name"), py::arg("num_classes") = 10, py::arg("input_shape") = Shape{1, 16, 16}, py::arg("seed") = 0,
        "Builds 'vgg16', 'small-cnn' or 'resnet' with He-initialised weights.");
  m.def("load_model", [](const std::filesystem::path& dir) { return load_model(dir); });

  m.def("compute_hessian", [](const Array& volumes, std::size_t channels, std::size_t kernel) {
    return to_array(compute_hessian(to_volumes(volumes, channels, kernel)).matrix);
  }, py::arg("volumes"), py::arg("channels"), py::arg("kernel"), "H = X^T X / N over N x (C*K*K) volumes.");

  m.def("taylor_error", [](const Array& h, const Array& weight, const std::vector<int>& mask) {
    const Tensor w = to_tensor(weight);
    if (w.rank() != 4) throw ShapeError("weight must be F x C x K x K");
    return taylor_error(to_hessian(h, w.dim(1), w.dim(2)), w, to_mask(mask));
  }, py::arg("hessian"), py::arg("weight"), py::arg("mask"));

  m.def("direct_error", [](const Array& volumes, const Array& weight, std::optional<Array> bias,
                           const std::vector<int>& mask) {
    const Tensor w = to_tensor(weight);
    if (w.rank() != 4) throw ShapeError("weight must be F x C x K x K");
    VolumeSet vs = to_volumes(volumes, w.dim(1), w.dim(2));
    // Reference outputs from the full weights.
    const std::size_t n = vs.size(), d = vs.dim(), f = w.dim(0);
    vs.ref_outputs = Tensor({n, f});
    const Tensor b = bias ? to_tensor(*bias) : Tensor({f});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < f; ++o) {
        double y = b[o];
        for (std::size_t q = 0; q < d; ++q) y += w[o * d + q] * vs.volumes[i * d + q];
        vs.ref_outputs[i * f + o] = y;
      }
    return direct_error(vs, w, bias ? &b : nullptr, to_mask(mask));
  }, py::arg("volumes"), py::arg("weight"), py::arg("bias") = py::none(), py::arg("mask"));

  m.def("population_fitness", [](const std::vector<double>& errors) { return population_fitness(errors); });
  m.def("kept_channels", &kept_channels, py::arg("channels"), py::arg("rate"));

  m.def("evolve", [](const Array& h, const Array& weight, double rate, std::size_t population, double crossover_prob,
                     double mutation_prob, std::size_t max_iterations, std::uint64_t seed, std::size_t max_workers) {
    const Tensor w = to_tensor(weight);
    if (w.rank() != 4) throw ShapeError("weight must be F x C x K x K");
    const HessianCache hc = to_hessian(h, w.dim(1), w.dim(2));
    GAConfig cfg;
    cfg.population = population;
    cfg.crossover_prob = crossover_prob;
    cfg.mutation_prob = mutation_prob;
    cfg.max_iterations = max_iterations;
    cfg.max_workers = max_workers;
    Rng rng(seed);
    EvolveResult r;
    {
      py::gil_scoped_release release;
      r = evolve(hc, w, rate, cfg, rng);
    }
    py::list log;
    for (const auto& g : r.log) {
      py::dict e;
      e["generation"] = g.generation;
      e["best_error"] = g.best_error;
      e["mean_error"] = g.mean_error;
      e["best_mask"] = g.best_mask_hex;
      log.append(e);
    }
    py::dict out;
    out["mask"] = from_mask(r.best);
    out["error"] = r.best_error;
    out["kept"] = r.kept;
    out["log"] = log;
    return out;
  }, py::arg("hessian"), py::arg("weight"), py::arg("rate"), py::arg("population") = 20,
        py::arg("crossover_prob") = 0.1, py::arg("mutation_prob") = 0.1, py::arg("max_iterations") = 0,
        py::arg("seed") = 0, py::arg("max_workers") = 1,
        "Genetic search for the mask keeping round((1 - rate) * C) channels with the lowest second-order error.");

  m.def("mask_hex", [](const std::vector<int>& mask) { return to_mask(mask).hex(); });
  m.def("mask_from_hex", [](const std::string& hex, std::size_t length) {
    return from_mask(Chromosome::from_hex(hex, length));
  });

  m.def("attention_map", [](const Array& feature) { return to_array(attention_map(to_tensor(feature))); });
  m.def("attention_distance", [](const Array& s, const Array& t) {
    return attention_distance(to_tensor(s).values(), to_tensor(t).values());
  });

  m.def("parse_config", [](const py::object& cfg) { return to_python(serialize(parse_config(from_python(cfg)))); },
        "Validates a run configuration and returns its canonical form.");
  m.def("run", [](const py::object& cfg, const std::filesystem::path& base_dir) {
    const RunConfig rc = parse_config(from_python(cfg), base_dir);
    std::ostringstream log;
    nlohmann::json summary;
    {
      py::gil_scoped_release release;
      summary = run(rc, log);
    }
    return to_python(summary);
  }, py::arg("config"), py::arg("base_dir") = std::filesystem::path{},
        "Executes one command (train, sensitivity, prune, finetune, eval, stats) and returns its summary.");
}
