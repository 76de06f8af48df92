#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fens/dft.hpp"
#include "fens/experiment.hpp"
#include "fens/model_io.hpp"
#include "fens/training.hpp"

namespace py = pybind11;
using namespace fens;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Image to_image(const Array& a) {
  if (a.ndim() != 3) throw std::invalid_argument("image must be a (C, H, W) array");
  const ImageShape shape{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                         static_cast<std::size_t>(a.shape(2))};
  return Image(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(std::span<const double> values, const std::vector<std::size_t>& shape) {
  Array out(std::vector<py::ssize_t>(shape.begin(), shape.end()));
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

Array to_array(const Image& img) { return to_array(img.pixels(), {img.channels(), img.height(), img.width()}); }

Array to_array(const Tensor& t) { return to_array(t.values(), t.shape()); }

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::tuple dataset_arrays(const Dataset& ds) {
  if (ds.empty()) return py::make_tuple(Array(std::vector<py::ssize_t>{0}), py::array_t<int>(0));
  const ImageShape s = ds.shape();
  Array images(std::vector<py::ssize_t>{static_cast<py::ssize_t>(ds.size()), static_cast<py::ssize_t>(s.channels),
                                        static_cast<py::ssize_t>(s.height), static_cast<py::ssize_t>(s.width)});
  double* dst = images.mutable_data();
  for (const auto& img : ds.images) dst = std::copy(img.pixels().begin(), img.pixels().end(), dst);
  py::array_t<int> labels(static_cast<py::ssize_t>(ds.size()));
  std::copy(ds.labels.begin(), ds.labels.end(), labels.mutable_data());
  return py::make_tuple(images, labels);
}

std::vector<Image> images_of(const Array& batch) {
  if (batch.ndim() != 4) throw std::invalid_argument("images must be an (N, C, H, W) array");
  const ImageShape shape{static_cast<std::size_t>(batch.shape(1)), static_cast<std::size_t>(batch.shape(2)),
                         static_cast<std::size_t>(batch.shape(3))};
  std::vector<Image> out;
  for (py::ssize_t n = 0; n < batch.shape(0); ++n) {
    const double* p = batch.data() + n * static_cast<py::ssize_t>(shape.size());
    out.emplace_back(shape, std::vector<double>(p, p + shape.size()));
  }
  return out;
}

AttackConfig attack_config(const std::string& method, double radius, const std::string& norm, std::size_t steps,
                           double step_fraction, bool random_init, const std::string& bpda,
                           const std::string& loss_sign, std::uint64_t seed) {
  AttackConfig c;
  c.method = parse_attack_method(method);
  c.norm = parse_norm(norm);
  c.steps = steps;
  c.random_init = random_init;
  c.bpda = parse_bpda_mode(bpda);
  c.loss_sign = parse_loss_sign(loss_sign);
  c.rng_seed = seed;
  return c.at_radius(radius, step_fraction);
}

CommandOutput run_command(const std::string& name, const std::string& config_json, const std::string& manifest) {
  const ExperimentConfig cfg = config_from_json(nlohmann::json::parse(config_json));
  if (name == "train") return cmd_train(cfg);
  if (name == "correlate") return cmd_correlate(cfg);
  if (name == "attack") return cmd_attack(cfg);
  if (name == "transfer") return cmd_transfer(cfg);
  if (name == "ensemble-eval") return cmd_ensemble_eval(cfg, manifest);
  if (name == "certify") return cmd_certify(cfg);
  throw std::invalid_argument("unknown command '" + name + "'");
}

}  // namespace

PYBIND11_MODULE(_fens, m) {
  m.doc() = "Filter-based ensembles for adversarial robustness (C++ core)";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  py::class_<FilterSpec>(m, "FilterSpec")
      .def_static("identity", &FilterSpec::identity)
      .def_static("discretize", &FilterSpec::discretize)
      .def_static("downsize", &FilterSpec::downsize, py::arg("height"), py::arg("width"))
      .def_static("grayscale", &FilterSpec::grayscale)
      .def_static("octree", &FilterSpec::octree, py::arg("colors"), py::arg("depth") = 7)
      .def_static("lowpass", &FilterSpec::lowpass, py::arg("sigma"))
      .def_static("highpass", &FilterSpec::highpass, py::arg("sigma"))
      .def_property_readonly("kind", [](const FilterSpec& f) { return std::string(filter_kind_name(f.kind)); })
      .def("describe", &FilterSpec::describe)
      .def("output_shape",
           [](const FilterSpec& f, std::tuple<std::size_t, std::size_t, std::size_t> s) {
             const ImageShape o = filter_output_shape(f, {std::get<0>(s), std::get<1>(s), std::get<2>(s)});
             return py::make_tuple(o.channels, o.height, o.width);
           })
      .def("__eq__", [](const FilterSpec& a, const FilterSpec& b) { return a == b; })
      .def("__repr__", [](const FilterSpec& f) { return "FilterSpec(" + f.describe() + ")"; });

  m.def("apply_filter", [](const FilterSpec& f, const Array& x) { return to_array(apply_filter(f, to_image(x))); },
        py::arg("filter"), py::arg("image"), "Filter a (C, H, W) image with pixels in [0, 1].");
  m.def(
      "bpda_backward",
      [](const FilterSpec& f, std::tuple<std::size_t, std::size_t, std::size_t> s, const Array& g,
         const std::string& mode) {
        const ImageShape in{std::get<0>(s), std::get<1>(s), std::get<2>(s)};
        return to_array(bpda_backward(f, in, std::span<const double>(g.data(), g.size()), parse_bpda_mode(mode)),
                        {in.channels, in.height, in.width});
      },
      py::arg("filter"), py::arg("input_shape"), py::arg("upstream"), py::arg("mode") = "identity");

  m.def(
      "dft2",
      [](const Array& x) {
        if (x.ndim() != 2) throw std::invalid_argument("dft2 expects a 2-D array");
        const auto h = static_cast<std::size_t>(x.shape(0)), w = static_cast<std::size_t>(x.shape(1));
        const Spectrum s = dft2(h, w, std::span<const double>(x.data(), x.size()));
        py::array_t<std::complex<double>> out({x.shape(0), x.shape(1)});
        std::copy(s.coeffs.begin(), s.coeffs.end(), out.mutable_data());
        return out;
      },
      py::arg("channel"), "Centered 2-D DFT; the DC term sits at (H//2, W//2).");
  m.def(
      "idft2",
      [](const py::array_t<std::complex<double>, py::array::c_style | py::array::forcecast>& X) {
        if (X.ndim() != 2) throw std::invalid_argument("idft2 expects a 2-D array");
        Spectrum s{static_cast<std::size_t>(X.shape(0)), static_cast<std::size_t>(X.shape(1)),
                   std::vector<Complex>(X.data(), X.data() + X.size())};
        return to_array(idft2(s), {s.height, s.width});
      },
      py::arg("spectrum"), "Real part of the inverse of dft2.");

  m.def(
      "sensitivity",
      [](const FilterSpec& f, const Array& x, const Array& delta) {
        return sensitivity(f, to_image(x), std::span<const double>(delta.data(), delta.size()));
      },
      py::arg("filter"), py::arg("image"), py::arg("delta"));
  m.def(
      "pearson",
      [](const std::vector<double>& a, const std::vector<double>& b) { return pearson(a, b); }, py::arg("a"),
      py::arg("b"));
  m.def(
      "correlation_matrix",
      [](const std::vector<std::pair<std::string, FilterSpec>>& filters, const Array& images, double epsilon_max,
         std::size_t samples_per_image, std::size_t num_images, std::uint64_t seed) {
        std::vector<NamedFilter> named;
        std::vector<std::string> names;
        for (const auto& [n, f] : filters) {
          named.push_back({n, f});
          names.push_back(n);
        }
        NoiseConfig cfg{epsilon_max, samples_per_image, num_images, seed};
        const auto samples = sample_sensitivities(named, images_of(images), cfg);
        const CorrelationMatrix rho = pearson_matrix(samples, names);
        std::vector<double> flat;
        for (std::size_t i = 0; i < rho.size(); ++i)
          for (std::size_t j = 0; j < rho.size(); ++j) flat.push_back(rho.at(i, j));
        return py::make_tuple(names, to_array(flat, {rho.size(), rho.size()}));
      },
      py::arg("filters"), py::arg("images"), py::arg("epsilon_max") = 20.0 / 255.0, py::arg("samples_per_image") = 10,
      py::arg("num_images") = 100, py::arg("seed") = 0,
      "Pearson correlation of filter sensitivities under random L-inf noise. Returns (names, matrix).");
  m.def(
      "select_min_correlated",
      [](const std::vector<std::string>& names, const Array& matrix, std::size_t k,
         const std::vector<std::string>& must_include) {
        const CorrelationMatrix rho(names, std::vector<double>(matrix.data(), matrix.data() + matrix.size()));
        return select_min_correlated(rho, k, must_include);
      },
      py::arg("names"), py::arg("matrix"), py::arg("k"), py::arg("must_include") = std::vector<std::string>{});

  py::class_<Network>(m, "Network")
      .def_property_readonly("input_shape", &Network::input_shape)
      .def_property_readonly("num_classes", &Network::num_classes)
      .def_property_readonly("parameter_count", &Network::parameter_count)
      .def("forward", [](const Network& n, const Array& x) { return to_array(forward(n, to_tensor(x))); })
      .def("classify", [](const Network& n, const Array& x) { return classify(n, to_tensor(x)); })
      .def("loss", [](const Network& n, const Array& x, int label) { return loss(n, to_tensor(x), label); })
      .def("grad_input",
           [](const Network& n, const Array& x, int label) { return to_array(grad_input(n, to_tensor(x), label)); })
      .def("lipschitz_upper_bound", [](const Network& n) { return lipschitz_upper_bound(n); })
      .def("save", [](const Network& n, const std::filesystem::path& p) { save_network(p, n); })
      .def("__eq__", [](const Network& a, const Network& b) { return a == b; });

  m.def(
      "build_network",
      [](const std::string& arch, const Shape& input_shape, std::size_t num_classes, std::uint64_t seed) {
        return build_network(parse_architecture(arch), input_shape, num_classes, seed);
      },
      py::arg("architecture"), py::arg("input_shape"), py::arg("num_classes"), py::arg("seed") = 0);
  m.def("default_architecture", [] { return format_architecture(default_architecture()); });
  m.def(
      "load_network",
      [](const std::filesystem::path& p) {
        LoadedModel lm = load_network(p);
        return py::make_tuple(std::move(lm.net), lm.metadata);
      },
      py::arg("path"), "Read a FENET1 file; returns (network, metadata).");

  py::class_<SubModel>(m, "SubModel")
      .def(py::init([](std::string name, FilterSpec filter, Network net) {
             return SubModel{std::move(name), filter, std::move(net)};
           }),
           py::arg("name"), py::arg("filter"), py::arg("network"))
      .def_readonly("name", &SubModel::name)
      .def_readonly("filter", &SubModel::filter)
      .def_readonly("network", &SubModel::net)
      .def("logits", [](const SubModel& s, const Array& x) { return to_array(s.logits(to_image(x))); })
      .def("classify", [](const SubModel& s, const Array& x) { return s.classify(to_image(x)); })
      .def("certify", [](const SubModel& s, const Array& x) {
        const auto c = certify_submodel(s, to_image(x));
        py::dict d;
        d["label"] = c.label;
        d["margin"] = c.margin;
        d["lipschitz"] = c.lipschitz;
        d["radius"] = c.radius;
        return d;
      });

  m.def(
      "train_submodel",
      [](const std::string& name, const FilterSpec& filter, const Array& images, const std::vector<int>& labels,
         std::size_t num_classes, const std::string& arch, const std::vector<double>& learning_rates,
         std::size_t epochs_per_rate, std::size_t batch_size, double momentum, std::uint64_t seed) {
        Dataset ds;
        ds.images = images_of(images);
        ds.labels = labels;
        ds.num_classes = num_classes;
        TrainConfig cfg{learning_rates, epochs_per_rate, batch_size, momentum, seed};
        py::gil_scoped_release release;
        return train_submodel(name, filter, parse_architecture(arch), ds, cfg);
      },
      py::arg("name"), py::arg("filter"), py::arg("images"), py::arg("labels"), py::arg("num_classes"),
      py::arg("architecture") = format_architecture(default_architecture()),
      py::arg("learning_rates") = std::vector<double>{0.01, 0.001, 0.0001}, py::arg("epochs_per_rate") = 3,
      py::arg("batch_size") = 8, py::arg("momentum") = 0.9, py::arg("seed") = 0);

  m.def(
      "attack",
      [](const std::vector<SubModel>& members, const Array& x, int label, const std::string& method, double radius,
         const std::string& norm, std::size_t steps, double step_fraction, bool random_init, const std::string& bpda,
         const std::string& loss_sign, std::uint64_t seed) {
        if (members.empty()) throw std::invalid_argument("attack: no sub-models");
        const AttackConfig c =
            attack_config(method, radius, norm, steps, step_fraction, random_init, bpda, loss_sign, seed);
        const Image img = to_image(x);
        const AttackResult r = members.size() == 1 ? attack_submodel_bpda(members.front(), img, label, c)
                                                   : attack_ensemble(Ensemble(members, EnsembleMode::Score), img, label, c);
        return py::make_tuple(to_array(r.adversarial), r.success, r.final_label);
      },
      py::arg("submodels"), py::arg("image"), py::arg("label"), py::arg("method") = "pgd",
      py::arg("radius") = 8.0 / 255.0, py::arg("norm") = "inf", py::arg("steps") = 20, py::arg("step_fraction") = 0.1,
      py::arg("random_init") = true, py::arg("bpda") = "identity", py::arg("loss_sign") = "ascend",
      py::arg("seed") = 0,
      "BPDA attack on one sub-model, or the sum-gradient attack on a score ensemble of several. "
      "Returns (adversarial, success, final_label).");

  m.def(
      "predict",
      [](const std::vector<SubModel>& members, const Array& x, const std::string& mode) {
        return predict(Ensemble(members), to_image(x), parse_ensemble_mode(mode));
      },
      py::arg("submodels"), py::arg("image"), py::arg("mode") = "vote");
  m.def(
      "is_stable", [](const std::vector<SubModel>& members, const Array& x) { return is_stable(Ensemble(members), to_image(x)); },
      py::arg("submodels"), py::arg("image"));
  m.def("margin", [](const std::vector<double>& logits) { return margin(logits); }, py::arg("logits"));
  m.def("certified_radius", &certified_radius, py::arg("margin"), py::arg("lipschitz"));

  m.def(
      "synth_shapes", [](std::size_t n, std::size_t size, std::uint64_t seed) { return dataset_arrays(synth_shapes(n, size, seed)); },
      py::arg("num_per_class"), py::arg("size") = 32, py::arg("seed") = 0,
      "Four-class synthetic pattern set; returns (images[N, 3, S, S], labels[N]).");
  m.def(
      "read_cifar_batch", [](const std::filesystem::path& p) { return dataset_arrays(read_cifar_batch(p)); },
      py::arg("path"), "One CIFAR-10 binary batch; returns (images[N, 3, 32, 32], labels[N]).");

  m.def("default_config_json", [] { return config_to_json(default_config()).dump(); });
  m.def(
      "resolve_config_json",
      [](const std::string& text) { return config_to_json(config_from_json(nlohmann::json::parse(text))).dump(); },
      py::arg("config_json"), "Validate a config and fill in defaults; raises ConfigError.");
  m.def(
      "run_command",
      [](const std::string& name, const std::string& config_json, const std::string& manifest) {
        CommandOutput out;
        {
          py::gil_scoped_release release;
          out = run_command(name, config_json, manifest);
        }
        std::vector<std::string> files;
        for (const auto& f : out.files) files.push_back(f.string());
        return py::make_tuple(files, out.summary);
      },
      py::arg("name"), py::arg("config_json"), py::arg("manifest") = "",
      "Run a CLI command in-process; returns (written files, summary text).");
}
