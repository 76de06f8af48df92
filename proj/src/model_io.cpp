#include "fens/model_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace fens {

namespace {

constexpr std::string_view kMagic = "FENET1";

void write_f64(std::ostream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

double read_f64(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) {
    throw std::runtime_error("model file truncated in parameter block");
  }
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::string next_line(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("model header truncated");
  return line;
}

Tensor read_tensor(std::istream& in, Shape shape) {
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) v = read_f64(in);
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

void write_network(std::ostream& out, const Network& net, const ModelMetadata& metadata) {
  out << kMagic << "\ninput";
  for (auto d : net.input_shape()) out << ' ' << d;
  out << '\n';
  for (const auto& [k, v] : metadata) {
    if (k.empty() || k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("model metadata keys must be single tokens and values single lines");
    }
    out << "meta " << k << ' ' << v << '\n';
  }
  out << "layers " << net.layers().size() << '\n';
  for (const auto& layer : net.layers()) {
    if (const auto* d = std::get_if<Dense>(&layer)) {
      out << "dense " << d->weight.shape()[0] << ' ' << d->weight.shape()[1] << '\n';
    } else if (const auto* c = std::get_if<Conv2D>(&layer)) {
      const auto& s = c->kernel.shape();
      out << "conv2d " << s[0] << ' ' << s[1] << ' ' << s[2] << ' ' << s[3] << ' ' << c->stride << ' '
          << (c->padding == Padding::Same ? "same" : "valid") << '\n';
    } else if (const auto* p = std::get_if<AvgPool2D>(&layer)) {
      out << "avgpool2d " << p->kernel << ' ' << p->stride << '\n';
    } else {
      out << layer_kind(layer) << '\n';
    }
  }
  out << "end\n";
  for (const auto* p : net.parameters()) {
    for (double v : p->values()) write_f64(out, v);
  }
  if (!out) throw std::runtime_error("failed writing model");
}

LoadedModel read_network(std::istream& in) {
  if (next_line(in) != kMagic) throw std::runtime_error("not a FENET1 model file (bad magic)");
  LoadedModel result;
  Shape input;
  {
    std::istringstream ls(next_line(in));
    std::string tag;
    ls >> tag;
    if (tag != "input") throw std::runtime_error("model header: expected 'input'");
    for (std::size_t d; ls >> d;) input.push_back(d);
  }
  std::string line = next_line(in);
  while (line.rfind("meta ", 0) == 0) {
    const auto sp = line.find(' ', 5);
    if (sp == std::string::npos) throw std::runtime_error("model header: malformed meta line");
    result.metadata[line.substr(5, sp - 5)] = line.substr(sp + 1);
    line = next_line(in);
  }
  std::size_t count = 0;
  {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> count) || tag != "layers") throw std::runtime_error("model header: expected 'layers <n>'");
  }
  struct Pending {
    std::string kind;
    std::vector<std::size_t> dims;
    std::string padding;
  };
  std::vector<Pending> pending;
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream ls(next_line(in));
    Pending p;
    ls >> p.kind;
    std::size_t needed = 0;
    if (p.kind == "dense") needed = 2;
    else if (p.kind == "conv2d") needed = 5;
    else if (p.kind == "avgpool2d") needed = 2;
    else if (p.kind != "relu" && p.kind != "flatten") throw std::runtime_error("model header: unknown layer '" + p.kind + "'");
    for (std::size_t j = 0; j < needed; ++j) {
      std::size_t v;
      if (!(ls >> v)) throw std::runtime_error("model header: malformed '" + p.kind + "' line");
      p.dims.push_back(v);
    }
    if (p.kind == "conv2d" && !(ls >> p.padding)) throw std::runtime_error("model header: conv2d padding missing");
    pending.push_back(std::move(p));
  }
  if (next_line(in) != "end") throw std::runtime_error("model header: expected 'end'");

  std::vector<Layer> layers;
  for (const auto& p : pending) {
    if (p.kind == "dense") {
      auto w = read_tensor(in, {p.dims[0], p.dims[1]});
      auto b = read_tensor(in, {p.dims[0]});
      layers.emplace_back(Dense{std::move(w), std::move(b)});
    } else if (p.kind == "conv2d") {
      if (p.padding != "same" && p.padding != "valid") throw std::runtime_error("model header: bad conv2d padding");
      auto k = read_tensor(in, {p.dims[0], p.dims[1], p.dims[2], p.dims[3]});
      auto b = read_tensor(in, {p.dims[0]});
      layers.emplace_back(Conv2D{std::move(k), std::move(b), p.dims[4],
                                 p.padding == "same" ? Padding::Same : Padding::Valid});
    } else if (p.kind == "avgpool2d") {
      layers.emplace_back(AvgPool2D{p.dims[0], p.dims[1]});
    } else if (p.kind == "relu") {
      layers.emplace_back(ReLU{});
    } else {
      layers.emplace_back(Flatten{});
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("model file has trailing bytes");
  result.net = Network(std::move(input), std::move(layers));
  return result;
}

void save_network(const std::filesystem::path& path, const Network& net, const ModelMetadata& metadata) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_network(out, net, metadata);
}

LoadedModel load_network(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model " + path.string());
  return read_network(in);
}

}  // namespace fens
