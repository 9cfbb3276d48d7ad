#include "kml/network.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <string_view>

#include "kml/modulation.hpp"
#include "kml/random.hpp"

namespace kml {

Shape LayerSpec::weight_shape() const {
  if (kind == LayerKind::dense) return {out, in};
  return {out, in, kernel, kernel};
}

void Architecture::validate() const {
  require(!layers.empty(), "architecture needs at least one layer");
  const bool conv = layers.front().kind == LayerKind::conv;
  require(input.size() == (conv ? 3u : 1u),
          "architecture input " + shape_str(input) + " does not suit its first layer");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerSpec& s = layers[l];
    require(s.kind == layers.front().kind, "conv and dense layers cannot be mixed in one trunk");
    require(s.in > 0 && s.out > 0 && s.kernel > 0, "layer extents must be positive");
    require(s.in == (l == 0 ? input[0] : layers[l - 1].out),
            "layer " + std::to_string(l) + " input width does not match the previous layer");
    if (s.kind == LayerKind::dense) require(s.kernel == 1, "dense layers have kernel extent 1");
    layer_output_shape(l);
  }
}

Shape Architecture::layer_output_shape(std::size_t l) const {
  require(l < layers.size(), "layer index out of range");
  if (layers[l].kind == LayerKind::dense) return {layers[l].out};
  std::size_t h = input[1], w = input[2];
  for (std::size_t i = 0; i <= l; ++i) {
    h = conv_output_extent(h, layers[i].kernel, layers[i].geom);
    w = conv_output_extent(w, layers[i].kernel, layers[i].geom);
  }
  return {layers[l].out, h, w};
}

std::size_t Architecture::feature_dim() const {
  const Shape last = layer_output_shape(layers.size() - 1);
  if (last.size() == 1 || pool == FeaturePool::average) return last[0];
  return shape_numel(last);
}

Architecture conv_architecture(Shape input, const std::vector<std::size_t>& channels,
                               std::size_t kernel, ConvGeometry geom, FeaturePool pool) {
  require(input.size() == 3, "conv architecture needs a {C, H, W} input");
  Architecture arch;
  arch.name = "conv";
  arch.pool = pool;
  std::size_t in = input[0];
  for (std::size_t c : channels) {
    arch.layers.push_back({LayerKind::conv, in, c, kernel, geom});
    in = c;
  }
  arch.input = std::move(input);
  arch.validate();
  return arch;
}

Architecture dense_architecture(std::size_t input_dim, const std::vector<std::size_t>& widths) {
  Architecture arch;
  arch.name = "dense";
  arch.input = {input_dim};
  std::size_t in = input_dim;
  for (std::size_t w : widths) {
    arch.layers.push_back({LayerKind::dense, in, w, 1, {}});
    in = w;
  }
  arch.validate();
  return arch;
}

Architecture named_architecture(const std::string& name, const Shape& input) {
  Architecture arch;
  if (name == "desk") {
    return named_architecture(input.size() == 1 ? "desk-dense" : "desk-conv", input);
  } else if (name == "desk-conv") {
    arch = conv_architecture(input, {8, 16, 32}, 3, {2, 1});
  } else if (name == "desk-dense") {
    require(input.size() == 1, "desk-dense needs a flat input");
    arch = dense_architecture(input[0], {64, 64, 64});
  } else if (name == "paper-4conv") {
    arch = conv_architecture(input.size() == 3 ? input : Shape{3, 84, 84}, {32, 64, 128, 256}, 3,
                             {2, 0});
  } else if (name.starts_with("conv:") || name.starts_with("dense:")) {
    // Custom widths, e.g. conv:4,8,8 (desk-conv geometry) or dense:32,32.
    const bool conv = name[0] == 'c';
    std::vector<std::size_t> widths;
    std::string_view rest = std::string_view(name).substr(name.find(':') + 1);
    while (!rest.empty()) {
      const std::string_view item = rest.substr(0, rest.find(','));
      std::size_t w = 0;
      const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), w);
      if (ec != std::errc() || end != item.data() + item.size() || w == 0)
        throw ConfigError("architecture '" + name + "': bad width '" + std::string(item) + "'");
      widths.push_back(w);
      rest.remove_prefix(std::min(rest.size(), item.size() + 1));
    }
    if (widths.empty()) throw ConfigError("architecture '" + name + "' lists no widths");
    if (conv) {
      if (input.size() != 3) throw ConfigError("architecture '" + name + "' needs an image input");
      arch = conv_architecture(input, widths, 3, {2, 1});
    } else {
      if (input.size() != 1) throw ConfigError("architecture '" + name + "' needs a flat input");
      arch = dense_architecture(input[0], widths);
    }
  } else {
    throw ConfigError("unknown architecture '" + name +
                      "' (expected desk|desk-conv|desk-dense|paper-4conv|conv:W,..|dense:W,..)");
  }
  arch.name = name;
  return arch;
}

// ---- parameters -------------------------------------------------------------------

namespace {

Tensor uniform_tensor(Shape shape, double bound, std::uint64_t seed, std::uint64_t stream,
                      Precision precision) {
  Philox rng(seed, StreamDomain::init, stream);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from_values(std::move(shape), std::move(v), precision);
}

}  // namespace

std::vector<Tensor> BaseParams::tensors() const {
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(weights[l]);
    out.push_back(biases[l]);
  }
  if (has_head()) {
    out.push_back(head_weight);
    out.push_back(head_bias);
  }
  return out;
}

BaseParams BaseParams::with_tensors(std::span<const Tensor> t) const {
  require(t.size() == tensors().size(), "BaseParams::with_tensors: tensor count mismatch");
  BaseParams p;
  std::size_t i = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    p.weights.push_back(t[i++]);
    p.biases.push_back(t[i++]);
  }
  if (has_head()) {
    p.head_weight = t[i++];
    p.head_bias = t[i++];
  }
  return p;
}

BaseParams init_base(const Architecture& arch, std::size_t head_classes, std::uint64_t seed,
                     std::uint64_t stream, Precision precision) {
  arch.validate();
  BaseParams p;
  for (std::size_t l = 0; l < arch.layers.size(); ++l) {
    const LayerSpec& s = arch.layers[l];
    const double bound = std::sqrt(6.0 / static_cast<double>(s.fan_in()));
    p.weights.push_back(uniform_tensor(s.weight_shape(), bound, seed, stream + l, precision));
    p.biases.push_back(Tensor::zeros({s.out}, precision));
  }
  if (head_classes > 0) {
    const std::size_t f = arch.feature_dim();
    p.head_weight = uniform_tensor({head_classes, f}, 1.0 / std::sqrt(static_cast<double>(f)), seed,
                                   stream + arch.layers.size(), precision);
    p.head_bias = Tensor::zeros({head_classes}, precision);
  }
  return p;
}

Tensor forward_base(const Architecture& arch, const Tensor& x, const BaseParams& params,
                    std::span<const FilmLayer> film) {
  require(params.weights.size() == arch.layers.size() && params.biases.size() == arch.layers.size(),
          "forward_base: parameter count does not match the architecture");
  require(film.empty() || film.size() == arch.layers.size(),
          "forward_base: need one FiLM pair per layer");
  require(x.rank() == arch.input.size() + 1 &&
              Shape(x.shape().begin() + 1, x.shape().end()) == arch.input,
          "forward_base: input " + shape_str(x.shape()) + " does not match architecture input " +
              shape_str(arch.input));
  Tensor h = x;
  for (std::size_t l = 0; l < arch.layers.size(); ++l) {
    const LayerSpec& s = arch.layers[l];
    require(params.weights[l].shape() == s.weight_shape(),
            "forward_base: layer " + std::to_string(l) + " weight has shape " +
                shape_str(params.weights[l].shape()));
    if (s.kind == LayerKind::conv)
      h = conv2d(h, params.weights[l], params.biases[l], s.geom);
    else
      h = dense(h, params.weights[l], params.biases[l]);
    if (!film.empty()) h = film_apply(h, film[l].eta, film[l].gamma);
    h = relu(h);
  }
  if (h.rank() == 4) {
    if (arch.pool == FeaturePool::average)
      h = average_pool(h);
    else
      h = reshape(h, {h.shape()[0], h.numel() / h.shape()[0]});
  }
  if (params.has_head()) h = dense(h, params.head_weight, params.head_bias);
  return h;
}

std::vector<Tensor> EncoderParams::tensors() const {
  std::vector<Tensor> out = trunk.tensors();
  out.push_back(proj_weight);
  out.push_back(proj_bias);
  return out;
}

EncoderParams EncoderParams::with_tensors(std::span<const Tensor> t) const {
  require(t.size() == tensors().size(), "EncoderParams::with_tensors: tensor count mismatch");
  EncoderParams e;
  e.trunk = trunk.with_tensors(t.first(t.size() - 2));
  e.proj_weight = t[t.size() - 2];
  e.proj_bias = t[t.size() - 1];
  return e;
}

EncoderParams init_encoder(const Architecture& arch, std::size_t d_upsilon, std::uint64_t seed,
                           std::uint64_t stream, Precision precision) {
  require(d_upsilon > 0, "d_upsilon must be positive");
  EncoderParams e;
  e.trunk = init_base(arch, 0, seed, stream, precision);
  const std::size_t f = arch.feature_dim();
  e.proj_weight = uniform_tensor({d_upsilon, f}, std::sqrt(6.0 / static_cast<double>(f)), seed,
                                 stream + arch.layers.size(), precision);
  e.proj_bias = Tensor::zeros({d_upsilon}, precision);
  return e;
}

Tensor encode_task(const Architecture& arch, const Tensor& support_x, const EncoderParams& enc) {
  require(support_x.defined() && support_x.rank() >= 1, "encode_task: empty support set");
  Tensor features = forward_base(arch, support_x, enc.trunk);
  Tensor pooled = reshape(mean_rows(features), {1, features.shape()[1]});
  Tensor v = relu(dense(pooled, enc.proj_weight, enc.proj_bias));
  return reshape(v, {enc.proj_weight.shape()[0]});
}

// ---- generators -------------------------------------------------------------------

ModulationKind parse_modulation_kind(const std::string& s) {
  if (s == "none") return ModulationKind::none;
  if (s == "film") return ModulationKind::film;
  if (s == "kml") return ModulationKind::kml;
  throw ConfigError("unknown modulation '" + s + "' (expected none|film|kml)");
}

GeneratorStructure parse_generator_structure(const std::string& s) {
  if (s == "simplified") return GeneratorStructure::simplified;
  if (s == "single_mlp") return GeneratorStructure::single_mlp;
  throw ConfigError("unknown generator structure '" + s + "' (expected simplified|single_mlp)");
}

GeneratorInit parse_generator_init(const std::string& s) {
  if (s == "zero") return GeneratorInit::zero;
  if (s == "zero_output") return GeneratorInit::zero_output;
  if (s == "uniform") return GeneratorInit::uniform;
  throw ConfigError("unknown generator init '" + s + "' (expected zero|zero_output|uniform)");
}

std::string to_string(ModulationKind kind) {
  switch (kind) {
    case ModulationKind::none: return "none";
    case ModulationKind::film: return "film";
    case ModulationKind::kml: return "kml";
  }
  return "?";
}

std::string to_string(GeneratorStructure structure) {
  return structure == GeneratorStructure::simplified ? "simplified" : "single_mlp";
}

std::string to_string(GeneratorInit init) {
  switch (init) {
    case GeneratorInit::zero: return "zero";
    case GeneratorInit::zero_output: return "zero_output";
    case GeneratorInit::uniform: return "uniform";
  }
  return "?";
}

std::vector<GeneratorEntry> generator_layout(const Architecture& arch, const GeneratorSpec& spec) {
  require(spec.d_upsilon > 0, "generator d_upsilon must be positive");
  require(spec.rank >= 1, "generator rank must be at least 1");
  std::vector<GeneratorEntry> out;
  const std::size_t d = spec.d_upsilon;
  for (std::size_t l = 0; l < arch.layers.size(); ++l) {
    const LayerSpec& s = arch.layers[l];
    const std::size_t no = s.out, row = s.fan_in();
    switch (spec.kind) {
      case ModulationKind::none:
        break;
      case ModulationKind::film:
        out.push_back({l, "film", {2 * no, d}});
        break;
      case ModulationKind::kml:
        if (spec.structure == GeneratorStructure::single_mlp) {
          out.push_back({l, "kernel", {no * row, d}});
        } else {
          for (std::size_t r = 0; r < spec.rank; ++r) {
            out.push_back({l, "u" + std::to_string(r), {no, d}});
            out.push_back({l, "v" + std::to_string(r), {row, d}});
          }
        }
        out.push_back({l, "bias", {no, d}});
        break;
    }
  }
  return out;
}

std::vector<Tensor> GeneratorParams::tensors() const {
  std::vector<Tensor> out;
  for (const auto& layer : layers) out.insert(out.end(), layer.begin(), layer.end());
  return out;
}

GeneratorParams GeneratorParams::with_tensors(std::span<const Tensor> t) const {
  GeneratorParams g;
  g.spec = spec;
  std::size_t i = 0;
  for (const auto& layer : layers) {
    require(i + layer.size() <= t.size(), "GeneratorParams::with_tensors: too few tensors");
    g.layers.emplace_back(t.begin() + static_cast<long>(i),
                          t.begin() + static_cast<long>(i + layer.size()));
    i += layer.size();
  }
  require(i == t.size(), "GeneratorParams::with_tensors: too many tensors");
  return g;
}

GeneratorParams init_generator(const Architecture& arch, const GeneratorSpec& spec,
                               GeneratorInit init, double scale, std::uint64_t seed,
                               std::uint64_t stream, Precision precision) {
  GeneratorParams g;
  g.spec = spec;
  g.layers.resize(arch.layers.size());
  const double bound = scale / std::sqrt(static_cast<double>(spec.d_upsilon));
  const auto layout = generator_layout(arch, spec);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const GeneratorEntry& e = layout[i];
    const bool random = init == GeneratorInit::uniform ||
                        (init == GeneratorInit::zero_output && e.name.front() == 'v');
    g.layers[e.layer].push_back(random ? uniform_tensor(e.shape, bound, seed, stream + i, precision)
                                       : Tensor::zeros(e.shape, precision));
  }
  return g;
}

}  // namespace kml
